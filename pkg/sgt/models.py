from sqlalchemy import Boolean, Float, Integer, String
from sqlalchemy.orm import DeclarativeBase, Mapped, MappedAsDataclass, mapped_column


class Base(MappedAsDataclass, DeclarativeBase):
    pass


class BerRecord(Base):
    """one (detector, SNR, config) bit-error-rate measurement"""

    __tablename__ = "ber_records"

    id: Mapped[int] = mapped_column(primary_key=True, init=False)  # noqa: A003,VNE003
    detector: Mapped[str] = mapped_column(String(32))
    snr_db: Mapped[float] = mapped_column(Float)
    errors: Mapped[int] = mapped_column(Integer)
    bits: Mapped[int] = mapped_column(Integer)
    trials: Mapped[int] = mapped_column(Integer)
    ci_low: Mapped[float] = mapped_column(Float)
    ci_high: Mapped[float] = mapped_column(Float)
    config: Mapped[str] = mapped_column(String(64), default="")
    # max-trial cap hit before the requested number of bit errors was seen
    capped: Mapped[bool] = mapped_column(Boolean, default=False)

    @property
    def ber(self) -> float:
        return self.errors / self.bits if self.bits else 0.0

    def __repr__(self) -> str:
        return f"BerRecord(detector={self.detector!r}, snr_db={self.snr_db}, ber={self.ber:.3e}, bits={self.bits})"


class MacCount(Base):
    """multiply-accumulates of one sublayer/kind for one system size"""

    __tablename__ = "mac_counts"

    id: Mapped[int] = mapped_column(primary_key=True, init=False)  # noqa: A003,VNE003
    n_t: Mapped[int] = mapped_column(Integer)
    n_r: Mapped[int] = mapped_column(Integer)
    d_model: Mapped[int] = mapped_column(Integer)
    n_layers: Mapped[int] = mapped_column(Integer)
    variant: Mapped[str] = mapped_column(String(32))
    sublayer: Mapped[str] = mapped_column(String(64))
    macs: Mapped[int] = mapped_column(Integer)
    symbolic: Mapped[int] = mapped_column(Integer)

    def __repr__(self) -> str:
        return f"MacCount({self.n_t}x{self.n_r}, d_model={self.d_model}, {self.sublayer}={self.macs})"


class TrainStep(Base):
    __tablename__ = "train_steps"

    id: Mapped[int] = mapped_column(primary_key=True, init=False)  # noqa: A003,VNE003
    variant: Mapped[str] = mapped_column(String(32))
    step: Mapped[int] = mapped_column(Integer)
    loss: Mapped[float] = mapped_column(Float)
    learning_rate: Mapped[float] = mapped_column(Float)
