"""
Rayleigh MIMO instances, Gray-labelled QAM and the real-valued lift

the complex system y_c = H_c x_c + n_c is rewritten as y = H x + n with

    y = [Re y_c; Im y_c],  H = [[Re H_c, -Im H_c], [Im H_c, Re H_c]],  x = [Re x_c; Im x_c]

and n ~ N(0, sigma_c2 / 2 I). Bits are carried per real dimension: row i of the
bit matrix selects the level of x[i], so complex symbol k uses rows k and N_t + k.

instance dumps are numpy .npz archives with the stacked arrays
H [B, 2N_r, 2N_t], y [B, 2N_r], x [B, 2N_t], sigma2 [B, 2N_r],
bits [B, 2N_t, N_bits/2], snr_db [B] and the constellation name.
"""
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Union

import numpy as np

SNR_DEFINITIONS = ("per-receive-antenna", "per-symbol")

_BITS_PER_SYMBOL = {"qpsk": 2, "16qam": 4, "64qam": 6}

Seed = Union[int, Sequence[int], np.random.Generator, np.random.SeedSequence, None]


class BitShapeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Constellation:
    name: str
    bits_per_symbol: int
    levels: np.ndarray  # real-axis level indexed by its Gray label
    label_bits: np.ndarray  # [L, bits_per_dim] bits of each label, MSB first

    @property
    def bits_per_dim(self) -> int:
        return self.bits_per_symbol // 2

    @property
    def real_energy(self) -> float:
        """average energy of one real dimension"""
        return float(np.mean(self.levels**2))

    @property
    def symbol_energy(self) -> float:
        return 2.0 * self.real_energy

    def __repr__(self) -> str:
        return f"Constellation(name={self.name!r}, bits_per_symbol={self.bits_per_symbol})"


@lru_cache(maxsize=None)
def make_constellation(name: str = "qpsk") -> Constellation:
    """
    square QAM built from a Gray-labelled PAM per real axis, normalized to unit symbol energy.
    label 0 maps to the largest positive level, so for QPSK bit 0 -> +1/sqrt(2), bit 1 -> -1/sqrt(2)
    """
    key = name.lower()
    if key not in _BITS_PER_SYMBOL:
        raise ValueError(f"unknown constellation {name}, must be one of {list(_BITS_PER_SYMBOL)}")

    m = _BITS_PER_SYMBOL[key] // 2
    n_levels = 2**m
    amplitude = np.array([n_levels - 1 - 2 * k for k in range(n_levels)], dtype=np.float64)
    amplitude /= np.sqrt(2.0 * np.mean(amplitude**2))

    levels = np.zeros(n_levels)
    for k in range(n_levels):
        levels[k ^ (k >> 1)] = amplitude[k]

    label_bits = np.array([[(label >> (m - 1 - j)) & 1 for j in range(m)] for label in range(n_levels)], dtype=np.int64)
    levels.setflags(write=False)
    label_bits.setflags(write=False)
    return Constellation(name=key, bits_per_symbol=2 * m, levels=levels, label_bits=label_bits)


@dataclass
class ComplexMimoSystem:
    H_c: np.ndarray  # noqa: N815
    x_c: np.ndarray
    y_c: np.ndarray
    sigma_c2: float
    n_c: Optional[np.ndarray] = None
    bits: Optional[np.ndarray] = None
    constellation: Constellation = field(default_factory=make_constellation)


@dataclass
class MimoInstance:
    H: np.ndarray  # noqa: N815
    y: np.ndarray
    x: np.ndarray
    sigma2: np.ndarray
    bits: Optional[np.ndarray] = None
    snr_db: float = float("inf")
    constellation: Constellation = field(default_factory=make_constellation)

    def __post_init__(self) -> None:
        if self.H.shape != (self.y.shape[0], self.x.shape[0]):
            raise ValueError(f"channel shape {self.H.shape} does not fit y {self.y.shape} and x {self.x.shape}")
        if self.sigma2.shape != self.y.shape or np.any(self.sigma2 <= 0):
            raise ValueError("sigma2 must hold one strictly positive variance per receive row")

    @property
    def n_t(self) -> int:
        return self.H.shape[1] // 2

    @property
    def n_r(self) -> int:
        return self.H.shape[0] // 2


def make_rng(seed: Seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def sample_rayleigh(n_r: int, n_t: int, seed: Seed = None) -> np.ndarray:
    """i.i.d. CN(0, 1) entries, 0.5 variance per real part"""
    if n_r < 1 or n_t < 1:
        raise ValueError(f"antenna counts must be positive, got n_r={n_r} n_t={n_t}")
    rng = make_rng(seed)
    return (rng.standard_normal((n_r, n_t)) + 1j * rng.standard_normal((n_r, n_t))) / np.sqrt(2.0)


def random_bits(n_t: int, constellation: Constellation, seed: Seed = None) -> np.ndarray:
    return make_rng(seed).integers(0, 2, size=(2 * n_t, constellation.bits_per_dim), dtype=np.int64)


def _labels(bits: np.ndarray, constellation: Constellation) -> np.ndarray:
    bits = np.asarray(bits)
    m = constellation.bits_per_dim
    if bits.ndim != 2 or bits.shape[1] != m or bits.shape[0] % 2 != 0:
        raise BitShapeError(f"bit matrix must be [2N_t, {m}], got {list(bits.shape)}")
    if not np.all((bits == 0) | (bits == 1)):
        raise BitShapeError("bit matrix entries must be 0 or 1")
    weights = 2 ** np.arange(m - 1, -1, -1)
    return bits.astype(np.int64) @ weights


def modulate(bits: np.ndarray, constellation: Constellation) -> np.ndarray:
    """real-valued symbol vector x [2N_t] for a bit matrix [2N_t, N_bits/2]"""
    return constellation.levels[_labels(bits, constellation)].astype(np.float64)


def hard_demap(x: np.ndarray, constellation: Constellation) -> np.ndarray:
    """bits of the nearest real-axis level for every entry of x"""
    nearest = np.argmin(np.abs(np.asarray(x)[:, None] - constellation.levels[None, :]), axis=1)
    return constellation.label_bits[nearest].copy()


def to_complex(x: np.ndarray) -> np.ndarray:
    n = x.shape[0] // 2
    return x[:n] + 1j * x[n:]


def lift_matrix(H_c: np.ndarray) -> np.ndarray:  # noqa: N803
    return np.block([[H_c.real, -H_c.imag], [H_c.imag, H_c.real]])


def lift_vector(v_c: np.ndarray) -> np.ndarray:
    return np.concatenate([v_c.real, v_c.imag])


def snr_to_sigma(
    snr_db: float, constellation: Constellation, n_t: int, definition: str = "per-receive-antenna"
) -> float:
    """
    complex noise variance sigma_c2 for a given SNR.

    per-receive-antenna: SNR = E[|Hx|^2] / (N_r sigma_c2) which gives sigma_c2 = N_t E_s / SNR
    per-symbol:          SNR = E_s / sigma_c2
    """
    if not np.isfinite(snr_db):
        raise ValueError(f"snr_db must be finite, got {snr_db}")
    snr = 10.0 ** (snr_db / 10.0)
    if definition == "per-receive-antenna":
        return n_t * constellation.symbol_energy / snr
    if definition == "per-symbol":
        return constellation.symbol_energy / snr
    raise ValueError(f"snr definition must be one of {SNR_DEFINITIONS}, got {definition}")


def transmit(
    H_c: np.ndarray,  # noqa: N803
    bits: np.ndarray,
    constellation: Constellation,
    sigma_c2: float,
    seed: Seed = None,
) -> ComplexMimoSystem:
    rng = make_rng(seed)
    x_c = to_complex(modulate(bits, constellation))
    n_r = H_c.shape[0]
    n_c = np.sqrt(sigma_c2 / 2.0) * (rng.standard_normal(n_r) + 1j * rng.standard_normal(n_r))
    return ComplexMimoSystem(
        H_c=H_c,
        x_c=x_c,
        y_c=H_c @ x_c + n_c,
        sigma_c2=sigma_c2,
        n_c=n_c,
        bits=np.asarray(bits).copy(),
        constellation=constellation,
    )


def lift_to_real(sys: ComplexMimoSystem, snr_db: float = float("inf")) -> MimoInstance:
    n_r, n_t = sys.H_c.shape
    if sys.x_c.shape != (n_t,) or sys.y_c.shape != (n_r,):
        raise ValueError(f"inconsistent complex dimensions H {sys.H_c.shape}, x {sys.x_c.shape}, y {sys.y_c.shape}")
    return MimoInstance(
        H=lift_matrix(sys.H_c),
        y=lift_vector(sys.y_c),
        x=lift_vector(sys.x_c),
        sigma2=np.full(2 * n_r, sys.sigma_c2 / 2.0),
        bits=sys.bits,
        snr_db=snr_db,
        constellation=sys.constellation,
    )


def sample_instance(
    n_t: int,
    n_r: int,
    snr_db: float,
    constellation: Optional[Constellation] = None,
    seed: Seed = None,
    snr_definition: str = "per-receive-antenna",
) -> MimoInstance:
    constellation = constellation or make_constellation()
    rng = make_rng(seed)
    H_c = sample_rayleigh(n_r, n_t, rng)  # noqa: N806
    bits = random_bits(n_t, constellation, rng)
    sigma_c2 = snr_to_sigma(snr_db, constellation, n_t, snr_definition)
    return lift_to_real(transmit(H_c, bits, constellation, sigma_c2, rng), snr_db)


def save_instances(path: str, instances: Sequence[MimoInstance]) -> None:
    if not instances:
        raise ValueError("nothing to save")
    with open(path, "wb") as f:
        np.savez(
            f,
            H=np.stack([i.H for i in instances]),
            y=np.stack([i.y for i in instances]),
            x=np.stack([i.x for i in instances]),
            sigma2=np.stack([i.sigma2 for i in instances]),
            bits=np.stack([i.bits for i in instances]),
            snr_db=np.array([i.snr_db for i in instances]),
            constellation=np.array(instances[0].constellation.name),
        )


def load_instances(path: str) -> List[MimoInstance]:
    with np.load(path) as dump:
        constellation = make_constellation(str(dump["constellation"]))
        return [
            MimoInstance(
                H=dump["H"][k],
                y=dump["y"][k],
                x=dump["x"][k],
                sigma2=dump["sigma2"][k],
                bits=dump["bits"][k],
                snr_db=float(dump["snr_db"][k]),
                constellation=constellation,
            )
            for k in range(dump["H"].shape[0])
        ]
