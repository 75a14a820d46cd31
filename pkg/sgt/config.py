"""
experiment configuration, stored as TOML with the sections

    [system]  n_t, n_r, constellation, snr_definition
    [sgt]     network hyper-parameters (dims come from [system])
    [train]   optimizer, schedule and data stream
    [ber]     detectors, SNR grid and Monte-Carlo trial counts
    [output]  result directory and optional sqlite file
"""
import json
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Type, TypeVar, get_args, get_origin

import tomli_w

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib  # type: ignore

from utils import short_hash

from .baselines import OAMP_ITERATIONS
from .channel import SNR_DEFINITIONS, make_constellation
from .network import VARIANTS, SgtConfig
from .trainer import TrainConfig

BASELINES = ("ml", "lmmse", "oamp", "random")
DETECTORS = BASELINES + ("sgt",) + VARIANTS[1:]

# dims of the network always follow [system]
_DERIVED_SGT_FIELDS = ("n_t", "n_r", "bits_per_dim")

C = TypeVar("C")


class ConfigError(ValueError):
    pass


@dataclass
class SystemConfig:
    n_t: int
    n_r: int
    constellation: str = "qpsk"
    snr_definition: str = "per-receive-antenna"

    def __post_init__(self) -> None:
        if self.n_t < 1 or self.n_r < 1:
            raise ConfigError("system.n_t and system.n_r must be positive")
        if self.snr_definition not in SNR_DEFINITIONS:
            raise ConfigError(f"system.snr_definition must be one of {SNR_DEFINITIONS}")
        try:
            make_constellation(self.constellation)
        except ValueError as e:
            raise ConfigError(f"system.constellation: {e}") from e


@dataclass
class BerConfig:
    snr_grid: List[float]
    detectors: List[str] = field(default_factory=lambda: ["ml", "lmmse", "oamp", "sgt"])
    trials: int = 1000
    min_errors: int = 100
    max_trials: int = 0  # 0 means no extension beyond trials
    seed: int = 0
    oamp_iterations: int = OAMP_ITERATIONS
    chunk_size: int = 100

    def __post_init__(self) -> None:
        if not self.snr_grid:
            raise ConfigError("ber.snr_grid must not be empty")
        for name in self.detectors:
            if name not in DETECTORS:
                raise ConfigError(f"ber.detectors: unknown detector {name}, must be one of {DETECTORS}")
        if self.trials < 1 or self.chunk_size < 1:
            raise ConfigError("ber.trials and ber.chunk_size must be positive")
        if self.seed < 0:
            raise ConfigError(f"ber.seed must be non-negative, got {self.seed}")


@dataclass
class OutputConfig:
    directory: str = "out"
    db: str = ""


@dataclass
class ExperimentConfig:
    system: SystemConfig
    sgt: SgtConfig
    train: TrainConfig
    ber: BerConfig
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> Dict[str, Any]:
        sgt = {k: v for k, v in asdict(self.sgt).items() if k not in _DERIVED_SGT_FIELDS}
        return {
            "system": asdict(self.system),
            "sgt": sgt,
            "train": asdict(self.train),
            "ber": asdict(self.ber),
            "output": asdict(self.output),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        unknown = sorted(set(data) - {"system", "sgt", "train", "ber", "output"})
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown section")
        if "system" not in data:
            raise ConfigError("system: missing required section")
        if "ber" not in data:
            raise ConfigError("ber: missing required section")

        system = _section(SystemConfig, "system", data["system"])
        derived = {
            "n_t": system.n_t,
            "n_r": system.n_r,
            "bits_per_dim": make_constellation(system.constellation).bits_per_dim,
        }
        return cls(
            system=system,
            sgt=_section(SgtConfig, "sgt", data.get("sgt", {}), derived),
            train=_section(TrainConfig, "train", data.get("train", {})),
            ber=_section(BerConfig, "ber", data["ber"]),
            output=_section(OutputConfig, "output", data.get("output", {})),
        )

    def config_hash(self) -> str:
        return short_hash(json.dumps(self.to_dict(), sort_keys=True))

    def with_overrides(
        self, seed: Optional[int] = None, out: Optional[str] = None, variant: Optional[str] = None
    ) -> "ExperimentConfig":
        """command line flags win over file values"""
        cfg = self
        if seed is not None:
            if seed < 0:
                raise ConfigError(f"--seed must be non-negative, got {seed}")
            cfg = replace(
                cfg,
                sgt=replace(cfg.sgt, init_seed=seed),
                train=replace(cfg.train, seed=seed),
                ber=replace(cfg.ber, seed=seed),
            )
        if out:
            cfg = replace(cfg, output=replace(cfg.output, directory=out))
        if variant:
            if variant not in VARIANTS:
                raise ConfigError(f"sgt.variant must be one of {VARIANTS}, got {variant}")
            cfg = replace(cfg, sgt=replace(cfg.sgt, variant=variant))
        return cfg


def _coerce(name: str, kind: Any, value: Any) -> Any:
    if get_origin(kind) in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        (item_kind,) = get_args(kind)
        return [_coerce(f"{name}[{i}]", item_kind, v) for i, v in enumerate(value)]
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(f"{name}: expected {getattr(kind, '__name__', kind)}, got {value!r}")
    return value


def _section(cls: Type[C], name: str, data: Any, derived: Optional[Dict[str, Any]] = None) -> C:
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected a table")
    derived = derived or {}
    known = {f.name: f for f in fields(cls) if f.name not in derived}  # type: ignore
    for key in data:
        if key not in known:
            raise ConfigError(f"{name}.{key}: unknown field")

    values = dict(derived)
    for key, f in known.items():
        if key in data:
            values[key] = _coerce(f"{name}.{key}", f.type, data[key])
        elif f.default is MISSING and f.default_factory is MISSING:
            raise ConfigError(f"{name}.{key}: missing required field")

    try:
        return cls(**values)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{name}: {e}") from e


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return ExperimentConfig.from_dict(data)


def dump_config(cfg: ExperimentConfig, path: str) -> None:
    with open(path, "wb") as f:
        tomli_w.dump(cfg.to_dict(), f)
