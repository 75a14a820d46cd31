"""
multiply-accumulate counts of one SGT forward pass

count_forward instruments the tensor ops of a real forward pass, symbolic_count gives
the closed form of the same quantities. Keys are "<sublayer>.<kind>" with kind one of
projection, score, mix, ffn; layers of the same sublayer type are summed.
"""
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .channel import sample_instance
from .models import MacCount
from .network import SgtConfig, SgtModel, forward
from .tensor import MacCounter
from .trainer import constellation_for

KINDS = ("projection", "score", "mix", "ffn")


@dataclass
class OpCount:
    n_t: int
    n_r: int
    d_model: int
    n_layers: int
    variant: str
    macs: Dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return sum(self.macs.values())

    def kind(self, kind: str) -> int:
        return sum(n for key, n in self.macs.items() if key.endswith(f".{kind}"))

    def sublayer(self, name: str) -> int:
        return sum(n for key, n in self.macs.items() if key.startswith(f"{name}."))

    @property
    def attention_scores(self) -> int:
        """score and value-mixing MACs, the part quadratic in the token count"""
        return self.kind("score") + self.kind("mix")


def _resized(config: SgtConfig, n_t: Optional[int], n_r: Optional[int]) -> SgtConfig:
    return replace(config, n_t=n_t or config.n_t, n_r=n_r or config.n_r)


def count_forward(config: SgtConfig, n_t: Optional[int] = None, n_r: Optional[int] = None, seed: int = 0) -> OpCount:
    cfg = _resized(config, n_t, n_r)
    model = SgtModel(cfg)
    inst = sample_instance(cfg.n_t, cfg.n_r, 10.0, constellation_for(cfg), seed)
    with MacCounter() as counter:
        forward(inst, model)
    return OpCount(cfg.n_t, cfg.n_r, cfg.d_model, cfg.n_layers, cfg.variant, dict(counter.macs))


def _add(macs: Dict[str, int], key: str, n: int) -> None:
    macs[key] = macs.get(key, 0) + n


def _attention(macs: Dict[str, int], label: str, n_q: int, n_k: int, d: int) -> None:
    _add(macs, f"{label}.projection", 2 * n_q * d * d + 2 * n_k * d * d)
    _add(macs, f"{label}.score", n_q * n_k * d)
    _add(macs, f"{label}.mix", n_q * n_k * d)


def symbolic_count(config: SgtConfig, n_t: Optional[int] = None, n_r: Optional[int] = None) -> OpCount:
    cfg = _resized(config, n_t, n_r)
    d, h, b = cfg.d_model, cfg.ffn_hidden, cfg.bits_per_dim
    s, r, f = cfg.n_sym, cfg.n_lin, cfg.lin_width
    macs: Dict[str, int] = {}

    _add(macs, "embed_sym.ffn", s * b * d + s * d * d)
    _add(macs, "embed_lin.ffn", r * f * d + r * d * d)
    for _ in range(cfg.n_layers):
        if cfg.variant == "full-sgt":
            _attention(macs, "sym_self", s, s, d)
        _attention(macs, "lin_self", r, r, d)
        if cfg.variant == "full-sgt":
            _attention(macs, "cross", s, r, d)
            if cfg.bidirectional_cross:
                _attention(macs, "lin_cross", r, s, d)
            _add(macs, "ffn_sym.ffn", 2 * s * d * h)
        _add(macs, "ffn_lin.ffn", 2 * r * d * h)
    if cfg.variant == "no-cross-attention":
        _add(macs, "compress.mix", s * r * d)
    _add(macs, "head.ffn", s * d * d + s * d * b)
    return OpCount(cfg.n_t, cfg.n_r, cfg.d_model, cfg.n_layers, cfg.variant, macs)


def fit_loglog_slope(xs: Sequence[float], ys: Sequence[float]) -> float:
    """least-squares slope of log(ys) against log(xs)"""
    if len(xs) != len(ys) or len(xs) < 2:
        raise ValueError("need at least two (x, y) points of equal count")
    return float(np.polyfit(np.log(np.asarray(xs, dtype=float)), np.log(np.asarray(ys, dtype=float)), 1)[0])


def scaling_sweep(config: SgtConfig, dims: Sequence[Tuple[int, int]]) -> List[Tuple[OpCount, OpCount]]:
    """(instrumented, symbolic) counts for every (n_t, n_r)"""
    return [(count_forward(config, n_t, n_r), symbolic_count(config, n_t, n_r)) for n_t, n_r in dims]


def report_rows(counted: OpCount, symbolic: OpCount) -> List[MacCount]:
    """one row per sublayer key, then per kind summed over sublayers, then the total"""
    keys = sorted(set(counted.macs) | set(symbolic.macs))
    entries = [(key, counted.macs.get(key, 0), symbolic.macs.get(key, 0)) for key in keys]
    entries += [(f"all.{kind}", counted.kind(kind), symbolic.kind(kind)) for kind in KINDS]
    entries.append(("total", counted.total, symbolic.total))
    return [
        MacCount(
            n_t=counted.n_t,
            n_r=counted.n_r,
            d_model=counted.d_model,
            n_layers=counted.n_layers,
            variant=counted.variant,
            sublayer=key,
            macs=macs,
            symbolic=closed_form,
        )
        for key, macs, closed_form in entries
    ]
