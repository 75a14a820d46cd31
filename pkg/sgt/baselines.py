"""
reference detectors on the real-valued model y = H x + n, n ~ N(0, diag(sigma2))

ml_detect     exhaustive search of sum_j (y_j - h_j x)^2 / sigma_j^2, optional max-log LLRs
lmmse_detect  x_hat = (H^T S^-1 H + I / E)^-1 H^T S^-1 y, E = per real dimension symbol energy,
              soft output from the unbiased estimate z_i = x_hat_i / mu_i, mu = diag(W H),
              with error variance E (1 - mu_i) / mu_i
oamp_detect   orthogonal AMP, iterating
                  W_hat = (H^T S^-1 H + I / v2)^-1 H^T S^-1
                  W     = (2N_t / tr(W_hat H)) W_hat              (de-correlated)
                  r     = x + W (y - H x)
                  tau2  = (tr(B B^T) v2 + tr(W S W^T)) / 2N_t,  B = I - W H
                  x, v2 = extrinsic posterior of the constellation prior given r ~ N(x, tau2)
              the extrinsic step (x_post / v_post - r / tau2) / (1 / v_post - 1 / tau2) is the
              divergence-free form of the posterior-mean denoiser.
"""
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Callable, Dict, Optional, Protocol, Tuple, Union

import numpy as np
from scipy.special import logsumexp

from utils import log

from .channel import Constellation, MimoInstance, hard_demap
from .tokenizer import LLR_MAX

ML_MAX_CANDIDATES = 2**24
ML_CHUNK = 2**15
OAMP_ITERATIONS = 10
OAMP_DIVERGENCE_PATIENCE = 3

_VAR_FLOOR = 1e-15


class SearchSpaceError(ValueError):
    pass


@dataclass
class DetectorOutput:
    bits: np.ndarray  # [2N_t, N_bits/2] hard decisions
    llrs: Optional[np.ndarray] = None  # log P(bit=0)/P(bit=1)
    metadata: Dict[str, Any] = field(default_factory=dict)


class Detector(Protocol):
    name: str

    def detect(self, inst: MimoInstance) -> DetectorOutput:
        ...


def demap_llrs(z: np.ndarray, var: Union[float, np.ndarray], constellation: Constellation) -> np.ndarray:
    """exact bit LLRs for observations z_i = x_i + e_i, e_i ~ N(0, var_i), uniform prior over levels"""
    var = np.broadcast_to(np.maximum(np.asarray(var, dtype=np.float64), _VAR_FLOOR), z.shape)
    loglik = -((z[:, None] - constellation.levels[None, :]) ** 2) / (2.0 * var[:, None])
    llrs = np.empty((z.shape[0], constellation.bits_per_dim))
    for j in range(constellation.bits_per_dim):
        zero = constellation.label_bits[:, j] == 0
        llrs[:, j] = logsumexp(loglik[:, zero], axis=1) - logsumexp(loglik[:, ~zero], axis=1)
    return np.clip(llrs, -LLR_MAX, LLR_MAX)


def _llr_bits(llrs: np.ndarray) -> np.ndarray:
    return (llrs < 0).astype(np.int64)


def candidate_count(n_t: int, constellation: Constellation) -> int:
    return len(constellation.levels) ** (2 * n_t)


@lru_cache(maxsize=16)
def _digit_powers(n_dims: int, n_levels: int) -> np.ndarray:
    return n_levels ** np.arange(n_dims - 1, -1, -1)


def candidate_labels(start: int, stop: int, n_dims: int, n_levels: int) -> np.ndarray:
    """level labels of candidates start..stop-1, dimension 0 is the most significant digit"""
    idx = np.arange(start, stop, dtype=np.int64)
    return (idx[:, None] // _digit_powers(n_dims, n_levels)[None, :]) % n_levels


def ml_detect(inst: MimoInstance, soft: bool = False, chunk: int = ML_CHUNK) -> DetectorOutput:
    """
    exhaustive maximum likelihood, ties resolved in favour of the lowest candidate index.
    with soft=True the max-log LLRs (min_{b=1} d - min_{b=0} d) / 2 are returned as well
    """
    const = inst.constellation
    n_dims = 2 * inst.n_t
    n_levels = len(const.levels)
    total = candidate_count(inst.n_t, const)
    if total > ML_MAX_CANDIDATES:
        raise SearchSpaceError(f"{total} candidates exceed the exhaustive search limit of {ML_MAX_CANDIDATES}")

    inv_var = 1.0 / inst.sigma2
    best_metric, best_labels = np.inf, None
    m = const.bits_per_dim
    min0 = np.full((n_dims, m), np.inf)
    min1 = np.full((n_dims, m), np.inf)

    for start in range(0, total, chunk):
        labels = candidate_labels(start, min(start + chunk, total), n_dims, n_levels)
        residual = inst.y[None, :] - const.levels[labels] @ inst.H.T
        metric = (residual**2 * inv_var[None, :]).sum(axis=1)

        k = int(np.argmin(metric))
        if metric[k] < best_metric:
            best_metric, best_labels = float(metric[k]), labels[k]

        if soft:
            cand_bits = const.label_bits[labels]  # [C, n_dims, m]
            per_cand = metric[:, None, None]
            min0 = np.minimum(min0, np.where(cand_bits == 0, per_cand, np.inf).min(axis=0))
            min1 = np.minimum(min1, np.where(cand_bits == 1, per_cand, np.inf).min(axis=0))

    assert best_labels is not None
    out = DetectorOutput(
        bits=const.label_bits[best_labels].copy(),
        metadata={"candidates": total, "metric": best_metric},
    )
    if soft:
        out.llrs = np.clip((min1 - min0) / 2.0, -LLR_MAX, LLR_MAX)
    return out


def lmmse_detect(inst: MimoInstance) -> DetectorOutput:
    const = inst.constellation
    energy = const.real_energy
    h_w = inst.H.T / inst.sigma2[None, :]  # H^T S^-1
    gram = h_w @ inst.H + np.eye(inst.H.shape[1]) / energy

    w = np.linalg.solve(gram, h_w)
    x_hat = w @ inst.y
    mu = np.clip(np.einsum("ij,ji->i", w, inst.H), _VAR_FLOOR, 1.0)
    z = x_hat / mu
    var = energy * (1.0 - mu) / mu

    return DetectorOutput(
        bits=hard_demap(z, const),
        llrs=demap_llrs(z, var, const),
        metadata={"x_hat": x_hat, "error_variance": var},
    )


def _posterior(r: np.ndarray, tau2: float, const: Constellation) -> Tuple[np.ndarray, np.ndarray]:
    """posterior mean and variance of each x_i given r_i = x_i + N(0, tau2), uniform prior"""
    loglik = -((r[:, None] - const.levels[None, :]) ** 2) / (2.0 * max(tau2, _VAR_FLOOR))
    weights = np.exp(loglik - logsumexp(loglik, axis=1, keepdims=True))
    x_post = weights @ const.levels
    v_post = np.maximum(weights @ const.levels**2 - x_post**2, 0.0)
    return x_post, v_post


def oamp_detect(inst: MimoInstance, iterations: int = OAMP_ITERATIONS) -> DetectorOutput:
    if iterations < 1:
        raise ValueError(f"OAMP needs at least one iteration, got {iterations}")

    const = inst.constellation
    H, y, sigma2 = inst.H, inst.y, inst.sigma2  # noqa: N806
    n = H.shape[1]
    eye = np.eye(n)
    h_w = H.T / sigma2[None, :]
    gram = h_w @ H

    x = np.zeros(n)
    v2 = const.real_energy
    history, residuals = [], []
    best: Optional[Tuple[float, np.ndarray]] = None
    increases, diverged = 0, False

    for t in range(iterations):
        w_hat = np.linalg.solve(gram + eye / v2, h_w)
        w = (n / np.trace(w_hat @ H)) * w_hat
        r = x + w @ (y - H @ x)
        b = eye - w @ H
        tau2 = float((np.sum(b * b) * v2 + np.sum(w * w * sigma2[None, :])) / n)

        if history and tau2 > history[-1]:
            increases += 1
        else:
            increases = 0
        history.append(tau2)
        if best is None or tau2 < best[0]:
            best = (tau2, r)

        x_post, v_post_i = _posterior(r, tau2, const)
        residuals.append(float(np.linalg.norm(y - H @ x_post)))

        if increases >= OAMP_DIVERGENCE_PATIENCE:
            diverged = True
            log(f"### OAMP error variance grew {increases} iterations in a row, returning best iterate")
            break

        v_post = float(np.mean(v_post_i))
        if _VAR_FLOOR < v_post < tau2:
            v2 = 1.0 / (1.0 / v_post - 1.0 / tau2)
            x = v2 * (x_post / v_post - r / tau2)
        else:
            v2 = max(v_post, _VAR_FLOOR)
            x = x_post

    assert best is not None
    tau2, r = (best if diverged else (history[-1], r))
    llrs = demap_llrs(r, tau2, const)
    return DetectorOutput(
        bits=_llr_bits(llrs),
        llrs=llrs,
        metadata={
            "iterations": len(history),
            "error_variance": history,
            "residual_norms": residuals,
            "diverged": diverged,
        },
    )


def random_detect(inst: MimoInstance, seed: int = 0) -> DetectorOutput:
    """coin flips, seeded by the received vector so the result does not depend on call order"""
    rng = np.random.default_rng([seed, zlib.crc32(inst.y.tobytes())])
    return DetectorOutput(bits=rng.integers(0, 2, size=(2 * inst.n_t, inst.constellation.bits_per_dim)))


class BaselineDetector:
    def __init__(self, name: str, fn: Callable[..., DetectorOutput], **options: Any):
        self.name = name
        self._fn = fn
        self._options = options

    def detect(self, inst: MimoInstance) -> DetectorOutput:
        return self._fn(inst, **self._options)

    def __repr__(self) -> str:
        return f"BaselineDetector(name={self.name!r}, options={self._options!r})"


def make_detector(name: str, oamp_iterations: int = OAMP_ITERATIONS, seed: int = 0) -> BaselineDetector:
    if name == "ml":
        return BaselineDetector("ml", ml_detect)
    if name == "lmmse":
        return BaselineDetector("lmmse", lmmse_detect)
    if name == "oamp":
        return BaselineDetector("oamp", oamp_detect, iterations=oamp_iterations)
    if name == "random":
        return BaselineDetector("random", random_detect, seed=seed)
    raise ValueError(f"unknown baseline detector {name}")
