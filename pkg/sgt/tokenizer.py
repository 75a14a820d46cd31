"""
graph-aware tokenization of a MimoInstance

linear-constraint tokens: one row per receive dimension j, (y_j, h_j, sigma_j^2)
symbol prior tokens:      one row per transmit dimension i, soft bits in probability domain

soft bits are P(bit = 0) throughout, matching LLR = log P(bit=0)/P(bit=1),
so llr_to_prob is the logistic function and positive LLRs favour bit 0.
"""
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .channel import MimoInstance

LLR_MAX = 30.0


class PriorError(ValueError):
    pass


@dataclass
class TokenSet:
    lin: np.ndarray  # [2N_r, 2N_t + 2]
    sym: np.ndarray  # [2N_t, N_bits / 2]


def llr_to_prob(llr: np.ndarray) -> np.ndarray:
    llr = np.clip(np.asarray(llr, dtype=np.float64), -LLR_MAX, LLR_MAX)
    return 1.0 / (1.0 + np.exp(-llr))


def prob_to_llr(prob: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(prob, dtype=np.float64), llr_to_prob(-LLR_MAX), llr_to_prob(LLR_MAX))
    return np.clip(np.log(p) - np.log1p(-p), -LLR_MAX, LLR_MAX)


def bits_to_prob(bits: np.ndarray) -> np.ndarray:
    """hard bits as certain beliefs, P(bit = 0) = 1 - bit"""
    return 1.0 - np.asarray(bits, dtype=np.float64)


def prob_to_bits(prob: np.ndarray) -> np.ndarray:
    return (np.asarray(prob) < 0.5).astype(np.int64)


def uninformative_priors(n_t: int, bits_per_dim: int) -> np.ndarray:
    return np.full((2 * n_t, bits_per_dim), 0.5)


def _check_priors(priors: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    priors = np.asarray(priors, dtype=np.float64)
    if priors.shape != shape:
        raise PriorError(f"priors must have shape {list(shape)}, got {list(priors.shape)}")
    if not np.all((priors >= 0.0) & (priors <= 1.0)):
        raise PriorError("priors must be probabilities in [0, 1]")
    return priors


def _sym_tokens(inst: MimoInstance, priors: Optional[np.ndarray]) -> np.ndarray:
    shape = (2 * inst.n_t, inst.constellation.bits_per_dim)
    if priors is None:
        return uninformative_priors(inst.n_t, inst.constellation.bits_per_dim)
    return _check_priors(priors, shape).copy()


def tokenize(inst: MimoInstance, priors: Optional[np.ndarray] = None) -> TokenSet:
    lin = np.column_stack([inst.y, inst.H, inst.sigma2])
    return TokenSet(lin=lin, sym=_sym_tokens(inst, priors))


def tokenize_qr(inst: MimoInstance, priors: Optional[np.ndarray] = None) -> TokenSet:
    """
    tokens of the QR-preprocessed system y' = Q^T y, one row (y'_i, R_i, sigma^2) per transmit
    dimension. When 2N_r < 2N_t, R has fewer rows and the missing tokens are zero padded.
    """
    n = 2 * inst.n_t
    q, r = np.linalg.qr(inst.H, mode="reduced")
    y_rot = q.T @ inst.y
    rows = r.shape[0]

    lin = np.zeros((n, n + 2))
    lin[:rows, 0] = y_rot
    lin[:rows, 1 : n + 1] = r
    # rotation by orthonormal columns keeps white noise white
    lin[:, n + 1] = float(np.mean(inst.sigma2))
    return TokenSet(lin=lin, sym=_sym_tokens(inst, priors))


def untokenize(tokens: TokenSet) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """recover (y, H, sigma2) from linear-constraint tokens"""
    return tokens.lin[:, 0].copy(), tokens.lin[:, 1:-1].copy(), tokens.lin[:, -1].copy()
