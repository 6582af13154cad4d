"""Categorical-distribution primitives shared by every other module.

Distributions are plain 1-D float64 numpy arrays. ``as_logits`` and
``as_probs`` validate at the boundary; the functions below assume valid
inputs after that.
"""

from __future__ import annotations

import numpy as np

from .errors import ParameterError

# Floor applied before any log or ratio. Never stored back into a distribution.
PROB_FLOOR = 1e-12
SUM_TOL = 1e-9


def as_logits(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.shape[0] < 2:
        raise ParameterError(f"logits must be a vector of length >= 2, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ParameterError("logits must be finite")
    return z


def as_probs(p) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.shape[0] < 2:
        raise ParameterError(f"probabilities must be a vector of length >= 2, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0.0):
        raise ParameterError("probabilities must be finite and non-negative")
    if abs(p.sum() - 1.0) > SUM_TOL:
        raise ParameterError(f"probabilities sum to {p.sum()!r}, not 1")
    return p


def check_same_size(p: np.ndarray, q: np.ndarray) -> None:
    if p.shape != q.shape:
        raise ParameterError(f"length mismatch: {p.shape[0]} vs {q.shape[0]}")


def softmax(z) -> np.ndarray:
    z = as_logits(z)
    e = np.exp(z - z.max())
    return e / e.sum()


def log_softmax(z) -> np.ndarray:
    z = as_logits(z)
    i = int(np.argmax(z))
    shifted = z - z[i]
    e = np.exp(shifted)
    e[i] = 0.0
    # log1p keeps full relative precision when one logit dominates
    return shifted - np.log1p(e.sum())


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D logit array (no validation)."""
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def clamp(p: np.ndarray) -> np.ndarray:
    return np.maximum(p, PROB_FLOOR)


def top_k_set(p, k: int) -> set[int]:
    """The ``k`` most probable token ids; ties go to the lower index."""
    p = as_probs(p)
    return set(top_k_indices(p, k).tolist())


def top_k_indices(p: np.ndarray, k: int) -> np.ndarray:
    if not 1 <= k <= p.shape[-1]:
        raise ParameterError(f"k={k} outside [1, {p.shape[-1]}]")
    # stable sort on -p keeps lower indices first among equal probabilities
    return np.argsort(-p, kind="stable")[:k]


def argmax_low(p: np.ndarray) -> int:
    # np.argmax already returns the first maximal index
    return int(np.argmax(p))


def hellinger(p, q) -> float:
    p, q = as_probs(p), as_probs(q)
    check_same_size(p, q)
    h = np.sqrt(0.5 * np.sum((np.sqrt(p) - np.sqrt(q)) ** 2))
    return float(min(h, 1.0))


def total_variation(p, q) -> float:
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    return float(0.5 * np.abs(p - q).sum())


def inverse_cdf(p: np.ndarray, u: float) -> int:
    """Token whose cumulative-probability bucket contains ``u`` in [0, 1)."""
    c = np.cumsum(p)
    idx = int(np.searchsorted(c, u * c[-1], side="right"))
    return min(idx, p.shape[0] - 1)


def sample(p, rng: np.random.Generator) -> int:
    """Draw one token by inverse CDF. Consumes exactly one uniform from ``rng``."""
    p = as_probs(p)
    return inverse_cdf(p, rng.random())


def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Independent child streams; the parent stays usable."""
    return list(rng.spawn(n))
