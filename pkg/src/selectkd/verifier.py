"""Per-token verification weights: Hellinger (soft), greedy Top-k, Spec-k.

Weights come back as plain floats or float arrays. Nothing here is
differentiated, which is how the stop-gradient on the weight is enforced.

Spec-k consumes ``2k`` uniforms per token from the caller's generator in
the fixed order ``(token_1, u_1, token_2, u_2, ...)``; the token draws are
inverse-CDF lookups on the student distribution.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ParameterError
from .prob_core import PROB_FLOOR, as_probs, check_same_size, hellinger, inverse_cdf


class Mode(str, enum.Enum):
    HELLINGER = "hellinger"
    GREEDY = "greedy"
    SPEC = "spec"


@dataclass(frozen=True)
class VerifierConfig:
    mode: Mode = Mode.SPEC
    k: int = 5
    beta: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.k < 1:
            raise ParameterError(f"k={self.k} must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise ParameterError(f"beta={self.beta} outside [0, 1]")

    def check_vocab(self, vocab_size: int) -> None:
        if self.mode is not Mode.HELLINGER and self.k > vocab_size:
            raise ParameterError(f"k={self.k} exceeds vocabulary size {vocab_size}")


@dataclass
class VerificationOutcome:
    weight: float
    accepted: bool
    mode: Mode
    accepted_count: int = 0
    candidates: list[int] = field(default_factory=list)


def _greedy_accept(P: np.ndarray, Q: np.ndarray, k: int) -> np.ndarray:
    """Row-wise: is argmax(q) among the k most probable teacher tokens?

    The teacher ranking is the stable one (ties to the lower index), so the
    proposal is in Top-k iff fewer than k tokens precede it.
    """
    yhat = np.argmax(Q, axis=1)
    rows = np.arange(P.shape[0])
    py = P[rows, yhat][:, None]
    idx = np.arange(P.shape[1])[None, :]
    ahead = np.sum((P > py) | ((P == py) & (idx < yhat[:, None])), axis=1)
    return ahead < k


def verify_greedy(p, q, cfg: VerifierConfig) -> VerificationOutcome:
    if cfg.mode is not Mode.GREEDY:
        raise ParameterError(f"verify_greedy called with mode {cfg.mode.value}")
    p, q = as_probs(p), as_probs(q)
    check_same_size(p, q)
    cfg.check_vocab(p.shape[0])
    ok = bool(_greedy_accept(p[None, :], q[None, :], cfg.k)[0])
    return VerificationOutcome(1.0 if ok else cfg.beta, ok, Mode.GREEDY)


def verify_spec(p, q, cfg: VerifierConfig, rng: np.random.Generator) -> VerificationOutcome:
    if cfg.mode is not Mode.SPEC:
        raise ParameterError(f"verify_spec called with mode {cfg.mode.value}")
    p, q = as_probs(p), as_probs(q)
    check_same_size(p, q)
    u = rng.random(2 * cfg.k)
    cands, count = [], 0
    for i in range(cfg.k):
        y = inverse_cdf(q, u[2 * i])
        cands.append(y)
        a = min(1.0, max(p[y], PROB_FLOOR) / max(q[y], PROB_FLOOR))
        if u[2 * i + 1] < a:
            count += 1
    ok = count >= 1
    return VerificationOutcome(1.0 if ok else cfg.beta, ok, Mode.SPEC, count, cands)


def verify_hellinger(p, q) -> VerificationOutcome:
    w = hellinger(p, q)
    return VerificationOutcome(w, w == 1.0, Mode.HELLINGER)


def verify(p, q, cfg: VerifierConfig, rng: np.random.Generator | None = None) -> VerificationOutcome:
    if cfg.mode is Mode.GREEDY:
        return verify_greedy(p, q, cfg)
    if cfg.mode is Mode.SPEC:
        if rng is None:
            raise ParameterError("Spec-k verification needs a random generator")
        return verify_spec(p, q, cfg, rng)
    return verify_hellinger(p, q)


def verify_batch(P: np.ndarray, Q: np.ndarray, cfg: VerifierConfig, rng: np.random.Generator | None = None):
    """Vectorised verification of ``N`` token positions.

    Returns ``(weights, accepted)``. Spec-k draws ``rng.random((N, k, 2))``,
    which is the same stream as ``N`` successive ``verify_spec`` calls.
    """
    if cfg.mode is Mode.HELLINGER:
        w = np.sqrt(0.5 * np.sum((np.sqrt(P) - np.sqrt(Q)) ** 2, axis=1))
        w = np.minimum(w, 1.0)
        return w, w == 1.0
    cfg.check_vocab(P.shape[1])
    if cfg.mode is Mode.GREEDY:
        ok = _greedy_accept(P, Q, cfg.k)
        return np.where(ok, 1.0, cfg.beta), ok
    if rng is None:
        raise ParameterError("Spec-k verification needs a random generator")
    U = rng.random((P.shape[0], cfg.k, 2))
    weights, counts, _ = _kernels.spec_verify(P, Q, U, cfg.beta)
    return weights, counts >= 1


def tar(outcomes) -> float:
    """Fraction of positions verified at full weight."""
    if not outcomes:
        raise ParameterError("TAR of an empty outcome list")
    if any(o.mode is Mode.HELLINGER for o in outcomes):
        raise ParameterError("TAR is undefined for Hellinger weights")
    return sum(1 for o in outcomes if o.weight == 1.0) / len(outcomes)
