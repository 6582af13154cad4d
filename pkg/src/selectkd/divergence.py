"""Token-wise KL-family divergences, their logit gradients, and sequence losses.

``fkl``/``rkl``/``skl``/``srkl`` evaluate one (teacher, student) pair of
probability vectors directly. ``grad_logits`` and the sequence losses go
through the batched kernel in ``_kernels``; the scalar functions here are
kept independent of that path so they can serve as its oracle.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from .errors import ParameterError
from .prob_core import as_logits, as_probs, check_same_size, clamp


class Kind(str, enum.Enum):
    FKL = "fkl"
    RKL = "rkl"
    SKL = "skl"
    SRKL = "srkl"


_CODES = {Kind.FKL: _kernels.FKL, Kind.RKL: _kernels.RKL, Kind.SKL: _kernels.SKL, Kind.SRKL: _kernels.SRKL}


@dataclass(frozen=True)
class DivergenceKind:
    """Which divergence to apply, with the skew coefficient for SKL/SRKL."""

    kind: Kind
    alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        skewed = self.kind in (Kind.SKL, Kind.SRKL)
        if skewed:
            if self.alpha is None:
                raise ParameterError(f"{self.kind.value} needs alpha")
            if not 0.0 <= self.alpha < 1.0:
                raise ParameterError(f"alpha={self.alpha} outside [0, 1)")
            object.__setattr__(self, "alpha", float(self.alpha))
        elif self.alpha is not None:
            raise ParameterError(f"{self.kind.value} takes no alpha")

    @property
    def code(self) -> int:
        return _CODES[self.kind]

    @property
    def alpha_value(self) -> float:
        return 0.0 if self.alpha is None else self.alpha

    def with_alpha(self, alpha: float) -> "DivergenceKind":
        return DivergenceKind(self.kind, alpha)

    def label(self) -> str:
        if self.alpha is None:
            return self.kind.value
        return f"{self.kind.value}({self.alpha:g})"

    @classmethod
    def parse(cls, text: str) -> "DivergenceKind":
        """Parse ``"fkl"``, ``"skl:0.1"`` or ``"skl(0.1)"``."""
        text = text.strip().lower()
        for sep in (":", "("):
            if sep in text:
                name, rest = text.split(sep, 1)
                return cls(Kind(name), float(rest.rstrip(")")))
        return cls(Kind(text))


FKL = DivergenceKind(Kind.FKL)
RKL = DivergenceKind(Kind.RKL)


def SKL(alpha: float) -> DivergenceKind:
    return DivergenceKind(Kind.SKL, alpha)


def SRKL(alpha: float) -> DivergenceKind:
    return DivergenceKind(Kind.SRKL, alpha)


@dataclass
class TokenLoss:
    value: float
    grad_logits: np.ndarray


def _check_alpha(alpha):
    if not 0.0 <= alpha < 1.0:
        raise ParameterError(f"alpha={alpha} outside [0, 1)")


def _kl(a: np.ndarray, b: np.ndarray) -> float:
    # sum a_i log(a_i / b_i) with clamp-then-log; zero-mass terms vanish
    return float(np.sum(a * (np.log(clamp(a)) - np.log(clamp(b)))))


def fkl(p, q) -> float:
    p, q = as_probs(p), as_probs(q)
    check_same_size(p, q)
    return _kl(p, q)


def rkl(p, q) -> float:
    p, q = as_probs(p), as_probs(q)
    check_same_size(p, q)
    return _kl(q, p)


def skl(p, q, alpha: float) -> float:
    p, q = as_probs(p), as_probs(q)
    check_same_size(p, q)
    _check_alpha(alpha)
    if alpha == 0.0:
        return _kl(p, q)
    return _kl(p, alpha * p + (1.0 - alpha) * q)


def srkl(p, q, alpha: float) -> float:
    p, q = as_probs(p), as_probs(q)
    check_same_size(p, q)
    _check_alpha(alpha)
    if alpha == 0.0:
        return _kl(q, p)
    return _kl(q, (1.0 - alpha) * p + alpha * q)


def divergence(kind: DivergenceKind, p, q) -> float:
    if kind.kind is Kind.FKL:
        return fkl(p, q)
    if kind.kind is Kind.RKL:
        return rkl(p, q)
    if kind.kind is Kind.SKL:
        return skl(p, q, kind.alpha)
    return srkl(p, q, kind.alpha)


def batch_values_grads(kind: DivergenceKind, P: np.ndarray, Z: np.ndarray):
    """Divergence of each row of ``P`` against ``softmax(Z)`` and the logit gradients."""
    return _kernels.div_grad(kind.code, kind.alpha_value, P, Z)


def grad_logits(kind: DivergenceKind, p, z_q) -> np.ndarray:
    """d D(p || softmax(z_q)) / d z_q.

    FKL is ``q - p``; the other kinds apply the softmax Jacobian
    ``diag(q) - q q^T`` to d D / d q, with constant offsets dropped since
    the Jacobian annihilates them.
    """
    p, z = as_probs(p), as_logits(z_q)
    check_same_size(p, z)
    _, g = batch_values_grads(kind, p[None, :], z[None, :])
    return g[0]


def _pairwise_mean(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(math.fsum(values) / len(values))


def selectkd_loss(p_seq: Sequence, z_seq: Sequence, weights: Sequence[float], kind: DivergenceKind = FKL) -> TokenLoss:
    """Verifier-weighted divergence of one sequence, normalised by its length.

    ``weights`` are constants: no gradient is taken through them. The
    returned ``grad_logits`` has one row per position.
    """
    T = len(p_seq)
    if T < 1 or len(z_seq) != T or len(weights) != T:
        raise ParameterError(f"length mismatch: {len(p_seq)} distributions, {len(z_seq)} logit rows, {len(weights)} weights")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0.0) or np.any(w > 1.0):
        raise ParameterError("weights must lie in [0, 1]")
    P = np.stack([as_probs(p) for p in p_seq])
    Z = np.stack([as_logits(z) for z in z_seq])
    if P.shape != Z.shape:
        raise ParameterError("teacher and student vocabularies differ")
    values, grads = batch_values_grads(kind, P, Z)
    value = math.fsum(w * values) / T
    return TokenLoss(value, grads * (w / T)[:, None])


def distillm2_loss(teacher_batch, student_batch, mu: float, alpha_t: float, alpha_s: float,
                   teacher_weights=None, student_weights=None) -> TokenLoss:
    """Mixed skew objective: SKL on teacher-generated, SRKL on student-generated data.

    Each batch is a list of ``(p_seq, z_seq)`` pairs. Optional per-sequence
    weight lists turn on the selective wrapper. ``grad_logits`` is a list of
    per-sequence gradient arrays, teacher sequences first.
    """
    if not 0.0 <= mu <= 1.0:
        raise ParameterError(f"mu={mu} outside [0, 1]")
    _check_alpha(alpha_t)
    _check_alpha(alpha_s)
    if (mu < 1.0 and not teacher_batch) or (mu > 0.0 and not student_batch):
        raise ParameterError("empty batch for a term with nonzero weight")

    def term(batch, kind, weights, scale):
        losses, grads = [], []
        for i, (ps, zs) in enumerate(batch):
            w = weights[i] if weights is not None else np.ones(len(ps))
            tl = selectkd_loss(ps, zs, w, kind)
            losses.append(tl.value)
            grads.append(tl.grad_logits * (scale / len(batch)))
        return (scale * _pairwise_mean(losses) if losses else 0.0), grads

    v_t, g_t = term(teacher_batch, SKL(alpha_t), teacher_weights, 1.0 - mu)
    v_s, g_s = term(student_batch, SRKL(alpha_s), student_weights, mu)
    return TokenLoss(v_t + v_s, g_t + g_s)
