"""Tabular n-gram softmax models used as both teacher and student.

A model of order ``m`` over ``V`` tokens keeps one logit row per context of
the last ``m`` tokens, indexed in mixed radix (most distant token is the
most significant digit). Contexts shorter than ``m`` are left-padded with
``bos_token``.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import _kernels
from .errors import NumericError, ParameterError
from .prob_core import PROB_FLOOR, softmax_rows


class Origin(str, enum.Enum):
    TEACHER = "teacher"
    STUDENT = "student"
    CORPUS = "corpus"


@dataclass
class Sequence:
    prompt: list[int]
    completion: list[int]
    origin: Origin

    def __post_init__(self):
        if len(self.completion) < 1:
            raise ParameterError("completion must hold at least one token")
        self.origin = Origin(self.origin)

    @property
    def tokens(self) -> list[int]:
        return list(self.prompt) + list(self.completion)


@dataclass
class NGramModel:
    vocab_size: int
    order: int
    logits: np.ndarray
    bos_token: int = 0

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ParameterError("vocab_size must be >= 2")
        if self.order < 0:
            raise ParameterError("order must be >= 0")
        if not 0 <= self.bos_token < self.vocab_size:
            raise ParameterError("bos_token out of range")
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.logits.shape != (self.n_rows, self.vocab_size):
            raise ParameterError(f"logit table must have shape {(self.n_rows, self.vocab_size)}, got {self.logits.shape}")
        if not np.all(np.isfinite(self.logits)):
            raise ParameterError("logit table must be finite")

    @property
    def n_rows(self) -> int:
        return self.vocab_size ** self.order

    @classmethod
    def uniform(cls, vocab_size, order, bos_token=0):
        return cls(vocab_size, order, np.zeros((vocab_size ** order, vocab_size)), bos_token)

    def copy(self) -> "NGramModel":
        return NGramModel(self.vocab_size, self.order, self.logits.copy(), self.bos_token)

    def row_index(self, context) -> int:
        ctx = [int(t) for t in context]
        for t in ctx:
            if not 0 <= t < self.vocab_size:
                raise ParameterError(f"token {t} outside vocabulary of size {self.vocab_size}")
        if self.order == 0:
            return 0
        tail = ([self.bos_token] * self.order + ctx)[-self.order:]
        idx = 0
        for t in tail:
            idx = idx * self.vocab_size + t
        return idx

    def predict_logits(self, context) -> np.ndarray:
        return self.logits[self.row_index(context)].copy()

    def predict(self, context) -> np.ndarray:
        return softmax_rows(self.logits[self.row_index(context)][None, :])[0]

    def probs(self, temperature: float = 1.0) -> np.ndarray:
        """Probability table, one row per context."""
        return softmax_rows(self.logits / temperature)

    def context_rows(self, tokens: np.ndarray, prompt_len: int) -> np.ndarray:
        """Row index of every completion position for a ``[B, L]`` token array.

        Position ``t`` (0-based within the completion) conditions on
        ``tokens[:, :prompt_len + t]``.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        B, L = tokens.shape
        T = L - prompt_len
        if self.order == 0:
            return np.zeros((B, T), dtype=np.int64)
        pad = np.full((B, self.order), self.bos_token, dtype=np.int64)
        padded = np.concatenate([pad, tokens], axis=1)
        rows = np.zeros((B, T), dtype=np.int64)
        for j in range(self.order):
            rows = rows * self.vocab_size + padded[:, prompt_len + j: prompt_len + j + T]
        return rows

    def start_rows(self, prompts: np.ndarray) -> np.ndarray:
        prompts = np.asarray(prompts, dtype=np.int64)
        return self.context_rows(np.concatenate([prompts, np.zeros((prompts.shape[0], 1), dtype=np.int64)], axis=1),
                                 prompts.shape[1])[:, 0]


def predict_logits(model: NGramModel, context) -> np.ndarray:
    return model.predict_logits(context)


def random_teacher(vocab_size: int, order: int, concentration: float, seed, bos_token: int = 0) -> NGramModel:
    """Rows drawn from a symmetric Dirichlet; logits are their (floored) logs.

    Small ``concentration`` gives peaked, low-entropy rows; large gives
    near-uniform rows.
    """
    if concentration <= 0:
        raise ParameterError("concentration must be > 0")
    rng = np.random.default_rng(seed)
    n_rows = vocab_size ** order
    probs = rng.dirichlet(np.full(vocab_size, float(concentration)), size=n_rows)
    return NGramModel(vocab_size, order, np.log(np.maximum(probs, PROB_FLOOR)), bos_token)


def corpus_teacher(corpus, order: int, smoothing: float = 0.0, vocab_size: int | None = None,
                   bos_token: int = 0) -> NGramModel:
    """Add-lambda smoothed n-gram estimate from a corpus of sequences.

    Every token after the first ``order``-padded context counts, prompts
    included. Zero counts are floored before the log.
    """
    if not corpus:
        raise ParameterError("empty corpus")
    if smoothing < 0:
        raise ParameterError("smoothing must be >= 0")
    if vocab_size is None:
        vocab_size = max(max(s.tokens) for s in corpus) + 1
        vocab_size = max(vocab_size, 2)
    model = NGramModel.uniform(vocab_size, order, bos_token)
    counts = np.zeros((model.n_rows, vocab_size))
    for seq in corpus:
        toks = np.asarray(seq.tokens, dtype=np.int64)[None, :]
        rows = model.context_rows(toks, 0)[0]
        np.add.at(counts, (rows, toks[0]), 1.0)
    counts += smoothing
    totals = counts.sum(axis=1, keepdims=True)
    probs = np.where(totals > 0, counts / np.where(totals > 0, totals, 1.0), 1.0 / vocab_size)
    model.logits = np.log(np.maximum(probs, PROB_FLOOR))
    return model


class GenMode(str, enum.Enum):
    GREEDY = "greedy"
    SAMPLE = "sample"


def generate_batch(model: NGramModel, prompts, length: int, mode=GenMode.SAMPLE, temperature: float = 1.0,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Roll out ``length`` tokens for each prompt row; returns ``[B, length]`` completions.

    Sample mode consumes one ``rng.random((B, length))`` block.
    """
    mode = GenMode(mode)
    if length < 1:
        raise ParameterError("length must be >= 1")
    if temperature <= 0:
        raise ParameterError("temperature must be > 0")
    prompts = np.asarray(prompts, dtype=np.int64)
    if prompts.ndim == 1:
        prompts = prompts[None, :]
    B = prompts.shape[0]
    starts = model.start_rows(prompts)
    if mode is GenMode.GREEDY:
        greedy_idx = np.argmax(model.logits, axis=1)
        U = np.zeros((B, length))
        cum = np.zeros((1, 1))
    else:
        if rng is None:
            raise ParameterError("sampling needs a random generator")
        greedy_idx = np.zeros(1, dtype=np.int64)
        U = rng.random((B, length))
        cum = np.cumsum(model.probs(temperature), axis=1)
    return _kernels.rollout(cum, greedy_idx, starts, U, model.vocab_size, model.n_rows, mode is GenMode.GREEDY)


def generate(model: NGramModel, prompt, length: int, mode=GenMode.SAMPLE, temperature: float = 1.0,
             rng: np.random.Generator | None = None, origin=Origin.TEACHER) -> Sequence:
    prompt = [int(t) for t in prompt]
    for t in prompt:
        if not 0 <= t < model.vocab_size:
            raise ParameterError(f"prompt token {t} outside vocabulary")
    out = generate_batch(model, np.asarray([prompt], dtype=np.int64).reshape(1, len(prompt)), length, mode, temperature, rng)
    return Sequence(prompt, out[0].tolist(), origin)


# --------------------------------------------------------------------------
# optimisers
# --------------------------------------------------------------------------

@dataclass
class SGD:
    lr: float = 0.5

    def step(self, table: np.ndarray, rows: np.ndarray, grads: np.ndarray) -> None:
        table[rows] -= self.lr * grads


@dataclass
class Adam:
    """Adam with lazy per-row state: rows without a gradient are left alone,
    including their moment estimates and bias-correction counters."""

    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    _m: np.ndarray | None = field(default=None, repr=False)
    _v: np.ndarray | None = field(default=None, repr=False)
    _t: np.ndarray | None = field(default=None, repr=False)

    def step(self, table: np.ndarray, rows: np.ndarray, grads: np.ndarray) -> None:
        if self._m is None or self._m.shape != table.shape:
            self._m = np.zeros_like(table)
            self._v = np.zeros_like(table)
            self._t = np.zeros(table.shape[0], dtype=np.int64)
        self._t[rows] += 1
        t = self._t[rows][:, None]
        m = self.beta1 * self._m[rows] + (1.0 - self.beta1) * grads
        v = self.beta2 * self._v[rows] + (1.0 - self.beta2) * grads * grads
        self._m[rows] = m
        self._v[rows] = v
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        table[rows] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(name: str = "sgd", **hyper):
    name = name.lower()
    if name == "sgd":
        return SGD(**hyper)
    if name == "adam":
        return Adam(**hyper)
    raise ParameterError(f"unknown optimizer {name!r}")


def apply_grad(model: NGramModel, grads: Mapping[int, np.ndarray], optimizer) -> NGramModel:
    """New model with ``grads`` (context row -> gradient vector) applied."""
    out = model.copy()
    if not grads:
        return out
    rows = np.fromiter(grads.keys(), dtype=np.int64, count=len(grads))
    G = np.stack([np.asarray(grads[int(r)], dtype=np.float64) for r in rows])
    apply_dense(out, rows, G, optimizer)
    return out


def apply_dense(model: NGramModel, rows: np.ndarray, G: np.ndarray, optimizer) -> None:
    """In-place update of ``model`` rows ``rows`` by gradient block ``G``."""
    if not np.all(np.isfinite(G)):
        raise NumericError("non-finite gradient")
    if np.any(rows < 0) or np.any(rows >= model.n_rows):
        raise ParameterError("gradient row index out of range")
    optimizer.step(model.logits, rows, G)
    if not np.all(np.isfinite(model.logits[rows])):
        raise NumericError("update produced non-finite logits")


# --------------------------------------------------------------------------
# serialisation
# --------------------------------------------------------------------------

MAGIC = b"SKDNGRAM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIII")


def to_bytes(model: NGramModel) -> bytes:
    head = _HEADER.pack(MAGIC, FORMAT_VERSION, model.vocab_size, model.order, model.bos_token)
    return head + np.ascontiguousarray(model.logits, dtype="<f8").tobytes()


def from_bytes(data: bytes) -> NGramModel:
    if len(data) < _HEADER.size:
        raise ParameterError("truncated model file")
    magic, version, vocab, order, bos = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise ParameterError("not a selectkd model file")
    if version != FORMAT_VERSION:
        raise ParameterError(f"unsupported model format version {version}")
    n = vocab ** order * vocab
    body = data[_HEADER.size:]
    if len(body) != 8 * n:
        raise ParameterError("model file size does not match its header")
    table = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(vocab ** order, vocab)
    return NGramModel(vocab, order, table, bos)


def save_model(model: NGramModel, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load_model(path) -> NGramModel:
    return from_bytes(Path(path).read_bytes())
