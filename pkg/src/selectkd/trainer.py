"""Selective token-weighted distillation loop for tabular students.

Per step: draw a batch (teacher pool or fresh student rollouts), verify
every completion position, weight the per-token divergence by the verifier
output, normalise by sequence length, average over the batch, update the
touched rows once.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np

from . import _kernels
from .divergence import SKL, SRKL, DivergenceKind, FKL
from .errors import NumericError, ParameterError
from .models import GenMode, NGramModel, Origin, Sequence, apply_dense, generate_batch, make_optimizer
from .prob_core import softmax_rows
from .verifier import Mode, VerifierConfig, verify_batch


@dataclass(frozen=True)
class Schedule:
    """Piecewise-linear function of the training fraction in [0, 1]."""

    knots: tuple[tuple[float, float], ...] = ((0.0, 0.1), (1.0, 0.1))

    def __post_init__(self):
        knots = tuple(sorted((float(x), float(y)) for x, y in self.knots))
        if not knots:
            raise ParameterError("schedule needs at least one knot")
        object.__setattr__(self, "knots", knots)

    @classmethod
    def constant(cls, value: float) -> "Schedule":
        return cls(((0.0, value), (1.0, value)))

    @classmethod
    def parse(cls, spec) -> "Schedule":
        if isinstance(spec, Schedule):
            return spec
        if isinstance(spec, (int, float)):
            return cls.constant(float(spec))
        return cls(tuple((float(x), float(y)) for x, y in spec))

    def __call__(self, fraction: float) -> float:
        return schedule_eval(self, fraction)

    def to_json(self):
        return [list(k) for k in self.knots]


def schedule_eval(schedule: Schedule, step_fraction: float) -> float:
    if not 0.0 <= step_fraction <= 1.0:
        raise ParameterError(f"step fraction {step_fraction} outside [0, 1]")
    xs = [k[0] for k in schedule.knots]
    ys = [k[1] for k in schedule.knots]
    return float(np.interp(step_fraction, xs, ys))


@dataclass
class TrainingConfig:
    divergence: DivergenceKind = FKL
    verifier: VerifierConfig | None = field(default_factory=VerifierConfig)
    mu: float = 0.0
    # DistiLLM-2 pairing: SKL(alpha_t) on teacher batches, SRKL(alpha_s) on student batches
    pairing: bool = False
    alpha_t: Schedule = field(default_factory=lambda: Schedule.constant(0.1))
    alpha_s: Schedule = field(default_factory=lambda: Schedule.constant(0.1))
    steps: int = 200
    batch_size: int = 16
    seq_length: int = 16
    prompt_length: int = 1
    pool_size: int = 256
    optimizer: str = "sgd"
    lr: float | None = None
    seed: int = 0
    # evaluated when ``verifier`` is None, so vanilla runs still log TAR
    shadow_verifier: VerifierConfig = field(default_factory=VerifierConfig)
    record_timing: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.seq_length < 1:
            raise ParameterError("seq_length must be >= 1")
        if self.prompt_length < 0:
            raise ParameterError("prompt_length must be >= 0")
        if not 0.0 <= self.mu <= 1.0:
            raise ParameterError(f"mu={self.mu} outside [0, 1]")
        if self.pool_size < 1:
            raise ParameterError("pool_size must be >= 1")
        self.alpha_t = Schedule.parse(self.alpha_t)
        self.alpha_s = Schedule.parse(self.alpha_s)

    def make_optimizer(self):
        hyper = {} if self.lr is None else {"lr": self.lr}
        return make_optimizer(self.optimizer, **hyper)

    def loss_kind(self, origin: Origin, fraction: float) -> DivergenceKind:
        if not self.pairing:
            return self.divergence
        if origin is Origin.STUDENT:
            return SRKL(self.alpha_s(fraction))
        return SKL(self.alpha_t(fraction))


@dataclass
class StepRecord:
    step: int
    loss: float
    tar: float
    raw_div: float
    alpha_t: float
    alpha_s: float
    wall_ms: float
    origin: str


CSV_FIELDS = ("step", "loss", "tar", "raw_div", "alpha_t", "alpha_s", "wall_ms", "origin")


@dataclass
class TrainingTrace:
    records: list[StepRecord] = field(default_factory=list)
    aborted_at: int | None = None

    def __len__(self):
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    @property
    def tar(self) -> np.ndarray:
        return self.column("tar")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_FIELDS)
        for r in self.records:
            w.writerow([r.step, repr(r.loss), repr(r.tar), repr(r.raw_div), repr(r.alpha_t), repr(r.alpha_s),
                        repr(r.wall_ms), r.origin])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps([asdict(r) for r in self.records], indent=1) + "\n"

    def write(self, csv_path=None, json_path=None) -> None:
        if csv_path is not None:
            with open(csv_path, "w", encoding="utf-8", newline="") as f:
                f.write(self.to_csv())
        if json_path is not None:
            with open(json_path, "w", encoding="utf-8", newline="") as f:
                f.write(self.to_json())


@dataclass
class SequenceBatch:
    """Equal-length sequences as one token array."""

    tokens: np.ndarray
    prompt_len: int
    origin: Origin

    @classmethod
    def from_sequences(cls, seqs: list[Sequence]) -> "SequenceBatch":
        if not seqs:
            raise ParameterError("empty batch")
        plen = {len(s.prompt) for s in seqs}
        clen = {len(s.completion) for s in seqs}
        origins = {s.origin for s in seqs}
        if len(plen) != 1 or len(clen) != 1:
            raise ParameterError("sequences in a batch must share prompt and completion lengths")
        origin = origins.pop() if len(origins) == 1 else Origin.CORPUS
        return cls(np.array([s.tokens for s in seqs], dtype=np.int64), plen.pop(), origin)

    @property
    def size(self) -> int:
        return self.tokens.shape[0]

    @property
    def length(self) -> int:
        return self.tokens.shape[1] - self.prompt_len


@dataclass
class StepResult:
    loss: float
    raw_div: float
    tar: float
    rows: np.ndarray
    grads: np.ndarray
    weights: np.ndarray


def compute_step(student: NGramModel, teacher: NGramModel, batch: SequenceBatch, kind: DivergenceKind,
                 verifier: VerifierConfig | None, shadow: VerifierConfig | None,
                 rng: np.random.Generator | None) -> StepResult:
    """Loss, TAR and per-row gradient for one batch, without updating anything."""
    if student.vocab_size != teacher.vocab_size:
        raise ParameterError("teacher and student vocabularies differ")
    toks = batch.tokens
    if toks.size and (toks.min() < 0 or toks.max() >= student.vocab_size):
        raise ParameterError("batch token outside vocabulary")
    B, T = batch.size, batch.length
    if T < 1:
        raise ParameterError("completions must hold at least one token")
    s_rows = student.context_rows(toks, batch.prompt_len).ravel()
    t_rows = teacher.context_rows(toks, batch.prompt_len).ravel()
    P = teacher.probs()[t_rows]
    Z = student.logits[s_rows]
    Q = softmax_rows(Z)

    active = verifier if verifier is not None else shadow
    if verifier is None and shadow is not None and shadow.k > student.vocab_size:
        # the shadow verifier only feeds the TAR log; fit it to small vocabularies
        active = replace(shadow, k=student.vocab_size)
    if active is not None:
        w, _ = verify_batch(P, Q, active, rng)
        tar = float(np.mean(w == 1.0)) if active.mode is not Mode.HELLINGER else float("nan")
    else:
        w, tar = None, float("nan")
    weights = w if verifier is not None else np.ones(B * T)

    values, G = _kernels.div_grad(kind.code, kind.alpha_value, P, Z)
    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(G))):
        raise NumericError("non-finite divergence or gradient")
    # per-sequence mean over T tokens, then batch mean; fsum keeps it order-free
    loss = math.fsum(weights * values) / (T * B)
    raw = math.fsum(values) / (T * B)
    scale = weights / (T * B)
    uniq, inv = np.unique(s_rows, return_inverse=True)
    acc = np.zeros((len(uniq), student.vocab_size))
    _kernels.scatter_rows(acc, inv, G, scale)
    return StepResult(loss, raw, tar, uniq, acc, weights)


def train_step(student: NGramModel, teacher: NGramModel, batch, cfg: TrainingConfig, rng=None, optimizer=None,
               step: int = 0, fraction: float = 0.0):
    """One update. Returns ``(new_student, StepRecord)``; ``student`` is left untouched."""
    if not isinstance(batch, SequenceBatch):
        batch = SequenceBatch.from_sequences(list(batch))
    if cfg.verifier is not None:
        cfg.verifier.check_vocab(student.vocab_size)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if optimizer is None:
        optimizer = cfg.make_optimizer()
    kind = cfg.loss_kind(batch.origin, fraction)
    t0 = time.perf_counter()
    try:
        # overflow surfaces through the explicit finiteness checks instead
        with np.errstate(over="ignore", invalid="ignore"):
            res = compute_step(student, teacher, batch, kind, cfg.verifier, cfg.shadow_verifier, rng)
            new = student.copy()
            apply_dense(new, res.rows, res.grads, optimizer)
    except NumericError as e:
        raise NumericError(str(e), step=step) from None
    wall = (time.perf_counter() - t0) * 1000.0 if cfg.record_timing else 0.0
    rec = StepRecord(step, res.loss, res.tar, res.raw_div, cfg.alpha_t(fraction), cfg.alpha_s(fraction), wall,
                     batch.origin.value)
    return new, rec


def random_prompts(rng: np.random.Generator, n: int, length: int, vocab_size: int) -> np.ndarray:
    return rng.integers(0, vocab_size, size=(n, length), dtype=np.int64)


def teacher_pool(teacher: NGramModel, cfg: TrainingConfig, rng: np.random.Generator) -> np.ndarray:
    """Off-policy data: ``pool_size`` teacher rollouts, as a ``[N, prompt + seq]`` token array."""
    prompts = random_prompts(rng, cfg.pool_size, cfg.prompt_length, teacher.vocab_size)
    comp = generate_batch(teacher, prompts, cfg.seq_length, GenMode.SAMPLE, 1.0, rng)
    return np.concatenate([prompts, comp], axis=1)


def run_training(cfg: TrainingConfig, teacher: NGramModel, initial_student: NGramModel, callback=None):
    """Full loop. Deterministic given ``cfg.seed``; returns ``(student, trace)``.

    The seed spawns three streams: teacher-pool generation, per-step data
    (pool draws, on-policy rollouts, the on/off-policy coin) and
    verification. Verifier randomness therefore never shifts the data.
    """
    if cfg.verifier is not None:
        cfg.verifier.check_vocab(teacher.vocab_size)
    pool_rng, data_rng, verify_rng = np.random.default_rng(cfg.seed).spawn(3)
    pool = teacher_pool(teacher, cfg, pool_rng)
    optimizer = cfg.make_optimizer()
    student = initial_student.copy()
    trace = TrainingTrace()
    denom = max(cfg.steps - 1, 1)
    for step in range(cfg.steps):
        fraction = step / denom
        on_policy = data_rng.random() < cfg.mu
        if on_policy:
            prompts = random_prompts(data_rng, cfg.batch_size, cfg.prompt_length, student.vocab_size)
            comp = generate_batch(student, prompts, cfg.seq_length, GenMode.SAMPLE, 1.0, data_rng)
            batch = SequenceBatch(np.concatenate([prompts, comp], axis=1), cfg.prompt_length, Origin.STUDENT)
        else:
            idx = data_rng.integers(0, pool.shape[0], size=cfg.batch_size)
            batch = SequenceBatch(pool[idx], cfg.prompt_length, Origin.TEACHER)
        try:
            student, rec = train_step(student, teacher, batch, cfg, verify_rng, optimizer, step, fraction)
        except NumericError:
            trace.aborted_at = step
            raise
        trace.records.append(rec)
        if callback is not None:
            callback(step, student, rec)
    return student, trace


def moving_average(x: Iterable[float], window: int = 20) -> np.ndarray:
    if window < 1:
        raise ParameterError("window must be >= 1")
    x = np.asarray(list(x), dtype=np.float64)
    if x.size == 0:
        return x
    if x.size < window:
        return np.array([x.mean()])
    # each window summed on its own: a running cumsum drifts on long flat traces
    return np.lib.stride_tricks.sliding_window_view(x, window).mean(axis=1)
