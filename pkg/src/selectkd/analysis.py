"""Experiment harnesses: gradient checks, fixed-point and TAR studies,
loss-landscape probes, and a speculative-decoding simulator."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .divergence import DivergenceKind, FKL, batch_values_grads, divergence
from .errors import ParameterError
from .models import GenMode, NGramModel, corpus_teacher, generate_batch, Origin, Sequence, random_teacher
from .prob_core import softmax, softmax_rows
from .trainer import TrainingConfig, TrainingTrace, moving_average, random_prompts, run_training, teacher_pool
from .verifier import Mode

REL_TOL = 1e-6


# --------------------------------------------------------------------------
# gradient check
# --------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    kind: str
    trials: int
    vocab_size: int
    epsilon: float
    max_rel_error: float
    failures: list[tuple[str, float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < REL_TOL

    def to_dict(self):
        d = asdict(self)
        d["failures"] = [list(f) for f in self.failures]
        d["passed"] = self.passed
        return d


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
    return h.hexdigest()[:12]


def fd_gradient(kind: DivergenceKind, p: np.ndarray, z: np.ndarray, epsilon: float = 1e-5) -> np.ndarray:
    """Central differences of ``D(p || softmax(z))`` using the scalar divergence path."""
    g = np.empty_like(z)
    for i in range(z.shape[0]):
        zp, zm = z.copy(), z.copy()
        zp[i] += epsilon
        zm[i] -= epsilon
        g[i] = (divergence(kind, p, softmax(zp)) - divergence(kind, p, softmax(zm))) / (2.0 * epsilon)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def grad_check(kind: DivergenceKind, trials: int = 100, vocab_size: int = 6, epsilon: float = 1e-5,
               seed: int = 0) -> GradCheckReport:
    """Compare analytic logit gradients against central finite differences.

    Each trial draws ``p ~ Dirichlet(1)`` and ``z`` uniform in [-4, 4].
    The error is norm-wise relative, with the denominator floored at 1e-8.
    """
    if trials < 1:
        raise ParameterError("trials must be >= 1")
    if vocab_size < 2:
        raise ParameterError("vocab_size must be >= 2")
    if not 1e-7 <= epsilon <= 1e-3:
        raise ParameterError(f"epsilon={epsilon} outside [1e-7, 1e-3]")
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(vocab_size), size=trials)
    Z = rng.uniform(-4.0, 4.0, size=(trials, vocab_size))
    _, G = batch_values_grads(kind, P, Z)
    worst, failures = 0.0, []
    for n in range(trials):
        err = relative_error(G[n], fd_gradient(kind, P[n], Z[n], epsilon))
        worst = max(worst, err)
        if not err < REL_TOL:
            failures.append((_digest(P[n], Z[n]), err))
    return GradCheckReport(kind.label(), trials, vocab_size, epsilon, worst, failures)


# --------------------------------------------------------------------------
# fixed-point study
# --------------------------------------------------------------------------

def row_tv(student: NGramModel, reference: NGramModel) -> np.ndarray:
    return 0.5 * np.abs(softmax_rows(student.logits) - reference.probs()).sum(axis=1)


def visit_counts(model: NGramModel, tokens: np.ndarray, prompt_len: int) -> np.ndarray:
    rows = model.context_rows(tokens, prompt_len).ravel()
    return np.bincount(rows, minlength=model.n_rows)


@dataclass
class FixedPointReport:
    kinds: list[str]
    steps: int
    row_tv: dict[str, list[float]]
    mean_tv: dict[str, float]
    visits: list[int]
    min_visits: int

    @property
    def spread(self) -> float:
        vals = list(self.mean_tv.values())
        return max(vals) - min(vals)

    def verdict(self, tol: float = 1e-3, spread_tol: float = 2e-3) -> bool:
        return all(v < tol for v in self.mean_tv.values()) and self.spread < spread_tol

    def to_dict(self):
        d = asdict(self)
        d["spread"] = self.spread
        d["passed"] = self.verdict()
        return d


def _train_one(args):
    cfg, teacher, student = args
    return run_training(cfg, teacher, student)[0]


def fixed_point_study(kinds, teacher: NGramModel, cfg: TrainingConfig, initial_student: NGramModel | None = None,
                      min_visits: int = 50, workers: int = 1, steps: int | None = None) -> FixedPointReport:
    """Train one student per divergence kind (same seed, same data) and report TV to the teacher.

    ``steps`` overrides ``cfg.steps``; ``steps=0`` is the report-only path,
    giving the TV of the initial student. Means are over rows visited at least ``min_visits`` times by the
    teacher pool over the run.
    """
    kinds = list(kinds)
    if not kinds:
        raise ParameterError("no divergence kinds given")
    if initial_student is None:
        initial_student = NGramModel.uniform(teacher.vocab_size, teacher.order, teacher.bos_token)
    if steps is not None and steps < 0:
        raise ParameterError("steps must be >= 0")
    if steps == 0:
        students = [initial_student.copy() for _ in kinds]
        visits = np.zeros(initial_student.n_rows, dtype=np.int64)
        mask = np.ones(initial_student.n_rows, dtype=bool)
    else:
        if steps is not None:
            cfg = _with(cfg, steps=steps)
        jobs = [(_with(cfg, divergence=k, verifier=None), teacher, initial_student) for k in kinds]
        if workers > 1:
            with ProcessPoolExecutor(workers) as ex:
                students = list(ex.map(_train_one, jobs))
        else:
            students = [_train_one(j) for j in jobs]
        pool = teacher_pool(teacher, cfg, np.random.default_rng(cfg.seed).spawn(3)[0])
        # expected visits over the run: pool frequency times positions drawn
        per_pool = visit_counts(initial_student, pool, cfg.prompt_length)
        visits = np.round(per_pool * (cfg.steps * cfg.batch_size / pool.shape[0])).astype(np.int64)
        mask = visits >= min_visits
        if not mask.any():
            mask[:] = True
    row = {k.label(): row_tv(s, teacher).tolist() for k, s in zip(kinds, students)}
    mean = {name: float(np.mean(np.asarray(tv)[mask])) for name, tv in row.items()}
    n_steps = cfg.steps if steps is None else steps
    return FixedPointReport([k.label() for k in kinds], n_steps, row, mean, visits.tolist(), min_visits)


def _with(cfg: TrainingConfig, **changes) -> TrainingConfig:
    d = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    d.update(changes)
    return TrainingConfig(**d)


# --------------------------------------------------------------------------
# TAR study
# --------------------------------------------------------------------------

@dataclass
class TarStudyReport:
    tar: list[float]
    moving_avg: list[float]
    window: int
    max_drawdown: float
    slope: float
    initial: float
    final: float
    slack: float
    passed: bool

    @property
    def gain(self) -> float:
        return self.final - self.initial

    def to_dict(self):
        d = asdict(self)
        d["gain"] = self.gain
        return d


def tar_verdict(tar, window: int = 20, slack: float = 0.02) -> TarStudyReport:
    """Quasi-monotonicity check on a TAR trace.

    Passes when the trailing ``window``-step moving average never falls
    more than ``slack`` below its running maximum, and the least-squares
    slope of the per-step change of that average against ``1 - average``
    is nonnegative.
    """
    tar = np.asarray(tar, dtype=np.float64)
    ma = moving_average(tar, window)
    drawdown = float(np.max(np.maximum.accumulate(ma) - ma)) if ma.size else 0.0
    slope = 0.0
    if ma.size >= 3:
        d = np.diff(ma)
        x = 1.0 - ma[:-1]
        xc = x - x.mean()
        var = float(np.dot(xc, xc))
        # rounding noise on a flat trace must not read as a negative slope
        if var > 1e-20:
            slope = float(np.dot(xc, d - d.mean()) / var)
    passed = drawdown <= slack and slope >= 0.0
    return TarStudyReport(tar.tolist(), ma.tolist(), window, drawdown, slope, float(ma[0]), float(ma[-1]), slack,
                          passed)


def tar_study(cfg: TrainingConfig, teacher: NGramModel, student: NGramModel, window: int = 20,
              slack: float = 0.02):
    """Run selective training and judge the TAR curve. Returns ``(report, trace, student)``."""
    if cfg.verifier is None or cfg.verifier.mode is Mode.HELLINGER:
        raise ParameterError("tar_study needs a greedy or Spec-k verifier")
    final, trace = run_training(cfg, teacher, student)
    return tar_verdict(trace.tar, window, slack), trace, final


# --------------------------------------------------------------------------
# loss landscape
# --------------------------------------------------------------------------

@dataclass
class LandscapeLoss:
    """Expected divergence to ``teacher`` over a fixed, weighted set of contexts."""

    teacher: NGramModel
    kind: DivergenceKind
    student_rows: np.ndarray
    teacher_rows: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_tokens(cls, teacher: NGramModel, student: NGramModel, tokens: np.ndarray, prompt_len: int,
                    kind: DivergenceKind = FKL) -> "LandscapeLoss":
        s = student.context_rows(tokens, prompt_len).ravel()
        t = teacher.context_rows(tokens, prompt_len).ravel()
        pairs, counts = np.unique(np.stack([s, t], axis=1), axis=0, return_counts=True)
        return cls(teacher, kind, pairs[:, 0], pairs[:, 1], counts / counts.sum())

    def __call__(self, logits: np.ndarray) -> float:
        P = self.teacher.probs()[self.teacher_rows]
        values, _ = batch_values_grads(self.kind, P, logits[self.student_rows])
        return float(math.fsum(self.weights * values))

    def gradient(self, logits: np.ndarray) -> np.ndarray:
        P = self.teacher.probs()[self.teacher_rows]
        _, G = batch_values_grads(self.kind, P, logits[self.student_rows])
        out = np.zeros_like(logits)
        np.add.at(out, self.student_rows, G * self.weights[:, None])
        return out


@dataclass
class LandscapeProbe:
    direction_seeds: list[int]
    radii: list[float]
    losses: np.ndarray
    sharpness: float

    def to_dict(self):
        return {"direction_seeds": self.direction_seeds, "radii": self.radii, "losses": self.losses.tolist(),
                "sharpness": self.sharpness}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["direction_seed"] + [repr(float(r)) for r in self.radii])
        for s, row in zip(self.direction_seeds, self.losses):
            w.writerow([s] + [repr(float(v)) for v in row])
        return buf.getvalue()


def row_normalized_direction(logits: np.ndarray, seed: int) -> np.ndarray:
    """Random direction, centred per row and rescaled to each row's centred norm.

    The tabular counterpart of filter normalisation: a row's softmax ignores
    its mean, so only the centred part of row and direction counts.
    """
    rng = np.random.default_rng(seed)
    d = rng.standard_normal(logits.shape)
    d -= d.mean(axis=1, keepdims=True)
    centred = logits - logits.mean(axis=1, keepdims=True)
    dn = np.linalg.norm(d, axis=1, keepdims=True)
    tn = np.linalg.norm(centred, axis=1, keepdims=True)
    return d * np.where(dn > 0, tn / np.where(dn > 0, dn, 1.0), 0.0)


def landscape_probe(model: NGramModel, loss: LandscapeLoss, n_directions: int = 10, radii=None,
                    seed: int = 0) -> LandscapeProbe:
    """Loss along ``n_directions`` row-normalised random directions.

    Direction ``i`` is generated from seed ``seed + i``, so two models probed
    with the same ``seed`` share the underlying random draws. Sharpness is
    the largest rise from the base loss at the outermost radius.
    """
    if n_directions < 2:
        raise ParameterError("n_directions must be >= 2")
    radii = np.linspace(0.0, 1.0, 21) if radii is None else np.asarray(radii, dtype=np.float64)
    seeds = [seed + i for i in range(n_directions)]
    base = loss(model.logits)
    out = np.empty((n_directions, radii.size))
    for i, s in enumerate(seeds):
        d = row_normalized_direction(model.logits, s)
        for j, r in enumerate(radii):
            out[i, j] = base if r == 0.0 else loss(model.logits + r * d)
    r_max = int(np.argmax(np.abs(radii)))
    sharp = float(np.max(out[:, r_max] - base))
    return LandscapeProbe(seeds, radii.tolist(), out, sharp)


# --------------------------------------------------------------------------
# speculative decoding
# --------------------------------------------------------------------------

@dataclass
class SpecSimReport:
    acceptance_rate: float
    accepted_tokens_per_round: float
    tokens_per_round: float
    speedup_estimate: float
    gamma: int
    rounds: int
    cost_ratio: float
    drafted: int
    evaluated: int
    accepted: int
    tokens: list[np.ndarray] = field(default_factory=list, repr=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("tokens")
        return d


def spec_decode_sim(drafter: NGramModel, target: NGramModel, prompts, gamma: int, rounds: int,
                    rng: np.random.Generator, cost_ratio: float = 0.1) -> SpecSimReport:
    """Speculative decoding with residual resampling, one stream per prompt.

    Rounds are assigned to prompts round-robin; each stream continues from
    its own history. Every round draws ``2 * gamma + 1`` uniforms: a draft
    and an acceptance uniform per drafted token, then one for the
    resampled or bonus token.
    """
    if gamma < 1:
        raise ParameterError("gamma must be >= 1")
    if rounds < 1:
        raise ParameterError("rounds must be >= 1")
    if cost_ratio < 0:
        raise ParameterError("cost_ratio must be >= 0")
    if drafter.vocab_size != target.vocab_size or drafter.order != target.order:
        raise ParameterError("drafter and target must share vocabulary size and order")
    prompts = [list(p) for p in prompts]
    if not prompts:
        raise ParameterError("no prompts")
    states = np.array([target.row_index(p) for p in prompts], dtype=np.int64)
    draft = drafter.probs()
    tgt = target.probs()
    U = rng.random((rounds, 2 * gamma + 1))
    emitted, n_emit, n_acc, _ = _kernels.spec_decode(np.cumsum(draft, axis=1), draft, tgt, states, gamma, U,
                                                     target.vocab_size, target.n_rows)
    S = len(prompts)
    streams = []
    for s in range(S):
        e = emitted[s::S]
        streams.append(e[e >= 0])
    drafted = rounds * gamma
    # drafts after the first rejection never reach the acceptance test
    evaluated = int(np.minimum(n_acc + 1, gamma).sum())
    accepted = int(n_acc.sum())
    per_round = float(n_emit.mean())
    return SpecSimReport(accepted / evaluated, accepted / rounds, per_round, per_round / (1.0 + cost_ratio * gamma),
                         gamma, rounds, cost_ratio, drafted, evaluated, accepted, streams)


# --------------------------------------------------------------------------
# noisy-teacher setup
# --------------------------------------------------------------------------

@dataclass
class NoisySetup:
    """A clean reference, a teacher with corrupted rows, and an SFT-style student.

    The teacher equals the reference except on ``noise_rows``, which are
    replaced by peaked random rows. The SFT student is an add-one n-gram
    estimate from a small sample of reference rollouts.
    """

    reference: NGramModel
    teacher: NGramModel
    sft_student: NGramModel
    noise_rows: np.ndarray


def noisy_setup(vocab_size: int = 16, order: int = 1, concentration: float = 5.0, noise_fraction: float = 0.25,
                noise_concentration: float = 0.05, sft_sequences: int = 16, sft_length: int = 16,
                seed: int = 0) -> NoisySetup:
    if concentration < 5.0:
        raise ParameterError("the noisy-teacher setup expects a high-entropy reference (concentration >= 5)")
    rng = np.random.default_rng(seed)
    s_ref, s_noise, s_pick, s_sft = rng.integers(0, 2**31 - 1, size=4)
    reference = random_teacher(vocab_size, order, concentration, int(s_ref))
    noise = random_teacher(vocab_size, order, noise_concentration, int(s_noise))
    n_noisy = max(1, int(round(noise_fraction * reference.n_rows)))
    rows = np.sort(np.random.default_rng(int(s_pick)).choice(reference.n_rows, n_noisy, replace=False))
    teacher = reference.copy()
    teacher.logits[rows] = noise.logits[rows]
    srng = np.random.default_rng(int(s_sft))
    prompts = random_prompts(srng, sft_sequences, 1, vocab_size)
    comp = generate_batch(reference, prompts, sft_length, GenMode.SAMPLE, 1.0, srng)
    corpus = [Sequence(p.tolist(), c.tolist(), Origin.CORPUS) for p, c in zip(prompts, comp)]
    sft = corpus_teacher(corpus, order, smoothing=1.0, vocab_size=vocab_size, bos_token=reference.bos_token)
    return NoisySetup(reference, teacher, sft, rows)


# --------------------------------------------------------------------------
# report files
# --------------------------------------------------------------------------

def output_dir(path=None) -> Path:
    env = os.environ.get("SELECTKD_OUT")
    out = Path(path if path is not None else (env or "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=1, sort_keys=False, default=_json_default)
        f.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def trace_csv(trace: TrainingTrace) -> str:
    return trace.to_csv()
