"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python3 tests/test_acceptance.py``.
"""

import functools
import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import chi2

from selectkd.analysis import (
    LandscapeLoss, _with, fixed_point_study, grad_check, landscape_probe, noisy_setup, row_tv, spec_decode_sim,
    tar_study,
)
from selectkd.cli import main as cli_main
from selectkd.divergence import FKL, RKL, SKL, SRKL
from selectkd.models import NGramModel, Origin, from_bytes, random_teacher, to_bytes
from selectkd.trainer import SequenceBatch, TrainingConfig, run_training, teacher_pool, train_step
from selectkd.verifier import Mode, VerifierConfig, verify_batch

KINDS = [FKL, RKL, SKL(0.1), SKL(0.5), SRKL(0.1), SRKL(0.5)]
SEEDS = range(5)


def report(number, title, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title} :: {detail}"
    print(line, file=sys.__stdout__, flush=True)
    return passed


# --------------------------------------------------------------------------
# 1. gradient oracle
# --------------------------------------------------------------------------

def check_1():
    t0 = time.perf_counter()
    worst = 0.0
    for kind in KINDS:
        for V in (2, 6, 32):
            worst = max(worst, grad_check(kind, 100, V, 1e-5, seed=V).max_rel_error)
    dt = time.perf_counter() - t0
    return report(1, "analytic gradients vs central differences", worst < 1e-6 and dt < 10,
                  f"max_rel_error={worst:.3e} (<1e-6) runtime={dt:.2f}s (<10s)")


# --------------------------------------------------------------------------
# 2. fixed-point convergence
# --------------------------------------------------------------------------

def check_2():
    teacher = random_teacher(8, 1, 1.0, 3)
    cfg = TrainingConfig(verifier=None, optimizer="sgd", lr=2.0, steps=5000, batch_size=8, seq_length=8,
                         pool_size=256, seed=1)
    t0 = time.perf_counter()
    rep = fixed_point_study(KINDS, teacher, cfg, NGramModel.uniform(8, 1))
    per_kind = (time.perf_counter() - t0) / len(KINDS)
    worst = max(rep.mean_tv.values())
    ok = rep.verdict(1e-3, 2e-3) and per_kind < 60
    return report(2, "fixed-point convergence, 5000 steps, vocab 8", ok,
                  f"max mean TV={worst:.2e} (<1e-3) spread={rep.spread:.2e} (<2e-3) per-kind={per_kind:.1f}s")


# --------------------------------------------------------------------------
# 3. Spec-k acceptance statistics
# --------------------------------------------------------------------------

def check_3():
    rng = np.random.default_rng(2024)
    N, k = 100_000, 5
    t0 = time.perf_counter()
    worst1 = worst_k = 0.0
    for _ in range(20):
        p, q = rng.dirichlet(np.ones(8)), rng.dirichlet(np.ones(8))
        r = float(np.sum(q * np.minimum(1.0, p / q)))
        P, Q = np.tile(p, (N, 1)), np.tile(q, (N, 1))
        _, ok1 = verify_batch(P, Q, VerifierConfig(Mode.SPEC, 1, 0.0), rng)
        worst1 = max(worst1, abs(ok1.mean() - r) / np.sqrt(r * (1 - r) / N))
        rk = 1 - (1 - r) ** k
        _, okk = verify_batch(P, Q, VerifierConfig(Mode.SPEC, k, 0.0), rng)
        worst_k = max(worst_k, abs(okk.mean() - rk) / np.sqrt(rk * (1 - rk) / N))
    dt = time.perf_counter() - t0
    ok = worst1 <= 3 and worst_k <= 4 and dt < 30
    return report(3, "Spec-k acceptance statistics, 20 pairs x 1e5 trials", ok,
                  f"single max |z|={worst1:.2f} (<=3) k=5 max |z|={worst_k:.2f} (<=4) runtime={dt:.1f}s")


# --------------------------------------------------------------------------
# 4. speculative sampling preserves the target distribution
# --------------------------------------------------------------------------

def check_4():
    V = 8
    pvals = []
    for pair in range(5):
        drafter = random_teacher(V, 1, 1.0, 500 + pair)
        target = random_teacher(V, 1, 2.0, 600 + pair)
        prompts = [[i] for i in range(4)]
        rep = spec_decode_sim(drafter, target, prompts, 1, 100_000, np.random.default_rng(pair))
        counts = np.zeros((V, V))
        for prompt, stream in zip(prompts, rep.tokens):
            seq = np.concatenate([prompt, stream]).astype(np.int64)
            np.add.at(counts, (seq[:-1], seq[1:]), 1)
        expected = counts.sum(axis=1, keepdims=True) * target.probs()
        stat = float(np.sum((counts - expected) ** 2 / expected))
        dof = int(np.sum(counts.sum(axis=1) > 0)) * (V - 1)
        pvals.append(chi2.sf(stat, dof))
    ok = min(pvals) > 1e-3
    return report(4, "speculative sampling marginals, gamma=1, 5 pairs x 1e5 rounds", ok,
                  f"min chi-square p={min(pvals):.4f} (>0.001)")


# --------------------------------------------------------------------------
# 5. TAR monotonicity
# --------------------------------------------------------------------------

def check_5():
    t0 = time.perf_counter()
    rows, passes = [], 0
    for s in SEEDS:
        teacher = random_teacher(16, 1, 0.1, 100 + s)
        student = random_teacher(16, 1, 0.1, 200 + s)
        cfg = TrainingConfig(verifier=VerifierConfig(Mode.SPEC, 5, 0.01), optimizer="adam", lr=0.05, steps=600,
                             batch_size=64, seq_length=32, pool_size=1024, seed=s)
        rep, _, _ = tar_study(cfg, teacher, student, 20, 0.02)
        good = rep.passed and rep.gain >= 0.1
        passes += good
        rows.append(f"s{s}:dd={rep.max_drawdown:.4f},slope={rep.slope:.3f},gain={rep.gain:.2f}")
    dt = time.perf_counter() - t0
    ok = passes == len(SEEDS) and dt < 60
    return report(5, "TAR monotonicity on the default toy distillation", ok,
                  f"{passes}/5 seeds pass; {' '.join(rows)}; runtime={dt:.1f}s")


# --------------------------------------------------------------------------
# 6. masking semantics
# --------------------------------------------------------------------------

def check_6():
    V = 4
    tl = np.full((V, V), -10.0)
    tl[:, 0] = 0.0
    sl = np.full((V, V), -10.0)
    sl[:, 1] = 0.0
    teacher, student = NGramModel(V, 1, tl), NGramModel(V, 1, sl)
    toks = np.random.default_rng(0).integers(0, V, size=(16, 9))
    batch = SequenceBatch(toks, 1, Origin.TEACHER)
    masked_ok = True
    for opt in ("sgd", "adam"):
        cfg = TrainingConfig(verifier=VerifierConfig(Mode.GREEDY, 1, 0.0), optimizer=opt, lr=1.0)
        new, rec = train_step(student, teacher, batch, cfg)
        masked_ok &= rec.tar == 0.0 and new.logits.tobytes() == student.logits.tobytes()

    identical = True
    t2, s2 = random_teacher(6, 1, 0.3, 1), random_teacher(6, 1, 0.3, 2)
    for kind in KINDS:
        base = dict(divergence=kind, steps=50, batch_size=8, seq_length=8, mu=0.5, optimizer="adam", seed=3)
        a, _ = run_training(TrainingConfig(verifier=VerifierConfig(Mode.GREEDY, 6, 0.01), **base), t2, s2)
        b, _ = run_training(TrainingConfig(verifier=None, **base), t2, s2)
        identical &= a.logits.tobytes() == b.logits.tobytes()
    return report(6, "masking semantics", masked_ok and identical,
                  f"beta=0 fully rejected step leaves parameters unchanged={masked_ok}; "
                  f"k=vocab runs bit-identical to vanilla for 6 kinds={identical}")


# --------------------------------------------------------------------------
# 7 and 8. noisy-teacher robustness and landscape
# --------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def robustness_runs():
    out = []
    for s in SEEDS:
        ns = noisy_setup(seed=s, noise_fraction=0.125, sft_sequences=8)
        cfg = TrainingConfig(verifier=VerifierConfig(Mode.SPEC, 5, 0.01), steps=300, batch_size=32, seq_length=16,
                             mu=0.5, pairing=True, optimizer="sgd", lr=0.5, pool_size=512, seed=s)
        selective, _ = run_training(cfg, ns.teacher, ns.sft_student)
        vanilla, _ = run_training(_with(cfg, verifier=None), ns.teacher, ns.sft_student)
        pool = teacher_pool(ns.teacher, cfg, np.random.default_rng(99))
        row = {}
        for name, model in (("sft", ns.sft_student), ("vanilla", vanilla), ("selective", selective)):
            sim = spec_decode_sim(model, ns.reference, [[i] for i in range(16)], 4, 20_000, np.random.default_rng(7))
            loss = LandscapeLoss.from_tokens(ns.teacher, model, pool, 1, FKL)
            probe = landscape_probe(model, loss, 10, seed=11)
            row[name] = {"tv": float(row_tv(model, ns.reference).mean()), "acc": sim.acceptance_rate,
                         "sharp": probe.sharpness, "dirs": tuple(probe.direction_seeds)}
        out.append(row)
    return out


def _mean(runs, name, key):
    return float(np.mean([r[name][key] for r in runs]))


def check_7():
    runs = robustness_runs()
    tv = {n: _mean(runs, n, "tv") for n in ("sft", "vanilla", "selective")}
    acc = {n: _mean(runs, n, "acc") for n in ("sft", "vanilla", "selective")}
    ok = tv["selective"] < tv["vanilla"] and acc["selective"] > acc["vanilla"] > acc["sft"]
    return report(7, "noisy-teacher robustness ordering, mean of 5 seeds", ok,
                  "TV sel={selective:.4f} van={vanilla:.4f} sft={sft:.4f}; ".format(**tv)
                  + "acceptance sel={selective:.4f} van={vanilla:.4f} sft={sft:.4f}".format(**acc))


def check_8():
    runs = robustness_runs()
    same_dirs = all(r["selective"]["dirs"] == r["vanilla"]["dirs"] for r in runs)
    sel, van = _mean(runs, "selective", "sharp"), _mean(runs, "vanilla", "sharp")
    return report(8, "landscape sharpness, selective vs vanilla, mean of 5 seeds", same_dirs and sel <= van,
                  f"sharpness sel={sel:.4f} van={van:.4f} identical directions={same_dirs}")


# --------------------------------------------------------------------------
# 9. determinism and formats
# --------------------------------------------------------------------------

def check_9():
    notes = []
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        same = True
        for d in ("a", "b"):
            cli_main(["train", "default", "--steps", "40", "--seed", "5", "--set", "training.mu=0.5", "--out",
                      str(tmp / d)])
            cli_main(["study", "tar", "default", "--steps", "60", "--out", str(tmp / d)])
        for name in ("train-0.csv", "train-0.json", "student-0.bin", "tar-0.csv", "tar-0.json"):
            name = name.replace("-0.", "-5.") if name.startswith(("train", "student")) else name
            same &= (tmp / "a" / name).read_bytes() == (tmp / "b" / name).read_bytes()
        notes.append(f"byte-identical reruns={same}")
        m = random_teacher(7, 2, 0.3, 4, bos_token=2)
        m.logits[0, 0] = -0.0
        back = from_bytes(to_bytes(m))
        rt = back.logits.tobytes() == m.logits.tobytes() and (back.vocab_size, back.order, back.bos_token) == (7, 2, 2)
        notes.append(f"model round-trip={rt}")
        golden = [
            (["gradcheck", "--kind", "fkl", "--trials", "100", "--vocab", "6", "--seed", "1", "--out", str(tmp)], 0),
            (["gradcheck", "--kind", "skl", "--out", str(tmp)], 2),
            (["gradcheck", "--kind", "rkl", "--trials", "0", "--out", str(tmp)], 2),
            (["study", "nonsense", "x.cfg"], 2),
            (["train", str(tmp / "missing.json")], 2),
            (["train", "default", "--steps", "20", "--set", "training.lr=1e308", "--out", str(tmp)], 1),
            (["study", "fixed-point", "default", "--steps", "20", "--out", str(tmp)], 1),
            (["study", "spec-sim", "default", "--set", 'studies.spec-sim.drafter="teacher"', "--set",
              "studies.spec-sim.rounds=200", "--out", str(tmp)], 0),
        ]
        codes = [cli_main(argv) for argv, _ in golden]
        exits = codes == [c for _, c in golden]
        sim = json.loads((tmp / "spec-sim-0.json").read_text())["acceptance_rate"] == 1.0
        notes.append(f"exit codes {codes} golden={exits}")
    return report(9, "determinism, serialization and CLI exit codes", same and rt and exits and sim, "; ".join(notes))


CHECKS = [check_1, check_2, check_3, check_4, check_5, check_6, check_7, check_8, check_9]


@pytest.mark.parametrize("check", CHECKS, ids=[f"criterion_{i}" for i in range(1, 10)])
def test_criterion(check, capsys, monkeypatch):
    monkeypatch.delenv("SELECTKD_OUT", raising=False)
    with capsys.disabled():
        print()
        assert check()


if __name__ == "__main__":
    results = [c() for c in CHECKS]
    print(f"{sum(results)}/{len(results)} criteria pass")
    sys.exit(0 if all(results) else 1)
