"""Command-line front end.

    selectkd gradcheck --kind skl --alpha 0.1 --trials 100 --vocab 6
    selectkd train CONFIG [--seed N] [--steps N] [--out DIR] [--set key=value ...]
    selectkd study {fixed-point,tar,landscape,spec-sim} CONFIG [...]

``CONFIG`` is a JSON file or the word ``default`` for the bundled config.
Exit codes: 0 success/pass, 1 runtime failure or failed verdict,
2 usage or validation error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from pathlib import Path

import numpy as np

from . import analysis, config as config_mod
from .divergence import DivergenceKind, Kind
from .errors import NumericError, ParameterError
from .models import NGramModel, load_model, random_teacher, save_model
from .trainer import run_training, teacher_pool

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def summary(**pairs) -> str:
    parts = []
    for k, v in pairs.items():
        if isinstance(v, float):
            v = repr(v)
        elif isinstance(v, bool):
            v = int(v)
        parts.append(f"{k}={v}")
    return " ".join(parts)


def resolve_out(flag, cfg_out=None) -> Path:
    import os

    if flag is not None:
        path = flag
    elif os.environ.get("SELECTKD_OUT"):
        path = os.environ["SELECTKD_OUT"]
    elif cfg_out is not None:
        path = cfg_out
    else:
        path = "."
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# model construction from config
# --------------------------------------------------------------------------

def build_models(cfg: config_mod.ExperimentConfig):
    """``(teacher, student, extras)``; extras holds the reference model for noisy teachers."""
    t = cfg.teacher
    extras = {}
    if t["type"] == "random":
        teacher = random_teacher(t.get("vocab_size", 16), t.get("order", 1), t.get("concentration", 1.0),
                                 t.get("seed", 0), t.get("bos_token", 0))
    elif t["type"] == "file":
        teacher = load_model(t["path"])
    else:
        kw = {k: v for k, v in t.items() if k != "type"}
        setup = analysis.noisy_setup(**kw)
        teacher = setup.teacher
        extras = {"reference": setup.reference, "sft": setup.sft_student, "noise_rows": setup.noise_rows}
    s = cfg.student
    if s["type"] == "uniform":
        student = NGramModel.uniform(teacher.vocab_size, teacher.order, teacher.bos_token)
    elif s["type"] == "teacher":
        student = teacher.copy()
    elif s["type"] == "random":
        student = random_teacher(teacher.vocab_size, teacher.order, s.get("concentration", 1.0), s.get("seed", 0),
                                 teacher.bos_token)
    elif s["type"] == "file":
        student = load_model(s["path"])
    else:
        student = extras["sft"].copy()
    return teacher, student, extras


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_gradcheck(args, parser) -> int:
    try:
        kind = Kind(args.kind.lower())
    except ValueError:
        parser.error(f"--kind must be one of {[k.value for k in Kind]}")
    skewed = kind in (Kind.SKL, Kind.SRKL)
    if skewed and args.alpha is None:
        parser.error(f"--kind {kind.value} requires --alpha")
    if not skewed and args.alpha is not None:
        parser.error(f"--kind {kind.value} takes no --alpha")
    if args.trials < 1:
        parser.error("--trials must be >= 1")
    if args.vocab < 2:
        parser.error("--vocab must be >= 2")
    if not 1e-7 <= args.epsilon <= 1e-3:
        parser.error("--epsilon must lie in [1e-7, 1e-3]")
    try:
        dk = DivergenceKind(kind, args.alpha)
    except ParameterError as e:
        parser.error(str(e))
    report = analysis.grad_check(dk, args.trials, args.vocab, args.epsilon, args.seed)
    out = resolve_out(args.out)
    path = out / f"gradcheck-{args.seed}.json"
    analysis.write_json(path, report.to_dict())
    print(summary(kind=report.kind, trials=report.trials, vocab=report.vocab_size,
                  max_rel_error=report.max_rel_error, passed=report.passed, report=str(path)))
    return EXIT_OK if report.passed else EXIT_FAIL


def _load_config(args):
    overrides = {}
    for text in args.set or []:
        overrides = config_mod.merge(overrides, config_mod.parse_assignment(text))
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = config_mod.load(args.config, overrides)
    return cfg


def _apply_steps(cfg, steps):
    if steps is not None:
        cfg.training = dict(cfg.training, steps=steps)
        for body in cfg.studies.values():
            if "training" in body:
                body["training"] = dict(body["training"], steps=steps)
    return cfg


def cmd_train(args) -> int:
    cfg = _apply_steps(_load_config(args), args.steps)
    tcfg = cfg.training_config()
    teacher, student, _ = build_models(cfg)
    try:
        final, trace = run_training(tcfg, teacher, student)
    except NumericError as e:
        print(summary(status="aborted", step=e.step, error=str(e).replace(" ", "_")))
        return EXIT_FAIL
    out = resolve_out(args.out, cfg.out_dir)
    model_path = out / f"student-{cfg.seed}.bin"
    save_model(final, model_path)
    trace.write(out / f"train-{cfg.seed}.csv", out / f"train-{cfg.seed}.json")
    last = trace.records[-1]
    print(summary(steps=len(trace), loss=last.loss, tar=last.tar, raw_div=last.raw_div,
                  model=str(model_path), trace=str(out / f"train-{cfg.seed}.csv")))
    return EXIT_OK


def _matrix_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


def _write_text(path, text):
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)


def study_fixed_point(cfg, params, out, workers):
    teacher, student, _ = build_models(cfg)
    tcfg = cfg.training_config()
    kinds = [DivergenceKind.parse(k) for k in params.get("kinds", ["fkl", "rkl", "skl:0.1", "srkl:0.1"])]
    report = analysis.fixed_point_study(kinds, teacher, tcfg, student, params.get("min_visits", 50), workers)
    tol, spread_tol = params.get("tol", 1e-3), params.get("spread_tol", 2e-3)
    passed = report.verdict(tol, spread_tol)
    payload = report.to_dict()
    payload.update(tol=tol, spread_tol=spread_tol, passed=passed)
    stem = out / f"fixed-point-{cfg.seed}"
    analysis.write_json(stem.with_suffix(".json"), payload)
    names = report.kinds
    rows = [[i] + [report.row_tv[n][i] for n in names] + [report.visits[i]] for i in range(len(report.visits))]
    _write_text(stem.with_suffix(".csv"), _matrix_csv(["row"] + names + ["visits"], rows))
    print(summary(study="fixed-point", passed=passed, spread=report.spread,
                  **{f"mean_tv_{n}": v for n, v in report.mean_tv.items()}))
    return passed


def study_tar(cfg, params, out, workers):
    teacher, student, _ = build_models(cfg)
    report, trace, _ = analysis.tar_study(cfg.training_config(), teacher, student, params.get("window", 20),
                                          params.get("slack", 0.02))
    stem = out / f"tar-{cfg.seed}"
    analysis.write_json(stem.with_suffix(".json"), report.to_dict())
    _write_text(stem.with_suffix(".csv"), trace.to_csv())
    print(summary(study="tar", passed=report.passed, initial=report.initial, final=report.final,
                  max_drawdown=report.max_drawdown, slope=report.slope))
    return report.passed


def study_landscape(cfg, params, out, workers):
    teacher, student, extras = build_models(cfg)
    tcfg = cfg.training_config()
    kind = DivergenceKind.parse(params.get("divergence", "fkl"))
    pool = teacher_pool(teacher, tcfg, np.random.default_rng(tcfg.seed).spawn(3)[0])
    runs = {"selective" if tcfg.verifier is not None else "vanilla": tcfg}
    if params.get("compare_vanilla", False) and tcfg.verifier is not None:
        runs["vanilla"] = analysis._with(tcfg, verifier=None)
    probes = {}
    for name, rc in runs.items():
        trained, _ = run_training(rc, teacher, student)
        loss = analysis.LandscapeLoss.from_tokens(teacher, trained, pool, tcfg.prompt_length, kind)
        probes[name] = analysis.landscape_probe(trained, loss, params.get("n_directions", 10), params.get("radii"),
                                                params.get("seed", 0))
    payload = {name: p.to_dict() for name, p in probes.items()}
    if len(probes) == 2:
        payload["flatter"] = probes["selective"].sharpness <= probes["vanilla"].sharpness
    stem = out / f"landscape-{cfg.seed}"
    analysis.write_json(stem.with_suffix(".json"), payload)
    radii = next(iter(probes.values())).radii
    rows = [[name, s] + list(r) for name, p in probes.items() for s, r in zip(p.direction_seeds, p.losses)]
    _write_text(stem.with_suffix(".csv"), _matrix_csv(["model", "direction_seed"] + [repr(float(r)) for r in radii],
                                                      rows))
    print(summary(study="landscape", **{f"sharpness_{n}": p.sharpness for n, p in probes.items()}))
    return True


def _pick_model(which, teacher, student, extras, cfg):
    if which == "teacher":
        return teacher
    if which == "student":
        return student
    if which == "reference":
        if "reference" not in extras:
            raise config_mod.ConfigError("'reference' needs a noisy teacher")
        return extras["reference"]
    if which == "trained":
        return run_training(cfg.training_config(), teacher, student)[0]
    return load_model(which)


def study_spec_sim(cfg, params, out, workers):
    teacher, student, extras = build_models(cfg)
    drafter = _pick_model(params.get("drafter", "student"), teacher, student, extras, cfg)
    target = _pick_model(params.get("target", "teacher"), teacher, student, extras, cfg)
    n_prompts = params.get("n_prompts", 16)
    prompts = [[i % target.vocab_size] for i in range(n_prompts)]
    report = analysis.spec_decode_sim(drafter, target, prompts, params.get("gamma", 4), params.get("rounds", 20000),
                                      np.random.default_rng(cfg.seed), params.get("cost_ratio", 0.1))
    analysis.write_json(out / f"spec-sim-{cfg.seed}.json", report.to_dict())
    print(summary(study="spec-sim", acceptance_rate=report.acceptance_rate,
                  tokens_per_round=report.tokens_per_round, speedup_estimate=report.speedup_estimate))
    return True


STUDY_RUNNERS = {
    "fixed-point": study_fixed_point,
    "tar": study_tar,
    "landscape": study_landscape,
    "spec-sim": study_spec_sim,
}


def cmd_study(args, parser) -> int:
    if args.name not in STUDY_RUNNERS:
        parser.error(f"unknown study {args.name!r}; choose from {', '.join(STUDY_RUNNERS)}")
    cfg = _apply_steps(_load_config(args), args.steps)
    scfg = cfg.for_study(args.name)
    out = resolve_out(args.out, cfg.out_dir)
    try:
        passed = STUDY_RUNNERS[args.name](scfg, cfg.study_params(args.name), out, args.workers)
    except NumericError as e:
        print(summary(status="aborted", step=e.step, error=str(e).replace(" ", "_")))
        return EXIT_FAIL
    return EXIT_OK if passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selectkd", description="Selective token-weighted distillation experiments")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference check of analytic logit gradients")
    g.add_argument("--kind", required=True)
    g.add_argument("--alpha", type=float)
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--vocab", type=int, default=6)
    g.add_argument("--epsilon", type=float, default=1e-5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")

    for name in ("train", "study"):
        c = sub.add_parser(name, help="run a training job" if name == "train" else "run an analysis study")
        if name == "study":
            c.add_argument("name", help="fixed-point, tar, landscape or spec-sim")
        c.add_argument("config", help="JSON config path, or 'default'")
        c.add_argument("--seed", type=int)
        c.add_argument("--steps", type=int)
        c.add_argument("--out")
        c.add_argument("--workers", type=int, default=1)
        c.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "steps", None) is not None and args.steps < 1:
            parser.error("--steps must be >= 1")
        if getattr(args, "workers", 1) < 1:
            parser.error("--workers must be >= 1")
        if args.command == "gradcheck":
            return cmd_gradcheck(args, parser)
        if args.command == "train":
            return cmd_train(args)
        return cmd_study(args, parser)
    except SystemExit as e:
        return int(e.code) if isinstance(e.code, int) else EXIT_USAGE
    except (ParameterError, FileNotFoundError, IsADirectoryError) as e:
        print(f"selectkd: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
