"""Experiment configuration files (JSON, schema version 1).

Unknown keys are rejected at every level. See ``configs/default.json`` for
the bundled experiment and README.md for the schema.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .divergence import DivergenceKind
from .errors import ParameterError
from .trainer import TrainingConfig
from .verifier import VerifierConfig

SCHEMA_VERSION = 1

TOP_KEYS = {"version", "seed", "out_dir", "teacher", "student", "training", "studies"}
TEACHER_KEYS = {
    "random": {"type", "vocab_size", "order", "concentration", "seed", "bos_token"},
    "file": {"type", "path"},
    "noisy": {"type", "vocab_size", "order", "concentration", "noise_fraction", "noise_concentration",
              "sft_sequences", "sft_length", "seed"},
}
STUDENT_KEYS = {
    "uniform": {"type"},
    "teacher": {"type"},
    "random": {"type", "concentration", "seed"},
    "file": {"type", "path"},
    "sft": {"type"},
}
TRAINING_KEYS = {"divergence", "verifier", "mu", "pairing", "alpha_t", "alpha_s", "steps", "batch_size",
                 "seq_length", "prompt_length", "pool_size", "optimizer", "lr", "record_timing", "shadow_verifier"}
VERIFIER_KEYS = {"mode", "k", "beta"}
STUDY_KEYS = {
    "fixed-point": {"kinds", "min_visits", "tol", "spread_tol", "teacher", "student", "training"},
    "tar": {"window", "slack", "teacher", "student", "training"},
    "landscape": {"n_directions", "radii", "seed", "divergence", "compare_vanilla", "teacher", "student",
                  "training"},
    "spec-sim": {"drafter", "target", "gamma", "rounds", "cost_ratio", "n_prompts", "teacher", "student",
                 "training"},
}
STUDIES = tuple(STUDY_KEYS)


class ConfigError(ParameterError):
    pass


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")


def _verifier(d, where) -> VerifierConfig | None:
    if d is None:
        return None
    _check_keys(d, VERIFIER_KEYS, where)
    try:
        return VerifierConfig(**d)
    except (ValueError, TypeError) as e:
        raise ConfigError(f"{where}: {e}") from None


def training_config(d: dict, seed: int) -> TrainingConfig:
    _check_keys(d, TRAINING_KEYS, "training")
    kw = dict(d)
    try:
        if "divergence" in kw:
            kw["divergence"] = DivergenceKind.parse(kw["divergence"])
        if "verifier" in kw:
            kw["verifier"] = _verifier(kw["verifier"], "training.verifier")
        if "shadow_verifier" in kw:
            sv = _verifier(kw["shadow_verifier"], "training.shadow_verifier")
            if sv is None:
                raise ConfigError("training.shadow_verifier cannot be null")
            kw["shadow_verifier"] = sv
        return TrainingConfig(seed=seed, **kw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(f"training: {e}") from None


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str | None = None
    teacher: dict = field(default_factory=dict)
    student: dict = field(default_factory=lambda: {"type": "uniform"})
    training: dict = field(default_factory=dict)
    studies: dict = field(default_factory=dict)
    source: str = "<memory>"

    def training_config(self) -> TrainingConfig:
        return training_config(self.training, self.seed)

    def for_study(self, name: str) -> "ExperimentConfig":
        """The config with the study's own teacher/student/training overrides merged in."""
        if name not in STUDY_KEYS:
            raise ConfigError(f"unknown study {name!r}")
        s = self.studies.get(name, {})
        teacher = s.get("teacher", {})
        # a teacher override that changes type replaces rather than merges
        t = copy.deepcopy(teacher) if teacher.get("type", self.teacher.get("type")) != self.teacher.get("type") \
            else merge(self.teacher, teacher)
        st = s.get("student", {})
        stu = copy.deepcopy(st) if st else copy.deepcopy(self.student)
        cfg = ExperimentConfig(self.seed, self.out_dir, t, stu, merge(self.training, s.get("training", {})),
                               self.studies, self.source)
        validate_parts(cfg)
        return cfg

    def study_params(self, name: str) -> dict:
        s = self.studies.get(name, {})
        return {k: v for k, v in s.items() if k not in ("teacher", "student", "training")}


def validate_parts(cfg: ExperimentConfig) -> None:
    t = cfg.teacher
    if "type" not in t or t["type"] not in TEACHER_KEYS:
        raise ConfigError(f"teacher.type must be one of {sorted(TEACHER_KEYS)}")
    _check_keys(t, TEACHER_KEYS[t["type"]], "teacher")
    s = cfg.student
    if "type" not in s or s["type"] not in STUDENT_KEYS:
        raise ConfigError(f"student.type must be one of {sorted(STUDENT_KEYS)}")
    _check_keys(s, STUDENT_KEYS[s["type"]], "student")
    if s["type"] == "sft" and t["type"] != "noisy":
        raise ConfigError("student.type 'sft' needs a 'noisy' teacher")
    cfg.training_config()


def from_dict(d: dict, source: str = "<memory>") -> ExperimentConfig:
    _check_keys(d, TOP_KEYS, "config")
    if d.get("version") != SCHEMA_VERSION:
        raise ConfigError(f"config version must be {SCHEMA_VERSION}, got {d.get('version')!r}")
    studies = d.get("studies", {})
    _check_keys(studies, STUDY_KEYS, "studies")
    for name, body in studies.items():
        _check_keys(body, STUDY_KEYS[name], f"studies.{name}")
    seed = d.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    cfg = ExperimentConfig(seed, d.get("out_dir"), copy.deepcopy(d.get("teacher", {})),
                           copy.deepcopy(d.get("student", {"type": "uniform"})), copy.deepcopy(d.get("training", {})),
                           copy.deepcopy(studies), source)
    validate_parts(cfg)
    for name in studies:
        cfg.for_study(name)
    return cfg


def load_dict(path) -> tuple[dict, str]:
    if str(path) == "default":
        text = resources.files("selectkd").joinpath("configs/default.json").read_text(encoding="utf-8")
        source = "default"
    else:
        text = Path(path).read_text(encoding="utf-8")
        source = str(path)
    try:
        return json.loads(text), source
    except json.JSONDecodeError as e:
        raise ConfigError(f"{source}: {e}") from None


def load(path, overrides: dict | None = None) -> ExperimentConfig:
    d, source = load_dict(path)
    if overrides:
        d = merge(d, overrides)
    return from_dict(d, source)


def parse_assignment(text: str) -> dict:
    """``"training.steps=100"`` -> ``{"training": {"steps": 100}}``; values are JSON when they parse."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value: Any = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    cur = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return out
