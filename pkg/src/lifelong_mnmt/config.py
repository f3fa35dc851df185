"""Experiment configuration: a JSON document checked against ``CONFIG_SCHEMA``."""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema

from .corpus import TaskSpec
from .decoding import MODES, DecodeConfig
from .lifelong import SCENARIO_METHODS, SCENARIOS, LifelongHyper, MethodError, check_method
from .model import ModelConfig, ModelError
from .synthetic import SyntheticTask, standard_languages
from .training import TrainConfig

OUT_ENV = "LIFELONG_MNMT_OUT"


class ConfigError(ValueError):
    pass


_DECODE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "mode": {"enum": list(MODES)},
        "beam_size": {"type": "integer", "minimum": 1},
        "k_best": {"type": "integer", "minimum": 1},
        "length_penalty": {"type": "number", "minimum": 0},
        "max_len": {"type": "integer", "minimum": 1},
    },
}

CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "lifelong-mnmt experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["scenario", "methods", "seed"],
    "oneOf": [{"required": ["synthetic"]}, {"required": ["tasks"]}],
    "properties": {
        "scenario": {"enum": list(SCENARIOS)},
        "methods": {"type": "array", "minItems": 1, "uniqueItems": True, "items": {"type": "string"}},
        "seed": {"type": "integer", "minimum": 0},
        "out": {"type": "string"},
        "single_baseline": {"type": "boolean"},
        "synthetic": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_tasks": {"type": "integer", "minimum": 1},
                "vocab_size": {"type": "integer", "minimum": 10},
                "train_size": {"type": "integer", "minimum": 1},
                "dev_size": {"type": "integer", "minimum": 1},
                "test_size": {"type": "integer", "minimum": 1},
                "zipf_s": {"type": "number", "minimum": 0},
                "len_range": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
                "rank_preserving": {"type": "boolean"},
                "dir": {"type": "string"},
            },
        },
        "tasks": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["task_id", "src", "tgt", "dir"],
                "properties": {
                    "task_id": {"type": "string", "minLength": 1},
                    "src": {"type": "string", "minLength": 1},
                    "tgt": {"type": "string", "minLength": 1},
                    "dir": {"type": "string"},
                },
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d_model": {"type": "integer", "minimum": 1},
                "n_heads": {"type": "integer", "minimum": 1},
                "n_enc_layers": {"type": "integer", "minimum": 1},
                "n_dec_layers": {"type": "integer", "minimum": 1},
                "d_ff": {"type": "integer", "minimum": 1},
                "dropout": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "max_len": {"type": "integer", "minimum": 1},
                "shared_src_tgt_embeddings": {"type": "boolean"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "batch_tokens": {"type": "integer", "minimum": 1},
                "peak_lr": {"type": "number", "exclusiveMinimum": 0},
                "warmup_steps": {"type": "integer", "minimum": 1},
                "label_smoothing": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "select_best": {"type": "boolean"},
            },
        },
        "lifelong": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "vocab_size": {"type": "integer", "minimum": 1},
                "ewc_lambda": {"type": "number", "minimum": 0},
                "fisher_samples": {"type": "integer", "minimum": 1},
                "many2one_indicators": {"type": "boolean"},
            },
        },
        "distill_decode": _DECODE,
        "dev_decode": _DECODE,
        "eval_decode": _DECODE,
    },
}

SYNTHETIC_DEFAULTS = {
    "n_tasks": 3,
    "vocab_size": 50,
    "train_size": 2000,
    "dev_size": 200,
    "test_size": 200,
    "zipf_s": 1.0,
    "len_range": [4, 10],
    "rank_preserving": False,
    "dir": "tasks",
}

# desk-scale defaults tuned for a single CPU core
TRAIN_DEFAULTS = {"epochs": 15, "batch_tokens": 400, "peak_lr": 5e-3, "warmup_steps": 150}
MODEL_DEFAULTS = {"max_len": 32}
DISTILL_DEFAULTS = {"mode": "beam", "beam_size": 4, "max_len": 24}
DEV_DEFAULTS = {"mode": "greedy", "max_len": 24}
EVAL_DEFAULTS = {"mode": "beam", "beam_size": 4, "length_penalty": 0.6, "max_len": 24}


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path
    overrides: dict = field(default_factory=dict)

    # ------------------------------------------------------------ fields

    @property
    def scenario(self) -> str:
        return self.raw["scenario"]

    @property
    def methods(self) -> list[str]:
        return list(self.raw["methods"])

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def single_baseline(self) -> bool:
        return bool(self.raw.get("single_baseline", True))

    @property
    def out(self) -> Path:
        return self.resolve(self.raw.get("out", "runs"))

    def resolve(self, p: str | Path) -> Path:
        p = Path(p)
        return p if p.is_absolute() else (self.base_dir / p).resolve()

    @property
    def synthetic(self) -> dict | None:
        if "synthetic" not in self.raw:
            return None
        return {**SYNTHETIC_DEFAULTS, **self.raw["synthetic"]}

    def model_config(self) -> ModelConfig:
        # vocabulary sizes are placeholders; tables are sized from data on first use
        return ModelConfig(4, 4, **{**MODEL_DEFAULTS, **self.raw.get("model", {}), "seed": self.seed})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{**TRAIN_DEFAULTS, **self.raw.get("train", {})})

    def decode_config(self, which: str) -> DecodeConfig:
        defaults = {"distill_decode": DISTILL_DEFAULTS, "dev_decode": DEV_DEFAULTS, "eval_decode": EVAL_DEFAULTS}[which]
        return DecodeConfig(**{**defaults, **self.raw.get(which, {})})

    def hyper(self) -> LifelongHyper:
        return LifelongHyper(
            train=self.train_config(),
            distill_decode=self.decode_config("distill_decode"),
            dev_decode=self.decode_config("dev_decode"),
            **self.raw.get("lifelong", {}),
        )

    # ------------------------------------------------------------ tasks

    def synthetic_tasks(self) -> list[tuple[SyntheticTask, Path]]:
        syn = self.synthetic
        if syn is None:
            return []
        varying, shared = standard_languages(
            self.scenario, syn["n_tasks"], syn["vocab_size"], self.seed, syn["rank_preserving"]
        )
        root = self.resolve(syn["dir"]) if Path(syn["dir"]).is_absolute() else self.out / syn["dir"]
        out = []
        for i, lang in enumerate(varying):
            src, tgt = (shared, lang) if self.scenario == "one2many" else (lang, shared)
            task_id = f"{src.lang_id}2{tgt.lang_id}"
            spec = SyntheticTask(
                task_id, src, tgt, seed=self.seed * 1000 + i + 1,
                train_size=syn["train_size"], dev_size=syn["dev_size"], test_size=syn["test_size"],
                vocab_size=syn["vocab_size"], zipf_s=syn["zipf_s"], len_range=tuple(syn["len_range"]),
            )
            out.append((spec, root / task_id))
        return out

    def task_specs(self) -> list[TaskSpec]:
        if self.synthetic is not None:
            return [TaskSpec(s.task_id, s.src.lang_id, s.tgt.lang_id, d) for s, d in self.synthetic_tasks()]
        return [TaskSpec(t["task_id"], t["src"], t["tgt"], self.resolve(t["dir"])) for t in self.raw["tasks"]]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)


def _path_of(error: jsonschema.ValidationError) -> str:
    return "/".join(str(p) for p in error.absolute_path) or "<root>"


def validate_config(raw: dict, base_dir: str | Path = ".", check_files: bool = True) -> ExperimentConfig:
    """Schema, value and method/scenario checks; raises ConfigError naming the offending field."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: (len(e.absolute_path), str(e.absolute_path)))
    if errors:
        e = errors[0]
        if e.validator == "oneOf" and not e.absolute_path:
            raise ConfigError("config needs exactly one of 'synthetic' or 'tasks'")
        raise ConfigError(f"config field {_path_of(e)}: {e.message}")
    cfg = ExperimentConfig(copy.deepcopy(raw), Path(base_dir))
    for m in cfg.methods:
        try:
            check_method(cfg.scenario, m)
        except MethodError as err:
            allowed = ", ".join(SCENARIO_METHODS[cfg.scenario])
            raise ConfigError(f"{err} (allowed: {allowed})") from err
    try:
        cfg.model_config().validate()
        cfg.train_config()
        for which in ("distill_decode", "dev_decode", "eval_decode"):
            cfg.decode_config(which)
    except (ModelError, ValueError, TypeError) as err:
        raise ConfigError(str(err)) from err
    syn = cfg.synthetic
    if syn is not None:
        lo, hi = syn["len_range"]
        if lo > hi:
            raise ConfigError("config field synthetic/len_range: lower bound exceeds upper bound")
    if check_files and syn is None:
        for t in cfg.task_specs():
            for split in ("train", "dev", "test"):
                for lang in (t.src_lang, t.tgt_lang):
                    if not (t.directory / f"{split}.{lang}").exists():
                        raise ConfigError(f"task {t.task_id}: missing file {t.directory / f'{split}.{lang}'}")
        ids = [t.task_id for t in cfg.task_specs()]
        if len(set(ids)) != len(ids):
            raise ConfigError("task ids must be unique")
    return cfg


def load_config(path: str | Path, overrides: dict | None = None, check_files: bool = True) -> ExperimentConfig:
    """Read a JSON config, apply CLI overrides (``None`` values are ignored) and validate.

    ``out`` precedence: explicit override, then the output-dir environment
    variable, then the config file.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as err:
        raise ConfigError(f"config file {path} not found") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path}: invalid JSON ({err})") from err
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    applied = {}
    env_out = os.environ.get(OUT_ENV)
    if env_out:
        raw["out"] = applied["out"] = env_out
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = applied[key] = value
    cfg = validate_config(raw, path.resolve().parent, check_files)
    cfg.overrides = applied
    return cfg
