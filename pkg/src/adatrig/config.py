"""Declarative experiment configuration: defaults, validation, overrides.

One YAML document drives every command. Unknown keys are rejected, defaults
are materialized into the persisted copy, and the canonical serialization is
hashed so a run directory always identifies the exact configuration that
produced it.
"""

from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

from .errors import ValidationError
from .util import sha256_of

ENV_OUTPUT_ROOT = "ADATRIG_OUTPUT_ROOT"

DEFAULT_CONFIG: dict = {
    "data": {
        "source": None,
        "target": None,
        "synthetic": None,  # null | "default" | path to a synthetic spec file
        "synthetic_seed": 0,
        "synthetic_params": {
            "n_templates": 50,
            "n_content": 200,
            "densities": [0.05, 0.10],
            "n_sentences": [500, 500],
            "seed": 0,
        },
        "realis_filter": False,
        "realis_policy": None,
        "split": [0.8, 0.1, 0.1],
        "split_seed": 13,
        "resplit": False,
    },
    "features": {
        "word_dim": 100,
        "pos_dim": 50,
        "contextual_dim": 3072,
        "min_count": 1,
        "case_fold": False,
        "embeddings": None,
        "contextual_store": None,
        "alignment": "mean_subtokens",
    },
    "model": {
        "learner": "BILSTM",
        "hidden": 100,
        "pooling": "mean",
    },
    "training": {
        "mode": "supervised",  # supervised | ada | feda
        "lambda": 1.0,
        "lambda_grid": [0.1, 0.2, 0.5, 1.0, 2.0, 5.0],
        "batch_size": 16,
        "max_epochs": 1000,
        "patience": 25,
        "finetune_epochs": 10,
        "learning_rate": 0.001,
        "input_dropout": 0.5,
        "embed_init_scale": 0.25,
        "max_grad_norm": None,
        "domain_loss_domains": "both",
        "seed": 0,
        "seeds": [1, 2, 3, 4, 5],
    },
    "finetune": {
        "base_ckpt": None,
        "percents": [0.01, 0.02, 0.03, 0.04, 0.05],
    },
    "selftrain": {
        "teacher_ckpt": None,
        "labeled_fraction": 0.01,
        "iterations": 1,
        "student": "CONTEXTUAL",
        "student_max_epochs": None,
    },
    "eval": {
        "models": [],
        "out_of_domain": "test",  # test | all
        "disagreement_limit": 50,
    },
    "output": {
        "root": "runs",
        "name": None,
        "workers": 1,
    },
}


def _merge(defaults: dict, user: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ValidationError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict) and defaults[key]:
            if value is None:
                continue
            if not isinstance(value, dict):
                raise ValidationError(f"config key {here} must be a mapping")
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> dict:
    """Load a config file, apply --set overrides, and materialize defaults."""
    user: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValidationError(f"{path}: config must be a mapping")
        user = loaded
    cfg = _merge(DEFAULT_CONFIG, user)
    for item in overrides or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        key, _, raw = item.partition("=")
        value = yaml.safe_load(raw)
        _apply_override(cfg, key.strip(), value)
    _validate(cfg)
    if os.environ.get(ENV_OUTPUT_ROOT):
        cfg["output"]["root"] = os.environ[ENV_OUTPUT_ROOT]
    return cfg


def _apply_override(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ValidationError(f"unknown config key: {dotted}")
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ValidationError(f"unknown config key: {dotted}")
    node[leaf] = value


def _validate(cfg: dict) -> None:
    mode = cfg["training"]["mode"]
    if mode not in ("supervised", "ada", "feda"):
        raise ValidationError(f"unknown training mode {mode!r}")
    learner = cfg["model"]["learner"]
    if learner not in ("LSTM", "BILSTM", "POS", "CONTEXTUAL"):
        raise ValidationError(f"unknown learner kind {learner!r}")
    student = cfg["selftrain"]["student"]
    if student not in ("LSTM", "BILSTM", "POS", "CONTEXTUAL"):
        raise ValidationError(f"unknown student learner kind {student!r}")
    if cfg["model"]["pooling"] not in ("mean", "max", "last"):
        raise ValidationError(f"unknown pooling mode {cfg['model']['pooling']!r}")
    if cfg["eval"]["out_of_domain"] not in ("test", "all"):
        raise ValidationError("eval.out_of_domain must be 'test' or 'all'")
    if cfg["features"]["alignment"] not in ("mean_subtokens", "first_subtoken"):
        raise ValidationError("features.alignment must be mean_subtokens or first_subtoken")
    split = cfg["data"]["split"]
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9:
        raise ValidationError(f"data.split must be three fractions summing to 1, got {split}")


def config_hash(cfg: dict) -> str:
    return sha256_of(cfg)


def save_config(cfg: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")
