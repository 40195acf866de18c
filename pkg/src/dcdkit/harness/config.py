"""Experiment configuration: a YAML file with a closed schema.

Every section and key is listed in ``SCHEMA``; anything else is rejected.
Seeds live in one ``seeds`` block and must all be given explicitly.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from ..circuits import DEFAULT_GRID


class ConfigError(ValueError):
    pass


EXPERIMENTS = ("cross_variant", "mixture_sweep", "dcd_compare")
SEED_KEYS = ("data", "train", "dcd", "baseline")

# section -> {key: default}; ``REQUIRED`` marks keys without a default
REQUIRED = object()
SCHEMA: dict = {
    "experiment": None,
    "output": None,
    "accuracy_floor": 0.7,
    "seeds": {k: REQUIRED for k in SEED_KEYS},
    "model": {
        "checkpoint": None,
        "config": None,  # ModelConfig fields, used by train / wire-induction
        "init_std": 0.02,
    },
    "train": {
        "tasks": [],
        "n_per_variant": 3000,
        "steps": 3000,
        "lr": 3e-3,
        "batch_size": 64,
        "warmup": 100,
        "weight_decay": 0.0,
        "aux_segments": 0,  # extra repeated-segment sequences labelled at every position
        "aux_pretrain_steps": 0,  # steps on the auxiliary sequences alone before joint training
    },
    "data": {
        "variants": [],  # cross_variant: [[task, variant], ...]
        "n_per_variant": 200,
        "components": [],  # dcd_compare: [[task, variant, weight], ...]
        "n_examples": 300,
        "splits": [0.6, 0.2, 0.2],
        "mixture_tasks": [],  # mixture_sweep: [[task_a, variant_a], [task_b, variant_b]]
        "ratio_step": 0.1,
        "eval": "pure",  # mixture_sweep evaluation sets: pure | mixed
        "path": None,  # optional JSONL dataset for attribute / discover / dcd / eval
    },
    "discovery": {
        "methods": ["eap_ig"],
        "ig_steps": 5,
        "sizes": list(DEFAULT_GRID),
        "eval_size": 0.05,
        "zero_ablation": False,
    },
    "dcd": {
        "variants": ["kmeans-pca", "kmeans-svd", "agglom", "divisive"],
        "binarize": True,
        "gamma": 0.99,
        "r": 20,
        "K_range": [2, 12],  # inclusive bounds, or an explicit list under K_list
        "K_list": None,
        "B": 20,
        "n_init": 5,
        "min_cluster": 3,
    },
}


def _merge(schema: dict, given: Any, where: str) -> dict:
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError(f"{where or 'config'} must be a mapping")
    unknown = sorted(set(given) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    out = {}
    for key, default in schema.items():
        path = f"{where}.{key}" if where else key
        if isinstance(default, dict):
            out[key] = _merge(default, given.get(key), path)
        elif key in given:
            out[key] = copy.deepcopy(given[key])
        elif default is REQUIRED:
            raise ConfigError(f"missing required key {path}")
        else:
            out[key] = copy.deepcopy(default)
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    base_dir: Path

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def seeds(self) -> dict:
        return self.raw["seeds"]

    @property
    def output(self) -> Path:
        out = self.raw.get("output") or "out"
        p = Path(out)
        return p if p.is_absolute() else self.base_dir / p

    def resolve(self, path: Optional[str]) -> Optional[Path]:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def checkpoint(self, must_exist: bool = True) -> Path:
        ck = self.raw["model"]["checkpoint"]
        if ck is None:
            raise ConfigError("model.checkpoint is required")
        p = self.resolve(ck)
        if must_exist and not p.exists():
            raise ConfigError(f"checkpoint {p} does not exist")
        return p

    def canonical(self) -> dict:
        """The config as recorded in run manifests (output location excluded)."""
        d = copy.deepcopy(self.raw)
        d.pop("output", None)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def K_values(self) -> list:
        d = self.raw["dcd"]
        if d["K_list"] is not None:
            return [int(k) for k in d["K_list"]]
        lo, hi = d["K_range"]
        return list(range(int(lo), int(hi) + 1))


def validate(raw: dict) -> None:
    exp = raw["experiment"]
    if exp is not None and exp not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {exp!r}")
    for k, v in raw["seeds"].items():
        if not isinstance(v, int) or isinstance(v, bool) or v < 0:
            raise ConfigError(f"seeds.{k} must be a non-negative integer")
    floor = raw["accuracy_floor"]
    if not isinstance(floor, (int, float)) or not 0 <= floor <= 1:
        raise ConfigError("accuracy_floor must lie in [0, 1]")
    sp = raw["data"]["splits"]
    if len(sp) != 3 or abs(sum(sp) - 1.0) > 1e-9 or min(sp) < 0:
        raise ConfigError("data.splits must be three non-negative fractions summing to 1")
    if raw["data"]["eval"] not in ("pure", "mixed"):
        raise ConfigError("data.eval must be 'pure' or 'mixed'")
    sizes = raw["discovery"]["sizes"]
    if not sizes or any(not 0 < s <= 1 for s in sizes) or any(a >= b for a, b in zip(sizes, sizes[1:])):
        raise ConfigError("discovery.sizes must be strictly increasing in (0, 1]")
    for m in raw["discovery"]["methods"]:
        if m not in ("e_act", "eap", "eap_ig"):
            raise ConfigError(f"unknown discovery method {m!r}")
    for v in raw["dcd"]["variants"]:
        if v not in ("kmeans-pca", "kmeans-svd", "agglom", "divisive"):
            raise ConfigError(f"unknown DCD variant {v!r}")
    if raw["train"]["aux_pretrain_steps"] and not raw["train"]["aux_segments"]:
        raise ConfigError("train.aux_pretrain_steps needs train.aux_segments > 0")
    if raw["discovery"]["ig_steps"] < 1:
        raise ConfigError("discovery.ig_steps must be >= 1")


def from_dict(d: dict, base_dir=".", seed_override: Optional[int] = None) -> ExperimentConfig:
    raw = _merge(SCHEMA, d, "")
    if seed_override is not None:
        raw["seeds"] = {k: int(seed_override) for k in raw["seeds"]}
    validate(raw)
    return ExperimentConfig(raw, Path(base_dir))


def load_config(path, seed_override: Optional[int] = None) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data or {}, path.parent, seed_override)
