"""Run configuration: built-in defaults, a YAML file, and ``--set`` overrides.

Every seed is explicit.  Seeds left as ``null`` are derived from the master
``seed`` with fixed offsets, never from the clock.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .features import BIASES

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "out": "cirm-run",
    "template": "Q: {query}\nA: {response}",
    "model": {
        "vocab_size": 256,
        "d_model": 64,
        "n_layers": 4,
        "n_heads": 4,
        "d_ff": 128,
        "max_seq_len": 512,
        "positional": "none",
        "init_seed": None,
    },
    "corpus": {
        "n_train": 2000,
        "n_val": 500,
        "n_test": 500,
        "bias_strength": {"len": 0.9, "para": 0.5, "over": 0.5, "excl": 0.5, "bold": 0.5},
        # the validation split is a separate benchmark-like sample, balanced by default
        "val_bias_strength": {"len": 0.5, "para": 0.5, "over": 0.5, "excl": 0.5, "bold": 0.5},
        "train_seed": None,
        "val_seed": None,
        "test_seed": None,
        "n_candidate_sets": 500,
        "n_candidates": 5,
        "candidate_seed": None,
    },
    "train": {
        "epochs": 3,
        "batch_size": 32,
        "lr": 3.0e-4,
        "optimizer": "adam",
        "clip_norm": 1.0,
        "seed": None,
    },
    "search": {
        "sampler": "tpe",
        "budget": 50,
        "grid": [0, 1, 2, 4, 8, 16, 32],
        "grids": None,
        "budget_cap": 20000,
        "seed": None,
    },
    "scoring": {
        "lp_alpha": 0.001,
        "lp_alphas": [0.0, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2],
        "lwr_frac": 0.3,
        "swap_direction": "ab",
    },
    "report": {"histogram_top_n": 50},
}

_BIAS_MAPS = ("bias_strength", "val_bias_strength")

_SEED_OFFSETS = {
    ("model", "init_seed"): 0,
    ("corpus", "train_seed"): 1,
    ("corpus", "val_seed"): 2,
    ("corpus", "test_seed"): 3,
    ("corpus", "candidate_seed"): 4,
    ("train", "seed"): 5,
    ("search", "seed"): 6,
}


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and k not in _BIAS_MAPS:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[k] = _merge(base[k], v, where + ".")
        elif k in _BIAS_MAPS:
            unknown = set(v) - set(BIASES)
            if unknown:
                raise ConfigError(f"unknown biases in {where}: {sorted(unknown)}")
            out[k] = {**base[k], **v}
        else:
            out[k] = v
    return out


def parse_override(text: str) -> dict:
    """``a.b.c=value`` (value parsed as YAML) into a nested mapping."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"bad override value in {text!r}: {exc}") from exc
    doc: dict = {}
    cur = doc
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    return doc


def resolve_seeds(cfg: dict) -> dict:
    cfg = copy.deepcopy(cfg)
    master = cfg["seed"]
    if not isinstance(master, int) or isinstance(master, bool):
        raise ConfigError("seed must be an integer")
    for (section, key), off in _SEED_OFFSETS.items():
        if cfg[section][key] is None:
            cfg[section][key] = 1000 * master + off
    return cfg


def load_config(path=None, overrides=(), seed=None, out=None) -> tuple[dict, dict]:
    """Return ``(config, sources)``; ``sources`` maps dotted keys to where they came from."""
    cfg = copy.deepcopy(DEFAULTS)
    sources: dict[str, str] = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} does not parse: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        cfg = _merge(cfg, doc)
        sources.update({k: "file" for k in _flatten(doc)})
    for text in overrides:
        doc = parse_override(text)
        cfg = _merge(cfg, doc)
        sources.update({k: "flag" for k in _flatten(doc)})
    if seed is not None:
        cfg["seed"] = seed
        sources["seed"] = "flag"
    if out is not None:
        cfg["out"] = str(out)
        sources["out"] = "flag"
    return resolve_seeds(cfg), sources


def _flatten(doc: dict, prefix: str = "") -> list[str]:
    keys = []
    for k, v in doc.items():
        if isinstance(v, dict) and k not in _BIAS_MAPS:
            keys.extend(_flatten(v, f"{prefix}{k}."))
        else:
            keys.append(f"{prefix}{k}")
    return keys


def describe(cfg: dict, sources: dict) -> list[str]:
    """One ``key = value (source)`` line per leaf setting."""
    lines = []

    def walk(d, prefix=""):
        for k, v in d.items():
            key = f"{prefix}{k}"
            if isinstance(v, dict) and k not in _BIAS_MAPS:
                walk(v, key + ".")
            else:
                lines.append(f"{key} = {v!r} ({sources.get(key, 'default')})")

    walk(cfg)
    return lines


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
