"""Run configuration: JSON file plus ``section.key=value`` overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .finetune import ACPOConfig

SCHEMA_VERSION = 1

DEFAULTS: dict = {
    "schema_version": SCHEMA_VERSION,
    "seed": 0,
    "out": "runs/default",
    "data": {
        "size": 16,
        "conditional": False,
        "n_diffusion": 2000,
        "diffusion_seed": 0,
        "n_iqa": 2000,
        "guide_data_seed": 1,
        "heldout_data_seed": 3,
        "n_iqa_test": 400,
        "test_data_seed": 5,
    },
    "diffusion": {
        "T": 100,
        "beta_start": 1e-3,
        "beta_end": 0.2,
        "hidden": [256, 256],
        "temb_dim": 16,
        "cond_dim": 8,
        "train_steps": 6000,
        "lr": 1e-3,
        "batch": 64,
    },
    "adapters": {"rank": 4, "scale": 1.0},
    "iqa": {
        "epochs": None,  # 30 for two-stream, 80 for conditional
        "lr": 3e-3,
        "batch_size": 64,
        "guide_seed": 0,
        "heldout_seed": 1,
        "stream_width": 16,
        "fuse_width": 16,
        "grid": 4,
        "token_width": 24,
        "embed_width": 16,
        "layer_weights": [0.5, 0.5],
    },
    # the fine-tune seed is the run seed
    "acpo": {f.name: f.default for f in fields(ACPOConfig) if f.name != "seed"},
    "metrics": {"n": 200, "seed": 777, "export_samples": 0},
    "ablate": {
        "lambda2": [0.1, 1.0, 10.0],
        "window_fractions": [0.1, 0.3, 0.5, 1.0],
        "anchor": [True, False],
    },
    "paths": {"base": None, "guide": None, "heldout": None, "adapters": None},
}


def _merge(base: dict, patch: dict, where: str = "") -> None:
    for key, value in patch.items():
        path = f"{where}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def parse_override(text: str) -> dict:
    """``acpo.lambda1=0`` -> ``{"acpo": {"lambda1": 0}}``; values parse as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not KEY=VALUE")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"malformed override key {key!r}")
    out: dict = {}
    node = out
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def _check_types(cfg: dict) -> None:
    def num(section, key, lo=None, integer=False):
        v = cfg[section][key]
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        if ok and integer:
            ok = float(v).is_integer()
        if not ok or (lo is not None and v < lo):
            kind = "integer" if integer else "number"
            bound = f" >= {lo}" if lo is not None else ""
            raise ConfigError(f"{section}.{key}: expected {kind}{bound}, got {v!r}")
        if integer:
            cfg[section][key] = int(v)

    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version: expected {SCHEMA_VERSION}, got {cfg['schema_version']!r}")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError(f"seed: expected integer, got {cfg['seed']!r}")
    for k in ("size", "n_diffusion", "n_iqa", "n_iqa_test"):
        num("data", k, 1, integer=True)
    for k in ("diffusion_seed", "guide_data_seed", "heldout_data_seed", "test_data_seed"):
        num("data", k, 0, integer=True)
    if not isinstance(cfg["data"]["conditional"], bool):
        raise ConfigError("data.conditional: expected true or false")
    if cfg["data"]["guide_data_seed"] == cfg["data"]["heldout_data_seed"]:
        raise ConfigError("data.heldout_data_seed must differ from data.guide_data_seed")
    for k in ("T", "temb_dim", "cond_dim", "train_steps", "batch"):
        num("diffusion", k, 1, integer=True)
    for k in ("beta_start", "beta_end", "lr"):
        num("diffusion", k, 0)
    hidden = cfg["diffusion"]["hidden"]
    if not isinstance(hidden, list) or not hidden or not all(isinstance(h, int) and h > 0 for h in hidden):
        raise ConfigError(f"diffusion.hidden: expected a list of positive integers, got {hidden!r}")
    num("adapters", "rank", 1, integer=True)
    num("adapters", "scale")
    if cfg["iqa"]["epochs"] is not None:
        num("iqa", "epochs", 1, integer=True)
    for k in ("batch_size", "stream_width", "fuse_width", "grid", "token_width", "embed_width"):
        num("iqa", k, 1, integer=True)
    num("iqa", "lr", 0)
    if cfg["iqa"]["guide_seed"] == cfg["iqa"]["heldout_seed"]:
        raise ConfigError("iqa.heldout_seed must differ from iqa.guide_seed")
    num("metrics", "n", 2, integer=True)
    num("metrics", "seed", 0, integer=True)
    num("metrics", "export_samples", 0, integer=True)
    for k in ("lambda2", "window_fractions"):
        grid = cfg["ablate"][k]
        if not isinstance(grid, list) or not grid:
            raise ConfigError(f"ablate.{k}: expected a non-empty list")
    if any(not 0 < f <= 1 for f in cfg["ablate"]["window_fractions"]):
        raise ConfigError("ablate.window_fractions must lie in (0, 1]")
    for k, v in cfg["paths"].items():
        if v is not None and not isinstance(v, str):
            raise ConfigError(f"paths.{k}: expected a path string or null")
    for k in ("t_late_max", "guided_steps", "mse_batch", "guide_batch", "anchor_batch", "probe_batch",
              "probe_every"):
        num("acpo", k, 1, integer=True)
    num("acpo", "steps", 0, integer=True)
    num("acpo", "probe_seed", 0, integer=True)
    for k in ("lambda1", "lambda2", "lr", "beta1", "beta2", "eps"):
        num("acpo", k)
    acpo_cfg(cfg).validate(cfg["diffusion"]["T"])


def resolve(path: str | Path | None = None, overrides: list[str] = (), seed: int | None = None,
            out: str | None = None) -> dict:
    """Defaults <- file <- ``--set`` overrides <- ``--seed`` / ``--out``; then validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        try:
            loaded = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be an object")
        _merge(cfg, loaded)
    for text in overrides:
        _merge(cfg, parse_override(text))
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = out
    _check_types(cfg)
    return cfg


def acpo_cfg(cfg: dict, **changes) -> ACPOConfig:
    try:
        out = ACPOConfig(**{**cfg["acpo"], "seed": cfg["seed"], **changes})
    except TypeError as e:
        raise ConfigError(f"acpo: {e}") from None
    return out


def config_hash(cfg: dict) -> str:
    """Hash of everything that shapes results; the output directory is excluded."""
    body = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:16]


def dump(cfg: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
