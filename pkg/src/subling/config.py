"""Pipeline configuration: JSON file, dotted overrides, validation."""

from __future__ import annotations

import copy
import json
import os
from pathlib import Path
from typing import Any, Optional

SEED_ENV = "HERMES_SEED"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "jobs": 1,
    "paths": {
        "outputs": "out",
        "term_dictionary": None,  # planted dictionary for the mock extractor
        "descriptors": None,
    },
    "prompts": {
        # text files replacing the built-in instruction preambles
        "translate": None,
        "terms": None,
    },
    "thresholds": {
        "epsilon": 0.35,
        "eta": 0.4,
        "max_start_delta": 0.7,
        "n_max": 35,
        "k": 15,
        "holdout_fraction": 0.2,
        "min_support": 2,
    },
    "clustering": {
        "k_max": 20,
        "affinity_power": 8,
    },
    "sampling": {
        "temperature": 1.0,
        "top_k": 40,
        "top_p": 0.9,
    },
    "endpoints": {
        "translator": {"base_url": None, "token_env": "SUBLING_TRANSLATOR_TOKEN", "timeout": 60.0},
        "judge": {"base_url": None, "token_env": "SUBLING_JUDGE_TOKEN", "timeout": 60.0},
        "extractor": {"base_url": None, "token_env": "SUBLING_EXTRACTOR_TOKEN", "timeout": 60.0},
    },
    "retry": {
        "max_attempts": 3,
        "base_backoff": 0.5,
        "multiplier": 2.0,
    },
}


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown setting")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected an object")
            out[key] = _merge(base[key], value, path + ".")
        else:
            out[key] = value
    return out


def set_dotted(cfg: dict, dotted: str, value: Any) -> None:
    node = cfg
    parts = dotted.split(".")
    for i, part in enumerate(parts[:-1]):
        if not isinstance(node.get(part), dict):
            raise ConfigError(".".join(parts[: i + 1]), "unknown section")
        node = node[part]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise ConfigError(dotted, "unknown setting")
    node[parts[-1]] = value


def parse_override(item: str) -> tuple[str, Any]:
    """``key.path=value``; the value is read as JSON, falling back to a string."""
    if "=" not in item:
        raise ConfigError(item, "override must look like key.path=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _number(cfg, section, key, lo=None, hi=None, *, integer=False, open_lo=False, open_hi=False):
    v = cfg[section][key]
    field = f"{section}.{key}"
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and not isinstance(v, int)):
        raise ConfigError(field, f"expected {'an integer' if integer else 'a number'}, got {v!r}")
    if lo is not None and (v < lo or (open_lo and v == lo)):
        raise ConfigError(field, f"{v} is out of range")
    if hi is not None and (v > hi or (open_hi and v == hi)):
        raise ConfigError(field, f"{v} is out of range")


def validate(cfg: dict) -> None:
    if isinstance(cfg["seed"], bool) or not isinstance(cfg["seed"], int):
        raise ConfigError("seed", "expected an integer")
    if isinstance(cfg["jobs"], bool) or not isinstance(cfg["jobs"], int) or cfg["jobs"] < 1:
        raise ConfigError("jobs", "expected an integer >= 1")
    _number(cfg, "thresholds", "epsilon", -1, 1, open_lo=True, open_hi=True)
    _number(cfg, "thresholds", "eta", 0, 1, open_lo=True, open_hi=True)
    _number(cfg, "thresholds", "max_start_delta", 0, open_lo=True)
    _number(cfg, "thresholds", "n_max", 1, integer=True)
    _number(cfg, "thresholds", "k", 1, integer=True)
    _number(cfg, "thresholds", "holdout_fraction", 0, 1, open_lo=True, open_hi=True)
    _number(cfg, "thresholds", "min_support", 1, integer=True)
    _number(cfg, "clustering", "k_max", 1, integer=True)
    _number(cfg, "clustering", "affinity_power", 0, open_lo=True)
    _number(cfg, "sampling", "temperature", 0)
    _number(cfg, "sampling", "top_k", 1, integer=True)
    _number(cfg, "sampling", "top_p", 0, 1, open_lo=True)
    _number(cfg, "retry", "max_attempts", 1, integer=True)
    _number(cfg, "retry", "base_backoff", 0, open_lo=True)
    _number(cfg, "retry", "multiplier", 1, open_lo=True)
    for key in ("translate", "terms"):
        if cfg["prompts"][key] is not None and not isinstance(cfg["prompts"][key], str):
            raise ConfigError(f"prompts.{key}", "expected a file path")
    for role, ep in cfg["endpoints"].items():
        if ep["base_url"] is not None and not isinstance(ep["base_url"], str):
            raise ConfigError(f"endpoints.{role}.base_url", "expected a URL string")
        _number(cfg["endpoints"], role, "timeout", 0, open_lo=True)


def load_config(path: Optional[str | Path] = None, overrides: tuple[str, ...] = (),
                env: Optional[dict] = None) -> dict:
    """Defaults, then the config file, then ``HERMES_SEED``, then ``--set`` overrides."""
    env = os.environ if env is None else env
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError("config", f"{path}: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("config", f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be an object")
        cfg = _merge(cfg, data)
    if env.get(SEED_ENV):
        try:
            cfg["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError("seed", f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from None
    for item in overrides:
        key, value = parse_override(item)
        set_dotted(cfg, key, value)
    validate(cfg)
    return cfg
