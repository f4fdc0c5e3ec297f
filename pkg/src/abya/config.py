"""Flat ``key=value`` run configuration files."""
from __future__ import annotations

import dataclasses
from typing import Dict, Iterable, Mapping, Optional, Tuple

from . import gridworld as gw
from .training import MODEL_DEFAULTS, TrainConfig, default_config


class ConfigError(ValueError):
    pass


# file key -> TrainConfig field
KEYS: Dict[str, str] = {f.name: f.name for f in dataclasses.fields(TrainConfig) if f.name != "lam"}
KEYS["lambda"] = "lam"

_CHOICES = {
    "model": tuple(MODEL_DEFAULTS),
    "oracle": ("train", "test", "random"),
    "env": tuple(gw.ENV_NAMES),
}
_TYPES = {f.name: f.type for f in dataclasses.fields(TrainConfig)}


def _convert(key: str, raw: str, where: str):
    field_name = KEYS[key]
    kind = _TYPES[field_name]
    try:
        if kind in ("bool", bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            value = low in ("true", "1", "yes")
        elif kind in ("int", int):
            value = int(raw)
        elif kind in ("float", float):
            value = float(raw)
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"{where}: key {key!r} expects {kind}, got {raw!r}") from None
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(f"{where}: key {key!r} must be one of {list(_CHOICES[key])}, got {raw!r}")
    return value


def parse_lines(lines: Iterable[str], source: str = "<config>") -> Dict[str, object]:
    """Parse text into {field: value}; blank lines and '#' comments are ignored."""
    out: Dict[str, object] = {}
    seen: Dict[str, int] = {}
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        where = f"{source} line {lineno}"
        if "=" not in text:
            raise ConfigError(f"{where}: expected key=value, got {text!r}")
        key, raw = (s.strip() for s in text.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{where}: key {key!r} already set on line {seen[key]}")
        seen[key] = lineno
        out[KEYS[key]] = _convert(key, raw, where)
    return out


def parse_overrides(pairs: Iterable[Tuple[str, str]]) -> Dict[str, object]:
    out = {}
    for key, raw in pairs:
        if key not in KEYS:
            raise ConfigError(f"command line: unknown key {key!r}")
        out[KEYS[key]] = _convert(key, raw, "command line")
    return out


def build_config(values: Mapping[str, object]) -> TrainConfig:
    """Model defaults first, then the given values on top."""
    model = str(values.get("model", "main"))
    rest = {k: v for k, v in values.items() if k != "model"}
    return default_config(model, **rest)


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, object]] = None) -> TrainConfig:
    values: Dict[str, object] = {}
    if path is not None:
        with open(path) as f:
            values.update(parse_lines(f, path))
    values.update(overrides or {})
    return build_config(values)


def dump_config(cfg: TrainConfig) -> str:
    inv = {v: k for k, v in KEYS.items()}
    return "".join(f"{inv[f.name]}={getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))
