"""Flat key=value config files with # comments, typed against a dataclass."""

from __future__ import annotations

import dataclasses
from typing import Any, TypeVar

from .errors import ConfigError

T = TypeVar("T")


def parse_kv_text(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got '{raw.strip()}'")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        pairs[key] = value.strip()
    return pairs


def _coerce(value: str, typ: Any, key: str) -> Any:
    if typ is bool:
        low = value.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"key '{key}': expected a boolean, got '{value}'")
    try:
        return typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"key '{key}': cannot parse '{value}' as {typ.__name__}") from exc


def config_from_pairs(cls: type[T], pairs: dict[str, str],
                      overrides: dict[str, Any] | None = None) -> T:
    """Build a dataclass from string pairs; unknown keys are errors."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: dict[str, Any] = {}
    for key, value in pairs.items():
        if key not in fields:
            raise ConfigError(f"unknown config key '{key}' for {cls.__name__}")
        kwargs[key] = _coerce(value, _field_type(fields[key]), key)
    if overrides:
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in fields:
                raise ConfigError(f"unknown config key '{key}' for {cls.__name__}")
            kwargs[key] = value
    return cls(**kwargs)


def _field_type(f: dataclasses.Field) -> type:
    # Field types are plain builtins here; tolerate string annotations.
    t = f.type
    if isinstance(t, str):
        return {"int": int, "float": float, "bool": bool, "str": str}.get(t, str)
    return t


def load_config(cls: type[T], path, overrides: dict[str, Any] | None = None) -> T:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        return config_from_pairs(cls, parse_kv_text(text), overrides)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def dump_config(cfg) -> str:
    lines = [f"{f.name}={getattr(cfg, f.name)}" for f in dataclasses.fields(cfg)]
    return "\n".join(lines) + "\n"


def save_config(cfg, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))
