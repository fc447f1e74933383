"""Flat ``key = value`` configuration files (TOML syntax) with flag overrides."""

from __future__ import annotations

import difflib
import json
import sys
import typing
from dataclasses import fields
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

from .errors import ConfigError
from .trainer import TrainConfig

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _field_types(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def coerce(key: str, value, kind):
    """Convert a file or flag value to the declared field type."""
    try:
        if kind is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(value)
        if kind is tuple:
            if isinstance(value, str):
                text = value.strip().strip("[]()")
                return tuple(int(v) for v in text.split(",") if v.strip())
            return tuple(int(v) for v in value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind is float:
            return float(value)
        if kind is str:
            if not isinstance(value, str):
                raise ValueError(value)
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {value!r} for key {key!r} "
                          f"(expected {getattr(kind, '__name__', kind)})") from None
    return value


def suggest(key: str, valid) -> str:
    close = difflib.get_close_matches(key, list(valid), n=1, cutoff=0.5)
    return f"; did you mean {close[0]!r}?" if close else ""


def parse_file(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from None
    for key, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"config files are flat; section [{key}] is not allowed")
    return data


def load_config(path=None, overrides: dict | None = None, cls=TrainConfig, base: dict | None = None):
    """Validated config from defaults < ``base`` < file < ``overrides``."""
    types = _field_types(cls)
    merged = dict(base or {})
    for source in (parse_file(path), overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            norm = key.replace("-", "_")
            if norm not in types:
                raise ConfigError(f"unknown config key {key!r}{suggest(norm, types)}")
            merged[norm] = value
    values = {k: coerce(k, v, types[k]) for k, v in merged.items()}
    return cls(**values)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    return str(value)


def echo_config(cfg) -> str:
    """Effective config as a file that :func:`load_config` reads back."""
    return "".join(f"{f.name} = {_toml_value(getattr(cfg, f.name))}\n" for f in fields(cfg))


def describe_keys(cls=TrainConfig) -> list[tuple[str, str, object]]:
    return [(f.name, f.metadata.get("help", ""), f.default) for f in fields(cls)]
