"""Typed ``key=value`` text shared by run configs, dataset and checkpoint sidecars."""
from __future__ import annotations

import enum
from dataclasses import fields

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(key, text, default):
    """Convert ``text`` to the type of ``default``."""
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if isinstance(default, enum.Enum):
            return type(default)(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def parse_lines(text, source="<config>"):
    """``key=value`` lines -> dict of raw strings; ``#`` starts a comment."""
    out = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{number}: empty key")
        out[key] = value
    return out


def read_file(path):
    try:
        with open(path) as f:
            return parse_lines(f.read(), str(path))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None


def write_file(path, items):
    with open(path, "w") as f:
        for key, value in items:
            f.write(f"{key}={format_value(value)}\n")


def dataclass_items(obj):
    return [(f.name, getattr(obj, f.name)) for f in fields(obj)]


def dataclass_from_strings(cls, raw, source=""):
    """Build ``cls`` from raw strings, typed by the defaults; unknown keys are errors."""
    default = cls()
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")
    return cls(**{k: parse_value(k, v, getattr(default, k)) for k, v in raw.items()})
