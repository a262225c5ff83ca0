"""Run configuration: typed schemas over plain key=value text files.

A config file holds one `key = value` per line (blank lines and `#`
comments allowed). Each command declares a schema; unknown keys are
rejected, command-line overrides win over the file, and every run writes
its fully resolved configuration next to its outputs so it can be
reproduced exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Optional


class ConfigError(ValueError):
    """Bad key, bad value, or missing requirement in a run configuration."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _parse_int_list(text: str) -> tuple:
    try:
        return tuple(int(part) for part in str(text).split(",") if part.strip())
    except ValueError as exc:
        raise ConfigError(f"not an integer list: {text!r}") from exc


_PARSERS: dict = {
    int: int,
    float: float,
    str: str,
    bool: _parse_bool,
    "int_list": _parse_int_list,
}


@dataclass
class Option:
    kind: Any
    default: Any = None
    required: bool = False
    help: str = ""


def parse_file(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def resolve(schema: dict, file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Merge defaults, file values, and overrides into a typed mapping."""
    merged: dict = {}
    for source in (file_values or {}), (overrides or {}):
        for key, val in source.items():
            if key not in schema:
                raise ConfigError(f"unknown configuration key {key!r}")
            if val is not None:
                merged[key] = val
    out = {}
    for key, opt in schema.items():
        if key in merged:
            raw = merged[key]
            if isinstance(raw, str):
                try:
                    out[key] = _PARSERS[opt.kind](raw)
                except ConfigError:
                    raise
                except (ValueError, KeyError) as exc:
                    raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
            else:
                out[key] = tuple(raw) if opt.kind == "int_list" else raw
        elif opt.required:
            raise ConfigError(f"missing required key {key!r}")
        else:
            out[key] = opt.default
    return out


def format_resolved(values: dict) -> str:
    lines = []
    for key in sorted(values):
        val = values[key]
        if isinstance(val, (tuple, list)):
            val = ",".join(str(v) for v in val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"


def write_resolved(path, values: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_resolved(values))
