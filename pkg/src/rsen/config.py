"""Flat ``key = value`` configuration text.

The format is intentionally trivial: one dotted key per line, ``#`` starts
a comment, blank lines are ignored. The same renderer/parser pair backs
run config files, log headers and the text block embedded in checkpoints.
"""

from __future__ import annotations

from .errors import ConfigError


def parse_flat(text: str) -> dict[str, str]:
    """Parse flat config text into an ordered key -> raw-string map."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def render_flat(values: dict[str, object]) -> str:
    lines = [f"{key} = {_render_value(v)}" for key, v in values.items()]
    return "\n".join(lines) + "\n"


def _render_value(v: object) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_bool(key: str, raw: str) -> bool:
    lowered = raw.lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def parse_int(key: str, raw: str) -> int:
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {raw!r}") from None


def parse_float(key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {raw!r}") from None


def take_typed(values: dict[str, str], prefix: str, fields: dict[str, type]) -> dict[str, object]:
    """Pop ``prefix.*`` keys out of ``values`` and convert them per
    ``fields`` (a field-name -> bool/int/float/str map). Unknown keys under
    the prefix are an error."""
    typed: dict[str, object] = {}
    for key in [k for k in values if k.startswith(prefix + ".")]:
        field = key[len(prefix) + 1 :]
        if field not in fields:
            raise ConfigError(f"unknown configuration key {key!r}")
        raw = values.pop(key)
        kind = fields[field]
        if kind is bool:
            typed[field] = parse_bool(key, raw)
        elif kind is int:
            typed[field] = parse_int(key, raw)
        elif kind is float:
            typed[field] = parse_float(key, raw)
        else:
            typed[field] = raw
    return typed
