"""Plain-text ``key = value`` config files.

Blank lines and ``#`` comments are ignored. Values are parsed by the
caller's schema, so this module only deals with the text layer.
"""

from __future__ import annotations

import hashlib
from pathlib import Path


class ConfigError(ValueError):
    """Malformed config file or an invalid config value."""


def parse_kv(text: str, source: str = "<string>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_kv(text, str(path))


def format_kv(values: dict[str, object]) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in values.items())


def kv_hash(values: dict[str, object]) -> str:
    return hashlib.sha256(format_kv(values).encode("utf-8")).hexdigest()


def _fmt(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def to_bool(value: str, key: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def to_int_list(value: str, key: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise ConfigError(f"{key}: expected comma-separated integers, got {value!r}") from exc
