"""Flat key=value configuration files with flag overrides.

Each command declares its known keys and their types; unknown keys are
rejected so a typo cannot silently fall back to a default.  Flags beat
file values, file values beat defaults, and every key ends up with exactly
one resolved value.
"""

from __future__ import annotations

from .errors import ConfigError


def parse_config_file(path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, _, value = line.partition("=")
                key = key.strip()
                if key in values:
                    raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
                values[key] = value.strip()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    return values


def _coerce(key: str, raw, kind):
    if kind is bool:
        if isinstance(raw, bool):
            return raw
        lowered = str(raw).lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"key {key!r}: expected {kind.__name__}, got {raw!r}") from None


REQUIRED = object()


def resolve(known: dict[str, tuple[type, object]], file_values: dict[str, str],
            overrides: dict[str, object]) -> dict[str, object]:
    """Merge defaults, file values and flag overrides into one mapping.

    known: key -> (type, default); a default of REQUIRED means the key must
    come from the file or a flag, while None marks an optional key.
    """
    for key in file_values:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    resolved: dict[str, object] = {}
    for key, (kind, default) in known.items():
        if key in overrides and overrides[key] is not None:
            resolved[key] = _coerce(key, overrides[key], kind)
        elif key in file_values:
            resolved[key] = _coerce(key, file_values[key], kind)
        else:
            resolved[key] = default
    required = sorted(k for k, v in resolved.items() if v is REQUIRED)
    if required:
        raise ConfigError(f"missing required config keys: {', '.join(required)}")
    return resolved
