"""Flat key=value run configuration with dotted namespaces.

Example::

    model.bottleneck_dim = 64
    train.steps_per_level = 500
    preprocess.grayscale = true
    search.bottlenecks = 16,64,256

CLI flags (``--set key=value``) override file values. Every run artifact
embeds the fully resolved configuration for provenance.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Malformed configuration file or unknown/invalid key."""


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_config(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config_text(path.read_text(encoding="utf-8"))


def apply_overrides(cfg: dict[str, str], overrides: list[str]) -> dict[str, str]:
    out = dict(cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        out[key] = value
    return out


def get_typed(cfg: dict[str, str], key: str, default):
    """Fetch ``key`` coerced to the type of ``default``."""
    if key not in cfg:
        return default
    raw = cfg[key]
    try:
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, (list, tuple)):
            elem = default[0] if default else int
            elem_type = type(elem) if not isinstance(elem, type) else elem
            return [elem_type(v.strip()) for v in raw.split(",") if v.strip()]
        return raw
    except (ValueError, TypeError) as e:
        raise ConfigError(f"config key {key!r}: {e}") from e


def render_config(cfg: dict[str, str]) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))
