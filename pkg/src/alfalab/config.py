"""``key=value`` configuration files for :class:`TrainConfig`."""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path

from .errors import ConfigError, ContractError
from .ttp import TrainConfig

_TYPES = {f.name: f.type for f in fields(TrainConfig)}
_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _convert(key: str, raw: str):
    kind = _TYPES[key]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        if kind in ("bool", bool):
            return _BOOL[raw.lower()]
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
    return raw


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse lines of ``key=value``; ``#`` starts a comment, unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}", key)
        values[key] = _convert(key, raw)
    try:
        return (base or TrainConfig()).with_(**values)
    except ContractError as exc:
        raise ConfigError(str(exc)) from exc


def emit_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))
