"""Engine configuration: one JSON document, validated on load."""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class EngineConfig:
    # scoring
    method: str = "proposed"
    radius: int = 9
    border: str = "actual"
    mirror: bool = False
    workers: int | None = None
    # aggregation
    region_size: str = "30x30"
    aggregate: str = "maxpool-mean"
    # temporal
    smooth_window: int = 5
    smooth_sigma: float = 2.5
    smoothing: bool = True
    dt1: int = 15
    dt2: int = 2
    temporal_rules: bool = True
    # selection
    strategy: str = "proposed"
    b: int = 500
    B: int = 7000
    seed: int | None = None
    seeds: int = 20
    # annotation filter
    min_height: float = 50
    ratio_lo: float = 0.2
    ratio_hi: float = 0.65
    # time-to-completion
    t_forward: float = 0.15
    t_forward_backward: float = 0.20
    epochs: int = 50

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def resolved_workers(self) -> int:
        return self.workers if self.workers else (os.cpu_count() or 1)


_TYPES = {
    "int": (int,),
    "float": (int, float),
    "bool": (bool,),
    "str": (str,),
}


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def load_config(path: str | os.PathLike) -> dict:
    """Parse a config file into a dict of known keys; errors carry file:line."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}:1: config must be a JSON object")
    types = {f.name: f.type for f in fields(EngineConfig)}
    for key, value in doc.items():
        if key not in types:
            raise ConfigError(f"{path}:{_line_of(text, key)}: unknown config key {key!r}")
        base = types[key].split("|")[0].strip()
        ok = value is None and "None" in types[key]
        ok = ok or (isinstance(value, _TYPES[base]) and not (base != "bool" and isinstance(value, bool)))
        if not ok:
            raise ConfigError(f"{path}:{_line_of(text, key)}: {key!r} must be {types[key]}, got {value!r}")
    return doc


def merge(file_values: dict, flag_values: dict) -> EngineConfig:
    """Defaults, then the config file, then explicit flags (``None`` = not given)."""
    cfg = EngineConfig(**file_values)
    for key, value in flag_values.items():
        if value is not None and key in EngineConfig.keys():
            setattr(cfg, key, value)
    return cfg
