"""Image-level scores from pixel-level score maps."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np


class Aggregate(str, enum.Enum):
    MAXPOOL_MEAN = "maxpool-mean"
    MEAN = "mean"


@dataclass(frozen=True)
class AggregationConfig:
    region_width: int = 30
    region_height: int = 30
    mode: Aggregate = Aggregate.MAXPOOL_MEAN

    def __post_init__(self):
        object.__setattr__(self, "mode", Aggregate(self.mode))
        if self.region_width < 1 or self.region_height < 1:
            raise ValueError(f"region must be at least 1x1, got {self.region_width}x{self.region_height}")


def parse_region(text: str) -> tuple[int, int]:
    """``"30x30"`` -> (width, height)."""
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"region size must look like WxH, got {text!r}") from None
    return w, h


def _values(score_map) -> np.ndarray:
    v = np.asarray(getattr(score_map, "values", score_map), dtype=np.float64)
    if v.ndim != 2 or v.size == 0:
        raise ValueError(f"score map must be a non-empty 2-D array, got shape {v.shape}")
    return v


def region_count(width: int, height: int, cfg: AggregationConfig = AggregationConfig()) -> int:
    return math.ceil(width / cfg.region_width) * math.ceil(height / cfg.region_height)


def region_maxima(score_map, cfg: AggregationConfig = AggregationConfig()) -> np.ndarray:
    """Max of each non-overlapping tile anchored at (0, 0); edge tiles may be smaller."""
    v = _values(score_map)
    rows = np.arange(0, v.shape[0], cfg.region_height)
    cols = np.arange(0, v.shape[1], cfg.region_width)
    return np.maximum.reduceat(np.maximum.reduceat(v, rows, axis=0), cols, axis=1)


def aggregate(score_map, cfg: AggregationConfig = AggregationConfig()) -> float:
    """Average of the per-region maxima (or the plain mean in ``mean`` mode)."""
    if cfg.mode is Aggregate.MEAN:
        return aggregate_mean(score_map)
    return float(region_maxima(score_map, cfg).mean())


def aggregate_mean(score_map) -> float:
    return float(_values(score_map).mean())
