"""Pixel-level score functions.

Three methods are available:

``proposed``
    Per branch, entropy of the spatial window mean minus the window mean of
    the entropies. This is a local Jensen gap that is zero wherever the
    predictions agree within the window. Branches are summed.
``entropy``
    Per-pixel binary entropy, summed over branches.
``mc_dropout``
    The same Jensen gap taken across T stochastic samples at one pixel
    instead of across a spatial window.

All entropies are in nats.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .model import FormatError, ProbabilityStack

LN2 = math.log(2.0)

# Jensen gaps below this are integral-sum rounding, not signal.
NOISE_FLOOR = 1e-10


class Method(str, enum.Enum):
    PROPOSED = "proposed"
    ENTROPY = "entropy"
    MC_DROPOUT = "mc_dropout"


class Border(str, enum.Enum):
    ACTUAL_COUNT = "actual_count"
    FIXED_DENOMINATOR = "fixed_denominator"


@dataclass(frozen=True)
class ScoreConfig:
    method: Method = Method.PROPOSED
    radius: int = 9
    border: Border = Border.ACTUAL_COUNT
    mirror_average: bool = False

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "border", Border(self.border))
        if self.radius < 0:
            raise ValueError(f"radius must be >= 0, got {self.radius}")


@dataclass
class ScoreMap:
    frame_id: str
    values: np.ndarray  # (H, W) float64, nats
    branches: int = 1

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def binary_entropy(z):
    """-z ln z - (1-z) ln(1-z), with 0 ln 0 = 0. Accepts scalars or arrays."""
    arr = np.asarray(z, dtype=np.float64)
    if not np.all((arr >= 0) & (arr <= 1)):
        raise ValueError(f"entropy argument outside [0,1]: {z!r}")
    h = kernels.entropy(arr)
    return float(h) if np.ndim(z) == 0 else h


def spatial_mean(branch, m: int, n: int, r: int, border: Border | str = Border.ACTUAL_COUNT) -> float:
    """Mean of ``branch`` over the (2r+1)^2 window centred on row m, column n."""
    a = np.asarray(branch, dtype=np.float64)
    if not (0 <= m < a.shape[0] and 0 <= n < a.shape[1]):
        raise IndexError(f"pixel ({m},{n}) outside {a.shape}")
    win = a[max(m - r, 0) : m + r + 1, max(n - r, 0) : n + r + 1]
    if Border(border) is Border.FIXED_DENOMINATOR:
        return float(win.sum() / (2 * r + 1) ** 2)
    return float(win.mean())


def window_mean(branch, r: int, border: Border | str = Border.ACTUAL_COUNT) -> np.ndarray:
    """``spatial_mean`` at every pixel at once."""
    return kernels.box_mean(branch, r, Border(border) is Border.FIXED_DENOMINATOR)


def _clamp(s: np.ndarray) -> np.ndarray:
    s[s < NOISE_FLOOR] = 0.0
    return s


def _prepared(stack: ProbabilityStack, cfg: ScoreConfig) -> np.ndarray:
    data = stack.data
    if cfg.mirror_average:
        data = 0.5 * (data.astype(np.float64) + data[..., ::-1])
    return data


def proposed_branch_scores(
    branch, r: int, border: Border | str = Border.ACTUAL_COUNT, clamp: bool = True
) -> np.ndarray:
    """Per-branch proposed score of one (H, W) probability matrix."""
    s = kernels.proposed_branch(branch, r, Border(border) is Border.FIXED_DENOMINATOR)
    return _clamp(s) if clamp else s


def pixel_score_proposed(stack: ProbabilityStack, cfg: ScoreConfig = ScoreConfig()) -> ScoreMap:
    data = _prepared(stack, cfg)
    if data.shape[1] > 1:
        data = data.mean(axis=1, dtype=np.float64, keepdims=True)
    total = np.zeros(data.shape[2:])
    for k in range(data.shape[0]):
        total += proposed_branch_scores(data[k, 0], cfg.radius, cfg.border)
    return ScoreMap(stack.frame_id, total, stack.branches)


def pixel_score_entropy(stack: ProbabilityStack, cfg: ScoreConfig = ScoreConfig(Method.ENTROPY)) -> ScoreMap:
    data = _prepared(stack, cfg)
    if data.shape[1] > 1:
        data = data.mean(axis=1, dtype=np.float64, keepdims=True)
    total = np.zeros(data.shape[2:])
    for k in range(data.shape[0]):
        total += kernels.entropy(data[k, 0])
    return ScoreMap(stack.frame_id, total, stack.branches)


def pixel_score_mc_dropout(
    stack: ProbabilityStack, cfg: ScoreConfig = ScoreConfig(Method.MC_DROPOUT)
) -> ScoreMap:
    if stack.mc_samples < 2:
        raise FormatError(f"frame {stack.frame_id!r}: MC-Dropout scoring needs T >= 2 samples")
    data = _prepared(stack, cfg)
    total = np.zeros(data.shape[2:])
    for k in range(data.shape[0]):
        samples = data[k].astype(np.float64)
        mean_h = kernels.entropy(samples).mean(axis=0)
        total += _clamp(kernels.entropy(samples.mean(axis=0)) - mean_h)
    return ScoreMap(stack.frame_id, total, stack.branches)


_DISPATCH: dict[Method, Callable[[ProbabilityStack, ScoreConfig], ScoreMap]] = {
    Method.PROPOSED: pixel_score_proposed,
    Method.ENTROPY: pixel_score_entropy,
    Method.MC_DROPOUT: pixel_score_mc_dropout,
}


def score_stack(stack: ProbabilityStack, cfg: ScoreConfig = ScoreConfig()) -> ScoreMap:
    return _DISPATCH[cfg.method](stack, cfg)


def score_many(
    stacks: Iterable[ProbabilityStack] | Sequence[Callable[[], ProbabilityStack]],
    cfg: ScoreConfig = ScoreConfig(),
    workers: int = 1,
    reduce: Callable[[ScoreMap], object] | None = None,
) -> list:
    """Score a batch, optionally in threads; output order follows input order.

    Items may be stacks or zero-argument loaders. ``reduce`` is applied to
    each ScoreMap inside the worker, so full maps need not be kept.
    """

    def one(item):
        stack = item() if callable(item) else item
        smap = score_stack(stack, cfg)
        return reduce(smap) if reduce is not None else smap

    items = list(stacks)
    if workers <= 1 or len(items) <= 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(one, items))
