"""Temporal smoothing of frame scores and the per-video exclusion rules."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True)
class SmoothingConfig:
    half_window: int = 5
    sigma: float | None = None

    def __post_init__(self):
        if self.half_window < 0:
            raise ValueError(f"half_window must be >= 0, got {self.half_window}")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")

    @property
    def effective_sigma(self) -> float:
        if self.sigma is not None:
            return self.sigma
        return self.half_window / 2 if self.half_window > 0 else 1.0


@dataclass(frozen=True)
class TemporalRuleConfig:
    dt1: int = 15
    dt2: int = 2

    def __post_init__(self):
        if not self.dt1 >= self.dt2 >= 0:
            raise ValueError(f"need dt1 >= dt2 >= 0, got dt1={self.dt1} dt2={self.dt2}")


def smooth(scores: Iterable[tuple[int, float]], cfg: SmoothingConfig = SmoothingConfig()) -> list[tuple[int, float]]:
    """Gaussian-weighted average of each frame's score with its neighbours.

    Only frames present in the sequence contribute; weights are renormalised
    over them, so the window simply shrinks at the ends.
    """
    pairs = sorted(scores)
    t = np.array([p[0] for p in pairs], dtype=np.int64)
    z = np.array([p[1] for p in pairs], dtype=np.float64)
    if len(t) > 1 and np.any(np.diff(t) == 0):
        dup = int(t[1:][np.diff(t) == 0][0])
        raise ValueError(f"duplicate temporal index {dup}")
    if cfg.half_window == 0 or len(t) == 0:
        return [(int(a), float(b)) for a, b in zip(t, z)]
    sigma = cfg.effective_sigma
    num = np.zeros_like(z)
    den = np.zeros_like(z)
    for d in range(-cfg.half_window, cfg.half_window + 1):
        w = np.exp(-(d * d) / (2.0 * sigma * sigma))
        pos = np.searchsorted(t, t + d)
        pos_c = np.minimum(pos, len(t) - 1)
        hit = t[pos_c] == t + d
        num[hit] += w * z[pos_c[hit]]
        den[hit] += w
    return [(int(a), float(b)) for a, b in zip(t, num / den)]


class IntervalSet:
    """Disjoint, sorted, inclusive integer intervals."""

    def __init__(self, intervals: Iterable[tuple[int, int]] = ()):
        self._lo: list[int] = []
        self._hi: list[int] = []
        for lo, hi in intervals:
            self.add(lo, hi)

    def add(self, lo: int, hi: int) -> None:
        i = bisect.bisect_left(self._hi, lo - 1)
        j = bisect.bisect_right(self._lo, hi + 1)
        if i < j:
            lo = min(lo, self._lo[i])
            hi = max(hi, self._hi[j - 1])
        self._lo[i:j] = [lo]
        self._hi[i:j] = [hi]

    def __contains__(self, t: int) -> bool:
        i = bisect.bisect_left(self._hi, t)
        return i < len(self._lo) and self._lo[i] <= t

    def __iter__(self):
        return iter(zip(self._lo, self._hi))

    def __len__(self):
        return len(self._lo)

    def __eq__(self, other):
        return isinstance(other, IntervalSet) and list(self) == list(other)

    def __repr__(self):
        return f"IntervalSet({list(self)!r})"


@dataclass
class ExclusionLedger:
    """Per-video blocked frame ranges: ``permanent`` persists, ``cycle`` is reset each cycle."""

    permanent: dict[str, IntervalSet] = field(default_factory=dict)
    cycle: dict[str, IntervalSet] = field(default_factory=dict)

    def blocked(self, video_id: str, t: int) -> bool:
        for table in (self.permanent, self.cycle):
            s = table.get(video_id)
            if s is not None and t in s:
                return True
        return False

    def to_dict(self) -> dict:
        return {
            "permanent": {v: [list(iv) for iv in s] for v, s in sorted(self.permanent.items())},
            "cycle": {v: [list(iv) for iv in s] for v, s in sorted(self.cycle.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExclusionLedger":
        return cls(
            {v: IntervalSet(map(tuple, ivs)) for v, ivs in d.get("permanent", {}).items()},
            {v: IntervalSet(map(tuple, ivs)) for v, ivs in d.get("cycle", {}).items()},
        )


def is_selectable(frame, ledger: ExclusionLedger) -> bool:
    """Still images are always selectable; video frames unless blocked."""
    if frame.video_id is None:
        return True
    return not ledger.blocked(frame.video_id, frame.temporal_index)


def record_selection(frame, ledger: ExclusionLedger, cfg: TemporalRuleConfig = TemporalRuleConfig()) -> ExclusionLedger:
    if frame.video_id is None:
        return ledger
    t = frame.temporal_index
    ledger.cycle.setdefault(frame.video_id, IntervalSet()).add(t - cfg.dt1, t + cfg.dt1)
    ledger.permanent.setdefault(frame.video_id, IntervalSet()).add(t - cfg.dt2, t + cfg.dt2)
    return ledger


def advance_cycle(ledger: ExclusionLedger) -> ExclusionLedger:
    ledger.cycle.clear()
    return ledger


def smooth_frames(frames: Sequence, cfg: SmoothingConfig = SmoothingConfig()) -> None:
    """Fill ``smoothed_score`` on video frames in place, one video at a time.

    Still images get their raw score copied through.
    """
    videos: dict[str, list] = {}
    for fr in frames:
        if fr.video_id is None:
            fr.smoothed_score = fr.score
        else:
            videos.setdefault(fr.video_id, []).append(fr)
    for members in videos.values():
        by_t = {fr.temporal_index: fr for fr in members}
        for t, zhat in smooth(((fr.temporal_index, fr.score) for fr in members), cfg):
            by_t[t].smoothed_score = zhat
