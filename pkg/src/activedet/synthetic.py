"""Seeded synthetic worlds and a closed-loop active-learning simulation.

A world is a set of videos whose frames each belong to one latent appearance
cluster, with a skewed cluster population. A surrogate detector stands in for
retraining: a cluster counts as learned once any of its frames has been
labeled. Frames of learned clusters get confident, spatially smooth
probability maps. Frames of unlearned clusters get maps that oscillate inside
the object boxes, which is where a locally divergent score should fire.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .aggregation import AggregationConfig, Aggregate, aggregate
from .model import BoundingBox, FrameRecord, Manifest, ProbabilityStack, BranchSpec
from .scoring import Method, ScoreConfig, score_stack
from .selection import BudgetPlan, CycleConfig, PoolState, Strategy, run_cycle
from .temporal import SmoothingConfig, TemporalRuleConfig


@dataclass(frozen=True)
class WorldConfig:
    num_videos: int = 20
    frames_per_video: int = 100
    cluster_weights: tuple[float, ...] = (0.9, 0.06, 0.025, 0.01, 0.005)
    object_density: tuple[float, ...] = (0.5, 1.5, 1.5, 2.0, 2.0)
    segment_length: int = 10
    width: int = 64
    height: int = 48
    # (height, width) of each branch's default box, coarse to fine
    branch_sizes: tuple[tuple[int, int], ...] = ((30, 15), (20, 10), (12, 6))
    seed: int = 0

    def __post_init__(self):
        if len(self.object_density) not in (1, len(self.cluster_weights)):
            raise ValueError("object_density needs one value or one per cluster")
        if min(self.num_videos, self.frames_per_video, self.segment_length) < 1:
            raise ValueError("world sizes must be positive")
        if any(w < 0 for w in self.cluster_weights) or sum(self.cluster_weights) <= 0:
            raise ValueError("cluster weights must be non-negative with a positive sum")

    @property
    def num_frames(self) -> int:
        return self.num_videos * self.frames_per_video

    @property
    def num_clusters(self) -> int:
        return len(self.cluster_weights)

    def density(self, cluster: int) -> float:
        return self.object_density[0] if len(self.object_density) == 1 else self.object_density[cluster]

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown world config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("cluster_weights", "object_density"):
            if key in d:
                d[key] = tuple(d[key])
        if "branch_sizes" in d:
            d["branch_sizes"] = tuple(tuple(s) for s in d["branch_sizes"])
        return cls(**d)


def cluster_counts(weights: Sequence[float], total: int) -> list[int]:
    """Largest-remainder apportionment of ``total`` frames to clusters."""
    w = np.asarray(weights, dtype=float)
    raw = w / w.sum() * total
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


@dataclass
class SyntheticWorld:
    config: WorldConfig
    frames: list[FrameRecord]
    clusters: np.ndarray  # cluster id per frame, aligned with ``frames``
    box_branches: list[list[int]]  # branch index (0-based) per annotation

    def __post_init__(self):
        self.index = {fr.frame_id: i for i, fr in enumerate(self.frames)}

    @property
    def frame_ids(self) -> list[str]:
        return [fr.frame_id for fr in self.frames]

    def cluster_of(self, frame_id: str) -> int:
        return int(self.clusters[self.index[frame_id]])

    def manifest(self, stack_dir: str | None = None) -> Manifest:
        frames = [
            FrameRecord(
                fr.frame_id,
                fr.video_id,
                fr.temporal_index,
                stack_path=None if stack_dir is None else f"{stack_dir}/{fr.frame_id}.alpm",
                annotations=list(fr.annotations or []),
            )
            for fr in self.frames
        ]
        h = self.config.branch_sizes
        branches = [BranchSpec(i + 1, bh, bw) for i, (bh, bw) in enumerate(h)]
        return Manifest(frames, branches)


def generate_world(config: WorldConfig = WorldConfig()) -> SyntheticWorld:
    rng = np.random.default_rng([config.seed, 0xA11])
    counts = cluster_counts(config.cluster_weights, config.num_frames)
    segments = []
    for c, n in enumerate(counts):
        for start in range(0, n, config.segment_length):
            segments.append(np.full(min(config.segment_length, n - start), c))
    order = rng.permutation(len(segments))
    clusters = np.concatenate([segments[i] for i in order]) if segments else np.zeros(0, int)

    frames, box_branches = [], []
    k = len(config.branch_sizes)
    for idx in range(config.num_frames):
        v, t = divmod(idx, config.frames_per_video)
        c = int(clusters[idx])
        boxes, branches = [], []
        for _ in range(rng.poisson(config.density(c))):
            b = int(rng.integers(k))
            bh, bw = config.branch_sizes[b]
            h = max(2, min(config.height, round(bh * rng.uniform(0.9, 1.1))))
            w = max(1, min(config.width, round(bw * rng.uniform(0.9, 1.1))))
            x = int(rng.integers(0, config.width - w + 1))
            y = int(rng.integers(0, config.height - h + 1))
            boxes.append(BoundingBox(x, y, w, h))
            branches.append(b)
        frames.append(FrameRecord(f"v{v:03d}_f{t:05d}", f"v{v:03d}", t, annotations=boxes))
        box_branches.append(branches)
    return SyntheticWorld(config, frames, clusters, box_branches)


@dataclass(frozen=True)
class SurrogateDetector:
    covered: frozenset = frozenset()
    seed: int = 0
    mc_samples: int = 1
    background: float = 0.01
    noise: float = 0.002
    peak: float = 0.95
    swing: float = 0.35

    def with_covered(self, clusters) -> "SurrogateDetector":
        return SurrogateDetector(frozenset(clusters), self.seed, self.mc_samples,
                                 self.background, self.noise, self.peak, self.swing)


def surrogate_predict(world: SyntheticWorld, detector: SurrogateDetector, frame_id: str) -> ProbabilityStack:
    i = world.index[frame_id]
    fr = world.frames[i]
    covered = int(world.clusters[i]) in detector.covered
    cfg = world.config
    k, t = len(cfg.branch_sizes), detector.mc_samples
    rng = np.random.default_rng([detector.seed, i, int(covered), t])
    maps = detector.background + rng.uniform(0, detector.noise, size=(k, t, cfg.height, cfg.width))
    yy, xx = np.mgrid[0 : cfg.height, 0 : cfg.width]
    for box, b in zip(fr.annotations or [], world.box_branches[i]):
        x0, y0, w, h = int(box.x), int(box.y), int(box.w), int(box.h)
        if covered:
            cy, cx = y0 + h / 2 - 0.5, x0 + w / 2 - 0.5
            blob = detector.peak * np.exp(-(((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2) / 2)
            maps[b] = np.maximum(maps[b], blob)
        else:
            win = (slice(y0, y0 + h), slice(x0, x0 + w))
            if t == 1:
                sign = np.where((yy[win] + xx[win]) % 2 == 0, 1.0, -1.0)
                jitter = rng.uniform(-0.05, 0.05, size=sign.shape)
                maps[b, 0][win] = 0.5 + detector.swing * sign + jitter
            else:
                maps[b][(slice(None),) + win] = rng.uniform(0.05, 0.95, size=(t, h, w))
    return ProbabilityStack(frame_id, np.clip(maps, 0.0, 1.0))


@dataclass
class SimulationConfig:
    score_radius: int = 2
    region: tuple[int, int] = (8, 8)
    aggregate: Aggregate = Aggregate.MAXPOOL_MEAN
    smoothing: SmoothingConfig | None = SmoothingConfig()
    rules: TemporalRuleConfig | None = TemporalRuleConfig()
    mc_samples: int = 10


@dataclass
class RunResult:
    seed: int
    coverage: list[float] = field(default_factory=list)  # after each cycle
    instances: list[int] = field(default_factory=list)  # selected per cycle
    uncovered_frames: list[float] = field(default_factory=list)
    selected: list[list[str]] = field(default_factory=list)

    @property
    def final_coverage(self) -> float:
        return self.coverage[-1] if self.coverage else 0.0

    @property
    def total_instances(self) -> int:
        return sum(self.instances)


@dataclass
class SimulationReport:
    strategy: str
    runs: list[RunResult]

    def mean_final_coverage(self) -> float:
        return float(np.mean([r.final_coverage for r in self.runs]))

    def mean_instances(self) -> float:
        return float(np.mean([r.total_instances for r in self.runs]))

    def mean_uncovered_fraction(self) -> float:
        return float(np.mean([r.uncovered_frames[-1] for r in self.runs]))

    def rows(self) -> list[dict]:
        out = []
        for r in self.runs:
            cum = 0
            for c, (cov, inst, unc) in enumerate(zip(r.coverage, r.instances, r.uncovered_frames)):
                cum += inst
                out.append({"strategy": self.strategy, "seed": r.seed, "cycle": c, "coverage": cov,
                            "instances": inst, "cum_instances": cum, "uncovered_frames": unc})
        n = len(self.runs[0].coverage) if self.runs else 0
        for c in range(n):
            sub = [row for row in out if row["cycle"] == c and row["seed"] != "mean"]
            out.append({"strategy": self.strategy, "seed": "mean", "cycle": c,
                        **{k: float(np.mean([row[k] for row in sub]))
                           for k in ("coverage", "instances", "cum_instances", "uncovered_frames")}})
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["strategy", "seed", "cycle", "coverage", "instances", "cum_instances", "uncovered_frames"]
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_json(self) -> str:
        doc = {
            "strategy": self.strategy,
            "mean_final_coverage": self.mean_final_coverage(),
            "mean_instances": self.mean_instances(),
            "mean_uncovered_fraction": self.mean_uncovered_fraction(),
            "runs": [asdict(r) for r in self.runs],
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def run_simulation(
    world: SyntheticWorld,
    plan: BudgetPlan,
    strategy: Strategy | str,
    seed: int,
    config: SimulationConfig = SimulationConfig(),
) -> RunResult:
    strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
    method = strategy.method
    mc = config.mc_samples if method is Method.MC_DROPOUT else 1
    detector = SurrogateDetector(seed=seed, mc_samples=mc)
    score_cfg = ScoreConfig(method or Method.PROPOSED, config.score_radius)
    agg_cfg = AggregationConfig(config.region[0], config.region[1], config.aggregate)
    cache: dict[tuple[str, bool], float] = {}

    def provider(ids, cycle):
        out = {}
        for fid in ids:
            key = (fid, world.cluster_of(fid) in detector.covered)
            if key not in cache:
                cache[key] = aggregate(score_stack(surrogate_predict(world, detector, fid), score_cfg), agg_cfg)
            out[fid] = cache[key]
        return out

    frames = {fr.frame_id: fr for fr in world.frames}
    pool = PoolState.fresh(world.frame_ids, seed=seed, plan=plan)
    cyc_cfg = CycleConfig(smoothing=config.smoothing, rules=config.rules)
    result = RunResult(seed)
    # clusters that received no frames cannot be covered
    n_clusters = len(np.unique(world.clusters))
    for _ in range(plan.cycles):
        pool, report = run_cycle(pool, frames, plan, strategy, provider, cyc_cfg)
        covered = set(detector.covered) | {world.cluster_of(f) for f in report.selected}
        detector = detector.with_covered(covered)
        result.selected.append(report.selected)
        result.coverage.append(len(covered) / n_clusters)
        result.instances.append(sum(len(frames[f].annotations or []) for f in report.selected))
        result.uncovered_frames.append(float(np.mean([c not in covered for c in world.clusters])))
    return result


def simulate(
    world: SyntheticWorld,
    plan: BudgetPlan,
    strategy: Strategy | str,
    seeds: Sequence[int],
    config: SimulationConfig = SimulationConfig(),
) -> SimulationReport:
    if plan.total > world.config.num_frames:
        raise ValueError(f"budget B={plan.total} exceeds the world's {world.config.num_frames} frames")
    strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
    runs = [run_simulation(world, plan, strategy, s, config) for s in seeds]
    return SimulationReport(strategy.value, runs)


def sign_test(a: Sequence[float], b: Sequence[float]) -> tuple[int, int, float]:
    """One-sided paired sign test of a > b. Ties are dropped.

    Returns (wins, losses, p-value).
    """
    wins = sum(x > y for x, y in zip(a, b))
    losses = sum(x < y for x, y in zip(a, b))
    n = wins + losses
    if n == 0:
        return 0, 0, 1.0
    p = sum(math.comb(n, k) for k in range(wins, n + 1)) / 2**n
    return wins, losses, p
