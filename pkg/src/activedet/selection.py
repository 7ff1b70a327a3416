"""Frame ranking, budgeted selection cycles, pool persistence and cost estimates."""

from __future__ import annotations

import csv
import dataclasses
import enum
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .aggregation import AggregationConfig, aggregate
from .model import FormatError, FrameRecord, Manifest, filter_annotations
from .scoring import Method, ScoreConfig, score_many
from .temporal import (
    ExclusionLedger,
    SmoothingConfig,
    TemporalRuleConfig,
    advance_cycle,
    is_selectable,
    record_selection,
    smooth_frames,
)

log = logging.getLogger(__name__)

POOL_FORMAT = "activedet-pool"
POOL_VERSION = 1


class Strategy(str, enum.Enum):
    PROPOSED = "proposed"
    ENTROPY = "entropy"
    MC_DROPOUT = "mc_dropout"
    GUIDED_RANDOM = "guided_random"

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        return cls(text.replace("-", "_"))

    @property
    def method(self) -> Method | None:
        return None if self is Strategy.GUIDED_RANDOM else Method(self.value)


class Scenario(str, enum.Enum):
    STILL = "still"
    VIDEO = "video"


class BudgetExhausted(RuntimeError):
    pass


class MissingScoreError(FormatError):
    pass


@dataclass(frozen=True)
class BudgetPlan:
    total: int  # B
    per_cycle: int  # b

    def __post_init__(self):
        if self.per_cycle < 1:
            raise ValueError(f"per-cycle budget b must be >= 1, got {self.per_cycle}")
        if self.total < self.per_cycle:
            raise ValueError(f"total budget B={self.total} is below b={self.per_cycle}")
        if self.total % self.per_cycle:
            raise ValueError(f"B={self.total} is not a multiple of b={self.per_cycle}")

    @property
    def cycles(self) -> int:
        return self.total // self.per_cycle


@dataclass
class Selection:
    ids: list[str]
    exhausted: bool = False

    def __iter__(self):
        return iter(self.ids)

    def __len__(self):
        return len(self.ids)


def _rank_key(fr: FrameRecord, scenario: Scenario):
    z = fr.smoothed_score if scenario is Scenario.VIDEO and fr.smoothed_score is not None else fr.score
    if z is None:
        raise MissingScoreError(f"frame {fr.frame_id!r} has no score")
    return (-z, fr.frame_id)


def _accept(
    ordered: Sequence[FrameRecord],
    b: int,
    ledger: ExclusionLedger | None,
    rules: TemporalRuleConfig | None,
    scenario: Scenario,
) -> Selection:
    chosen: list[str] = []
    use_rules = scenario is Scenario.VIDEO and rules is not None
    if use_rules and ledger is None:
        ledger = ExclusionLedger()
    for fr in ordered:
        if len(chosen) == b:
            break
        if use_rules:
            if not is_selectable(fr, ledger):
                continue
            record_selection(fr, ledger, rules)
        chosen.append(fr.frame_id)
    exhausted = len(chosen) < b
    if exhausted:
        log.warning("candidate pool exhausted: selected %d of %d", len(chosen), b)
    return Selection(chosen, exhausted)


def rank_and_select(
    frames: Iterable[FrameRecord],
    b: int,
    ledger: ExclusionLedger | None = None,
    rules: TemporalRuleConfig | None = TemporalRuleConfig(),
    scenario: Scenario | str = Scenario.STILL,
) -> Selection:
    """Pick up to ``b`` frames by descending score, ties by ascending frame id.

    In the video scenario the smoothed score ranks, frames are accepted one at
    a time and every acceptance is recorded in ``ledger`` (mutated in place).
    ``rules=None`` disables the temporal exclusion rules.
    """
    scenario = Scenario(scenario)
    ordered = sorted(frames, key=lambda fr: _rank_key(fr, scenario))
    return _accept(ordered, b, ledger, rules, scenario)


def select_guided_random(
    frames: Iterable[FrameRecord],
    b: int,
    ledger: ExclusionLedger | None = None,
    rules: TemporalRuleConfig | None = TemporalRuleConfig(),
    scenario: Scenario | str = Scenario.STILL,
    seed: int | Sequence[int] = 0,
) -> Selection:
    """As ``rank_and_select`` but candidates come in a seeded uniform shuffle."""
    scenario = Scenario(scenario)
    base = sorted(frames, key=lambda fr: fr.frame_id)
    perm = np.random.default_rng(seed).permutation(len(base))
    return _accept([base[i] for i in perm], b, ledger, rules, scenario)


@dataclass
class PoolState:
    unlabeled: set[str]
    labeled: list[tuple[int, str]] = field(default_factory=list)
    ledger: ExclusionLedger = field(default_factory=ExclusionLedger)
    cycle_index: int = 0
    rng_seed: int = 0
    plan: BudgetPlan | None = None

    @classmethod
    def fresh(cls, frame_ids: Iterable[str], seed: int = 0, plan: BudgetPlan | None = None) -> "PoolState":
        return cls(set(frame_ids), rng_seed=seed, plan=plan)

    @property
    def labeled_ids(self) -> list[str]:
        return [fid for _, fid in self.labeled]

    def selected_in(self, cycle: int) -> list[str]:
        return [fid for c, fid in self.labeled if c == cycle]

    def to_dict(self) -> dict:
        return {
            "unlabeled": sorted(self.unlabeled),
            "labeled": [[c, fid] for c, fid in self.labeled],
            "ledger": self.ledger.to_dict(),
            "cycle_index": self.cycle_index,
            "rng_seed": self.rng_seed,
            "plan": None if self.plan is None else {"B": self.plan.total, "b": self.plan.per_cycle},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PoolState":
        plan = d.get("plan")
        return cls(
            unlabeled=set(d["unlabeled"]),
            labeled=[(int(c), str(fid)) for c, fid in d["labeled"]],
            ledger=ExclusionLedger.from_dict(d["ledger"]),
            cycle_index=int(d["cycle_index"]),
            rng_seed=int(d["rng_seed"]),
            plan=None if plan is None else BudgetPlan(int(plan["B"]), int(plan["b"])),
        )

    def __eq__(self, other):
        return isinstance(other, PoolState) and self.to_dict() == other.to_dict()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_pool(pool: PoolState, path: str | os.PathLike) -> None:
    state = pool.to_dict()
    doc = {
        "format": POOL_FORMAT,
        "version": POOL_VERSION,
        "checksum": hashlib.sha256(_canonical(state).encode()).hexdigest(),
        "state": state,
    }
    Path(path).write_text(_canonical(doc) + "\n", encoding="utf-8")


def load_pool(path: str | os.PathLike) -> PoolState:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:{e.lineno}: corrupt pool file: {e.msg}") from None
    if not isinstance(doc, dict) or doc.get("format") != POOL_FORMAT:
        raise FormatError(f"{path}: not a pool state file")
    if doc.get("version") != POOL_VERSION:
        raise FormatError(f"{path}: pool file version {doc.get('version')} != {POOL_VERSION}")
    state = doc.get("state")
    if hashlib.sha256(_canonical(state).encode()).hexdigest() != doc.get("checksum"):
        raise FormatError(f"{path}: checksum mismatch, file is corrupt or was edited")
    try:
        return PoolState.from_dict(state)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: invalid pool state ({e})") from None


# Returns image-level scores for the requested frame ids in the given cycle.
ScoresProvider = Callable[[Sequence[str], int], Mapping[str, float]]


@dataclass
class CycleConfig:
    scenario: Scenario | None = None  # None: video if any frame has a video_id
    smoothing: SmoothingConfig | None = SmoothingConfig()
    rules: TemporalRuleConfig | None = TemporalRuleConfig()
    training_dir: str | os.PathLike | None = None
    wait_for_training: bool = False
    wait_timeout: float = 0.0
    min_height: float = 50
    ratio_lo: float = 0.2
    ratio_hi: float = 0.65


@dataclass
class CycleReport:
    cycle: int
    selected: list[str]
    exhausted: bool
    unlabeled_remaining: int
    labeled_total: int
    score_min: float | None = None
    score_mean: float | None = None
    score_max: float | None = None
    pool_score_mean: float | None = None
    instances: int | None = None
    frames_with_instances: int | None = None
    training_manifest: str | None = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class ManifestScorer:
    """Scores provider backed by ``.alpm`` stacks listed in a manifest."""

    def __init__(
        self,
        manifest: Manifest,
        score_cfg: ScoreConfig = ScoreConfig(),
        agg_cfg: AggregationConfig = AggregationConfig(),
        workers: int = 1,
    ):
        self.manifest = manifest
        self.frames = manifest.by_id()
        self.score_cfg = score_cfg
        self.agg_cfg = agg_cfg
        self.workers = workers

    def __call__(self, ids: Sequence[str], cycle: int = 0) -> dict[str, float]:
        loaders = [lambda fr=self.frames[i]: self.manifest.load_stack(fr) for i in ids]
        zs = score_many(loaders, self.score_cfg, self.workers, lambda m: aggregate(m, self.agg_cfg))
        return dict(zip(ids, zs))


def _detect_scenario(frames: Iterable[FrameRecord]) -> Scenario:
    return Scenario.VIDEO if any(fr.is_video for fr in frames) else Scenario.STILL


def write_training_manifest(pool: PoolState, cycle: int, directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"train_cycle{cycle:03d}.json"
    doc = {
        "cycle": cycle,
        "initialization": "pretrained weights",
        "frames": pool.labeled_ids,
        "completion_marker": f"train_cycle{cycle:03d}.done",
    }
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    return path


def _wait_for(marker: Path, timeout: float) -> None:
    deadline = time.monotonic() + timeout
    while not marker.exists():
        if time.monotonic() > deadline:
            raise TimeoutError(f"retraining marker {marker} did not appear within {timeout}s")
        time.sleep(0.5)


def run_cycle(
    pool: PoolState,
    frames: Mapping[str, FrameRecord],
    plan: BudgetPlan,
    strategy: Strategy | str,
    scores_provider: ScoresProvider | None = None,
    config: CycleConfig = CycleConfig(),
) -> tuple[PoolState, CycleReport]:
    """Run one score/select/transfer cycle, mutating and returning ``pool``.

    Retraining is not done here: when ``config.training_dir`` is set a
    training manifest for the external detector is written there, and with
    ``wait_for_training`` the call blocks until its completion marker exists.
    """
    strategy = Strategy(strategy) if not isinstance(strategy, Strategy) else strategy
    if pool.cycle_index >= plan.cycles:
        raise BudgetExhausted(f"all {plan.cycles} cycles of B={plan.total}, b={plan.per_cycle} are done")
    ids = sorted(pool.unlabeled)
    missing = [i for i in ids if i not in frames]
    if missing:
        raise MissingScoreError(f"{len(missing)} unlabeled frames unknown to the manifest, e.g. {missing[0]!r}")
    cands = [dataclasses.replace(frames[i]) for i in ids]
    scenario = config.scenario or _detect_scenario(cands)
    cycle = pool.cycle_index

    zs: Mapping[str, float] = {}
    if strategy is Strategy.GUIDED_RANDOM:
        sel = select_guided_random(
            cands, plan.per_cycle, pool.ledger, config.rules, scenario, seed=[pool.rng_seed, cycle]
        )
    else:
        if scores_provider is None:
            raise ValueError(f"strategy {strategy.value} needs a scores provider")
        zs = scores_provider(ids, cycle)
        for fr in cands:
            if fr.frame_id not in zs:
                raise MissingScoreError(f"no score for unlabeled frame {fr.frame_id!r} in cycle {cycle}")
            fr.score = float(zs[fr.frame_id])
            fr.smoothed_score = None
        if scenario is Scenario.VIDEO and config.smoothing is not None:
            smooth_frames(cands, config.smoothing)
        sel = rank_and_select(cands, plan.per_cycle, pool.ledger, config.rules, scenario)

    for fid in sel.ids:
        pool.unlabeled.remove(fid)
        pool.labeled.append((cycle, fid))
    advance_cycle(pool.ledger)
    pool.cycle_index += 1

    report = CycleReport(
        cycle=cycle,
        selected=list(sel.ids),
        exhausted=sel.exhausted,
        unlabeled_remaining=len(pool.unlabeled),
        labeled_total=len(pool.labeled),
    )
    if zs:
        chosen = np.array([zs[i] for i in sel.ids]) if sel.ids else np.array([])
        if chosen.size:
            report.score_min = float(chosen.min())
            report.score_mean = float(chosen.mean())
            report.score_max = float(chosen.max())
        report.pool_score_mean = float(np.mean([zs[i] for i in ids])) if ids else None
    picked = [frames[i] for i in sel.ids]
    if any(fr.annotations is not None for fr in picked):
        counts = [
            len(filter_annotations(fr.annotations or [], config.min_height, config.ratio_lo, config.ratio_hi))
            for fr in picked
        ]
        report.instances = sum(counts)
        report.frames_with_instances = sum(c > 0 for c in counts)
    if config.training_dir is not None:
        path = write_training_manifest(pool, cycle, config.training_dir)
        report.training_manifest = str(path)
        if config.wait_for_training:
            _wait_for(path.parent / f"train_cycle{cycle:03d}.done", config.wait_timeout)
    return pool, report


@dataclass(frozen=True)
class TtcParams:
    pool_size: int  # N
    t_forward: float = 0.15
    t_forward_backward: float = 0.20
    epochs: int = 50

    def __post_init__(self):
        if min(self.pool_size, self.t_forward, self.t_forward_backward, self.epochs) <= 0:
            raise ValueError("time-to-completion parameters must all be positive")


def estimate_ttc(plan: BudgetPlan, params: TtcParams) -> float:
    """Seconds to finish all cycles, labeling time excluded.

    Each cycle runs a forward pass over every frame still unlabeled, then
    retrains for ``epochs`` epochs on everything labeled so far.
    """
    b, n = plan.per_cycle, params.pool_size
    scoring = sum((n - c * b) * params.t_forward for c in range(plan.cycles))
    training = sum(c * b * params.epochs * params.t_forward_backward for c in range(1, plan.cycles + 1))
    return scoring + training


@dataclass
class SelectionStats:
    rows: list[dict]

    FIELDS = (
        "cycle",
        "frames",
        "instances",
        "frames_with_instances",
        "cum_frames",
        "cum_instances",
        "cum_frames_with_instances",
    )

    @property
    def total_instances(self) -> int:
        return self.rows[-1]["cum_instances"] if self.rows else 0

    @property
    def total_frames_with_instances(self) -> int:
        return self.rows[-1]["cum_frames_with_instances"] if self.rows else 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.FIELDS, lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows)
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows}, indent=1, sort_keys=True) + "\n"


def report_statistics(
    pool: PoolState,
    frames: Mapping[str, FrameRecord],
    min_height: float = 50,
    ratio_lo: float = 0.2,
    ratio_hi: float = 0.65,
    apply_filter: bool = True,
) -> SelectionStats:
    """Per-cycle and cumulative frame/instance counts over the labeled set."""
    rows = []
    cum = [0, 0, 0]
    for cycle in range(pool.cycle_index):
        n_frames = n_inst = n_with = 0
        for fid in pool.selected_in(cycle):
            fr = frames.get(fid)
            boxes = (fr.annotations or []) if fr is not None else []
            if apply_filter:
                boxes = filter_annotations(boxes, min_height, ratio_lo, ratio_hi)
            n_frames += 1
            n_inst += len(boxes)
            n_with += bool(boxes)
        cum = [cum[0] + n_frames, cum[1] + n_inst, cum[2] + n_with]
        rows.append(
            {
                "cycle": cycle,
                "frames": n_frames,
                "instances": n_inst,
                "frames_with_instances": n_with,
                "cum_frames": cum[0],
                "cum_instances": cum[1],
                "cum_frames_with_instances": cum[2],
            }
        )
    return SelectionStats(rows)
