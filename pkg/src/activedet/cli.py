"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .aggregation import AggregationConfig, aggregate, parse_region
from .config import ConfigError, EngineConfig, load_config, merge
from .model import FormatError, ProbabilityStack, read_manifest, read_probability_stack, write_probability_stack
from .scoring import LN2, Border, Method, ScoreConfig, score_many
from .selection import (
    BudgetExhausted,
    BudgetPlan,
    CycleConfig,
    ManifestScorer,
    MissingScoreError,
    PoolState,
    Scenario,
    Strategy,
    TtcParams,
    estimate_ttc,
    load_pool,
    rank_and_select,
    report_statistics,
    run_cycle,
    save_pool,
    select_guided_random,
)
from .synthetic import SimulationConfig, WorldConfig, generate_world, simulate
from .temporal import ExclusionLedger, SmoothingConfig, TemporalRuleConfig, smooth_frames

log = logging.getLogger("activedet")

STRATEGIES = ["proposed", "entropy", "mc-dropout", "guided-random"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _dump(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _write_pair(out: str | None, doc: dict, rows: list[dict], fields: list[str]) -> None:
    """Write JSON and CSV side by side; ``out``'s suffix picks the primary."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if out is None:
        sys.stdout.write(_dump(doc))
        return
    path = Path(out)
    if path.suffix == ".csv":
        path.write_text(buf.getvalue(), encoding="utf-8")
        path.with_suffix(".json").write_text(_dump(doc), encoding="utf-8")
    else:
        path.write_text(_dump(doc), encoding="utf-8")
        path.with_suffix(".csv").write_text(buf.getvalue(), encoding="utf-8")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; explicit flags win")


def _add_scoring(p):
    p.add_argument("--method", choices=["proposed", "entropy", "mc-dropout"])
    p.add_argument("--radius", type=int)
    p.add_argument("--border", choices=["actual", "fixed"])
    p.add_argument("--mirror", action="store_const", const=True, help="average with mirrored stack first")
    p.add_argument("--workers", type=int)


def _add_aggregation(p):
    p.add_argument("--region-size", dest="region_size")
    p.add_argument("--aggregate", choices=["maxpool-mean", "mean"])


def _add_temporal(p):
    p.add_argument("--smooth-window", dest="smooth_window", type=int)
    p.add_argument("--smooth-sigma", dest="smooth_sigma", type=float)
    p.add_argument("--dt1", type=int)
    p.add_argument("--dt2", type=int)
    p.add_argument("--no-smoothing", dest="smoothing", action="store_const", const=False)
    p.add_argument("--no-temporal-rules", dest="temporal_rules", action="store_const", const=False)


def _add_budget(p):
    p.add_argument("--b", type=int, help="per-cycle labeling budget")
    p.add_argument("--B", type=int, help="total labeling budget")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="activedet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("score", help="score every frame of a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    _add_scoring(p)
    _add_aggregation(p)
    p.add_argument("--dump-maps", dest="dump_maps", help="directory for normalised score maps (.alpm)")
    p.add_argument("--out")

    p = sub.add_parser("aggregate", help="image-level score of dumped score maps")
    _add_common(p)
    p.add_argument("--map", dest="maps", action="append", required=True)
    p.add_argument("--scale", type=float, default=1.0, help="multiply map values by this first")
    _add_aggregation(p)
    p.add_argument("--out")

    p = sub.add_parser("select", help="pick b frames from a scores file")
    _add_common(p)
    p.add_argument("--scores", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--b", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--scenario", choices=["auto", "still", "video"], default="auto")
    p.add_argument("--pool", help="restrict to this pool's unlabeled set and honour its ledger")
    _add_temporal(p)
    p.add_argument("--out")

    p = sub.add_parser("cycle", help="run active-learning cycles against a pool state")
    p.add_argument("action", choices=["run"])
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pool", required=True)
    p.add_argument("--strategy", choices=STRATEGIES)
    _add_budget(p)
    p.add_argument("--seed", type=int)
    p.add_argument("--cycles", type=int, default=1, help="number of cycles to run (0 = all remaining)")
    p.add_argument("--scores", help="precomputed image-level scores for this cycle")
    p.add_argument("--scenario", choices=["auto", "still", "video"], default="auto")
    p.add_argument("--train-dir", dest="train_dir")
    _add_scoring(p)
    _add_aggregation(p)
    _add_temporal(p)
    p.add_argument("--out")

    p = sub.add_parser("ttc", help="estimate time-to-completion")
    _add_common(p)
    p.add_argument("--N", type=int, required=True)
    _add_budget(p)
    p.add_argument("--T", dest="epochs", type=int)
    p.add_argument("--t-fwd", dest="t_forward", type=float)
    p.add_argument("--t-fwdbwd", dest="t_forward_backward", type=float)
    p.add_argument("--out")

    p = sub.add_parser("simulate", help="closed-loop simulation on a synthetic world")
    _add_common(p)
    p.add_argument("--world-config", dest="world_config")
    p.add_argument("--strategy", choices=STRATEGIES)
    p.add_argument("--seeds", type=int)
    p.add_argument("--seed", type=int, help="first run seed")
    _add_budget(p)
    p.add_argument("--radius", type=int)
    _add_aggregation(p)
    _add_temporal(p)
    p.add_argument("--out")

    p = sub.add_parser("report", help="per-cycle statistics of the labeled set")
    _add_common(p)
    p.add_argument("--pool", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--min-height", dest="min_height", type=float)
    p.add_argument("--out")
    return parser


def _engine_config(args) -> EngineConfig:
    file_values = load_config(args.config) if getattr(args, "config", None) else {}
    flags = {k: v for k, v in vars(args).items() if k in EngineConfig.keys()}
    if "method" in flags and flags["method"]:
        flags["method"] = flags["method"].replace("-", "_")
    cfg = merge(file_values, flags)
    cfg.method = cfg.method.replace("-", "_")
    args._explicit = set(file_values) | {k for k, v in flags.items() if v is not None}
    return cfg


def _score_config(cfg: EngineConfig, method: str | None = None) -> ScoreConfig:
    border = {"actual": Border.ACTUAL_COUNT, "fixed": Border.FIXED_DENOMINATOR}.get(cfg.border)
    if border is None:
        raise UsageError(f"border must be 'actual' or 'fixed', got {cfg.border!r}")
    try:
        return ScoreConfig(Method(method or cfg.method), cfg.radius, border, cfg.mirror)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _agg_config(cfg: EngineConfig) -> AggregationConfig:
    try:
        w, h = parse_region(cfg.region_size)
        return AggregationConfig(w, h, cfg.aggregate)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _plan(cfg: EngineConfig) -> BudgetPlan:
    try:
        return BudgetPlan(cfg.B, cfg.b)
    except ValueError as e:
        raise UsageError(str(e)) from None


def _temporal(cfg: EngineConfig):
    try:
        smoothing = SmoothingConfig(cfg.smooth_window, cfg.smooth_sigma) if cfg.smoothing else None
        rules = TemporalRuleConfig(cfg.dt1, cfg.dt2) if cfg.temporal_rules else None
    except ValueError as e:
        raise UsageError(str(e)) from None
    return smoothing, rules


def _read_scores(path: str) -> dict[str, float]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return {str(f["frame_id"]): float(f["score"]) for f in doc["frames"]}
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:{e.lineno}: invalid JSON: {e.msg}") from None
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: scores file needs frames[].frame_id/score ({e})") from None


def cmd_score(args, cfg: EngineConfig) -> int:
    manifest = read_manifest(args.manifest)
    score_cfg = _score_config(cfg)
    agg_cfg = _agg_config(cfg)
    dump = Path(args.dump_maps) if args.dump_maps else None
    if dump:
        dump.mkdir(parents=True, exist_ok=True)

    def reduce(smap):
        entry = {"frame_id": smap.frame_id, "score": aggregate(smap, agg_cfg)}
        if dump:
            # the container only holds [0,1]; store maps divided by their upper bound
            scale = smap.branches * LN2
            path = dump / f"{smap.frame_id}.alpm"
            vals = np.clip(smap.values / scale, 0.0, 1.0)
            write_probability_stack(ProbabilityStack(smap.frame_id, vals[None, None]), path)
            entry["map"] = str(path)
            entry["map_scale"] = scale
        return entry

    loaders = [lambda fr=fr: manifest.load_stack(fr) for fr in manifest.frames]
    results = score_many(loaders, score_cfg, cfg.resolved_workers(), reduce)
    for entry in results:
        print(f"{entry['frame_id']}\t{entry['score']:.6f}")
    if args.out:
        doc = {
            "method": score_cfg.method.value,
            "radius": score_cfg.radius,
            "border": score_cfg.border.value,
            "region_size": cfg.region_size,
            "aggregate": cfg.aggregate,
            "frames": results,
        }
        rows = [{"frame_id": r["frame_id"], "score": repr(r["score"])} for r in results]
        _write_pair(args.out, doc, rows, ["frame_id", "score"])
    return 0


def cmd_aggregate(args, cfg: EngineConfig) -> int:
    agg_cfg = _agg_config(cfg)
    rows = []
    for path in args.maps:
        stack = read_probability_stack(path)
        z = aggregate(stack.data[0, 0].astype(np.float64) * args.scale, agg_cfg)
        rows.append({"frame_id": stack.frame_id, "score": z})
        print(f"{stack.frame_id}\t{z:.6f}")
    if args.out:
        _write_pair(args.out, {"aggregate": cfg.aggregate, "region_size": cfg.region_size, "frames": rows},
                    [{"frame_id": r["frame_id"], "score": repr(r["score"])} for r in rows], ["frame_id", "score"])
    return 0


def _scenario(choice: str, frames) -> Scenario:
    if choice == "auto":
        return Scenario.VIDEO if any(fr.is_video for fr in frames) else Scenario.STILL
    return Scenario(choice)


def cmd_select(args, cfg: EngineConfig) -> int:
    manifest = read_manifest(args.manifest)
    scores = _read_scores(args.scores)
    smoothing, rules = _temporal(cfg)
    strategy = Strategy.parse(cfg.strategy)
    if strategy is Strategy.GUIDED_RANDOM and cfg.seed is None:
        raise UsageError("guided-random selection requires --seed")
    if cfg.b < 1:
        raise UsageError(f"--b must be >= 1, got {cfg.b}")
    frames = manifest.frames
    ledger = ExclusionLedger()
    if args.pool:
        pool = load_pool(args.pool)
        ledger = pool.ledger
        frames = [fr for fr in frames if fr.frame_id in pool.unlabeled]
    scenario = _scenario(args.scenario, frames)
    cands = []
    for fr in frames:
        fr = dataclasses.replace(fr)
        if strategy is not Strategy.GUIDED_RANDOM:
            if fr.frame_id not in scores:
                raise MissingScoreError(f"no score for frame {fr.frame_id!r}")
            fr.score = scores[fr.frame_id]
        cands.append(fr)
    if strategy is Strategy.GUIDED_RANDOM:
        sel = select_guided_random(cands, cfg.b, ledger, rules, scenario, cfg.seed)
    else:
        if scenario is Scenario.VIDEO and smoothing is not None:
            smooth_frames(cands, smoothing)
        sel = rank_and_select(cands, cfg.b, ledger, rules, scenario)
    for fid in sel.ids:
        print(fid)
    if sel.exhausted:
        log.warning("only %d of %d frames could be selected", len(sel.ids), cfg.b)
    if args.out:
        doc = {"strategy": strategy.value, "b": cfg.b, "exhausted": sel.exhausted, "selected": sel.ids}
        _write_pair(args.out, doc, [{"rank": i, "frame_id": f} for i, f in enumerate(sel.ids)],
                    ["rank", "frame_id"])
    return 0


def cmd_cycle(args, cfg: EngineConfig) -> int:
    manifest = read_manifest(args.manifest)
    frames = manifest.by_id()
    strategy = Strategy.parse(cfg.strategy)
    plan = _plan(cfg)
    pool_path = Path(args.pool)
    if pool_path.exists():
        pool = load_pool(pool_path)
        if pool.plan is not None and pool.plan != plan and {"b", "B"} & args._explicit:
            raise UsageError(
                f"pool was created with B={pool.plan.total}, b={pool.plan.per_cycle}; got B={plan.total}, b={plan.per_cycle}"
            )
        plan = pool.plan or plan
    else:
        if cfg.seed is None:
            raise UsageError("creating a new pool requires --seed")
        pool = PoolState.fresh(frames, seed=cfg.seed, plan=plan)
    smoothing, rules = _temporal(cfg)
    scenario = None if args.scenario == "auto" else Scenario(args.scenario)
    train_dir = args.train_dir or str(pool_path.parent / (pool_path.stem + "_training"))
    cyc_cfg = CycleConfig(scenario, smoothing, rules, train_dir,
                          min_height=cfg.min_height, ratio_lo=cfg.ratio_lo, ratio_hi=cfg.ratio_hi)
    provider = None
    if strategy is not Strategy.GUIDED_RANDOM:
        if args.scores:
            fixed = _read_scores(args.scores)
            provider = lambda ids, cycle: fixed  # noqa: E731
        else:
            provider = ManifestScorer(manifest, _score_config(cfg, strategy.method.value),
                                      _agg_config(cfg), cfg.resolved_workers())
    n = args.cycles if args.cycles > 0 else plan.cycles - pool.cycle_index
    reports = []
    for _ in range(n):
        pool, rep = run_cycle(pool, frames, plan, strategy, provider, cyc_cfg)
        save_pool(pool, pool_path)
        reports.append(rep.to_dict())
        print(f"cycle {rep.cycle}: selected {len(rep.selected)}, unlabeled {rep.unlabeled_remaining}, "
              f"labeled {rep.labeled_total}")
    if args.out:
        rows = [{"cycle": r["cycle"], "rank": i, "frame_id": f} for r in reports for i, f in enumerate(r["selected"])]
        _write_pair(args.out, {"strategy": strategy.value, "cycles": reports}, rows, ["cycle", "rank", "frame_id"])
    return 0


def cmd_ttc(args, cfg: EngineConfig) -> int:
    if "B" not in args._explicit:
        cfg.B = 7500
    plan = _plan(cfg)
    try:
        params = TtcParams(args.N, cfg.t_forward, cfg.t_forward_backward, cfg.epochs)
    except ValueError as e:
        raise UsageError(str(e)) from None
    secs = estimate_ttc(plan, params)
    print(f"time-to-completion: {secs / 3600:.1f} h ({secs:.0f} s) for N={args.N}, B={plan.total}, b={plan.per_cycle}, K={plan.cycles}")
    if args.out:
        doc = {"N": args.N, "B": plan.total, "b": plan.per_cycle, "cycles": plan.cycles,
               "epochs": params.epochs, "t_forward": params.t_forward,
               "t_forward_backward": params.t_forward_backward, "seconds": secs, "hours": secs / 3600}
        _write_pair(args.out, doc, [doc], list(doc))
    return 0


def cmd_simulate(args, cfg: EngineConfig) -> int:
    if cfg.seed is None:
        raise UsageError("simulate requires --seed")
    world_doc = {}
    if args.world_config:
        try:
            world_doc = json.loads(Path(args.world_config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.world_config}:{e.lineno}: invalid JSON: {e.msg}") from None
    sim_keys = {"b": 20, "B": 200, "score_radius": 2, "region": [8, 8], "mc_samples": 10}
    sim = {k: world_doc.pop(k, v) for k, v in sim_keys.items()}
    try:
        world = generate_world(WorldConfig.from_dict(world_doc))
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{args.world_config}: {e}") from None
    for key in ("b", "B"):
        if key in args._explicit:
            sim[key] = getattr(cfg, key)
    if "radius" in args._explicit:
        sim["score_radius"] = cfg.radius
    if "region_size" in args._explicit:
        sim["region"] = list(parse_region(cfg.region_size))
    try:
        plan = BudgetPlan(sim["B"], sim["b"])
    except ValueError as e:
        raise UsageError(str(e)) from None
    smoothing, rules = _temporal(cfg)
    sim_cfg = SimulationConfig(sim["score_radius"], tuple(sim["region"]), _agg_config(cfg).mode,
                               smoothing, rules, sim["mc_samples"])
    seeds = list(range(cfg.seed, cfg.seed + cfg.seeds))
    try:
        report = simulate(world, plan, Strategy.parse(cfg.strategy), seeds, sim_cfg)
    except ValueError as e:
        raise UsageError(str(e)) from None
    print(f"{report.strategy}: mean final coverage {report.mean_final_coverage():.3f}, "
          f"mean selected instances {report.mean_instances():.1f} over {len(seeds)} seeds")
    if args.out:
        path = Path(args.out)
        csv_path = path if path.suffix == ".csv" else path.with_suffix(".csv")
        csv_path.write_text(report.to_csv(), encoding="utf-8")
        csv_path.with_suffix(".json").write_text(report.to_json(), encoding="utf-8")
    return 0


def cmd_report(args, cfg: EngineConfig) -> int:
    pool = load_pool(args.pool)
    manifest = read_manifest(args.manifest)
    stats = report_statistics(pool, manifest.by_id(), cfg.min_height, cfg.ratio_lo, cfg.ratio_hi)
    if args.out:
        path = Path(args.out)
        csv_path = path if path.suffix == ".csv" else path.with_suffix(".csv")
        csv_path.write_text(stats.to_csv(), encoding="utf-8")
        csv_path.with_suffix(".json").write_text(stats.to_json(), encoding="utf-8")
    else:
        sys.stdout.write(stats.to_csv())
    return 0


COMMANDS = {
    "score": cmd_score,
    "aggregate": cmd_aggregate,
    "select": cmd_select,
    "cycle": cmd_cycle,
    "ttc": cmd_ttc,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    log.debug("kernel backend: %s", kernels.BACKEND)
    try:
        cfg = _engine_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as e:
        print(f"activedet: error: {e}", file=sys.stderr)
        return 1
    except (FormatError, MissingScoreError, BudgetExhausted, OSError, TimeoutError) as e:
        print(f"activedet: data error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
