"""Command-line interface: calibrate, simulate, sweep, scaling, raft-demo.

Every subcommand is deterministic given a config and seed. Flags
override config-file values; machine-readable outputs embed the fully
resolved configuration so result files are self-describing.

Exit codes: 0 success, 1 validation error, 2 runtime or I/O error,
3 property-check failure (raft-demo).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from swarmraft.core import substream
from swarmraft.harness import (
    SwarmConfig,
    WorldState,
    _atomic_write,
    export_results,
    grid_sweep,
    init_world,
    run_round,
    run_trial,
    scaling_experiment,
    snapshot_round,
)
from swarmraft.raft_lite import (
    Cluster,
    check_election_safety,
    check_reelection_bound,
)
from swarmraft.sensors import measure_ranges, sample_formation, sample_gnss
from swarmraft.verification import calibrate_threshold, reports_from_arrays, residual

log = logging.getLogger("swarmraft")

SCALAR_FLAGS = [
    ("n", int),
    ("f", int),
    ("rounds", int),
    ("dimension", int),
    ("bounding_box", float),
    ("min_separation", float),
    ("sigma_d", float),
    ("velocity", float),
    ("seed", int),
]


def _load_config(args) -> SwarmConfig:
    """Config file first, then presets, then flag overrides on top."""
    data: dict = {}
    if getattr(args, "preset", None):
        ref = resources.files("swarmraft").joinpath(f"presets/{args.preset}.json")
        if not ref.is_file():
            raise ValueError(f"unknown preset {args.preset!r}")
        data = json.loads(ref.read_text())
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ValueError(f"config file not found: {path}")
        data = json.loads(path.read_text())

    for name, _ in SCALAR_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if getattr(args, "consensus", None) is not None:
        data["consensus_enabled"] = args.consensus
    for nested in ("attack", "detection"):
        raw = getattr(args, nested, None)
        if raw is not None:
            data[nested] = json.loads(raw)
    return SwarmConfig.from_dict(data)


def _out_path(args, name: str) -> str:
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return str(out_dir / name)


def _write_json(path: str, payload: dict) -> None:
    _atomic_write(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_calibrate(args) -> int:
    config = _load_config(args)
    if config.f != 0 or config.attack.attacked_count != 0:
        raise ValueError("calibration requires honest configuration")
    rng = substream(config.seed, "calibration")
    result = calibrate_threshold(config, args.trials, rng)

    holdout_rng = substream(config.seed, "calibration-holdout")
    exceed = 0
    total = 0
    holdout_rounds = max(1, args.holdout // config.n)
    for _ in range(holdout_rounds):
        truths = sample_formation(
            config.n, config.bounding_box, config.min_separation, config.dimension, holdout_rng
        )
        readings = np.stack([sample_gnss(p, config.r_gnss, holdout_rng) for p in truths])
        ranges = measure_ranges(truths, config.sigma_d, holdout_rng)
        for rep in reports_from_arrays(readings, ranges):
            peers = [
                (readings[j], float(ranges.d[rep.node_id, j]))
                for j in range(config.n)
                if j != rep.node_id
            ]
            total += 1
            if residual(rep, peers) > result.threshold:
                exceed += 1

    counts, edges = np.histogram(result.residuals, bins=40)
    report = {
        "config": config.to_dict(),
        "mu_e": result.mu_e,
        "sigma_e": result.sigma_e,
        "T": result.threshold,
        "samples": int(result.residuals.size),
        "holdout_node_rounds": total,
        "holdout_exceedance_rate": exceed / total if total else 0.0,
        "histogram": {"bin_edges": [float(e) for e in edges], "counts": [int(c) for c in counts]},
    }
    path = _out_path(args, "calibration.json")
    _write_json(path, report)
    log.info("calibration written to %s (T=%.4f m)", path, result.threshold)
    print(f"T = {result.threshold:.6f} m (mu={result.mu_e:.6f}, sigma={result.sigma_e:.6f})")
    return 0


def cmd_simulate(args) -> int:
    config = _load_config(args)
    world = init_world(config)
    outcomes = []
    for _ in range(config.rounds):
        outcomes = run_round(world)
    snapshot = snapshot_round(world, outcomes)
    result = run_trial(config)

    snap_path = _out_path(args, "snapshot.json")
    _write_json(snap_path, snapshot)
    trial_path = _out_path(args, "trial.json")
    _write_json(trial_path, {"config": config.to_dict(), "result": result.__dict__})
    flagged = sum(1 for node in snapshot["nodes"] if node["flagged"])
    print(
        f"simulated n={config.n} f={config.f}: {flagged} flagged, "
        f"baseline MAE {result.baseline_mae:.3f} m, recovered MAE {result.recovered_mae:.3f} m"
    )
    return 0


def cmd_sweep(args) -> int:
    config = _load_config(args)
    n_list = [int(x) for x in args.n_list.split(",")]
    f_list = [int(x) for x in args.f_list.split(",")]
    raw_path = _out_path(args, "trials.jsonl")
    with open(raw_path, "w", encoding="utf-8") as raw:
        summary = grid_sweep(n_list, f_list, args.trials, config, jobs=args.jobs, raw_sink=raw)
    export_results(summary, "csv", _out_path(args, "sweep.csv"))
    export_results(summary, "json", _out_path(args, "sweep.json"))
    print(f"swept {len(summary.cells)} cells x {args.trials} trials")
    return 0


def cmd_scaling(args) -> int:
    config = _load_config(args)
    f_range = [int(x) for x in args.f_range.split(",")]
    summary = scaling_experiment(f_range, args.trials, config, jobs=args.jobs)
    export_results(summary, "csv", _out_path(args, "scaling.csv"))
    export_results(summary, "json", _out_path(args, "scaling.json"))
    for cell in summary.cells:
        print(
            f"n={cell.n:3d} f={cell.f}: attacked-node recovery error "
            f"mean {cell.attacked_recovered.mean:.3f} m, "
            f"swarm recovered MAE mean {cell.recovered.mean:.3f} m"
        )
    return 0


def _parse_crash(spec: str) -> tuple[int, str, int]:
    parts = spec.split(":")
    if len(parts) != 3:
        raise ValueError(f"crash spec must be TICK:NODE:DURATION, got {spec!r}")
    tick = int(parts[0])
    node = parts[1]
    duration = int(parts[2])
    if node != "leader":
        int(node)
    return tick, node, duration


def cmd_raft_demo(args) -> int:
    if args.n < 3:
        raise ValueError("raft-demo needs n >= 3")
    crashes = sorted((_parse_crash(s) for s in args.crash), key=lambda c: c[0])
    cluster = Cluster(args.n, args.seed, trace=True)
    pending = list(crashes)
    for _ in range(args.ticks):
        while pending and pending[0][0] <= cluster.now:
            _, who, duration = pending.pop(0)
            node_id = cluster.leader_id() if who == "leader" else int(who)
            if node_id is not None:
                cluster.crash(node_id, duration)
        cluster.step()

    trace_path = _out_path(args, "raft_trace.jsonl")
    cluster.write_trace(trace_path)
    safe = check_election_safety(cluster.events)
    bounded, delays = check_reelection_bound(cluster.events, cluster.max_timeout)
    verdict = {
        "n": args.n,
        "seed": args.seed,
        "ticks": args.ticks,
        "max_election_timeout": cluster.max_timeout,
        "election_safety": safe,
        "reelection_bounded": bounded,
        "reelection_delays": delays,
        "verdict": "PASS" if (safe and bounded) else "FAIL",
    }
    _write_json(_out_path(args, "raft_verdict.json"), verdict)
    print(f"raft-demo: {verdict['verdict']} (trace: {trace_path})")
    return 0 if verdict["verdict"] == "PASS" else 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swarmraft",
        description="Swarm localization with consensus: simulate, calibrate, and sweep.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_preset=False):
        p.add_argument("--config", help="JSON config file mirroring SwarmConfig")
        if with_preset:
            p.add_argument("--preset", help="bundled scenario name, e.g. fig1_6_2")
        p.add_argument("--output-dir", default=".", help="directory for output files")
        for name, typ in SCALAR_FLAGS:
            p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ, default=None)
        p.add_argument("--consensus", dest="consensus", action="store_true", default=None)
        p.add_argument("--no-consensus", dest="consensus", action="store_false", default=None)
        p.add_argument("--attack", help="JSON object overriding the attack config")
        p.add_argument("--detection", help="JSON object overriding the detection params")

    p = sub.add_parser("calibrate", help="estimate the honest residual threshold")
    add_common(p)
    p.add_argument("--trials", type=int, default=300)
    p.add_argument("--holdout", type=int, default=10_000, help="held-out node-rounds")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("simulate", help="run one trial and snapshot the final round")
    add_common(p, with_preset=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="factorial (n, f) Monte Carlo sweep")
    add_common(p)
    p.add_argument("--n-list", default="5,9,13,17")
    p.add_argument("--f-list", default="1,2,3,4")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("scaling", help="minimal-swarm scaling experiment (n = 2f+1)")
    add_common(p)
    p.add_argument("--f-range", default="1,2,3,4,5,6,7,8")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("raft-demo", help="consensus trace with scripted crashes")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ticks", type=int, default=80)
    p.add_argument(
        "--crash",
        action="append",
        default=[],
        help="TICK:NODE:DURATION where NODE is an id or 'leader'; repeatable",
    )
    p.add_argument("--output-dir", default=".")
    p.set_defaults(func=cmd_raft_demo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
