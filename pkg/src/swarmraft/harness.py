"""Round pipeline, Monte Carlo trials, sweeps, and result export.

A trial owns its entire RNG lineage, derived from (seed, n, f,
trial-index), so sweeps are reproducible trial-by-trial no matter how
work is scheduled across processes.

Each round runs the six-step protocol loop: sense, inform the leader,
estimate, evaluate, recover, finalize. With consensus enabled the
outcomes are the ones committed through the consensus log; without it
the verification pipeline is invoked directly, which is byte-equivalent
and much faster for large sweeps.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from swarmraft.attacks import AttackConfig, AttackPlan, plan_attack
from swarmraft.core import CovarianceDiag, derive_seed, mean_absolute_error, substream
from swarmraft.raft_lite import Cluster
from swarmraft.sensors import (
    MotionIncrement,
    NodeState,
    advance_round,
    initial_states,
    measure_ranges,
    sample_formation,
)
from swarmraft.verification import (
    DetectionParams,
    OpCounters,
    VerificationOutcome,
    reports_from_arrays,
    verify_and_recover,
)

CSV_COLUMNS = [
    "n",
    "f",
    "trials",
    "baseline_mean",
    "baseline_median",
    "recovered_mean",
    "recovered_median",
    "recovered_iqr",
    "tp",
    "fp",
    "fn",
    "leader_ops_mean",
    "node_ops_mean",
]


def _default_gnss() -> CovarianceDiag:
    return CovarianceDiag.isotropic(4.0, dimension=2)


def _default_ins() -> CovarianceDiag:
    return CovarianceDiag.isotropic(0.25, dimension=2)


@dataclass(frozen=True)
class SwarmConfig:
    """Everything one trial needs: swarm shape, noise, adversary, detection."""

    n: int = 9
    f: int = 0
    rounds: int = 1
    dimension: int = 2
    bounding_box: float = 200.0
    min_separation: float = 10.0
    r_gnss: CovarianceDiag = field(default_factory=_default_gnss)
    r_ins: CovarianceDiag = field(default_factory=_default_ins)
    sigma_d: float = 0.5
    velocity: float = 0.0
    attack: AttackConfig = field(default_factory=AttackConfig)
    detection: DetectionParams = field(default_factory=DetectionParams)
    consensus_enabled: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be >= 2")
        if not 0 <= self.f <= self.n:
            raise ValueError(f"need 0 <= f <= n, got f={self.f}, n={self.n}")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.dimension not in (2, 3):
            raise ValueError("dimension must be 2 or 3")
        if self.min_separation <= 0:
            raise ValueError("min_separation must be > 0")
        if self.sigma_d < 0:
            raise ValueError("sigma_d must be >= 0")
        if not 0 <= self.seed <= 2**64 - 1:
            raise ValueError("seed must fit in 64 unsigned bits")
        # f on the config is authoritative; keep the attack config in step.
        if self.attack.attacked_count != self.f:
            object.__setattr__(self, "attack", replace(self.attack, attacked_count=self.f))
        self.attack.validate_against(self.n)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "f": self.f,
            "rounds": self.rounds,
            "dimension": self.dimension,
            "bounding_box": self.bounding_box,
            "min_separation": self.min_separation,
            "r_gnss": list(self.r_gnss.variances),
            "r_ins": list(self.r_ins.variances),
            "sigma_d": self.sigma_d,
            "velocity": self.velocity,
            "attack": asdict(self.attack),
            "detection": asdict(self.detection),
            "consensus_enabled": self.consensus_enabled,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SwarmConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "r_gnss" in kwargs:
            kwargs["r_gnss"] = CovarianceDiag(tuple(kwargs["r_gnss"]))
        if "r_ins" in kwargs:
            kwargs["r_ins"] = CovarianceDiag(tuple(kwargs["r_ins"]))
        if "attack" in kwargs:
            attack = kwargs["attack"]
            if isinstance(attack, dict):
                unknown = set(attack) - set(AttackConfig.__dataclass_fields__)
                if unknown:
                    raise ValueError(f"unknown attack keys: {sorted(unknown)}")
                if "fixed_offset" in attack:
                    attack = dict(attack, fixed_offset=tuple(attack["fixed_offset"]))
                kwargs["attack"] = AttackConfig(**attack)
        if "detection" in kwargs:
            det = kwargs["detection"]
            if isinstance(det, dict):
                unknown = set(det) - set(DetectionParams.__dataclass_fields__)
                if unknown:
                    raise ValueError(f"unknown detection keys: {sorted(unknown)}")
                kwargs["detection"] = DetectionParams(**det)
        return cls(**kwargs)


@dataclass(frozen=True)
class TrialResult:
    """Metrics from one trial, measured on its final round."""

    baseline_mae: float
    recovered_mae: float
    attacked_baseline_mae: float
    attacked_recovered_mae: float
    honest_recovered_mae: float
    true_positive_flags: int
    false_positive_flags: int
    false_negative_flags: int
    leader_ops: int
    node_ops: int
    messages: int
    ticks_to_commit: int


@dataclass
class WorldState:
    """Mutable per-trial simulation state."""

    config: SwarmConfig
    states: list[NodeState]
    plan: AttackPlan
    round_index: int
    gnss_rng: np.random.Generator
    ins_rng: np.random.Generator
    range_rng: np.random.Generator
    velocities: np.ndarray
    cluster: Optional[Cluster] = None
    counters: OpCounters = field(default_factory=OpCounters)
    messages: int = 0
    ticks_to_commit: int = 0
    last_reported: Optional[np.ndarray] = None
    last_outcomes: Optional[list[VerificationOutcome]] = None


def init_world(config: SwarmConfig) -> WorldState:
    """Place the formation, pick the attacked set, and wire RNG streams."""
    seed = config.seed
    formation = sample_formation(
        config.n,
        config.bounding_box,
        config.min_separation,
        config.dimension,
        substream(seed, "formation"),
    )
    planar = config.dimension == 2
    plan = plan_attack(config.n, config.attack, substream(seed, "attack"), planar=planar)
    if config.velocity > 0:
        vel_rng = substream(seed, "velocity")
        direction = vel_rng.standard_normal((config.n, 3))
        if planar:
            direction[:, 2] = 0.0
        norms = np.maximum(np.linalg.norm(direction, axis=1, keepdims=True), 1e-12)
        velocities = config.velocity * direction / norms
    else:
        velocities = np.zeros((config.n, 3))
    cluster = None
    if config.consensus_enabled:
        cluster = Cluster(config.n, derive_seed(seed, "raft"))
    return WorldState(
        config=config,
        states=initial_states(formation),
        plan=plan,
        round_index=0,
        gnss_rng=substream(seed, "gnss"),
        ins_rng=substream(seed, "ins"),
        range_rng=substream(seed, "range"),
        velocities=velocities,
        cluster=cluster,
    )


def run_round(world: WorldState) -> list[VerificationOutcome]:
    """Advance one protocol round and return the finalized outcomes."""
    cfg = world.config
    world.round_index += 1

    # Sense: move, dead-reckon, take GNSS fixes, measure ranges.
    increments = [MotionIncrement(v) for v in world.velocities]
    world.states = advance_round(
        world.states, increments, cfg.r_gnss, cfg.r_ins, world.gnss_rng, world.ins_rng
    )
    truths = np.stack([s.true_position for s in world.states])
    ranges = measure_ranges(truths, cfg.sigma_d, world.range_rng)

    # Adversary corrupts readings and ranges; truth is untouched.
    world.states, ranges = world.plan.apply(world.states, ranges, world.round_index)

    # Inform: each node reports its position claim and its range row.
    reported = np.stack([s.gnss_reading for s in world.states])
    reports = reports_from_arrays(reported, ranges)
    ins_estimates = [s.ins_estimate for s in world.states]

    # Estimate / evaluate / recover, then finalize.
    if world.cluster is not None:
        finalized, ticks = world.cluster.consensus_round(
            reports,
            ins_estimates,
            cfg.detection,
            world.round_index,
            counters=world.counters,
        )
        outcomes = list(finalized.outcomes)
        world.ticks_to_commit = ticks
        world.messages = world.cluster.stats.total
    else:
        outcomes = verify_and_recover(
            reports, ranges, ins_estimates, cfg.detection, counters=world.counters
        )

    # Recovered nodes reset their dead reckoning to the verified fix.
    new_states = []
    for st, outcome in zip(world.states, outcomes):
        if outcome.faulty:
            new_states.append(replace(st, ins_estimate=outcome.verified_position.copy()))
        else:
            new_states.append(st)
    world.states = new_states
    world.last_reported = reported
    world.last_outcomes = outcomes
    return outcomes


def _subset_mae(estimates: np.ndarray, truths: np.ndarray, ids: Sequence[int]) -> float:
    if len(ids) == 0:
        return math.nan
    idx = list(ids)
    return mean_absolute_error(estimates[idx], truths[idx])


def run_trial(config: SwarmConfig) -> TrialResult:
    """Run the configured rounds and score the final one against truth."""
    world = init_world(config)
    outcomes: list[VerificationOutcome] = []
    for _ in range(config.rounds):
        outcomes = run_round(world)

    truths = np.stack([s.true_position for s in world.states])
    reported = world.last_reported
    verified = np.stack([o.verified_position for o in outcomes])
    attacked = sorted(world.plan.attacked)
    honest = sorted(set(range(config.n)) - world.plan.attacked)

    flagged = {o.node_id for o in outcomes if o.faulty}
    tp = len(flagged & world.plan.attacked)
    fp = len(flagged - world.plan.attacked)
    fn = len(world.plan.attacked - flagged)

    node_ops = (config.n - 1) * config.rounds
    return TrialResult(
        baseline_mae=mean_absolute_error(reported, truths),
        recovered_mae=mean_absolute_error(verified, truths),
        attacked_baseline_mae=_subset_mae(reported, truths, attacked),
        attacked_recovered_mae=_subset_mae(verified, truths, attacked),
        honest_recovered_mae=_subset_mae(verified, truths, honest),
        true_positive_flags=tp,
        false_positive_flags=fp,
        false_negative_flags=fn,
        leader_ops=world.counters.leader_ops,
        node_ops=node_ops,
        messages=world.messages,
        ticks_to_commit=world.ticks_to_commit,
    )


@dataclass(frozen=True)
class Stats:
    mean: float
    median: float
    iqr: float
    min: float
    max: float

    @classmethod
    def of(cls, values: Sequence[float]) -> "Stats":
        arr = np.asarray([v for v in values if not math.isnan(v)], dtype=float)
        if arr.size == 0:
            return cls(math.nan, math.nan, math.nan, math.nan, math.nan)
        q1, q3 = np.percentile(arr, [25, 75])
        return cls(
            mean=float(arr.mean()),
            median=float(np.median(arr)),
            iqr=float(q3 - q1),
            min=float(arr.min()),
            max=float(arr.max()),
        )


@dataclass(frozen=True)
class CellSummary:
    """Aggregate statistics for one (n, f) cell of a sweep."""

    n: int
    f: int
    trials: int
    baseline: Stats
    recovered: Stats
    attacked_recovered: Stats
    tp: int
    fp: int
    fn: int
    leader_ops_mean: float
    node_ops_mean: float

    @property
    def flag_precision(self) -> float:
        denom = self.tp + self.fp
        return self.tp / denom if denom else 1.0

    @property
    def flag_recall(self) -> float:
        denom = self.tp + self.fn
        return self.tp / denom if denom else 1.0


@dataclass(frozen=True)
class SweepSummary:
    cells: tuple[CellSummary, ...]
    config: dict

    def cell(self, n: int, f: int) -> CellSummary:
        for c in self.cells:
            if c.n == n and c.f == f:
                return c
        raise KeyError(f"no cell for (n={n}, f={f})")

    def to_dict(self) -> dict:
        def stats_dict(s: Stats) -> dict:
            return {
                "mean": s.mean,
                "median": s.median,
                "iqr": s.iqr,
                "min": s.min,
                "max": s.max,
            }

        return {
            "config": self.config,
            "cells": [
                {
                    "n": c.n,
                    "f": c.f,
                    "trials": c.trials,
                    "baseline": stats_dict(c.baseline),
                    "recovered": stats_dict(c.recovered),
                    "attacked_recovered": stats_dict(c.attacked_recovered),
                    "tp": c.tp,
                    "fp": c.fp,
                    "fn": c.fn,
                    "flag_precision": c.flag_precision,
                    "flag_recall": c.flag_recall,
                    "leader_ops_mean": c.leader_ops_mean,
                    "node_ops_mean": c.node_ops_mean,
                }
                for c in self.cells
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SweepSummary":
        cells = []
        for c in data["cells"]:
            cells.append(
                CellSummary(
                    n=c["n"],
                    f=c["f"],
                    trials=c["trials"],
                    baseline=Stats(**c["baseline"]),
                    recovered=Stats(**c["recovered"]),
                    attacked_recovered=Stats(**c["attacked_recovered"]),
                    tp=c["tp"],
                    fp=c["fp"],
                    fn=c["fn"],
                    leader_ops_mean=c["leader_ops_mean"],
                    node_ops_mean=c["node_ops_mean"],
                )
            )
        return cls(cells=tuple(cells), config=data["config"])


def _trial_config(base: SwarmConfig, n: int, f: int, trial_index: int) -> SwarmConfig:
    seed = derive_seed(base.seed, "cell", n, f, trial_index)
    return replace(base, n=n, f=f, seed=seed)


def _run_trial_spec(spec: tuple[SwarmConfig, int, int, int]) -> TrialResult:
    base, n, f, trial_index = spec
    return run_trial(_trial_config(base, n, f, trial_index))


def _summarize_cell(n: int, f: int, results: Sequence[TrialResult]) -> CellSummary:
    return CellSummary(
        n=n,
        f=f,
        trials=len(results),
        baseline=Stats.of([r.baseline_mae for r in results]),
        recovered=Stats.of([r.recovered_mae for r in results]),
        attacked_recovered=Stats.of([r.attacked_recovered_mae for r in results]),
        tp=sum(r.true_positive_flags for r in results),
        fp=sum(r.false_positive_flags for r in results),
        fn=sum(r.false_negative_flags for r in results),
        leader_ops_mean=float(np.mean([r.leader_ops for r in results])),
        node_ops_mean=float(np.mean([r.node_ops for r in results])),
    )


def grid_sweep(
    n_list: Sequence[int],
    f_list: Sequence[int],
    trials: int,
    base: SwarmConfig,
    jobs: int = 1,
    raw_sink=None,
) -> SweepSummary:
    """Full factorial sweep over (n, f) cells.

    Cells where the fault count is impossible (f >= n) or beyond the
    tolerable bound without the unsafe flag are skipped. Results are
    deterministic for a given base seed regardless of jobs.
    """
    cells = []
    for n in n_list:
        for f in f_list:
            if f >= n:
                continue
            if f > (n - 1) // 2 and not base.attack.allow_unsafe:
                continue
            cells.append((n, f))
    if not cells:
        raise ValueError("no feasible (n, f) cells in the requested grid")

    specs = [(base, n, f, t) for (n, f) in cells for t in range(trials)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_trial_spec, specs, chunksize=64))
    else:
        results = [_run_trial_spec(s) for s in specs]

    summaries = []
    for idx, (n, f) in enumerate(cells):
        cell_results = results[idx * trials : (idx + 1) * trials]
        if raw_sink is not None:
            for t, r in enumerate(cell_results):
                record = {"n": n, "f": f, "trial": t, **asdict(r)}
                raw_sink.write(json.dumps(record, sort_keys=True) + "\n")
        summaries.append(_summarize_cell(n, f, cell_results))
    return SweepSummary(cells=tuple(summaries), config=base.to_dict())


def scaling_experiment(
    f_range: Sequence[int],
    trials_per_cell: int,
    base: SwarmConfig,
    jobs: int = 1,
) -> SweepSummary:
    """Minimal-swarm scaling: for each f, run the n = 2f + 1 cell.

    The headline statistic is the recovery error of the attacked nodes,
    which is what improves as redundancy grows; full-swarm statistics
    ride along in each cell.
    """
    if len(f_range) == 0:
        raise ValueError("f_range must be nonempty")
    summaries = []
    for f in f_range:
        n = 2 * f + 1
        cell_base = replace(base, n=n, f=f)
        cell = grid_sweep([n], [f], trials_per_cell, cell_base, jobs=jobs)
        summaries.append(cell.cells[0])
    return SweepSummary(cells=tuple(summaries), config=base.to_dict())


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except OSError:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def export_results(summary: SweepSummary, fmt: str, path: str) -> None:
    """Write a sweep summary as CSV (fixed column order) or JSON."""
    try:
        if fmt == "csv":
            import io

            buf = io.StringIO()
            writer = csv.writer(buf, lineterminator="\n")
            writer.writerow(CSV_COLUMNS)
            for c in summary.cells:
                writer.writerow(
                    [
                        c.n,
                        c.f,
                        c.trials,
                        repr(c.baseline.mean),
                        repr(c.baseline.median),
                        repr(c.recovered.mean),
                        repr(c.recovered.median),
                        repr(c.recovered.iqr),
                        c.tp,
                        c.fp,
                        c.fn,
                        repr(c.leader_ops_mean),
                        repr(c.node_ops_mean),
                    ]
                )
            _atomic_write(path, buf.getvalue())
        elif fmt == "json":
            _atomic_write(path, json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n")
        else:
            raise ValueError(f"unknown export format {fmt!r}")
    except OSError as exc:
        raise OSError(f"failed to write results to {path}: {exc}") from exc


def snapshot_round(world: WorldState, outcomes: Sequence[VerificationOutcome]) -> dict:
    """Figure-ready record of one round: truth, report, recovery per node."""
    if world.last_reported is None:
        raise ValueError("no completed round to snapshot")
    records = []
    for st, outcome in zip(world.states, outcomes):
        records.append(
            {
                "id": st.id,
                "true": [float(x) for x in st.true_position],
                "reported": [float(x) for x in world.last_reported[st.id]],
                "recovered": [float(x) for x in outcome.verified_position],
                "flagged": outcome.faulty,
                "provenance": outcome.provenance,
            }
        )
    return {
        "round": world.round_index,
        "config": world.config.to_dict(),
        "nodes": records,
    }
