import json
import math
from dataclasses import replace

import numpy as np
import pytest

from swarmraft.attacks import AttackConfig
from swarmraft.core import CovarianceDiag
from swarmraft.harness import (
    CSV_COLUMNS,
    CellSummary,
    Stats,
    SwarmConfig,
    SweepSummary,
    export_results,
    grid_sweep,
    init_world,
    run_round,
    run_trial,
    scaling_experiment,
    snapshot_round,
)
from swarmraft.verification import DetectionParams


def zero_noise(n, f, seed, **kw):
    return SwarmConfig(
        n=n, f=f, seed=seed,
        r_gnss=CovarianceDiag.zero(), r_ins=CovarianceDiag.zero(), sigma_d=0.0,
        detection=DetectionParams(tau=1.0, epsilon=1.0),
        **kw,
    )


class TestRunRound:
    def test_honest_zero_noise_all_zero_error(self):
        cfg = zero_noise(5, 0, seed=3)
        result = run_trial(cfg)
        assert result.baseline_mae == 0.0
        assert result.recovered_mae == 0.0

    def test_fixed_vector_baseline_arithmetic(self):
        # Baseline MAE for a fixed offset of magnitude M on f of n nodes
        # with zero noise is exactly f * M / n.
        cfg = zero_noise(
            5, 2, seed=4,
            attack=AttackConfig(
                mode="gnss_spoof", attacked_count=2,
                offset_model="fixed_vector", fixed_offset=(30.0, 40.0, 0.0),
            ),
        )
        result = run_trial(cfg)
        assert result.baseline_mae == pytest.approx(2 * 50.0 / 5, abs=1e-9)
        assert result.recovered_mae < 1e-6

    def test_consensus_transport_does_not_change_math(self):
        fast = SwarmConfig(n=5, f=2, seed=11, consensus_enabled=False)
        cons = SwarmConfig(n=5, f=2, seed=11, consensus_enabled=True)
        w1, w2 = init_world(fast), init_world(cons)
        o1, o2 = run_round(w1), run_round(w2)
        for a, b in zip(o1, o2):
            assert a.node_id == b.node_id
            assert np.array_equal(a.verified_position, b.verified_position)
            assert a.faulty == b.faulty
            assert a.provenance == b.provenance
        assert w2.ticks_to_commit > 0
        assert w2.messages > 0

    def test_ins_resets_to_recovered_fix(self):
        cfg = zero_noise(
            6, 2, seed=5,
            attack=AttackConfig(mode="gnss_spoof", attacked_count=2),
        )
        world = init_world(cfg)
        outcomes = run_round(world)
        for o in outcomes:
            if o.faulty:
                assert np.array_equal(
                    world.states[o.node_id].ins_estimate, o.verified_position
                )


class TestRunTrial:
    def test_fixed_seed_reproducible(self):
        cfg = SwarmConfig(n=9, f=3, seed=77)
        assert run_trial(cfg) == run_trial(cfg)

    def test_flag_counts_partition_attacked_set(self):
        for seed in range(30):
            cfg = SwarmConfig(n=9, f=4, seed=seed)
            r = run_trial(cfg)
            assert r.true_positive_flags + r.false_negative_flags == 4
            assert r.true_positive_flags <= 9
            assert r.false_positive_flags <= 5

    def test_honest_trials_rarely_flag(self):
        flagged_trials = 0
        for seed in range(100):
            r = run_trial(SwarmConfig(n=9, f=0, seed=seed))
            flagged_trials += r.false_positive_flags > 0
        assert flagged_trials <= 1

    def test_recovery_dominates_baseline(self):
        worse = 0
        for seed in range(100):
            r = run_trial(SwarmConfig(n=9, f=4, seed=seed))
            if r.recovered_mae > r.baseline_mae:
                worse += 1
        assert worse <= 5

    def test_multi_round_trial(self):
        cfg = SwarmConfig(n=5, f=1, seed=9, rounds=5)
        r = run_trial(cfg)
        assert r.node_ops == 4 * 5
        assert r.baseline_mae > 0


class TestSweeps:
    def test_single_cell_matches_independent_trials(self):
        base = SwarmConfig(seed=123)
        summary = grid_sweep([7], [2], 5, base)
        cell = summary.cell(7, 2)
        assert cell.trials == 5
        from swarmraft.harness import _trial_config

        expect = [run_trial(_trial_config(base, 7, 2, t)) for t in range(5)]
        assert cell.baseline.mean == pytest.approx(
            np.mean([r.baseline_mae for r in expect])
        )
        assert cell.tp == sum(r.true_positive_flags for r in expect)

    def test_trials_per_cell_one_equals_single_trial(self):
        base = SwarmConfig(seed=5)
        summary = scaling_experiment([2], 1, base)
        cell = summary.cells[0]
        assert cell.n == 5 and cell.f == 2
        assert cell.baseline.mean == cell.baseline.median == cell.baseline.min == cell.baseline.max

    def test_infeasible_cells_excluded(self):
        base = SwarmConfig(seed=1)
        summary = grid_sweep([3, 5], [1, 2, 4], 2, base)
        keys = {(c.n, c.f) for c in summary.cells}
        assert keys == {(3, 1), (5, 1), (5, 2)}

    def test_unsafe_flag_unlocks_breakdown_cells(self):
        base = SwarmConfig(seed=1, attack=AttackConfig(allow_unsafe=True))
        summary = grid_sweep([5], [3], 3, base)
        assert {(c.n, c.f) for c in summary.cells} == {(5, 3)}

    def test_baseline_grows_with_f_at_fixed_n(self):
        base = SwarmConfig(seed=42)
        summary = grid_sweep([9], [1, 2, 3, 4], 40, base)
        means = [summary.cell(9, f).baseline.mean for f in (1, 2, 3, 4)]
        assert all(means[i] < means[i + 1] for i in range(3))

    def test_jobs_do_not_change_results(self):
        base = SwarmConfig(seed=31)
        s1 = grid_sweep([5, 7], [1, 2], 6, base, jobs=1)
        s2 = grid_sweep([5, 7], [1, 2], 6, base, jobs=2)
        assert s1.to_dict() == s2.to_dict()


class TestExport:
    def test_csv_schema_and_rows(self, tmp_path):
        base = SwarmConfig(seed=8)
        summary = grid_sweep([5, 9], [1, 2], 3, base)
        path = tmp_path / "out.csv"
        export_results(summary, "csv", str(path))
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 1 + len(summary.cells)

    def test_empty_summary_header_only(self, tmp_path):
        summary = SweepSummary(cells=(), config={})
        path = tmp_path / "empty.csv"
        export_results(summary, "csv", str(path))
        assert path.read_text().splitlines() == [",".join(CSV_COLUMNS)]

    def test_json_round_trip_identity(self, tmp_path):
        base = SwarmConfig(seed=8)
        summary = grid_sweep([5], [0, 1], 3, base)
        path = tmp_path / "out.json"
        export_results(summary, "json", str(path))
        parsed = SweepSummary.from_dict(json.loads(path.read_text()))

        def eq(a, b):
            if isinstance(a, float) and isinstance(b, float):
                return (math.isnan(a) and math.isnan(b)) or a == b
            return a == b

        for c1, c2 in zip(summary.cells, parsed.cells):
            for fname in ("mean", "median", "iqr", "min", "max"):
                assert eq(getattr(c1.recovered, fname), getattr(c2.recovered, fname))
                assert eq(getattr(c1.attacked_recovered, fname), getattr(c2.attacked_recovered, fname))
            assert (c1.n, c1.f, c1.trials, c1.tp, c1.fp, c1.fn) == (
                c2.n, c2.f, c2.trials, c2.tp, c2.fp, c2.fn
            )
        assert parsed.config == summary.config

    def test_unknown_format_rejected(self, tmp_path):
        summary = SweepSummary(cells=(), config={})
        with pytest.raises(ValueError, match="format"):
            export_results(summary, "yaml", str(tmp_path / "x"))

    def test_io_error_carries_path(self):
        summary = SweepSummary(cells=(), config={})
        with pytest.raises(OSError, match="/nonexistent-dir/"):
            export_results(summary, "csv", "/nonexistent-dir/out.csv")


class TestSnapshot:
    def test_honest_round_reported_equals_recovered(self):
        cfg = SwarmConfig(n=6, f=0, seed=2)
        world = init_world(cfg)
        outcomes = run_round(world)
        snap = snapshot_round(world, outcomes)
        assert len(snap["nodes"]) == 6
        for rec in snap["nodes"]:
            assert rec["reported"] == rec["recovered"]
            assert not rec["flagged"]

    def test_fig_style_scenario_6_2(self):
        cfg = zero_noise(
            6, 2, seed=13, attack=AttackConfig(mode="gnss_spoof", attacked_count=2)
        )
        world = init_world(cfg)
        outcomes = run_round(world)
        snap = snapshot_round(world, outcomes)
        flagged = [r for r in snap["nodes"] if r["flagged"]]
        assert len(flagged) == 2
        for rec in flagged:
            assert np.linalg.norm(
                np.array(rec["recovered"]) - np.array(rec["true"])
            ) < 1e-6
        assert snap["config"]["n"] == 6

    def test_snapshot_embeds_resolved_config(self):
        cfg = SwarmConfig(n=5, f=1, seed=3)
        world = init_world(cfg)
        outcomes = run_round(world)
        snap = snapshot_round(world, outcomes)
        assert SwarmConfig.from_dict(snap["config"]) == cfg


class TestConfigRoundTrip:
    def test_dict_round_trip(self):
        cfg = SwarmConfig(
            n=7, f=2, seed=19, dimension=3,
            attack=AttackConfig(mode="collusion", attacked_count=2, colluding=True),
            detection=DetectionParams(tau=6.5),
        )
        assert SwarmConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_top_level_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            SwarmConfig.from_dict({"n": 5, "bogus": 1})

    def test_unknown_nested_key_rejected(self):
        with pytest.raises(ValueError, match="unknown attack keys"):
            SwarmConfig.from_dict({"n": 5, "attack": {"modee": "gnss_spoof"}})

    def test_f_overrides_attack_count(self):
        cfg = SwarmConfig(n=9, f=3)
        assert cfg.attack.attacked_count == 3

    def test_invariants_enforced(self):
        with pytest.raises(ValueError):
            SwarmConfig(n=1)
        with pytest.raises(ValueError):
            SwarmConfig(n=5, f=6)
        with pytest.raises(ValueError):
            SwarmConfig(n=5, min_separation=0.0)


class TestComplexityCounters:
    def test_leader_quadratic_node_linear(self):
        # Reduced version of the acceptance regression: slopes from 12
        # trials per cell already land near 2 and 1.
        base = SwarmConfig(seed=55)
        ns = [5, 9, 13, 17]
        leader_means, node_means = [], []
        for n in ns:
            f = (n - 1) // 2
            cell = grid_sweep([n], [f], 12, base).cell(n, f)
            leader_means.append(cell.leader_ops_mean)
            node_means.append(cell.node_ops_mean)
        lx = np.log(ns)
        slope_leader = np.polyfit(lx, np.log(leader_means), 1)[0]
        slope_node = np.polyfit(lx, np.log(node_means), 1)[0]
        assert 1.8 <= slope_leader <= 2.2
        assert 0.8 <= slope_node <= 1.2
