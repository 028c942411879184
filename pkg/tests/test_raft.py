import numpy as np
import pytest

from raft_traces import run_random_trace
from swarmraft.core import position, substream
from swarmraft.raft_lite import (
    AppendEntries,
    Cluster,
    Envelope,
    NotLeaderError,
    RaftNode,
    RaftRole,
    RequestVote,
    VoteGranted,
    check_election_safety,
    tick,
)
from swarmraft.sensors import measure_ranges, sample_formation
from swarmraft.verification import DetectionParams, reports_from_arrays


def make_reports(n, seed=0):
    pts = sample_formation(n, 200.0, 10.0, 2, substream(seed, "f"))
    ranges = measure_ranges(pts, 0.0, substream(seed, "r"))
    return reports_from_arrays(pts, ranges), [pts[i].copy() for i in range(n)]


class TestNodeTransitions:
    def test_expired_timeout_starts_candidacy(self):
        node = RaftNode(0, 5, election_timeout=4)
        _, out = tick(node, [], now=4)
        assert node.role is RaftRole.CANDIDATE
        assert node.current_term == 1
        assert node.voted_for == 0
        votes = [e for e in out if isinstance(e.message, RequestVote)]
        assert sorted(e.dst for e in votes) == [1, 2, 3, 4]

    def test_majority_votes_make_leader_and_heartbeat(self):
        node = RaftNode(0, 5, election_timeout=4)
        tick(node, [], now=4)  # become candidate
        grants = [
            Envelope(src, 0, 5, VoteGranted(term=1, granted=True)) for src in (1, 2)
        ]
        _, out = tick(node, grants, now=5)
        assert node.role is RaftRole.LEADER
        beats = [e for e in out if isinstance(e.message, AppendEntries)]
        assert sorted(e.dst for e in beats) == [1, 2, 3, 4]

    def test_leader_steps_down_on_higher_term(self):
        node = RaftNode(0, 3, election_timeout=4)
        tick(node, [], now=4)
        grants = [Envelope(1, 0, 5, VoteGranted(term=1, granted=True))]
        tick(node, grants, now=5)
        assert node.role is RaftRole.LEADER
        ae = AppendEntries(
            term=7, leader_id=2, prev_log_index=-1, prev_log_term=0,
            entries=(), leader_commit=-1,
        )
        tick(node, [Envelope(2, 0, 6, ae)], now=6)
        assert node.role is RaftRole.FOLLOWER
        assert node.current_term == 7

    def test_term_never_decreases_and_vote_once(self):
        node = RaftNode(1, 5, election_timeout=5)
        rv1 = RequestVote(term=3, candidate_id=0, last_log_index=-1, last_log_term=0)
        rv2 = RequestVote(term=3, candidate_id=2, last_log_index=-1, last_log_term=0)
        _, out = tick(node, [Envelope(0, 1, 1, rv1), Envelope(2, 1, 1, rv2)], now=1)
        replies = [e for e in out if isinstance(e.message, VoteGranted)]
        granted = {e.dst: e.message.granted for e in replies}
        assert granted[0] is True and granted[2] is False
        assert node.current_term == 3
        stale = RequestVote(term=1, candidate_id=3, last_log_index=-1, last_log_term=0)
        tick(node, [Envelope(3, 1, 2, stale)], now=2)
        assert node.current_term == 3

    def test_submit_round_requires_leadership(self):
        node = RaftNode(0, 3, election_timeout=4)
        reports, ins = make_reports(3)
        with pytest.raises(NotLeaderError, match="not leader"):
            node.submit_round(reports, ins, DetectionParams(), 0)


class TestClusterBasics:
    def test_single_stable_leader_without_crashes(self):
        cluster = Cluster(5, seed=3, trace=False)
        cluster.run_until_leader()
        first = cluster.leader_id()
        for _ in range(60):
            cluster.step()
        assert cluster.leader_id() == first
        elects = [e for e in cluster.events if e["type"] == "elect"]
        assert len(elects) == 1

    def test_honest_round_commits_with_no_flags(self):
        cluster = Cluster(3, seed=1)
        cluster.run_until_leader()
        reports, ins = make_reports(3)
        finalized, ticks = cluster.consensus_round(reports, ins, DetectionParams(), 0)
        assert finalized.round_index == 0
        assert all(not o.faulty for o in finalized.outcomes)
        for o in finalized.outcomes:
            assert np.array_equal(
                o.verified_position, reports[o.node_id].reported_position
            )
        # Stable-leader commit latency stays well inside the liveness bound.
        assert ticks <= cluster.max_timeout + 3

    def test_replication_reaches_all_nodes(self):
        cluster = Cluster(5, seed=2)
        reports, ins = make_reports(5)
        cluster.consensus_round(reports, ins, DetectionParams(), 0)
        for _ in range(3):
            cluster.step()
        for node in cluster.nodes:
            assert len(node.log) == 1
            assert node.commit_index == 0
            assert 0 in node.finalized

    def test_majority_ack_advances_commit(self):
        cluster = Cluster(5, seed=4)
        leader = cluster.run_until_leader()
        reports, ins = make_reports(5)
        # Two followers down: 3 of 5 (leader + 2) still make a majority.
        downs = [i for i in range(5) if i != leader][:2]
        for d in downs:
            cluster.crash(d, 50)
        finalized, _ = cluster.consensus_round(reports, ins, DetectionParams(), 0)
        assert finalized.round_index == 0

    def test_no_commit_without_quorum_until_restore(self):
        cluster = Cluster(5, seed=5)
        leader = cluster.run_until_leader()
        reports, ins = make_reports(5)
        downs = [i for i in range(5) if i != leader][:3]  # majority of peers down
        for d in downs:
            cluster.crash(d, 12)
        node = cluster.nodes[leader]
        node.submit_round(reports, ins, DetectionParams(), 0)
        for _ in range(8):
            cluster.step()
            assert node.commit_index == -1  # quorum lost, nothing commits
        for _ in range(30):
            cluster.step()
            if node.commit_index == 0:
                break
        assert node.commit_index == 0  # quorum restored, entry commits

    def test_crashed_follower_catches_up(self):
        cluster = Cluster(5, seed=6)
        leader = cluster.run_until_leader()
        victim = (leader + 1) % 5
        cluster.crash(victim, 6)
        reports, ins = make_reports(5)
        cluster.consensus_round(reports, ins, DetectionParams(), 0)
        assert cluster.leader_id() == leader  # no leadership change
        for _ in range(12):
            cluster.step()
        assert len(cluster.nodes[victim].log) == 1
        assert cluster.nodes[victim].commit_index == 0

    def test_leader_crash_reelects_within_bound(self):
        cluster = Cluster(5, seed=7)
        leader = cluster.run_until_leader()
        crash_tick = cluster.now
        cluster.crash(leader, 30)
        for _ in range(cluster.max_timeout + 2):
            cluster.step()
        new = cluster.leader_id()
        assert new is not None and new != leader
        elects = [e for e in cluster.events if e["type"] == "elect" and e["tick"] > crash_tick]
        assert elects[0]["tick"] - crash_tick <= cluster.max_timeout + 2

    def test_uncommitted_entry_overwritten_by_next_leader(self):
        cluster = Cluster(5, seed=8)
        leader = cluster.run_until_leader()
        reports, ins = make_reports(5)
        node = cluster.nodes[leader]
        entry = node.submit_round(reports, ins, DetectionParams(), 0)
        old_term = entry.term
        cluster.crash(leader, 60)  # crash before any replication tick
        cluster.run_until_leader()
        finalized, _ = cluster.consensus_round(reports, ins, DetectionParams(), 1)
        assert finalized.round_index == 1
        for _ in range(65):
            cluster.step()  # old leader resumes and syncs
        old = cluster.nodes[leader]
        assert [e.payload.round_index for e in old.log] == [1]
        assert all(e.term != old_term for e in old.log)

    def test_protocol_message_cost_2n_minus_2(self):
        cluster = Cluster(7, seed=9)
        cluster.run_until_leader()
        reports, ins = make_reports(7)
        before_r = cluster.stats.reports_to_leader
        before_f = cluster.stats.finalized_from_leader
        cluster.consensus_round(reports, ins, DetectionParams(), 0)
        assert cluster.stats.reports_to_leader - before_r == 6
        assert cluster.stats.finalized_from_leader - before_f == 6


class TestRandomizedTraces:
    def test_safety_and_liveness_sample(self):
        # Small sample here; the 500-trace sweep runs in the acceptance suite.
        for seed in range(25):
            n = [3, 5, 7][seed % 3]
            report = run_random_trace(n, seed=seed, rounds=5)
            assert report.safety, seed
            assert report.reelection_bounded, (seed, report.reelection_delays)
            assert report.log_matching, seed
            assert report.leader_completeness, seed
            assert report.rounds_committed == 5

    def test_commit_latency_bounds(self):
        for seed in range(8):
            report = run_random_trace(5, seed=seed, rounds=5)
            cluster_bound = (4 + 5 - 1) + 3  # max election timeout + 3
            crash_bound = 2 * (4 + 5 - 1) + 12
            assert min(report.commit_ticks) <= cluster_bound
            assert max(report.commit_ticks) <= crash_bound
