"""Minimal Raft-style consensus over a lockstep synchronous network.

Every message sent at tick t is delivered at tick t+1, unharmed, to any
node that is not crashed. Each simulated drone runs a follower /
candidate / leader state machine with term-checked voting and
single-entry log replication; the leader heartbeats every tick.

Election timeouts are randomized by assigning each node a distinct
offset from a seeded permutation, so no two timers that were reset on
the same tick can ever expire together. That makes post-crash
re-election single-round and gives a hard bound: a crashed leader is
replaced within (max election timeout + 2) ticks while a majority is
alive.

Crashed nodes drop all traffic for the scheduled interval and resume as
followers with their term, vote, and log intact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

from swarmraft.core import Position, substream
from swarmraft.verification import (
    ClientReport,
    DetectionParams,
    OpCounters,
    VerificationOutcome,
    assemble_ranges,
    verify_and_recover,
)


class RaftRole(Enum):
    FOLLOWER = "follower"
    CANDIDATE = "candidate"
    LEADER = "leader"


@dataclass(frozen=True)
class FinalizedRound:
    """The committed result of one protocol round."""

    round_index: int
    outcomes: tuple[VerificationOutcome, ...]


@dataclass(frozen=True)
class LogEntry:
    term: int
    payload: FinalizedRound


# Wire messages. Sender identity travels on the envelope.


@dataclass(frozen=True)
class RequestVote:
    term: int
    candidate_id: int
    last_log_index: int
    last_log_term: int


@dataclass(frozen=True)
class VoteGranted:
    term: int
    granted: bool


@dataclass(frozen=True)
class AppendEntries:
    term: int
    leader_id: int
    prev_log_index: int
    prev_log_term: int
    entries: tuple[LogEntry, ...]
    leader_commit: int


@dataclass(frozen=True)
class AppendAck:
    term: int
    success: bool
    match_index: int


@dataclass(frozen=True)
class ClientReportMsg:
    report: ClientReport
    ins_estimate: tuple[float, float, float]


@dataclass(frozen=True)
class FinalizedBroadcast:
    round_index: int
    payload: FinalizedRound


_KIND_ORDER = {
    AppendEntries: 0,
    RequestVote: 1,
    VoteGranted: 2,
    AppendAck: 3,
    ClientReportMsg: 4,
    FinalizedBroadcast: 5,
}


@dataclass(frozen=True)
class Envelope:
    src: int
    dst: int
    tick: int
    message: object


class NotLeaderError(RuntimeError):
    pass


class RaftNode:
    """One drone's consensus state machine."""

    def __init__(self, node_id: int, n: int, election_timeout: int):
        self.id = node_id
        self.n = n
        self.peers = [p for p in range(n) if p != node_id]
        self.current_term = 0
        self.voted_for: Optional[int] = None
        self.role = RaftRole.FOLLOWER
        self.log: list[LogEntry] = []
        self.commit_index = -1
        self.election_timeout = election_timeout
        self.deadline = election_timeout  # timers start at tick 0
        self.votes_received: set[int] = set()
        self.next_index: dict[int, int] = {}
        self.match_index: dict[int, int] = {}
        self.pending_reports: dict[int, ClientReportMsg] = {}
        self.finalized: dict[int, FinalizedRound] = {}
        self.broadcast_through = -1  # highest committed index already finalized

    # -- helpers -------------------------------------------------------

    def _last_log_index(self) -> int:
        return len(self.log) - 1

    def _last_log_term(self) -> int:
        return self.log[-1].term if self.log else 0

    def _log_up_to_date(self, last_index: int, last_term: int) -> bool:
        if last_term != self._last_log_term():
            return last_term > self._last_log_term()
        return last_index >= self._last_log_index()

    def _majority(self) -> int:
        return self.n // 2 + 1

    def _step_down(self, term: int) -> None:
        if term > self.current_term:
            self.current_term = term
            self.voted_for = None
        self.role = RaftRole.FOLLOWER
        self.votes_received = set()

    def _reset_deadline(self, now: int) -> None:
        self.deadline = now + self.election_timeout

    def _become_leader(self, now: int, events: list[dict]) -> None:
        self.role = RaftRole.LEADER
        self.next_index = {p: len(self.log) for p in self.peers}
        self.match_index = {p: -1 for p in self.peers}
        events.append(
            {"tick": now, "type": "elect", "node": self.id, "term": self.current_term}
        )

    # -- message handlers ----------------------------------------------

    def _handle_request_vote(self, src: int, msg: RequestVote, now: int) -> VoteGranted:
        if msg.term > self.current_term:
            self._step_down(msg.term)
        granted = (
            msg.term == self.current_term
            and self.role is not RaftRole.LEADER
            and self.voted_for in (None, msg.candidate_id)
            and self._log_up_to_date(msg.last_log_index, msg.last_log_term)
        )
        if granted:
            self.voted_for = msg.candidate_id
            self._reset_deadline(now)
        return VoteGranted(term=self.current_term, granted=granted)

    def _handle_append_entries(self, src: int, msg: AppendEntries, now: int) -> AppendAck:
        if msg.term < self.current_term:
            return AppendAck(term=self.current_term, success=False, match_index=-1)
        if msg.term > self.current_term or self.role is not RaftRole.FOLLOWER:
            self._step_down(msg.term)
        self._reset_deadline(now)

        if msg.prev_log_index >= 0:
            if msg.prev_log_index > self._last_log_index():
                return AppendAck(term=self.current_term, success=False, match_index=-1)
            if self.log[msg.prev_log_index].term != msg.prev_log_term:
                return AppendAck(term=self.current_term, success=False, match_index=-1)

        index = msg.prev_log_index
        for entry in msg.entries:
            index += 1
            if index <= self._last_log_index():
                if self.log[index].term != entry.term:
                    del self.log[index:]
                    self.log.append(entry)
            else:
                self.log.append(entry)
        if msg.leader_commit > self.commit_index:
            self.commit_index = min(msg.leader_commit, self._last_log_index())
        return AppendAck(
            term=self.current_term,
            success=True,
            match_index=msg.prev_log_index + len(msg.entries),
        )

    def _handle_vote(self, src: int, msg: VoteGranted) -> None:
        if self.role is not RaftRole.CANDIDATE:
            return
        if msg.term > self.current_term:
            self._step_down(msg.term)
            return
        if msg.granted and msg.term == self.current_term:
            self.votes_received.add(src)

    def _handle_ack(self, src: int, msg: AppendAck) -> None:
        if msg.term > self.current_term:
            self._step_down(msg.term)
            return
        if self.role is not RaftRole.LEADER or msg.term != self.current_term:
            return
        if msg.success:
            self.match_index[src] = max(self.match_index[src], msg.match_index)
            self.next_index[src] = self.match_index[src] + 1
        else:
            self.next_index[src] = max(0, self.next_index[src] - 1)

    def _advance_commit(self) -> None:
        for idx in range(self._last_log_index(), self.commit_index, -1):
            if self.log[idx].term != self.current_term:
                continue
            replicated = 1 + sum(1 for p in self.peers if self.match_index[p] >= idx)
            if replicated >= self._majority():
                self.commit_index = idx
                break

    # -- the tick step ---------------------------------------------------

    def tick(self, inbox: Sequence[Envelope], now: int, events: list[dict]) -> list[Envelope]:
        """Process one lockstep tick; returns envelopes to send this tick."""
        out: list[Envelope] = []
        ordered = sorted(inbox, key=lambda e: (_KIND_ORDER[type(e.message)], e.src))
        for env in ordered:
            msg = env.message
            if isinstance(msg, RequestVote):
                reply = self._handle_request_vote(env.src, msg, now)
                out.append(Envelope(self.id, env.src, now, reply))
            elif isinstance(msg, AppendEntries):
                reply = self._handle_append_entries(env.src, msg, now)
                out.append(Envelope(self.id, env.src, now, reply))
            elif isinstance(msg, VoteGranted):
                self._handle_vote(env.src, msg)
            elif isinstance(msg, AppendAck):
                self._handle_ack(env.src, msg)
            elif isinstance(msg, ClientReportMsg):
                self.pending_reports[env.src] = msg
            elif isinstance(msg, FinalizedBroadcast):
                self.finalized[msg.round_index] = msg.payload

        if self.role is RaftRole.CANDIDATE and len(self.votes_received) >= self._majority():
            self._become_leader(now, events)

        if self.role is not RaftRole.LEADER and now >= self.deadline:
            self.current_term += 1
            self.role = RaftRole.CANDIDATE
            self.voted_for = self.id
            self.votes_received = {self.id}
            self._reset_deadline(now)
            events.append(
                {"tick": now, "type": "candidacy", "node": self.id, "term": self.current_term}
            )
            rv = RequestVote(
                term=self.current_term,
                candidate_id=self.id,
                last_log_index=self._last_log_index(),
                last_log_term=self._last_log_term(),
            )
            out.extend(Envelope(self.id, p, now, rv) for p in self.peers)
            if len(self.votes_received) >= self._majority():  # single-node cluster
                self._become_leader(now, events)

        if self.role is RaftRole.LEADER:
            self._advance_commit()
            for idx in range(self.broadcast_through + 1, self.commit_index + 1):
                payload = self.log[idx].payload
                fin = FinalizedBroadcast(round_index=payload.round_index, payload=payload)
                out.extend(Envelope(self.id, p, now, fin) for p in self.peers)
                self.finalized[payload.round_index] = payload
                events.append(
                    {"tick": now, "type": "commit", "node": self.id, "index": idx}
                )
            self.broadcast_through = max(self.broadcast_through, self.commit_index)
            for p in self.peers:
                prev = self.next_index[p] - 1
                prev_term = self.log[prev].term if prev >= 0 else 0
                ae = AppendEntries(
                    term=self.current_term,
                    leader_id=self.id,
                    prev_log_index=prev,
                    prev_log_term=prev_term,
                    entries=tuple(self.log[self.next_index[p]:]),
                    leader_commit=self.commit_index,
                )
                out.append(Envelope(self.id, p, now, ae))
        return out

    def submit_round(
        self,
        reports: Sequence[ClientReport],
        ins_estimates: Sequence[Position],
        params: DetectionParams,
        round_index: int,
        counters: Optional[OpCounters] = None,
    ) -> LogEntry:
        """Run the verification pipeline on the collected reports and append.

        Only the leader may do this; the resulting entry replicates via
        the regular heartbeat stream.
        """
        if self.role is not RaftRole.LEADER:
            raise NotLeaderError("not leader")
        ranges = assemble_ranges(reports)
        outcomes = verify_and_recover(reports, ranges, ins_estimates, params, counters=counters)
        entry = LogEntry(
            term=self.current_term,
            payload=FinalizedRound(round_index=round_index, outcomes=tuple(outcomes)),
        )
        self.log.append(entry)
        return entry


def tick(node: RaftNode, inbox: Sequence[Envelope], now: int) -> tuple[RaftNode, list[Envelope]]:
    """Single-node step function: state transition plus outgoing envelopes."""
    events: list[dict] = []
    out = node.tick(inbox, now, events)
    return node, out


@dataclass
class MessageStats:
    total: int = 0
    reports_to_leader: int = 0
    finalized_from_leader: int = 0


class Cluster:
    """Lockstep simulation of n consensus nodes with scripted crashes."""

    def __init__(self, n: int, seed: int, t_min: int = 4, trace: bool = False):
        if n < 1:
            raise ValueError("need at least one node")
        rng = substream(seed, "raft", "timeouts")
        ranks = rng.permutation(n)
        self.nodes = [RaftNode(i, n, t_min + int(ranks[i])) for i in range(n)]
        self.n = n
        self.t_min = t_min
        self.max_timeout = t_min + n - 1
        self.now = 0
        self.in_flight: list[Envelope] = []
        self.crashed_until: dict[int, int] = {}
        self.stats = MessageStats()
        self.trace_enabled = trace
        self.events: list[dict] = []

    def _alive(self, node_id: int) -> bool:
        until = self.crashed_until.get(node_id)
        return until is None or self.now >= until

    def crash(self, node_id: int, duration: int) -> None:
        """Take a node offline for duration ticks, starting now."""
        if duration < 1:
            raise ValueError("crash duration must be >= 1 tick")
        self.crashed_until[node_id] = self.now + duration
        self.events.append(
            {
                "tick": self.now,
                "type": "crash",
                "node": node_id,
                "duration": duration,
                "was_leader": self.nodes[node_id].role is RaftRole.LEADER,
            }
        )

    def leader_id(self) -> Optional[int]:
        leaders = [
            nd.id for nd in self.nodes if nd.role is RaftRole.LEADER and self._alive(nd.id)
        ]
        if not leaders:
            return None
        # Highest term wins if a deposed leader has not yet heard the news.
        return max(leaders, key=lambda i: self.nodes[i].current_term)

    def step(self) -> None:
        """Advance one tick: deliver last tick's mail, run every node."""
        delivery = self.in_flight
        self.in_flight = []
        inboxes: dict[int, list[Envelope]] = {i: [] for i in range(self.n)}
        for env in delivery:
            if self._alive(env.dst):
                inboxes[env.dst].append(env)
                if self.trace_enabled:
                    self.events.append(
                        {
                            "tick": self.now,
                            "type": "deliver",
                            "src": env.src,
                            "dst": env.dst,
                            "kind": type(env.message).__name__,
                        }
                    )

        for node in self.nodes:
            if not self._alive(node.id):
                # A node that just resumed should not instantly time out.
                if self.crashed_until.get(node.id) == self.now + 1:
                    node.role = RaftRole.FOLLOWER
                    node._reset_deadline(self.now + 1)
                    self.events.append(
                        {"tick": self.now + 1, "type": "resume", "node": node.id}
                    )
                continue
            out = node.tick(inboxes[node.id], self.now, self.events)
            for env in out:
                self.stats.total += 1
                if isinstance(env.message, ClientReportMsg):
                    self.stats.reports_to_leader += 1
                elif isinstance(env.message, FinalizedBroadcast):
                    self.stats.finalized_from_leader += 1
                self.in_flight.append(env)
        self.now += 1

    def run_until_leader(self, max_ticks: int = 200) -> int:
        """Step until some alive node leads; returns its id."""
        for _ in range(max_ticks):
            lid = self.leader_id()
            if lid is not None:
                return lid
            self.step()
        raise RuntimeError(f"no leader within {max_ticks} ticks")

    def inject_reports(
        self,
        reports: Sequence[ClientReport],
        ins_estimates: Sequence[Position],
        leader: int,
    ) -> None:
        """Queue every non-leader node's report for next-tick delivery."""
        ins = [tuple(float(x) for x in p) for p in ins_estimates]
        for rep in reports:
            if rep.node_id == leader:
                continue
            msg = ClientReportMsg(report=rep, ins_estimate=ins[rep.node_id])
            self.stats.total += 1
            self.stats.reports_to_leader += 1
            self.in_flight.append(Envelope(rep.node_id, leader, self.now, msg))

    def consensus_round(
        self,
        reports: Sequence[ClientReport],
        ins_estimates: Sequence[Position],
        params: DetectionParams,
        round_index: int,
        counters: Optional[OpCounters] = None,
        max_ticks: int = 500,
    ) -> tuple[FinalizedRound, int]:
        """Drive one full round through consensus; returns (result, ticks used).

        Collect reports at the leader, run verification, replicate the
        entry, and wait for the finalize broadcast to reach the swarm.
        Survives leader loss by re-electing and resubmitting.
        """
        start = self.now
        deadline = start + max_ticks
        expected = {rep.node_id for rep in reports}
        while self.now < deadline:
            leader = self.run_until_leader(max_ticks=deadline - self.now)
            node = self.nodes[leader]
            node.pending_reports.clear()
            self.inject_reports(reports, ins_estimates, leader)
            self.step()  # reports arrive at the leader
            if not self._alive(leader) or node.role is not RaftRole.LEADER:
                continue
            if set(node.pending_reports) != expected - {leader}:
                continue
            node.submit_round(reports, ins_estimates, params, round_index, counters=counters)
            entry_index = len(node.log) - 1
            while self.now < deadline:
                self.step()
                if not self._alive(leader) or node.role is not RaftRole.LEADER:
                    break  # leader lost; outer loop resubmits
                if node.commit_index >= entry_index:
                    # One more tick so the finalize broadcast reaches peers.
                    self.step()
                    return node.finalized[round_index], self.now - start
        raise RuntimeError(f"round {round_index} failed to commit within {max_ticks} ticks")

    def write_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for event in self.events:
                fh.write(json.dumps(event, sort_keys=True) + "\n")


def check_election_safety(events: Sequence[dict]) -> bool:
    """No term may ever have two leaders."""
    leaders_by_term: dict[int, set[int]] = {}
    for ev in events:
        if ev.get("type") == "elect":
            leaders_by_term.setdefault(ev["term"], set()).add(ev["node"])
    return all(len(v) <= 1 for v in leaders_by_term.values())


def check_reelection_bound(events: Sequence[dict], max_timeout: int) -> tuple[bool, list[int]]:
    """Every leader crash must be followed by an election within the bound.

    Returns (ok, observed delays). Applicable to crash events where the
    crashed node was the leader.
    """
    elect_ticks = sorted(ev["tick"] for ev in events if ev.get("type") == "elect")
    delays = []
    ok = True
    for ev in events:
        if ev.get("type") == "crash" and ev.get("was_leader"):
            crash_tick = ev["tick"]
            later = [t for t in elect_ticks if t > crash_tick]
            if not later:
                ok = False
                delays.append(-1)
                continue
            delay = later[0] - crash_tick
            delays.append(delay)
            if delay > max_timeout + 2:
                ok = False
    return ok, delays
