"""Adversary injection: GNSS spoofing, range tampering, and collusion.

Attacks only ever corrupt readings and range measurements. Ground-truth
positions are never touched, so evaluation against truth stays valid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from swarmraft.core import as_position
from swarmraft.sensors import NodeState, RangeMatrix

ATTACK_MODES = ("gnss_spoof", "range_tamper", "collusion", "mixed")
OFFSET_MODELS = ("fixed_vector", "random_direction", "time_varying")


@dataclass(frozen=True)
class AttackConfig:
    """What the adversary does, to how many nodes, and how hard."""

    mode: str = "gnss_spoof"
    attacked_count: int = 0
    offset_magnitude: float = 50.0
    offset_model: str = "random_direction"
    fixed_offset: tuple[float, float, float] = (50.0, 0.0, 0.0)
    drift_magnitude: float = 5.0
    range_bias: float = 20.0
    colluding: bool = False
    allow_unsafe: bool = False

    def __post_init__(self):
        if self.mode not in ATTACK_MODES:
            raise ValueError(f"unknown attack mode {self.mode!r}")
        if self.offset_model not in OFFSET_MODELS:
            raise ValueError(f"unknown offset model {self.offset_model!r}")
        if self.attacked_count < 0:
            raise ValueError("attacked_count must be >= 0")

    def validate_against(self, n: int) -> None:
        """Enforce the majority-safety bound unless explicitly studying breakdown."""
        if self.attacked_count >= n and self.attacked_count > 0:
            raise ValueError(f"cannot attack {self.attacked_count} of {n} nodes")
        bound = (n - 1) // 2
        if self.attacked_count > bound and not self.allow_unsafe:
            raise ValueError(
                f"attacked_count {self.attacked_count} exceeds the tolerable "
                f"bound floor((n-1)/2) = {bound} for n = {n}; "
                "set allow_unsafe to study breakdown"
            )


def select_attacked(n: int, f: int, rng: np.random.Generator) -> set[int]:
    """Uniformly random f-subset of node ids."""
    if f < 0 or f >= max(n, 1):
        if f == 0 and n > 0:
            return set()
        raise ValueError(f"need 0 <= f < n, got f={f}, n={n}")
    if f == 0:
        return set()
    return set(int(i) for i in rng.choice(n, size=f, replace=False))


def _random_unit(rng: np.random.Generator, planar: bool) -> np.ndarray:
    v = rng.standard_normal(3)
    if planar:
        v[2] = 0.0
    norm = np.linalg.norm(v)
    while norm < 1e-12:
        v = rng.standard_normal(3)
        if planar:
            v[2] = 0.0
        norm = np.linalg.norm(v)
    return v / norm


def _spoof_offsets(
    attacked: set[int],
    cfg: AttackConfig,
    rng: np.random.Generator,
    round_index: int,
    planar: bool,
    shared: bool,
) -> dict[int, np.ndarray]:
    """Per-node displacement vectors for the given round.

    Collusion draws one shared vector; otherwise each node gets its own.
    time_varying offsets grow linearly with the round index.
    """
    ids = sorted(attacked)
    offsets: dict[int, np.ndarray] = {}
    if cfg.offset_model == "fixed_vector":
        base = as_position(cfg.fixed_offset)
        for i in ids:
            offsets[i] = base.copy()
    else:
        if shared:
            direction = _random_unit(rng, planar)
            for i in ids:
                offsets[i] = cfg.offset_magnitude * direction
        else:
            for i in ids:
                offsets[i] = cfg.offset_magnitude * _random_unit(rng, planar)
    if cfg.offset_model == "time_varying":
        if shared:
            drift = cfg.drift_magnitude * _random_unit(rng, planar)
            for i in ids:
                offsets[i] = offsets[i] + round_index * drift
        else:
            for i in ids:
                drift = cfg.drift_magnitude * _random_unit(rng, planar)
                offsets[i] = offsets[i] + round_index * drift
    return offsets


def apply_gnss_spoof(
    states: list[NodeState],
    attacked: set[int],
    cfg: AttackConfig,
    rng: np.random.Generator,
    round_index: int = 0,
    planar: bool = False,
) -> list[NodeState]:
    """Displace the GNSS readings of attacked nodes; honest nodes untouched."""
    if not attacked:
        return list(states)
    ids = {s.id for s in states}
    if not attacked <= ids:
        raise ValueError(f"attacked set {attacked - ids} not in swarm")
    offsets = _spoof_offsets(attacked, cfg, rng, round_index, planar, shared=False)
    out = []
    for st in states:
        if st.id in attacked:
            out.append(
                replace(
                    st,
                    gnss_reading=st.true_position + offsets[st.id],
                    is_attacked=True,
                )
            )
        else:
            out.append(st)
    return out


def apply_collusion(
    states: list[NodeState],
    attacked: set[int],
    cfg: AttackConfig,
    rng: np.random.Generator,
    round_index: int = 0,
    planar: bool = False,
) -> list[NodeState]:
    """Spoof all attacked nodes by one shared rigid translation.

    Attacker-to-attacker reported distances then match their true
    distances exactly, the worst case for pairwise voting.
    """
    if not cfg.colluding:
        raise ValueError("apply_collusion requires colluding=True")
    if not attacked:
        return list(states)
    ids = {s.id for s in states}
    if not attacked <= ids:
        raise ValueError(f"attacked set {attacked - ids} not in swarm")
    offsets = _spoof_offsets(attacked, cfg, rng, round_index, planar, shared=True)
    out = []
    for st in states:
        if st.id in attacked:
            out.append(
                replace(
                    st,
                    gnss_reading=st.true_position + offsets[st.id],
                    is_attacked=True,
                )
            )
        else:
            out.append(st)
    return out


def apply_range_tamper(
    ranges: RangeMatrix,
    attacked_pairs: set[tuple[int, int]],
    bias: float,
) -> RangeMatrix:
    """Shift the listed pair measurements by bias, clamped at 0, both directions."""
    d = ranges.d.copy()
    for pair in attacked_pairs:
        i, j = pair
        if i == j:
            raise ValueError(f"cannot tamper self-range of node {i}")
        if not (0 <= i < ranges.n and 0 <= j < ranges.n):
            raise ValueError(f"pair {pair} out of range for n={ranges.n}")
        v = max(0.0, d[i, j] + bias)
        d[i, j] = v
        d[j, i] = v
    return RangeMatrix(n=ranges.n, d=d)


@dataclass(frozen=True)
class AttackPlan:
    """A concrete adversary for one trial: who is hit and with what offsets.

    Built once per trial so that spoofed readings stay coherent across
    rounds; the per-round application itself is deterministic.
    """

    cfg: AttackConfig
    attacked: frozenset[int]
    base_offsets: dict[int, np.ndarray] = field(default_factory=dict)
    drifts: dict[int, np.ndarray] = field(default_factory=dict)
    tampered_pairs: frozenset[tuple[int, int]] = frozenset()

    def apply(
        self, states: list[NodeState], ranges: RangeMatrix, round_index: int
    ) -> tuple[list[NodeState], RangeMatrix]:
        out_states = []
        for st in states:
            if st.id in self.base_offsets:
                off = self.base_offsets[st.id]
                if st.id in self.drifts:
                    off = off + round_index * self.drifts[st.id]
                out_states.append(
                    replace(st, gnss_reading=st.true_position + off, is_attacked=True)
                )
            elif st.id in self.attacked:
                out_states.append(replace(st, is_attacked=True))
            else:
                out_states.append(st)
        out_ranges = ranges
        if self.tampered_pairs:
            out_ranges = apply_range_tamper(
                ranges, set(self.tampered_pairs), self.cfg.range_bias
            )
        return out_states, out_ranges


def plan_attack(
    n: int,
    cfg: AttackConfig,
    rng: np.random.Generator,
    planar: bool = False,
) -> AttackPlan:
    """Select victims and draw their offsets/tampered pairs for a trial."""
    cfg.validate_against(n)
    attacked = select_attacked(n, cfg.attacked_count, rng)
    base: dict[int, np.ndarray] = {}
    drifts: dict[int, np.ndarray] = {}
    tampered: set[tuple[int, int]] = set()

    spoofing = cfg.mode in ("gnss_spoof", "collusion", "mixed") and attacked
    if spoofing:
        shared = cfg.colluding or cfg.mode == "collusion"
        ids = sorted(attacked)
        if cfg.offset_model == "fixed_vector":
            base = {i: as_position(cfg.fixed_offset) for i in ids}
        elif shared:
            direction = _random_unit(rng, planar)
            base = {i: cfg.offset_magnitude * direction for i in ids}
        else:
            base = {i: cfg.offset_magnitude * _random_unit(rng, planar) for i in ids}
        if cfg.offset_model == "time_varying":
            if shared:
                drift_dir = _random_unit(rng, planar)
                drifts = {i: cfg.drift_magnitude * drift_dir for i in ids}
            else:
                drifts = {i: cfg.drift_magnitude * _random_unit(rng, planar) for i in ids}

    if cfg.mode in ("range_tamper", "mixed") and attacked:
        # Tamper the pairs incident to attacked nodes, against a random
        # honest peer each, so effects concentrate where spoofing does.
        honest = sorted(set(range(n)) - attacked)
        if honest:
            for i in sorted(attacked):
                j = int(rng.choice(honest))
                tampered.add((min(i, j), max(i, j)))

    return AttackPlan(
        cfg=cfg,
        attacked=frozenset(attacked),
        base_offsets=base,
        drifts=drifts,
        tampered_pairs=frozenset(tampered),
    )


def worst_case_translation_bound(diameter: float, tau: float) -> float:
    """Smallest collusion offset guaranteed to break every honest-attacker pair.

    If the shared translation exceeds the formation diameter plus tau, then
    for any honest-attacker pair the reported distance differs from the
    measured one by more than tau regardless of geometry.
    """
    return diameter + tau + math.ulp(diameter + tau)
