"""Sensor simulation: GNSS fixes, INS dead reckoning, inter-node ranging.

All generators are pure functions of their RNG stream, so identical
streams reproduce identical measurements. GNSS and INS noise come from
separate substreams owned by the caller, which keeps the two error
processes independent by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from swarmraft.core import CovarianceDiag, Position, gaussian_vector


@dataclass(frozen=True, eq=False)
class NodeState:
    """Per-drone state for one round; ground truth is hidden from the protocol."""

    id: int
    true_position: Position
    ins_estimate: Position
    gnss_reading: Position
    is_attacked: bool = False


@dataclass(frozen=True, eq=False)
class MotionIncrement:
    """One step of commanded displacement, meters."""

    delta: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.delta, dtype=float)
        if d.shape != (3,) or not np.all(np.isfinite(d)):
            raise ValueError(f"increment must be a finite 3-vector, got {self.delta}")
        object.__setattr__(self, "delta", d)

    @classmethod
    def zero(cls) -> "MotionIncrement":
        return cls(np.zeros(3))


@dataclass(frozen=True, eq=False)
class RangeMatrix:
    """Symmetric n x n matrix of measured inter-node distances, zero diagonal."""

    n: int
    d: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=float)
        if d.shape != (self.n, self.n):
            raise ValueError(f"expected {self.n}x{self.n} matrix, got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("range matrix must be finite")
        if np.any(np.diag(d) != 0):
            raise ValueError("range matrix diagonal must be 0")
        if not np.array_equal(d, d.T):
            raise ValueError("range matrix must be symmetric")
        if np.any(d < 0):
            raise ValueError("ranges must be >= 0")
        object.__setattr__(self, "d", d)

    def row(self, i: int) -> np.ndarray:
        return self.d[i]


def sample_gnss(true_pos: Position, r_gnss: CovarianceDiag, rng: np.random.Generator) -> Position:
    """Noisy absolute position fix: truth plus zero-mean Gaussian noise."""
    return np.asarray(true_pos, dtype=float) + gaussian_vector(rng, r_gnss)


def propagate_ins(
    prev_estimate: Position,
    increment: MotionIncrement,
    r_ins: CovarianceDiag,
    rng: np.random.Generator,
) -> Position:
    """Dead-reckon one step: previous estimate plus increment plus drift noise."""
    return np.asarray(prev_estimate, dtype=float) + increment.delta + gaussian_vector(rng, r_ins)


def measure_ranges(true_positions, sigma_d: float, rng: np.random.Generator) -> RangeMatrix:
    """Measure all pairwise distances with one noise draw per unordered pair.

    Noisy ranges are clamped at 0; the matrix is symmetric with a zero
    diagonal. Exactly C(n, 2) normal draws are consumed, in row-major
    upper-triangle order.
    """
    pts = np.asarray(true_positions, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 positions to measure ranges, got {n}")
    if sigma_d < 0:
        raise ValueError(f"sigma_d must be >= 0, got {sigma_d}")

    diff = pts[:, None, :] - pts[None, :, :]
    exact = np.linalg.norm(diff, axis=2)

    iu, ju = np.triu_indices(n, k=1)
    noise = sigma_d * rng.standard_normal(iu.size)
    d = exact.copy()
    d[iu, ju] += noise
    d[ju, iu] = d[iu, ju]
    np.fill_diagonal(d, 0.0)
    np.clip(d, 0.0, None, out=d)
    return RangeMatrix(n=n, d=d)


def sample_formation(
    n: int,
    bounding_box: float,
    min_separation: float,
    dimension: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw n positions uniformly in a box, rejecting pairs closer than min_separation.

    Keeps multilateration geometry non-degenerate. dimension 2 pins z to 0.
    """
    if n < 1:
        raise ValueError("need at least one node")
    if dimension not in (2, 3):
        raise ValueError(f"dimension must be 2 or 3, got {dimension}")
    if min_separation <= 0:
        raise ValueError("min_separation must be > 0")

    pts = np.zeros((n, 3))
    placed = 0
    attempts = 0
    max_attempts = 10_000 * n
    while placed < n:
        if attempts >= max_attempts:
            raise RuntimeError(
                f"could not place {n} nodes with separation {min_separation} "
                f"in a {bounding_box} m box"
            )
        attempts += 1
        cand = rng.uniform(0.0, bounding_box, size=3)
        if dimension == 2:
            cand[2] = 0.0
        if placed == 0 or np.all(
            np.linalg.norm(pts[:placed] - cand, axis=1) >= min_separation
        ):
            pts[placed] = cand
            placed += 1
    return pts


def initial_states(true_positions: np.ndarray) -> list[NodeState]:
    """Round-0 states: INS seeded at truth (initial positions securely known)."""
    pts = np.asarray(true_positions, dtype=float).reshape(-1, 3)
    return [
        NodeState(
            id=i,
            true_position=pts[i].copy(),
            ins_estimate=pts[i].copy(),
            gnss_reading=pts[i].copy(),
        )
        for i in range(pts.shape[0])
    ]


def advance_round(
    states: list[NodeState],
    increments: list[MotionIncrement],
    r_gnss: CovarianceDiag,
    r_ins: CovarianceDiag,
    gnss_rng: np.random.Generator,
    ins_rng: np.random.Generator,
) -> list[NodeState]:
    """Move truths by the increments, then sense: INS propagates, GNSS reads.

    GNSS and INS consume distinct streams so their errors stay independent.
    """
    if len(increments) != len(states):
        raise ValueError("one increment per node required")
    out = []
    for st, inc in zip(states, increments):
        new_truth = st.true_position + inc.delta
        new_ins = propagate_ins(st.ins_estimate, inc, r_ins, ins_rng)
        new_gnss = sample_gnss(new_truth, r_gnss, gnss_rng)
        out.append(
            replace(
                st,
                true_position=new_truth,
                ins_estimate=new_ins,
                gnss_reading=new_gnss,
                is_attacked=False,
            )
        )
    return out
