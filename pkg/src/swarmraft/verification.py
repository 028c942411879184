"""Leader-side fault detection and recovery.

Stage 1 cross-checks every pair of reported positions against the
measured inter-node ranges and tallies +/-1 consistency votes; a node
with a negative tally is flagged. Stage 2 re-estimates each flagged
node by robust multilateration against the non-flagged peers and only
replaces the report if the correction moves it materially. A flagged
node whose correction lands near its own report is re-accepted as
honest, which makes occasional false Stage-1 flags harmless.

The multilateration solver is a damped Gauss-Newton iteration on a
soft-L1 robust loss; each accepted step is forced downhill by
backtracking, so the objective history is non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from swarmraft.core import Position, substream
from swarmraft.sensors import RangeMatrix, measure_ranges, sample_formation, sample_gnss

if TYPE_CHECKING:
    from swarmraft.harness import SwarmConfig

FALLBACK_POLICIES = ("all_peers", "ins_only")
INIT_STRATEGIES = ("reported", "centroid")

PROVENANCE_ACCEPTED = "accepted_report"
PROVENANCE_MULTILATERATED = "multilaterated"
PROVENANCE_INS = "ins_fallback"


@dataclass(frozen=True, eq=False)
class ClientReport:
    """What one node sends the leader: its position claim and its range row."""

    node_id: int
    reported_position: Position
    range_row: tuple[tuple[int, float], ...]

    def ranges_by_peer(self) -> dict[int, float]:
        return {peer: dist for peer, dist in self.range_row}


@dataclass(frozen=True)
class DetectionParams:
    """Thresholds and solver settings for detection and recovery.

    tau gates the Stage-1 pairwise votes, epsilon gates the Stage-2
    accept/replace decision, and residual_threshold_T is the calibrated
    alarm level for the optional residual gate (off by default). The
    defaults suit the default sensor noise; recalibrate when noise
    parameters change.
    """

    tau: float = 10.0
    epsilon: float = 10.0
    k_max: int = 100
    residual_threshold_T: float = 10.0
    step_tol: float = 1e-9
    min_anchors: int = 3
    fallback: str = "all_peers"
    init_strategy: str = "reported"
    use_residual_gate: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.step_tol <= 0:
            raise ValueError("step_tol must be > 0")
        if self.min_anchors < 2:
            raise ValueError("min_anchors must be >= 2")
        if self.fallback not in FALLBACK_POLICIES:
            raise ValueError(f"unknown fallback policy {self.fallback!r}")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ValueError(f"unknown init strategy {self.init_strategy!r}")


@dataclass(frozen=True)
class VoteTally:
    """Signed sum of pairwise consistency votes for one node."""

    node_id: int
    votes: int
    flagged: bool


@dataclass(frozen=True, eq=False)
class VerificationOutcome:
    """Final per-node verdict: position, fault flag, and how it was produced."""

    node_id: int
    verified_position: Position
    faulty: bool
    provenance: str
    residual: float
    deviation: float


@dataclass(frozen=True, eq=False)
class MultilaterationResult:
    position: Position
    converged: bool
    iterations: int
    objective_history: tuple[float, ...]


@dataclass
class OpCounters:
    """Work accounting for the complexity model.

    pair_checks counts Stage-1 consistency checks; anchor_passes counts
    one unit per anchor consumed by a recovery, matching the
    one-pass-per-correction cost model. Iterations are tracked separately
    and not folded into leader_ops.
    """

    pair_checks: int = 0
    anchor_passes: int = 0
    multilaterations: int = 0
    gn_iterations: int = 0

    @property
    def leader_ops(self) -> int:
        return self.pair_checks + self.anchor_passes


def reports_from_arrays(positions: np.ndarray, ranges: RangeMatrix) -> list[ClientReport]:
    """Bundle reported positions and range rows into per-node reports."""
    pts = np.asarray(positions, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    if ranges.n != n:
        raise ValueError(f"ranges dimension {ranges.n} != report count {n}")
    reports = []
    for i in range(n):
        row = tuple((j, float(ranges.d[i, j])) for j in range(n) if j != i)
        reports.append(ClientReport(node_id=i, reported_position=pts[i].copy(), range_row=row))
    return reports


def assemble_ranges(reports: Sequence[ClientReport]) -> RangeMatrix:
    """Rebuild the leader's distance matrix from the collected range rows.

    The two directions of each pair are averaged, which is exact when
    ranging is symmetric and a sane merge if a directed mode ever lands.
    """
    n = len(reports)
    if n < 2:
        raise ValueError("need at least 2 reports")
    d = np.zeros((n, n))
    for rep in reports:
        row = rep.ranges_by_peer()
        if set(row) != set(range(n)) - {rep.node_id}:
            raise ValueError(f"report {rep.node_id} does not cover all peers exactly once")
        for j, dist in row.items():
            d[rep.node_id, j] = dist
    d = np.maximum(0.0, (d + d.T) / 2.0)
    np.fill_diagonal(d, 0.0)
    return RangeMatrix(n=n, d=d)


def _reported_matrix(reports: Sequence[ClientReport]) -> np.ndarray:
    ordered = sorted(reports, key=lambda r: r.node_id)
    if [r.node_id for r in ordered] != list(range(len(ordered))):
        raise ValueError("reports must carry node ids 0..n-1 exactly once")
    return np.stack([np.asarray(r.reported_position, dtype=float) for r in ordered])


def compute_votes(
    reports: Sequence[ClientReport],
    ranges: RangeMatrix,
    tau: float,
    counters: Optional[OpCounters] = None,
) -> list[VoteTally]:
    """Tally pairwise consistency votes; a negative tally flags the node.

    Node A earns +1 from peer B when the distance implied by the two
    reports agrees with the measured range within tau, else -1.
    """
    n = len(reports)
    if n < 2:
        raise ValueError("need at least 2 reports to vote")
    if ranges.n != n:
        raise ValueError(f"ranges dimension {ranges.n} != report count {n}")
    pts = _reported_matrix(reports)
    diff = pts[:, None, :] - pts[None, :, :]
    implied = np.linalg.norm(diff, axis=2)
    consistent = np.abs(implied - ranges.d) < tau
    signs = np.where(consistent, 1, -1)
    np.fill_diagonal(signs, 0)
    tallies = signs.sum(axis=1)
    if counters is not None:
        counters.pair_checks += n * (n - 1)
    return [
        VoteTally(node_id=i, votes=int(tallies[i]), flagged=bool(tallies[i] < 0))
        for i in range(n)
    ]


def residual(report: ClientReport, verified_peers: Sequence[tuple[Position, float]]) -> float:
    """RMS violation of the peer range constraints at the reported position.

    Zero exactly when the report lies on every peer's range sphere; grows
    smoothly with inconsistency.
    """
    if len(verified_peers) == 0:
        raise ValueError("residual needs at least one verified peer")
    pos = np.asarray(report.reported_position, dtype=float)
    anchors = np.stack([np.asarray(p, dtype=float) for p, _ in verified_peers])
    dists = np.array([d for _, d in verified_peers], dtype=float)
    violations = np.linalg.norm(pos - anchors, axis=1) - dists
    return float(np.sqrt(np.mean(violations**2)))


@dataclass(frozen=True)
class CalibrationResult:
    """Honest-operation residual statistics and the derived alarm threshold."""

    mu_e: float
    sigma_e: float
    threshold: float
    residuals: np.ndarray


def calibrate_threshold(
    config: "SwarmConfig", trials: int, rng: np.random.Generator
) -> CalibrationResult:
    """Estimate the honest residual distribution and set T = mean + 3 std.

    Runs attack-free sensing rounds and pools the residuals of every
    node. The 3-sigma threshold keeps the honest exceedance probability
    around or below one percent.
    """
    if trials < 30:
        raise ValueError("insufficient calibration sample: need at least 30 trials")
    if config.attack.attacked_count != 0:
        raise ValueError("calibration requires honest configuration")

    residuals = []
    for _ in range(trials):
        truths = sample_formation(
            config.n, config.bounding_box, config.min_separation, config.dimension, rng
        )
        readings = np.stack([sample_gnss(p, config.r_gnss, rng) for p in truths])
        ranges = measure_ranges(truths, config.sigma_d, rng)
        reports = reports_from_arrays(readings, ranges)
        for rep in reports:
            peers = [
                (readings[j], float(ranges.d[rep.node_id, j]))
                for j in range(config.n)
                if j != rep.node_id
            ]
            residuals.append(residual(rep, peers))

    res = np.asarray(residuals)
    mu = float(res.mean())
    sigma = float(res.std(ddof=1)) if res.size > 1 else 0.0
    return CalibrationResult(mu_e=mu, sigma_e=sigma, threshold=mu + 3.0 * sigma, residuals=res)


def _soft_l1(squared: np.ndarray) -> np.ndarray:
    """Robust loss applied to squared residuals: 2(sqrt(1+s) - 1)."""
    return 2.0 * (np.sqrt(1.0 + squared) - 1.0)


def _objective(q: np.ndarray, anchors: np.ndarray, dists: np.ndarray) -> float:
    r = np.linalg.norm(q - anchors, axis=1) - dists
    return float(np.sum(_soft_l1(r**2)))


def _degenerate(anchors: np.ndarray) -> bool:
    """True when the anchors are (near) collinear, which leaves the fix ambiguous."""
    if anchors.shape[0] < 3:
        return True
    centered = anchors - anchors.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return bool(s[1] <= 1e-9 * max(s[0], 1.0))


def _linear_seed(pts: np.ndarray, dists: np.ndarray) -> np.ndarray:
    """Closed-form trilateration seed: pairwise-differenced range equations.

    Subtracting the first sphere equation from the rest leaves a linear
    system in the position; with exact ranges its solution is exact.
    """
    ref_pt, ref_d = pts[0], dists[0]
    a = 2.0 * (pts[1:] - ref_pt)
    b = (
        ref_d**2
        - dists[1:] ** 2
        - np.sum(ref_pt**2)
        + np.sum(pts[1:] ** 2, axis=1)
    )
    seed, *_ = np.linalg.lstsq(a, b, rcond=None)
    return seed


def _gauss_newton(
    pts: np.ndarray,
    dists: np.ndarray,
    start: np.ndarray,
    params: DetectionParams,
) -> tuple[np.ndarray, float, int, list[float], bool]:
    """Damped Gauss-Newton descent on the soft-L1 objective from one start."""
    q = start.copy()
    fval = _objective(q, pts, dists)
    history = [fval]
    iterations = 0
    converged = False
    eye = np.eye(3)
    for _ in range(params.k_max):
        iterations += 1
        offsets = q - pts
        norms = np.maximum(np.linalg.norm(offsets, axis=1), 1e-12)
        r = norms - dists
        jac = offsets / norms[:, None]
        weights = 1.0 / np.sqrt(1.0 + r**2)

        normal = jac.T @ (jac * weights[:, None])
        grad = jac.T @ (weights * r)
        # Tiny Tikhonov term keeps the 3x3 solve nonsingular when the
        # problem is planar (z column identically zero -> z step stays 0).
        ridge = 1e-12 * max(np.trace(normal), 1.0)
        step = np.linalg.solve(normal + ridge * eye, -grad)

        accepted = False
        for _ in range(30):
            trial = q + step
            ftrial = _objective(trial, pts, dists)
            if ftrial <= fval:
                q = trial
                fval = ftrial
                accepted = True
                break
            step = step / 2.0
        if not accepted:
            break
        history.append(fval)
        if np.linalg.norm(step) < params.step_tol:
            converged = True
            break
    return q, fval, iterations, history, converged


def multilaterate(
    anchors: Sequence[tuple[Position, float]],
    init: Position,
    params: DetectionParams,
    min_anchors: Optional[int] = None,
    counters: Optional[OpCounters] = None,
) -> MultilaterationResult:
    """Estimate a position from ranges to known anchors.

    Minimizes the soft-L1 robust loss of the range residuals with
    damped Gauss-Newton, iterating until the accepted step is shorter
    than step_tol or k_max iterations have run. The robust loss keeps a
    few corrupted ranges from dragging the fix.

    The robust objective can trap a single descent in a local minimum
    when the start is far off, so the solver also descends from a
    closed-form trilateration seed and keeps whichever end point scores
    strictly better; ties keep the caller's start.

    Degenerate anchor geometry (fewer than 3 anchors, or collinear
    anchors) cannot pin the solution; the best-effort point is still
    returned but converged is reported False.
    """
    need = params.min_anchors if min_anchors is None else min_anchors
    if len(anchors) < need:
        raise ValueError(f"insufficient anchors: {len(anchors)} < {need}")

    pts = np.stack([np.asarray(p, dtype=float) for p, _ in anchors])
    dists = np.array([d for _, d in anchors], dtype=float)
    degenerate = _degenerate(pts)

    starts = [np.asarray(init, dtype=float).copy()]
    if not degenerate:
        seed = _linear_seed(pts, dists)
        if np.all(np.isfinite(seed)):
            starts.append(seed)

    if counters is not None:
        counters.multilaterations += 1
        counters.anchor_passes += len(anchors)

    best = None
    for start in starts:
        run = _gauss_newton(pts, dists, start, params)
        if counters is not None:
            counters.gn_iterations += run[2]
        if best is None or run[1] < best[1]:
            best = run
        if best[1] < 1e-12:  # zero-residual optimum cannot be beaten
            break
    q, _, iterations, history, converged = best

    if degenerate:
        converged = False
    return MultilaterationResult(
        position=q,
        converged=converged,
        iterations=iterations,
        objective_history=tuple(history),
    )


def verify_and_recover(
    reports: Sequence[ClientReport],
    ranges: RangeMatrix,
    ins_estimates: Sequence[Position],
    params: DetectionParams,
    counters: Optional[OpCounters] = None,
) -> list[VerificationOutcome]:
    """Run the full two-stage pipeline and return one verdict per node.

    Flagged nodes are re-estimated against the non-flagged peers'
    reported positions and measured ranges. When too few anchors remain,
    the fallback policy either widens the anchor set to every peer
    (best effort, may stay ambiguous) or falls back to the node's own
    dead-reckoned estimate.
    """
    n = len(reports)
    if len(ins_estimates) != n:
        raise ValueError("one INS estimate per report required")
    ordered = sorted(reports, key=lambda r: r.node_id)
    pts = _reported_matrix(ordered)

    tallies = compute_votes(ordered, ranges, params.tau, counters=counters)
    flagged = {t.node_id for t in tallies if t.flagged}

    def peers_of(a: int, ids) -> list[tuple[Position, float]]:
        return [(pts[j], float(ranges.d[a, j])) for j in ids if j != a]

    trusted = [i for i in range(n) if i not in flagged]

    def residual_of(a: int) -> float:
        anchor_ids = [j for j in trusted if j != a]
        if not anchor_ids:
            anchor_ids = [j for j in range(n) if j != a]
        return residual(ordered[a], peers_of(a, anchor_ids))

    if params.use_residual_gate:
        for i in list(trusted):
            if residual_of(i) > params.residual_threshold_T:
                flagged.add(i)
        trusted = [i for i in range(n) if i not in flagged]

    outcomes: list[VerificationOutcome] = []
    for i in range(n):
        if i not in flagged:
            outcomes.append(
                VerificationOutcome(
                    node_id=i,
                    verified_position=pts[i].copy(),
                    faulty=False,
                    provenance=PROVENANCE_ACCEPTED,
                    residual=residual_of(i),
                    deviation=0.0,
                )
            )
            continue

        anchors = peers_of(i, trusted)
        min_required = params.min_anchors
        use_ins = False
        if len(anchors) < params.min_anchors:
            if params.fallback == "all_peers":
                anchors = peers_of(i, range(n))
                min_required = 2
                use_ins = len(anchors) < 2
            else:
                use_ins = True

        if use_ins:
            verified = np.asarray(ins_estimates[i], dtype=float).copy()
            outcomes.append(
                VerificationOutcome(
                    node_id=i,
                    verified_position=verified,
                    faulty=True,
                    provenance=PROVENANCE_INS,
                    residual=residual_of(i),
                    deviation=float(np.linalg.norm(pts[i] - verified)),
                )
            )
            continue

        if params.init_strategy == "centroid":
            init = np.stack([p for p, _ in anchors]).mean(axis=0)
        else:
            init = pts[i]
        result = multilaterate(
            anchors, init, params, min_anchors=min_required, counters=counters
        )
        deviation = float(np.linalg.norm(pts[i] - result.position))
        if deviation > params.epsilon:
            outcomes.append(
                VerificationOutcome(
                    node_id=i,
                    verified_position=result.position,
                    faulty=True,
                    provenance=PROVENANCE_MULTILATERATED,
                    residual=residual_of(i),
                    deviation=deviation,
                )
            )
        else:
            outcomes.append(
                VerificationOutcome(
                    node_id=i,
                    verified_position=pts[i].copy(),
                    faulty=False,
                    provenance=PROVENANCE_ACCEPTED,
                    residual=residual_of(i),
                    deviation=deviation,
                )
            )
    return outcomes
