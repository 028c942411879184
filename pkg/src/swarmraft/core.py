"""Geometric primitives, deterministic randomness, and error metrics.

Positions are plain numpy arrays of shape (3,), in meters, in a local
Cartesian frame. Planar (2D) scenarios keep z fixed at 0. Every public
operation rejects non-finite values at its boundary so NaN/Inf never
propagates through a simulation.

Randomness is managed through named substreams of a counter-based PRNG
(Philox): ``substream(seed, "gnss", node_id, round_k)`` always yields the
same generator for the same seed and path, independent of any other
stream. This is what makes trials reproducible and parallel-safe.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

Position = np.ndarray  # shape (3,), dtype float64, meters

MAX_SEED = 2**64 - 1


def position(x: float, y: float, z: float = 0.0) -> Position:
    """Build a validated 3D position vector."""
    p = np.array([x, y, z], dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError(f"position components must be finite, got {p}")
    return p


def as_position(value) -> Position:
    """Coerce a length-3 sequence to a validated position array."""
    p = np.asarray(value, dtype=float)
    if p.shape != (3,):
        raise ValueError(f"expected 3 components, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError(f"position components must be finite, got {p}")
    return p


@dataclass(frozen=True)
class CovarianceDiag:
    """Diagonal noise covariance, one variance per axis, in m^2."""

    variances: tuple[float, float, float]

    def __post_init__(self):
        v = np.asarray(self.variances, dtype=float)
        if v.shape != (3,):
            raise ValueError("covariance needs exactly 3 variances")
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise ValueError(f"variances must be finite and >= 0, got {v}")
        object.__setattr__(self, "variances", tuple(float(x) for x in v))

    @classmethod
    def isotropic(cls, variance: float, dimension: int = 3) -> "CovarianceDiag":
        """Same variance on each active axis; z gets 0 when dimension is 2."""
        if dimension not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {dimension}")
        z = variance if dimension == 3 else 0.0
        return cls((variance, variance, z))

    @classmethod
    def zero(cls) -> "CovarianceDiag":
        return cls((0.0, 0.0, 0.0))

    @property
    def stds(self) -> np.ndarray:
        return np.sqrt(np.asarray(self.variances))

    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.variances)


def _path_digest(parts: tuple) -> tuple[int, ...]:
    """Hash a mixed label path to integers usable as a spawn key.

    Stable across processes and Python versions (unlike ``hash``), so the
    derived streams are reproducible anywhere.
    """
    out = []
    for part in parts:
        if isinstance(part, (int, np.integer)):
            out.append(int(part) & MAX_SEED)
        elif isinstance(part, str):
            digest = hashlib.blake2s(part.encode("utf-8"), digest_size=8).digest()
            out.append(int.from_bytes(digest, "little"))
        else:
            raise TypeError(f"stream path parts must be int or str, got {type(part)}")
    return tuple(out)


def substream(seed: int, *path) -> np.random.Generator:
    """Derive an independent, reproducible generator for (seed, path).

    Distinct paths give statistically independent streams; the same path
    always gives the same stream. Backed by the counter-based Philox
    bit generator.
    """
    if not 0 <= int(seed) <= MAX_SEED:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_path_digest(tuple(path)))
    return np.random.Generator(np.random.Philox(ss))


def derive_seed(seed: int, *path) -> int:
    """Fold (seed, path) into a fresh 64-bit seed for a child lineage."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_path_digest(tuple(path)))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def euclidean_distance(a: Position, b: Position) -> float:
    """L2 distance between two positions, in meters."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if not np.all(np.isfinite(d)):
        raise ValueError("distance inputs must be finite")
    return float(np.linalg.norm(d))


def centroid(points) -> Position:
    """Component-wise mean of a nonempty list of positions."""
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        raise ValueError("empty anchor set")
    pts = pts.reshape(-1, 3)
    return pts.mean(axis=0)


def mean_absolute_error(estimates, truths) -> float:
    """Mean over nodes of the Euclidean error between estimate and truth."""
    est = np.asarray(estimates, dtype=float).reshape(-1, 3)
    tru = np.asarray(truths, dtype=float).reshape(-1, 3)
    if est.shape[0] != tru.shape[0]:
        raise ValueError(f"length mismatch: {est.shape[0]} estimates vs {tru.shape[0]} truths")
    if est.shape[0] == 0:
        raise ValueError("cannot compute MAE of empty lists")
    return float(np.linalg.norm(est - tru, axis=1).mean())


def gaussian_sample(rng: np.random.Generator, mean: float, variance: float) -> float:
    """One draw from N(mean, variance); variance 0 returns mean exactly."""
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    return float(mean + np.sqrt(variance) * rng.standard_normal())


def gaussian_vector(rng: np.random.Generator, cov: CovarianceDiag) -> np.ndarray:
    """One 3-vector draw with independent per-axis variances."""
    return cov.stds * rng.standard_normal(3)
