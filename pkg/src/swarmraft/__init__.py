"""SwarmRaft: fault-tolerant swarm localization with consensus.

A deterministic simulator and protocol library for leader-coordinated
UAV swarm localization: GNSS-spoofed nodes are detected by pairwise
range-consistency voting and their positions recovered by robust
multilateration, with results replicated through a minimal Raft-style
consensus layer. A Monte Carlo harness reproduces the scaling and
error-reduction behavior of the protocol.
"""

from swarmraft.core import (
    CovarianceDiag,
    Position,
    centroid,
    derive_seed,
    euclidean_distance,
    gaussian_sample,
    mean_absolute_error,
    position,
    substream,
)

__version__ = "0.1.0"

__all__ = [
    "CovarianceDiag",
    "Position",
    "centroid",
    "derive_seed",
    "euclidean_distance",
    "gaussian_sample",
    "mean_absolute_error",
    "position",
    "substream",
    "__version__",
]
