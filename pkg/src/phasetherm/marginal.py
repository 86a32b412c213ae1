"""Cluster-spin marginal tables and the classical Fisher information they carry.

A marginal maps the 2^n states b' of the probed cluster to p_n(b') and to the
energy-weighted companion W(b') = sum over the rest of the lattice of E(b) p(b).
The classical FI of the marginal with respect to inverse temperature is

    F = sum_b' W(b')^2 / p_n(b') - <E>^2,

which follows from d p_n / d beta = -W + <E> p_n.

Keys pack the cluster bits in member order (ascending site index): bit k of the
key is the bit of the k-th cluster member, so key = sum_k b_k << k.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = ["ClusterMarginal", "local_fi_from_marginal", "UnderSampledMarginal"]


class UnderSampledMarginal(UserWarning):
    """Raised as a warning when a sampled marginal looks too thin to trust."""


@dataclass(frozen=True, eq=False)
class ClusterMarginal:
    """Occupied cluster states with their probabilities and energy weights.

    keys are the occupied n-bit integers (ascending), probs sums to ~1, and
    energy_weighted[k] estimates W(keys[k]). under_sampled marks sampled
    marginals whose occupancy is too close to the sample count.
    """

    n: int
    keys: np.ndarray            # int64, ascending
    probs: np.ndarray           # float64
    energy_weighted: np.ndarray  # float64
    under_sampled: bool = False

    def __post_init__(self) -> None:
        if not (self.keys.size == self.probs.size == self.energy_weighted.size):
            raise ValueError("marginal arrays must have equal length")
        if self.keys.size and (self.keys.min() < 0 or self.keys.max() >= 2 ** self.n):
            raise ValueError("marginal keys outside n-bit range")

    @property
    def mean_energy(self) -> float:
        return float(self.energy_weighted.sum())

    def z_values(self) -> np.ndarray:
        """Cluster magnetization Z = n - 2 popcount(key) for each occupied key."""
        counts = np.zeros(self.keys.size, dtype=np.int64)
        k = self.keys.copy()
        while k.any():
            counts += k & 1
            k >>= 1
        return self.n - 2 * counts


def local_fi_from_marginal(marginal: ClusterMarginal,
                           mean_energy: float | None = None) -> float:
    """Classical FI of the cluster marginal; non-negative by Cauchy-Schwarz."""
    if mean_energy is None:
        mean_energy = marginal.mean_energy
    mask = marginal.probs > 0
    fi = float(np.sum(marginal.energy_weighted[mask] ** 2 / marginal.probs[mask]))
    fi -= mean_energy ** 2
    # float cancellation can leave a tiny negative residue
    return max(fi, 0.0)


def check_occupancy(n_occupied: int, n_samples: int) -> bool:
    """Warn (and report) when occupied keys exceed 1% of the sample count."""
    thin = n_occupied > n_samples / 100
    if thin:
        warnings.warn(
            f"cluster marginal occupies {n_occupied} states from {n_samples} "
            "samples; per-state statistics are likely under-sampled",
            UnderSampledMarginal,
            stacklevel=3,
        )
    return thin
