"""Geometry and energetics of the periodic 2D Ising lattice.

Conventions used throughout the package:

* Sites of the L x L square lattice are indexed row-major: site = row * L + col.
* A spin configuration is stored as bits b_i in {0, 1}; the physical spin is
  sigma_i = 1 - 2 b_i in {+1, -1} (b=0 is spin up).
* The bond list contains, for every site, its +col ("right") and +row ("down")
  periodic neighbour, giving K = 2 N bonds. On L=2 the wrap-around makes both
  entries of a pair coincide; the two parallel bonds are kept as distinct bonds.
* Energy is E = -J * sum_bonds sigma_i sigma_j - h * sum_i sigma_i.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

__all__ = [
    "Lattice",
    "ThermoParams",
    "ClusterSpec",
    "SpinConfig",
    "BondCounts",
    "build_lattice",
    "cluster_sites",
    "cluster_size",
    "energy",
    "delta_energy",
    "cluster_magnetization",
    "bond_counts",
    "adjacency_matrix",
    "onsager_beta_c",
]

COORDINATION = 4  # q of the square lattice


def onsager_beta_c(J: float) -> float:
    """Exact critical inverse temperature of the 2D square lattice, ln(1+sqrt(2))/(2J)."""
    return math.log(1.0 + math.sqrt(2.0)) / (2.0 * J)


@dataclass(frozen=True, eq=False)
class Lattice:
    """Periodic square lattice: neighbour table and bond list.

    neighbors[i] lists the 4 periodic neighbours of site i in fixed order
    (+col, -col, +row, -row). bonds[k] = (i, j) with j the +col or +row
    neighbour of i; every bond appears exactly once (twice between the same
    pair only through the L=2 wrap-around, deliberately).
    """

    L: int
    neighbors: np.ndarray  # (N, 4) int32, read-only
    bonds: np.ndarray      # (2N, 2) int32, read-only

    @property
    def n_sites(self) -> int:
        return self.L * self.L

    @property
    def n_bonds(self) -> int:
        return self.bonds.shape[0]


@lru_cache(maxsize=None)
def build_lattice(L: int) -> Lattice:
    """Build (and cache) the neighbour table and bond list for an L x L lattice."""
    if L < 2:
        raise ValueError(f"lattice side must be >= 2, got {L}")
    N = L * L
    rows, cols = np.divmod(np.arange(N, dtype=np.int64), L)
    right = rows * L + (cols + 1) % L
    left = rows * L + (cols - 1) % L
    down = ((rows + 1) % L) * L + cols
    up = ((rows - 1) % L) * L + cols
    neighbors = np.stack([right, left, down, up], axis=1).astype(np.int32)
    sites = np.arange(N, dtype=np.int32)
    bonds = np.concatenate(
        [np.stack([sites, right.astype(np.int32)], axis=1),
         np.stack([sites, down.astype(np.int32)], axis=1)],
        axis=0,
    )
    neighbors.setflags(write=False)
    bonds.setflags(write=False)
    return Lattice(L=L, neighbors=neighbors, bonds=bonds)


@dataclass(frozen=True)
class ClusterSpec:
    """Euclidean disk of probed spins: all sites within `radius` of `center`.

    Distances are minimum-image on the torus. radius^2 in {0, 1, 2, 4, 5, 8}
    selects clusters of n = 1, 5, 9, 13, 21, 25 spins on a large enough lattice.
    Member sites are ordered by flat row-major index, so histograms keyed on the
    cluster bit string are reproducible bit for bit.
    """

    center: tuple[int, int]
    radius: float

    def __post_init__(self) -> None:
        if self.radius < 0:
            raise ValueError("cluster radius must be >= 0")
        r, c = self.center
        if r < 0 or c < 0:
            raise ValueError("cluster center coordinates must be >= 0")


def cluster_sites(cluster: ClusterSpec, L: int) -> np.ndarray:
    """Flat site indices of the cluster members on an L x L lattice, ascending."""
    r0, c0 = cluster.center
    if r0 >= L or c0 >= L:
        raise ValueError(f"cluster center {cluster.center} outside {L}x{L} lattice")
    rows, cols = np.divmod(np.arange(L * L, dtype=np.int64), L)
    dr = np.abs(rows - r0)
    dr = np.minimum(dr, L - dr)
    dc = np.abs(cols - c0)
    dc = np.minimum(dc, L - dc)
    inside = dr * dr + dc * dc <= cluster.radius ** 2 + 1e-9
    return np.nonzero(inside)[0].astype(np.int64)


def cluster_size(cluster: ClusterSpec, L: int) -> int:
    return int(cluster_sites(cluster, L).size)


@dataclass(frozen=True)
class ThermoParams:
    """Physical parameters of the lattice-plus-probe problem.

    J > 0 is the ferromagnetic coupling, h the longitudinal field, beta the
    inverse temperature, g the probe-lattice coupling rate (hbar = 1), omega_p
    the bare probe splitting, L the lattice side, and cluster the probed disk.
    """

    J: float
    beta: float
    g: float
    L: int
    h: float = 0.0
    omega_p: float = 0.0
    cluster: ClusterSpec | None = None

    def __post_init__(self) -> None:
        if not self.J > 0:
            raise ValueError("J must be > 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.L < 2:
            raise ValueError("L must be >= 2")
        if self.cluster is not None:
            # validates the center against the lattice
            cluster_sites(self.cluster, self.L)

    @property
    def n_sites(self) -> int:
        return self.L * self.L

    @property
    def beta_c(self) -> float:
        return onsager_beta_c(self.J)


@dataclass(frozen=True, eq=False)
class SpinConfig:
    """A spin configuration as a flat array of bits in {0, 1} (b=0 is spin up)."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        bits = np.ascontiguousarray(self.bits, dtype=np.uint8)
        if bits.ndim != 1:
            raise ValueError("bits must be a flat array")
        if bits.size and bits.max() > 1:
            raise ValueError("bits must be 0 or 1")
        object.__setattr__(self, "bits", bits)

    @property
    def spins(self) -> np.ndarray:
        """sigma = 1 - 2b as int8."""
        return (1 - 2 * self.bits.astype(np.int8)).astype(np.int8)

    @property
    def magnetization(self) -> int:
        """Total magnetization sum_i sigma_i."""
        return int(self.bits.size) - 2 * int(self.bits.sum())


def _spins_of(config: SpinConfig) -> np.ndarray:
    return 1 - 2 * config.bits.astype(np.int64)


def energy(config: SpinConfig, params: ThermoParams) -> float:
    """E = -J sum_<ij> sigma_i sigma_j - h sum_i sigma_i on the periodic lattice."""
    lat = build_lattice(params.L)
    if config.bits.size != lat.n_sites:
        raise ValueError("configuration size does not match the lattice")
    s = _spins_of(config)
    bond_sum = int(np.sum(s[lat.bonds[:, 0]] * s[lat.bonds[:, 1]]))
    return -params.J * bond_sum - params.h * int(s.sum())


def delta_energy(config: SpinConfig, site: int, params: ThermoParams) -> float:
    """Energy change of flipping one spin: 2 sigma_site (J sum_neigh sigma + h)."""
    lat = build_lattice(params.L)
    if not 0 <= site < lat.n_sites:
        raise ValueError(f"site {site} outside lattice")
    s = _spins_of(config)
    neigh_sum = int(s[lat.neighbors[site]].sum())
    return 2.0 * s[site] * (params.J * neigh_sum + params.h)


def cluster_magnetization(config: SpinConfig, cluster: ClusterSpec) -> int:
    """Z_n = sum of sigma over the cluster members."""
    L = math.isqrt(config.bits.size)
    if L * L != config.bits.size:
        raise ValueError("configuration is not a square lattice")
    members = cluster_sites(cluster, L)
    return int(members.size) - 2 * int(config.bits[members].sum())


def adjacency_matrix(lattice: Lattice, J: float) -> np.ndarray:
    """Symmetric matrix with -J on nearest-neighbour pairs (cross-check helper).

    Parallel L=2 bonds accumulate, so entries there are -2J.
    """
    N = lattice.n_sites
    gamma = np.zeros((N, N))
    for i, j in lattice.bonds:
        gamma[i, j] -= J
        gamma[j, i] -= J
    return gamma


@dataclass(frozen=True)
class BondCounts:
    """Bond and bond-doublet counts of a probed cluster.

    K is the total number of lattice bonds, K12 the number of bonds with both
    endpoints inside the cluster. Doublets are unordered pairs of distinct
    bonds: K22 counts those sharing exactly one site that lies outside the
    cluster while the two other endpoints lie inside; K23 counts pairs of
    inside bonds sharing one site; K24 counts pairs of inside bonds sharing no
    site. By construction K24 = K12 (K12 - 1) / 2 - K23.
    """

    K: int
    K12: int
    K22: int
    K23: int
    K24: int

    q: int = field(default=COORDINATION, init=False, repr=False)


def bond_counts(lattice: Lattice, cluster: ClusterSpec) -> BondCounts:
    """Count intra-cluster bonds and the three doublet classes for a disk cluster."""
    L = lattice.L
    if 2 * cluster.radius >= L:
        raise ValueError(
            f"cluster of radius {cluster.radius} wraps onto itself on L={L}"
        )
    members = cluster_sites(cluster, L)
    inside = np.zeros(lattice.n_sites, dtype=bool)
    inside[members] = True

    b_in = inside[lattice.bonds]
    intra = lattice.bonds[b_in[:, 0] & b_in[:, 1]]
    K12 = intra.shape[0]

    # K22: outside site s adjacent to c_s cluster members contributes C(c_s, 2)
    touch = np.zeros(lattice.n_sites, dtype=np.int64)
    for i, j in lattice.bonds:
        if inside[i] and not inside[j]:
            touch[j] += 1
        elif inside[j] and not inside[i]:
            touch[i] += 1
    K22 = int((touch * (touch - 1) // 2).sum())

    K23 = 0
    K24 = 0
    for a in range(K12):
        ia, ja = intra[a]
        for b in range(a + 1, K12):
            ib, jb = intra[b]
            shared = len({int(ia), int(ja)} & {int(ib), int(jb)})
            if shared == 1:
                K23 += 1
            elif shared == 0:
                K24 += 1
    return BondCounts(K=lattice.n_bonds, K12=K12, K22=K22, K23=K23, K24=int(K24))
