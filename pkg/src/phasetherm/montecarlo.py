"""Markov-chain thermal sampling of the lattice with probe-observable accumulation.

Metropolis single-site and Wolff cluster updates over the periodic square
lattice, at h = 0, with one self-contained xorshift128+ RNG stream per chain
(counter-mode seeded, so chains and resumed runs are reproducible bit for
bit). Everything the estimators need is accumulated as exact integers:

* per-block histograms of the cluster magnetization index k (number of down
  spins among the n cluster sites) and the bond sum S = sum over bonds of
  sigma_i sigma_j restricted to each k — sufficient statistics for r(t),
  its beta-derivative, and their jackknife errors at ANY time t;
* the cluster-configuration marginal (dense 2^n tables for n <= 16,
  per-block up to n <= 13 so the local Fisher information gets a jackknife
  error too; a sorted sparse table beyond 16);
* the full-lattice magnetization histogram and per-block bond sums.

Energies never enter the kernels: E = -J S with S integer, so accumulators
are exact, checkpoint resume is bit-identical, and all floating-point work
happens once, at finalization.

The beta-derivative uses the covariance estimator
d r/d beta = -<E e^{-i g t Z}> + <E><e^{-i g t Z}> from a single run;
`finite_difference_dr` provides the two-run common-random-numbers
cross-check.
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .lattice import (
    ClusterSpec,
    SpinConfig,
    ThermoParams,
    build_lattice,
    cluster_sites,
)
from .marginal import ClusterMarginal, check_occupancy, local_fi_from_marginal
from .probe import DecoherenceSeries, default_time_grid

__all__ = [
    "CheckpointMismatchError",
    "SamplerConfig",
    "SampleStats",
    "SamplerState",
    "run_sampler",
    "init_state",
    "advance",
    "finalize",
    "series_from_blocks",
    "local_fi",
    "local_fi_jackknife",
    "finite_difference_dr",
    "wolff_step",
    "metropolis_sweep",
    "save_checkpoint",
    "load_checkpoint",
    "resolve_algorithm",
    "DESK_SWEEPS",
    "PRODUCTION_SWEEPS",
]

DESK_SWEEPS = 1_000_000
PRODUCTION_SWEEPS = 12_000_000
DENSE_KEY_LIMIT = 16   # dense 2^n marginal tables up to this cluster size
BLOCK_KEY_LIMIT = 13   # per-block marginal tables (jackknife) up to this size
DEFAULT_BLOCKS = 32
_SPARSE_SEG_MEAS = 1_000_000  # compaction interval for sparse marginals
_WOLFF_WINDOW = 0.2    # "auto": Wolff within 20% of the critical coupling

_CKPT_MAGIC = b"PTCK"
_CKPT_VERSION = 1

_ALG_CODES = {"metropolis": 0, "wolff": 1, "auto": 2}
_ALG_NAMES = {v: k for k, v in _ALG_CODES.items()}
_SECTOR_CODES = {"full": 0, "positive": 1}
_SECTOR_NAMES = {v: k for k, v in _SECTOR_CODES.items()}


class CheckpointMismatchError(ValueError):
    """A checkpoint does not match the parameters/config of the resuming run."""


@dataclass(frozen=True)
class SamplerConfig:
    """Sampling schedule and reproducibility knobs.

    sweeps counts measurement sweeps (after burn-in); one Metropolis sweep is
    n_sites attempted single-site flips, one Wolff sweep is one cluster
    update. burn_in defaults to sweeps // 10 and must stay below sweeps.
    thinning >= 1 records every thinning-th sweep. symmetrize pairs every
    recorded sample with its global spin flip (exact Z2 symmetrization:
    Im r = 0, at the cost of erasing spontaneous-symmetry-breaking signal).
    sector="positive" instead maps every recorded sample onto its
    nonnegative-total-magnetization representative (flipping the
    configuration when the total magnetization is negative), i.e. the
    finite-size symmetry-broken ensemble; it is incompatible with
    symmetrize. chains > 1 splits the measurement sweeps over independent chains
    (counter-mode seeded from the same seed, each with its own burn-in) whose
    accumulators are merged in chain order, so results are independent of
    how the chains were scheduled. blocks is the per-chain jackknife block
    count; algorithm "auto" picks Wolff near the critical coupling and
    Metropolis elsewhere.
    """

    algorithm: str = "auto"
    sweeps: int = DESK_SWEEPS
    burn_in: int | None = None
    thinning: int = 1
    seed: int = 1
    symmetrize: bool = False
    sector: str = "full"
    chains: int = 1
    blocks: int = DEFAULT_BLOCKS

    def __post_init__(self) -> None:
        if self.algorithm not in _ALG_CODES:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.sector not in _SECTOR_CODES:
            raise ValueError(f"unknown sector {self.sector!r}")
        if self.symmetrize and self.sector == "positive":
            raise ValueError("symmetrize and sector='positive' are exclusive")
        if self.sweeps <= 0:
            raise ValueError("sweeps must be positive")
        if self.thinning < 1:
            raise ValueError("thinning must be >= 1")
        if self.burn_in is None:
            object.__setattr__(self, "burn_in", self.sweeps // 10)
        if self.burn_in < 0:
            raise ValueError("burn_in must be nonnegative")
        if self.burn_in >= self.sweeps:
            raise ValueError("burn_in must be smaller than sweeps")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.chains > self.sweeps:
            raise ValueError("more chains than sweeps")
        if self.blocks < 2:
            raise ValueError("blocks must be >= 2")


def resolve_algorithm(cfg: SamplerConfig, params: ThermoParams) -> str:
    """Map "auto" to a concrete update algorithm for these parameters."""
    if cfg.algorithm != "auto":
        return cfg.algorithm
    if params.beta_c > 0 and abs(params.beta / params.beta_c - 1.0) < _WOLFF_WINDOW:
        return "wolff"
    return "metropolis"


# ---------------------------------------------------------------------------
# RNG: xorshift128+ with splitmix64 counter-mode stream derivation
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_INV53 = 1.0 / 9007199254740992.0  # 2^-53


def _stream_word(seed: int, index: int) -> int:
    """index-th word of the splitmix64 stream keyed by seed (counter mode)."""
    z = (seed + (index + 1) * 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def chain_rng_state(seed: int, chain: int) -> np.ndarray:
    """Initial xorshift128+ state for one chain, independent per chain."""
    s0 = _stream_word(seed, 2 * chain)
    s1 = _stream_word(seed, 2 * chain + 1)
    if s0 == 0 and s1 == 0:
        s1 = 1
    return np.array([s0, s1], dtype=np.uint64)


@njit(cache=True, nogil=True)
def _xs_next(st):
    x = st[0]
    y = st[1]
    st[0] = y
    x ^= x << np.uint64(23)
    st[1] = x ^ y ^ (x >> np.uint64(17)) ^ (y >> np.uint64(26))
    return st[1] + y


@njit(cache=True, nogil=True)
def _uniform(st):
    return (_xs_next(st) >> np.uint64(11)) * _INV53


@njit(cache=True, nogil=True)
def _rand_below(st, n):
    return int(_uniform(st) * n)


@njit(cache=True, nogil=True)
def _init_hot(spins, st):
    for i in range(spins.size):
        spins[i] = np.uint8(_xs_next(st) & np.uint64(1))


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def _record(spins, cl, n, n_sites, mode, s_bond, n_down, mi, total_meas, nblocks,
            nm_b, s_b, zh, zs, mag, kmode, kb, kc, ks, key_buf, sbuf, nbuf):
    # mode 0: record the configuration as sampled.
    # mode 1: record it and its global flip (exact Z2 symmetrization).
    # mode 2: record the nonnegative-magnetization representative only.
    b = mi * nblocks // total_meas
    kdown = 0
    key = 0
    for c in range(n):
        bit = spins[cl[c]]
        kdown += bit
        key |= np.int64(bit) << c
    kbi = b if kb > 1 else 0
    natural = mode != 2 or 2 * n_down <= n_sites
    flipped = mode == 1 or (mode == 2 and 2 * n_down > n_sites)
    if natural:
        nm_b[b] += 1
        s_b[b] += s_bond
        zh[b, kdown] += 1
        zs[b, kdown] += s_bond
        mag[n_sites - n_down] += 1
        if kmode == 1:
            kc[kbi, key] += 1
            ks[kbi, key] += s_bond
        else:
            key_buf[nbuf] = key
            sbuf[nbuf] = s_bond
            nbuf += 1
    if flipped:
        kflip = n - kdown
        keyf = (~key) & ((np.int64(1) << n) - 1)
        nm_b[b] += 1
        s_b[b] += s_bond
        zh[b, kflip] += 1
        zs[b, kflip] += s_bond
        mag[n_down] += 1
        if kmode == 1:
            kc[kbi, keyf] += 1
            ks[kbi, keyf] += s_bond
        else:
            key_buf[nbuf] = keyf
            sbuf[nbuf] = s_bond
            nbuf += 1
    return nbuf


@njit(cache=True, nogil=True)
def _kern_metropolis(spins, st, nbr, cl, acc, sweep_start, sweep_stop, burn,
                     thin, total_meas, nblocks, mode, io, nm_b, s_b, zh, zs,
                     mag, kmode, kb, kc, ks, key_buf, sbuf):
    n_sites = spins.size
    n = cl.size
    s_bond = io[0]
    n_down = io[1]
    nbuf = io[2]
    for sweep in range(sweep_start, sweep_stop):
        for _ in range(n_sites):
            site = _rand_below(st, n_sites)
            si = 1 - 2 * np.int64(spins[site])
            ssum = 0
            for k in range(4):
                ssum += 1 - 2 * np.int64(spins[nbr[site, k]])
            sprod = si * ssum
            if sprod <= 0 or _uniform(st) < acc[sprod + 4]:
                spins[site] = np.uint8(1) - spins[site]
                s_bond -= 2 * sprod
                n_down += si
        if sweep >= burn and (sweep - burn) % thin == 0:
            mi = (sweep - burn) // thin
            nbuf = _record(spins, cl, n, n_sites, mode, s_bond, n_down, mi,
                           total_meas, nblocks, nm_b, s_b, zh, zs, mag,
                           kmode, kb, kc, ks, key_buf, sbuf, nbuf)
    io[0] = s_bond
    io[1] = n_down
    io[2] = nbuf


@njit(cache=True, nogil=True)
def _wolff_flip(spins, st, nbr, padd, stack, cluster, in_c):
    """Grow and flip one Wolff cluster; return (delta S_bond, delta n_down)."""
    n_sites = spins.size
    seed_site = _rand_below(st, n_sites)
    seed_spin = spins[seed_site]
    stack[0] = seed_site
    sp = 1
    cluster[0] = seed_site
    csize = 1
    in_c[seed_site] = True
    spins[seed_site] = np.uint8(1) - seed_spin
    while sp > 0:
        sp -= 1
        i = stack[sp]
        for k in range(4):
            j = nbr[i, k]
            # each of the 4 neighbor slots is a distinct bond (L=2 included)
            if spins[j] == seed_spin and _uniform(st) < padd:
                spins[j] = np.uint8(1) - seed_spin
                in_c[j] = True
                stack[sp] = j
                sp += 1
                cluster[csize] = j
                csize += 1
    ds = 0
    for idx in range(csize):
        i = cluster[idx]
        si = 1 - 2 * np.int64(spins[i])
        for k in range(4):
            j = nbr[i, k]
            if not in_c[j]:
                ds += 2 * si * (1 - 2 * np.int64(spins[j]))
    for idx in range(csize):
        in_c[cluster[idx]] = False
    dn_down = csize if seed_spin == 0 else -csize
    return ds, dn_down


@njit(cache=True, nogil=True)
def _kern_wolff(spins, st, nbr, cl, padd, sweep_start, sweep_stop, burn, thin,
                total_meas, nblocks, mode, io, nm_b, s_b, zh, zs, mag, kmode,
                kb, kc, ks, key_buf, sbuf, stack, cluster, in_c):
    n_sites = spins.size
    n = cl.size
    s_bond = io[0]
    n_down = io[1]
    nbuf = io[2]
    for sweep in range(sweep_start, sweep_stop):
        ds, dnd = _wolff_flip(spins, st, nbr, padd, stack, cluster, in_c)
        s_bond += ds
        n_down += dnd
        if sweep >= burn and (sweep - burn) % thin == 0:
            mi = (sweep - burn) // thin
            nbuf = _record(spins, cl, n, n_sites, mode, s_bond, n_down, mi,
                           total_meas, nblocks, nm_b, s_b, zh, zs, mag,
                           kmode, kb, kc, ks, key_buf, sbuf, nbuf)
    io[0] = s_bond
    io[1] = n_down
    io[2] = nbuf


_EMPTY_I64 = np.empty(0, dtype=np.int64)
_EMPTY_I64_2D = np.empty((1, 0), dtype=np.int64)


# ---------------------------------------------------------------------------
# Sampler state
# ---------------------------------------------------------------------------

@dataclass
class _ChainState:
    sweeps_target: int          # measurement sweeps assigned to this chain
    burn_in: int
    total_meas: int
    sweeps_done: int            # executed sweeps including burn-in
    rng: np.ndarray             # uint64[2]
    spins: np.ndarray           # uint8[n_sites]
    s_bond: int
    n_down: int
    nm_b: np.ndarray            # int64[blocks]
    s_b: np.ndarray             # int64[blocks]
    zh: np.ndarray              # int64[blocks, n+1]
    zs: np.ndarray              # int64[blocks, n+1]
    mag: np.ndarray             # int64[n_sites+1]
    kc: np.ndarray              # int64[kb, 2^n] (dense mode) or empty
    ks: np.ndarray
    skeys: np.ndarray = field(default_factory=lambda: _EMPTY_I64.copy())
    scnt: np.ndarray = field(default_factory=lambda: _EMPTY_I64.copy())
    sks: np.ndarray = field(default_factory=lambda: _EMPTY_I64.copy())

    @property
    def total_sweeps(self) -> int:
        return self.burn_in + self.sweeps_target

    @property
    def done(self) -> bool:
        return self.sweeps_done >= self.total_sweeps


@dataclass
class SamplerState:
    """Resumable sampler state: per-chain configurations, RNG, accumulators."""

    params: ThermoParams
    cfg: SamplerConfig
    algorithm: str
    cl: np.ndarray
    n: int
    key_mode: int               # 1 dense, 2 sparse-buffer
    kb: int                     # block count of the dense key tables (1 or blocks)
    chains: list[_ChainState]

    @property
    def done(self) -> bool:
        return all(c.done for c in self.chains)

    @property
    def sweeps_done(self) -> int:
        return sum(c.sweeps_done for c in self.chains)

    @property
    def total_sweeps(self) -> int:
        return sum(c.total_sweeps for c in self.chains)


def _chain_split(sweeps: int, chains: int) -> list[int]:
    base, extra = divmod(sweeps, chains)
    return [base + (1 if c < extra else 0) for c in range(chains)]


def _bond_sum(spins: np.ndarray, lattice) -> int:
    sigma = 1 - 2 * spins.astype(np.int64)
    return int(np.sum(sigma[lattice.bonds[:, 0]] * sigma[lattice.bonds[:, 1]]))


def init_state(params: ThermoParams, cfg: SamplerConfig) -> SamplerState:
    """Allocate chains, pick starts, and seed RNG streams. h must be 0."""
    if params.h != 0.0:
        raise ValueError("sampling requires h = 0 (integer bond-sum "
                         "accumulators and cluster updates assume it)")
    if params.cluster is None:
        raise ValueError("params.cluster must specify the probed cluster")
    algorithm = resolve_algorithm(cfg, params)
    lattice = build_lattice(params.L)
    cl = cluster_sites(params.cluster, params.L)
    n = cl.size
    n_sites = params.n_sites
    key_mode = 1 if n <= DENSE_KEY_LIMIT else 2
    kb = cfg.blocks if n <= BLOCK_KEY_LIMIT else 1
    cold = params.beta > params.beta_c
    states: list[_ChainState] = []
    for c, sw in enumerate(_chain_split(cfg.sweeps, cfg.chains)):
        rng = chain_rng_state(cfg.seed, c)
        spins = np.zeros(n_sites, dtype=np.uint8)
        if not cold:
            _init_hot(spins, rng)
        total_meas = 1 + (sw - 1) // cfg.thinning if sw > 0 else 0
        nzk = (1 << n) if key_mode == 1 else 0
        states.append(_ChainState(
            sweeps_target=sw,
            burn_in=cfg.burn_in if sw > 0 else 0,
            total_meas=total_meas,
            sweeps_done=0,
            rng=rng,
            spins=spins,
            s_bond=_bond_sum(spins, lattice),
            n_down=int(spins.sum()),
            nm_b=np.zeros(cfg.blocks, dtype=np.int64),
            s_b=np.zeros(cfg.blocks, dtype=np.int64),
            zh=np.zeros((cfg.blocks, n + 1), dtype=np.int64),
            zs=np.zeros((cfg.blocks, n + 1), dtype=np.int64),
            mag=np.zeros(n_sites + 1, dtype=np.int64),
            kc=np.zeros((kb, nzk), dtype=np.int64),
            ks=np.zeros((kb, nzk), dtype=np.int64),
        ))
    return SamplerState(params=params, cfg=cfg, algorithm=algorithm, cl=cl,
                        n=n, key_mode=key_mode, kb=kb, chains=states)


def _merge_sparse(chain: _ChainState, key_buf: np.ndarray, sbuf: np.ndarray,
                  nbuf: int) -> None:
    if nbuf == 0:
        return
    keys = np.concatenate([chain.skeys, key_buf[:nbuf]])
    cnts = np.concatenate([chain.scnt, np.ones(nbuf, dtype=np.int64)])
    sks = np.concatenate([chain.sks, sbuf[:nbuf]])
    uniq, inv = np.unique(keys, return_inverse=True)
    merged_c = np.zeros(uniq.size, dtype=np.int64)
    merged_s = np.zeros(uniq.size, dtype=np.int64)
    np.add.at(merged_c, inv, cnts)
    np.add.at(merged_s, inv, sks)
    chain.skeys, chain.scnt, chain.sks = uniq, merged_c, merged_s


def _advance_chain(state: SamplerState, chain: _ChainState, sweeps: int) -> None:
    params, cfg = state.params, state.cfg
    lattice = build_lattice(params.L)
    n_sites = params.n_sites
    stop = min(chain.sweeps_done + sweeps, chain.total_sweeps)
    if stop <= chain.sweeps_done:
        return
    io = np.empty(3, dtype=np.int64)
    bj = params.beta * params.J
    if state.algorithm == "metropolis":
        acc = np.array([math.exp(-2.0 * bj * s) for s in range(-4, 5)])
    else:
        padd = -math.expm1(-2.0 * bj)
        stack = np.empty(n_sites, dtype=np.int64)
        clust = np.empty(n_sites, dtype=np.int64)
        in_c = np.zeros(n_sites, dtype=np.bool_)
    mode = 1 if cfg.symmetrize else (2 if cfg.sector == "positive" else 0)
    start = chain.sweeps_done
    while start < stop:
        if state.key_mode == 2:
            seg_meas = _SPARSE_SEG_MEAS
            seg_sweeps = max(seg_meas // (2 if cfg.symmetrize else 1), 1) * cfg.thinning
            seg_stop = min(start + seg_sweeps, stop)
            cap = 2 * (1 + (seg_stop - start) // cfg.thinning + 1)
            key_buf = np.empty(cap, dtype=np.int64)
            sbuf = np.empty(cap, dtype=np.int64)
        else:
            seg_stop = stop
            key_buf = _EMPTY_I64
            sbuf = _EMPTY_I64
        io[0] = chain.s_bond
        io[1] = chain.n_down
        io[2] = 0
        if state.algorithm == "metropolis":
            _kern_metropolis(chain.spins, chain.rng, lattice.neighbors,
                             state.cl, acc, start, seg_stop, chain.burn_in,
                             cfg.thinning, max(chain.total_meas, 1),
                             cfg.blocks, mode, io, chain.nm_b,
                             chain.s_b, chain.zh, chain.zs, chain.mag,
                             state.key_mode, state.kb, chain.kc, chain.ks,
                             key_buf, sbuf)
        else:
            _kern_wolff(chain.spins, chain.rng, lattice.neighbors, state.cl,
                        padd, start, seg_stop, chain.burn_in, cfg.thinning,
                        max(chain.total_meas, 1), cfg.blocks, mode,
                        io, chain.nm_b, chain.s_b, chain.zh, chain.zs,
                        chain.mag, state.key_mode, state.kb, chain.kc,
                        chain.ks, key_buf, sbuf, stack, clust, in_c)
        chain.s_bond = int(io[0])
        chain.n_down = int(io[1])
        if state.key_mode == 2:
            _merge_sparse(chain, key_buf, sbuf, int(io[2]))
        start = seg_stop
        chain.sweeps_done = seg_stop


def advance(state: SamplerState, sweeps: int | None = None,
            workers: int = 1) -> SamplerState:
    """Run up to `sweeps` further sweeps on every chain (all remaining if None).

    Chains are independent; with workers > 1 they run on a thread pool (the
    kernels release the GIL) and accumulate into disjoint arrays, so the
    result is identical to the serial order.
    """
    todo = [c for c in state.chains if not c.done]
    budget = sweeps if sweeps is not None else max(
        (c.total_sweeps - c.sweeps_done for c in todo), default=0)
    if workers > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(lambda ch: _advance_chain(state, ch, budget), todo))
    else:
        for ch in todo:
            _advance_chain(state, ch, budget)
    return state


# ---------------------------------------------------------------------------
# Finalization: statistics and decoherence series
# ---------------------------------------------------------------------------

@dataclass
class SampleStats:
    """Sufficient statistics of one sampling run.

    The per-block integer tables are the raw accumulators: block_z_counts and
    block_z_bond_sum determine r(t) and its beta-derivative at any t (the
    phase e^{-i g t Z} depends on the cluster configuration only through the
    down-spin count k, Z = n - 2k), and block_meas/block_bond_sum give the
    energy trace. Blocks from all chains are concatenated in chain order.
    """

    samples_used: int
    mean_energy: float
    se_energy: float
    magnetization_hist: dict[int, int]
    cluster_marginal: ClusterMarginal
    block_meas: np.ndarray
    block_bond_sum: np.ndarray
    block_z_counts: np.ndarray
    block_z_bond_sum: np.ndarray
    block_key_counts: np.ndarray | None
    block_key_bond_sum: np.ndarray | None
    n: int
    n_sites: int
    J: float
    beta: float
    g: float
    algorithm: str
    config: SamplerConfig


def _jackknife_se(values: np.ndarray) -> np.ndarray:
    """Jackknife standard error over axis 0 of leave-one-out estimates."""
    b = values.shape[0]
    if b < 2:
        return np.zeros(values.shape[1:])
    mean = values.mean(axis=0)
    return np.sqrt((b - 1) / b * np.sum((values - mean) ** 2, axis=0))


def series_from_blocks(block_meas: np.ndarray, block_z_counts: np.ndarray,
                       block_z_bond_sum: np.ndarray, block_bond_sum: np.ndarray,
                       j_coupling: float, beta: float, g: float, n: int,
                       t_grid: np.ndarray | None = None,
                       source: str = "mc", n_points: int = 400,
                       flags: tuple[str, ...] = ()) -> DecoherenceSeries:
    """Build the decoherence series (with jackknife errors) from block tables.

    Exposed separately so error bars can be re-derived after re-blocking
    (e.g. the doubled-block-size plateau check).
    """
    keep = block_meas > 0
    # exactly symmetric integer tables (k <-> n-k, e.g. from symmetrize)
    # admit a pure-cosine evaluation, making Im r / Im dr exact zeros
    z_sym = (np.array_equal(block_z_counts, block_z_counts[:, ::-1])
             and np.array_equal(block_z_bond_sum, block_z_bond_sum[:, ::-1]))
    nm = block_meas[keep].astype(np.float64)
    zc = block_z_counts[keep].astype(np.float64)
    zs = block_z_bond_sum[keep].astype(np.float64)
    sb = block_bond_sum[keep].astype(np.float64)
    nblocks = nm.size
    if nblocks == 0:
        raise ValueError("no recorded measurements")
    tot_nm = nm.sum()
    tot_zc = zc.sum(axis=0)
    tot_zs = zs.sum(axis=0)
    tot_sb = sb.sum()
    z_vals = (n - 2 * np.arange(n + 1)).astype(np.float64)

    def phase_matrix(t: np.ndarray) -> np.ndarray:
        ph = np.exp(-1j * g * np.outer(t, z_vals))
        if z_sym:
            return ph.real.astype(np.complex128)
        return ph

    def r_dr(nm_s, zc_s, zs_s, sb_s, phases):
        p = zc_s / nm_s
        w = -j_coupling * zs_s / nm_s
        mean_e = -j_coupling * sb_s / nm_s
        r = phases @ p
        e_phase = phases @ w
        dr = -e_phase + mean_e * r
        return r, dr

    def evaluate(t: float) -> tuple[complex, complex]:
        phases = phase_matrix(np.array([t]))
        r, dr = r_dr(tot_nm, tot_zc, tot_zs, tot_sb, phases)
        return complex(r[0]), complex(dr[0])

    gflags: tuple[str, ...] = ()
    if t_grid is None:
        t_grid, _, gflags = default_time_grid(
            evaluate, t_cap=0.95 * math.pi / g, n_points=n_points)
    else:
        t_grid = np.asarray(t_grid, dtype=np.float64)
        if t_grid.size == 0:
            raise ValueError("t_grid must be nonempty")
    phases = phase_matrix(t_grid)  # (T, n+1)
    r, dr = r_dr(tot_nm, tot_zc, tot_zs, tot_sb, phases)
    if nblocks >= 2:
        loo_nm = tot_nm - nm
        loo_zc = tot_zc[None, :] - zc
        loo_zs = tot_zs[None, :] - zs
        loo_sb = tot_sb - sb
        p_i = loo_zc / loo_nm[:, None]
        w_i = -j_coupling * loo_zs / loo_nm[:, None]
        e_i = -j_coupling * loo_sb / loo_nm
        r_i = p_i @ phases.T          # (B, T)
        dr_i = -(w_i @ phases.T) + e_i[:, None] * r_i
        se_re_r = _jackknife_se(r_i.real)
        se_im_r = _jackknife_se(r_i.imag)
        se_re_dr = _jackknife_se(dr_i.real)
        se_im_dr = _jackknife_se(dr_i.imag)
    else:
        zero = np.zeros(t_grid.size)
        se_re_r = se_im_r = se_re_dr = se_im_dr = zero
    se_r = np.hypot(se_re_r, se_im_r)
    se_dr = np.hypot(se_re_dr, se_im_dr)
    return DecoherenceSeries(
        t_grid=t_grid, r=r, dr_dbeta=dr, se_r=se_r, se_dr=se_dr, beta=beta,
        source=source, evaluate=evaluate,
        se_components=(se_re_r, se_im_r, se_re_dr, se_im_dr),
        flags=gflags + flags)


def finalize(state: SamplerState, t_grid: np.ndarray | None = None,
             n_points: int = 400) -> tuple[SampleStats, DecoherenceSeries]:
    """Merge chains and produce (SampleStats, DecoherenceSeries)."""
    if not state.done:
        raise ValueError("sampling incomplete; advance() the state first")
    params, cfg = state.params, state.cfg
    n = state.n
    block_meas = np.concatenate([c.nm_b for c in state.chains])
    block_sb = np.concatenate([c.s_b for c in state.chains])
    block_z = np.vstack([c.zh for c in state.chains])
    block_zs = np.vstack([c.zs for c in state.chains])
    mag = sum(c.mag for c in state.chains)
    samples = int(block_meas.sum())
    mean_e = -params.J * float(block_sb.sum()) / samples
    keep = block_meas > 0
    if keep.sum() >= 2:
        loo_nm = block_meas[keep].astype(np.float64)
        loo_sb = block_sb[keep].astype(np.float64)
        e_i = -params.J * (loo_sb.sum() - loo_sb) / (loo_nm.sum() - loo_nm)
        se_e = float(_jackknife_se(e_i[:, None])[0])
    else:
        se_e = 0.0
    if state.key_mode == 1:
        kc_tot = sum(c.kc for c in state.chains).sum(axis=0)
        ks_tot = sum(c.ks for c in state.chains).sum(axis=0)
        keys = np.nonzero(kc_tot)[0].astype(np.int64)
        counts = kc_tot[keys]
        ksum = ks_tot[keys]
        if state.kb > 1:
            bkc = np.vstack([c.kc for c in state.chains])
            bks = np.vstack([c.ks for c in state.chains])
        else:
            bkc = bks = None
    else:
        all_keys = np.concatenate([c.skeys for c in state.chains])
        uniq, inv = np.unique(all_keys, return_inverse=True)
        counts = np.zeros(uniq.size, dtype=np.int64)
        ksum = np.zeros(uniq.size, dtype=np.int64)
        np.add.at(counts, inv, np.concatenate([c.scnt for c in state.chains]))
        np.add.at(ksum, inv, np.concatenate([c.sks for c in state.chains]))
        keys = uniq
        bkc = bks = None
    under = int(keys.size) > samples / 100  # silent here; local_fi() warns
    marginal = ClusterMarginal(
        n=n, keys=keys, probs=counts / samples,
        energy_weighted=-params.J * ksum / samples, under_sampled=under)
    mag_hist = {int(2 * idx - params.n_sites): int(v)
                for idx, v in enumerate(mag) if v > 0}
    stats = SampleStats(
        samples_used=samples, mean_energy=mean_e, se_energy=se_e,
        magnetization_hist=mag_hist, cluster_marginal=marginal,
        block_meas=block_meas, block_bond_sum=block_sb,
        block_z_counts=block_z, block_z_bond_sum=block_zs,
        block_key_counts=bkc, block_key_bond_sum=bks,
        n=n, n_sites=params.n_sites, J=params.J, beta=params.beta,
        g=params.g, algorithm=state.algorithm, config=cfg)
    flags = ("under_sampled",) if under else ()
    series = series_from_blocks(
        block_meas, block_z, block_zs, block_sb, params.J, params.beta,
        params.g, n, t_grid=t_grid, source=f"mc-{state.algorithm}",
        n_points=n_points, flags=flags)
    return stats, series


def run_sampler(params: ThermoParams, cfg: SamplerConfig,
                t_grid: np.ndarray | None = None,
                checkpoint: str | None = None, resume: bool = False,
                checkpoint_every: int | None = None, workers: int = 1,
                n_points: int = 400,
                _abort_after_segments: int | None = None,
                ) -> tuple[SampleStats, DecoherenceSeries]:
    """Sample the Gibbs state and estimate r(t), its beta-derivative, and errors.

    Deterministic given cfg.seed (bit-identical accumulators). checkpoint
    names a file updated every checkpoint_every sweeps (and at the end);
    resume=True continues from it if present, requiring identical params and
    config, and yields output bit-identical to an uninterrupted run.
    _abort_after_segments is a test hook: raise after that many checkpoint
    segments to simulate an interruption.
    """
    state: SamplerState | None = None
    if resume and checkpoint is not None and os.path.exists(checkpoint):
        state = load_checkpoint(checkpoint)
        _check_resume_match(state, params, cfg)
    if state is None:
        state = init_state(params, cfg)
    if t_grid is not None:
        t_grid = np.asarray(t_grid, dtype=np.float64)
        if t_grid.size == 0:
            raise ValueError("t_grid must be nonempty")
    segments_done = 0
    if checkpoint is not None and checkpoint_every is not None:
        while not state.done:
            advance(state, checkpoint_every, workers=workers)
            save_checkpoint(state, checkpoint)
            segments_done += 1
            if (_abort_after_segments is not None
                    and segments_done >= _abort_after_segments
                    and not state.done):
                raise InterruptedError(
                    f"aborted after {segments_done} checkpoint segments (test hook)")
    else:
        advance(state, workers=workers)
        if checkpoint is not None:
            save_checkpoint(state, checkpoint)
    return finalize(state, t_grid=t_grid, n_points=n_points)


def _check_resume_match(state: SamplerState, params: ThermoParams,
                        cfg: SamplerConfig) -> None:
    if state.params != params:
        raise CheckpointMismatchError(
            "checkpoint was written for different physical parameters: "
            f"{state.params} != {params}")
    if state.cfg != cfg:
        raise CheckpointMismatchError(
            "checkpoint was written for a different sampler config: "
            f"{state.cfg} != {cfg}")


# ---------------------------------------------------------------------------
# Local Fisher information of the sampled cluster marginal
# ---------------------------------------------------------------------------

def local_fi(stats: SampleStats, max_n: int = 13) -> float:
    """Classical FI of a perfect readout of the n cluster spins.

    Evaluated from the sampled marginal and its energy-weighted companion.
    Guarded to n <= max_n by default: beyond that the marginal is typically
    under-sampled and the plug-in estimator biased. Raise max_n explicitly
    to override. Warns when occupied keys exceed samples/100.
    """
    if stats.n > max_n:
        raise ValueError(f"cluster size {stats.n} exceeds max_n={max_n}; "
                         "pass a larger max_n to override")
    check_occupancy(int(stats.cluster_marginal.keys.size), stats.samples_used)
    return local_fi_from_marginal(stats.cluster_marginal,
                                  mean_energy=stats.mean_energy)


def local_fi_jackknife(stats: SampleStats, max_n: int = 13) -> tuple[float, float]:
    """(local FI, jackknife standard error) from the per-block marginal tables."""
    if stats.block_key_counts is None:
        raise ValueError("per-block marginal tables unavailable for this "
                         f"cluster size (kept only for n <= {BLOCK_KEY_LIMIT})")
    value = local_fi(stats, max_n=max_n)
    bkc = stats.block_key_counts.astype(np.float64)
    bks = stats.block_key_bond_sum.astype(np.float64)
    nm = stats.block_meas.astype(np.float64)
    keep = nm > 0
    bkc, bks, nm = bkc[keep], bks[keep], nm[keep]
    tot_c = bkc.sum(axis=0)
    tot_s = bks.sum(axis=0)
    tot_n = nm.sum()
    estimates = []
    for i in range(nm.size):
        c = tot_c - bkc[i]
        s = tot_s - bks[i]
        m = tot_n - nm[i]
        occ = c > 0
        p = c[occ] / m
        w = -stats.J * s[occ] / m
        mean_e = float(w.sum())
        estimates.append(max(float(np.sum(w * w / p)) - mean_e**2, 0.0))
    se = float(_jackknife_se(np.asarray(estimates)[:, None])[0])
    return value, se


def finite_difference_dr(params: ThermoParams, cfg: SamplerConfig,
                         t_grid: np.ndarray, delta_beta: float = 1e-3,
                         workers: int = 1) -> np.ndarray:
    """Two-point finite-difference estimate of d r/d beta.

    Runs the sampler at beta +- delta_beta with the same seed (common random
    numbers) and returns (r_plus - r_minus) / (2 delta_beta) on t_grid.
    Cross-check for the single-run covariance estimator.
    """
    t_grid = np.asarray(t_grid, dtype=np.float64)
    results = []
    for sign in (+1.0, -1.0):
        shifted = ThermoParams(
            J=params.J, beta=params.beta + sign * delta_beta, g=params.g,
            L=params.L, h=params.h, omega_p=params.omega_p,
            cluster=params.cluster)
        _, series = run_sampler(shifted, cfg, t_grid=t_grid, workers=workers)
        results.append(series.r)
    return (results[0] - results[1]) / (2.0 * delta_beta)


# ---------------------------------------------------------------------------
# Single-update public wrappers
# ---------------------------------------------------------------------------

def wolff_step(config: SpinConfig, params: ThermoParams,
               rng: np.ndarray) -> SpinConfig:
    """One Wolff cluster update. rng is a uint64[2] xorshift128+ state,
    advanced in place (see chain_rng_state). Requires h = 0."""
    if params.h != 0.0:
        raise ValueError("Wolff updates require h = 0")
    lattice = build_lattice(params.L)
    spins = config.bits.copy()
    n_sites = spins.size
    padd = -math.expm1(-2.0 * params.beta * params.J)
    stack = np.empty(n_sites, dtype=np.int64)
    clust = np.empty(n_sites, dtype=np.int64)
    in_c = np.zeros(n_sites, dtype=np.bool_)
    _wolff_flip(spins, rng, lattice.neighbors, padd, stack, clust, in_c)
    return SpinConfig(bits=spins)


def metropolis_sweep(config: SpinConfig, params: ThermoParams,
                     rng: np.ndarray) -> SpinConfig:
    """One Metropolis sweep (n_sites attempted flips) at h = 0.

    rng is a uint64[2] xorshift128+ state, advanced in place.
    """
    if params.h != 0.0:
        raise ValueError("the integer-accumulator sweep kernel assumes h = 0")
    lattice = build_lattice(params.L)
    spins = config.bits.copy()
    bj = params.beta * params.J
    acc = np.array([math.exp(-2.0 * bj * s) for s in range(-4, 5)])
    io = np.array([0, int(spins.sum()), 0], dtype=np.int64)
    # burn-in of 2 > stop sweep 1, so the kernel never records; the
    # accumulator arguments below are unused placeholders
    blk = np.zeros(1, dtype=np.int64)
    tbl = np.zeros((1, 2), dtype=np.int64)
    cl = np.zeros(1, dtype=np.int64)
    _kern_metropolis(spins, rng, lattice.neighbors, cl, acc,
                     0, 1, 2, 1, 1, 1, False, io, blk, blk, tbl, tbl,
                     np.zeros(spins.size + 1, dtype=np.int64),
                     1, 1, tbl, tbl, _EMPTY_I64, _EMPTY_I64)
    return SpinConfig(bits=spins)


# ---------------------------------------------------------------------------
# Checkpoint: versioned little-endian blob
# ---------------------------------------------------------------------------
#
# Layout (all little-endian, fixed order):
#   magic "PTCK" | u32 version
#   params: f64 J, beta, g, h, omega_p | u32 L | u8 has_cluster
#           [i32 row, i32 col, f64 radius]           (if has_cluster)
#   config: u8 algorithm_code (0 metropolis / 1 wolff / 2 auto)
#           u8 resolved_code (0/1) | u64 sweeps, burn_in, thinning, seed
#           u8 symmetrize | u8 sector_code (0 full / 1 positive)
#           u32 chains, blocks
#   derived: u32 n (cluster size) | u8 key_mode | u32 kb
#   per chain (chains times):
#     u64 sweeps_target, burn_in, total_meas, sweeps_done
#     u64 rng_s0, rng_s1 | i64 s_bond, n_down
#     u8[n_sites] spins (one byte per site)
#     i64[blocks] nm_b | i64[blocks] s_b
#     i64[blocks*(n+1)] zh | i64[blocks*(n+1)] zs | i64[n_sites+1] mag
#     dense mode: i64[kb * 2^n] kc | i64[kb * 2^n] ks
#     sparse mode: u64 n_keys | i64[n_keys] keys, counts, bond_sums

def _arr_bytes(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<i8").tobytes()


def save_checkpoint(state: SamplerState, path: str) -> None:
    """Write the full sampler state; atomic via a temp file + rename."""
    p, cfg = state.params, state.cfg
    out = [_CKPT_MAGIC, struct.pack("<I", _CKPT_VERSION)]
    out.append(struct.pack("<5dI", p.J, p.beta, p.g, p.h, p.omega_p, p.L))
    if p.cluster is not None:
        out.append(struct.pack("<B2id", 1, p.cluster.center[0],
                               p.cluster.center[1], p.cluster.radius))
    else:
        out.append(struct.pack("<B", 0))
    out.append(struct.pack("<BB4QBBII", _ALG_CODES[cfg.algorithm],
                           _ALG_CODES[state.algorithm], cfg.sweeps,
                           cfg.burn_in, cfg.thinning, cfg.seed,
                           cfg.symmetrize, _SECTOR_CODES[cfg.sector],
                           cfg.chains, cfg.blocks))
    out.append(struct.pack("<IBI", state.n, state.key_mode, state.kb))
    for c in state.chains:
        out.append(struct.pack("<4Q", c.sweeps_target, c.burn_in,
                               c.total_meas, c.sweeps_done))
        out.append(struct.pack("<2Q", int(c.rng[0]), int(c.rng[1])))
        out.append(struct.pack("<2q", c.s_bond, c.n_down))
        out.append(c.spins.astype(np.uint8).tobytes())
        out.append(_arr_bytes(c.nm_b))
        out.append(_arr_bytes(c.s_b))
        out.append(_arr_bytes(c.zh))
        out.append(_arr_bytes(c.zs))
        out.append(_arr_bytes(c.mag))
        if state.key_mode == 1:
            out.append(_arr_bytes(c.kc))
            out.append(_arr_bytes(c.ks))
        else:
            out.append(struct.pack("<Q", c.skeys.size))
            out.append(_arr_bytes(c.skeys))
            out.append(_arr_bytes(c.scnt))
            out.append(_arr_bytes(c.sks))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(out))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        vals = struct.unpack_from("<" + fmt, self.data, self.pos)
        self.pos += struct.calcsize("<" + fmt)
        return vals

    def array(self, count: int, dtype="<i8") -> np.ndarray:
        nbytes = count * np.dtype(dtype).itemsize
        a = np.frombuffer(self.data[self.pos:self.pos + nbytes], dtype=dtype)
        self.pos += nbytes
        return a.astype(np.int64) if dtype == "<i8" else a.copy()


def load_checkpoint(path: str) -> SamplerState:
    """Reconstruct a SamplerState written by save_checkpoint."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _CKPT_MAGIC:
        raise ValueError(f"{path} is not a sampler checkpoint")
    rd = _Reader(data)
    rd.pos = 4
    (version,) = rd.take("I")
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    j, beta, g, h, omega_p, big_l = rd.take("5dI")
    (has_cluster,) = rd.take("B")
    cluster = None
    if has_cluster:
        row, col, radius = rd.take("2id")
        cluster = ClusterSpec(center=(row, col), radius=radius)
    params = ThermoParams(J=j, beta=beta, g=g, L=big_l, h=h,
                          omega_p=omega_p, cluster=cluster)
    (alg_code, resolved, sweeps, burn, thin, seed, sym, sector_code, chains,
     blocks) = rd.take("BB4QBBII")
    cfg = SamplerConfig(algorithm=_ALG_NAMES[alg_code], sweeps=sweeps,
                        burn_in=burn, thinning=thin, seed=seed,
                        symmetrize=bool(sym), sector=_SECTOR_NAMES[sector_code],
                        chains=chains, blocks=blocks)
    n, key_mode, kb = rd.take("IBI")
    n_sites = params.n_sites
    nzk = (1 << n) if key_mode == 1 else 0
    chain_states = []
    for _ in range(chains):
        target, c_burn, total_meas, done = rd.take("4Q")
        s0, s1 = rd.take("2Q")
        s_bond, n_down = rd.take("2q")
        rng = np.array([s0, s1], dtype=np.uint64)
        spins = rd.array(n_sites, dtype="u1").astype(np.uint8)
        nm_b = rd.array(blocks)
        s_b = rd.array(blocks)
        zh = rd.array(blocks * (n + 1)).reshape(blocks, n + 1)
        zs = rd.array(blocks * (n + 1)).reshape(blocks, n + 1)
        mag = rd.array(n_sites + 1)
        cs = _ChainState(sweeps_target=target, burn_in=c_burn,
                         total_meas=total_meas, sweeps_done=done, rng=rng,
                         spins=spins, s_bond=s_bond, n_down=n_down, nm_b=nm_b,
                         s_b=s_b, zh=zh, zs=zs, mag=mag,
                         kc=np.zeros((kb, nzk), dtype=np.int64),
                         ks=np.zeros((kb, nzk), dtype=np.int64))
        if key_mode == 1:
            cs.kc = rd.array(kb * nzk).reshape(kb, nzk)
            cs.ks = rd.array(kb * nzk).reshape(kb, nzk)
        else:
            (nk,) = rd.take("Q")
            cs.skeys = rd.array(nk)
            cs.scnt = rd.array(nk)
            cs.sks = rd.array(nk)
        chain_states.append(cs)
    state = SamplerState(params=params, cfg=cfg,
                         algorithm=_ALG_NAMES[resolved],
                         cl=cluster_sites(params.cluster, params.L),
                         n=n, key_mode=key_mode, kb=kb, chains=chain_states)
    return state
