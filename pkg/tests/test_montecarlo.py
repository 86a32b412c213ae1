"""Sampler correctness: enumerated oracles, determinism, checkpoints, marginals.

Statistical comparisons use fixed seeds and assert agreement within 4 jackknife
standard errors (with a 1e-10 floor against exact-zero error estimates); the
seeds were chosen once, not tuned, and the same protocols land below 2.8 sigma.
"""

import math
import warnings

import numpy as np
import pytest

from phasetherm import exact, montecarlo as mc
from phasetherm.lattice import ClusterSpec, SpinConfig, ThermoParams
from phasetherm.marginal import UnderSampledMarginal
from phasetherm.probe import optimize_qfi

J = 0.25
G = 0.1
SE_FLOOR = 1e-10


def params(beta, radius=1.0, L=4, **kw):
    return ThermoParams(J=J, beta=beta, g=G, L=L,
                        cluster=ClusterSpec(center=(0, 0), radius=radius), **kw)


def t_grid(n_points=24):
    return np.linspace(0.0, 0.9 * np.pi / G, n_points)


def assert_within_sigma(actual, expected, se, n_sigma=4.0):
    dev = np.abs(np.asarray(actual) - np.asarray(expected))
    np.testing.assert_array_less(dev, n_sigma * np.maximum(se, SE_FLOOR))


# ---------------------------------------------------------------------------
# Configuration and algorithm resolution
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("kwargs,match", [
    (dict(algorithm="glauber"), "unknown algorithm"),
    (dict(sector="negative"), "unknown sector"),
    (dict(symmetrize=True, sector="positive"), "exclusive"),
    (dict(sweeps=0), "sweeps must be positive"),
    (dict(thinning=0), "thinning"),
    (dict(burn_in=-1), "burn_in must be nonnegative"),
    (dict(sweeps=100, burn_in=100), "smaller than sweeps"),
    (dict(seed=-1), "64 bits"),
    (dict(seed=2**64), "64 bits"),
    (dict(chains=0), "chains"),
    (dict(sweeps=10, chains=11), "more chains than sweeps"),
    (dict(blocks=1), "blocks"),
])
def test_sampler_config_rejects_bad_values(kwargs, match):
    with pytest.raises(ValueError, match=match):
        mc.SamplerConfig(**kwargs)


def test_sampler_config_burn_in_defaults_to_tenth():
    assert mc.SamplerConfig(sweeps=1000).burn_in == 100
    assert mc.SamplerConfig(sweeps=1000, burn_in=5).burn_in == 5


def test_resolve_algorithm_window():
    p = params(1.0)
    assert mc.resolve_algorithm(mc.SamplerConfig(algorithm="metropolis"), p) \
        == "metropolis"
    assert mc.resolve_algorithm(mc.SamplerConfig(algorithm="wolff"), p) == "wolff"
    auto = mc.SamplerConfig(algorithm="auto")
    bc = p.beta_c
    for factor, expect in [(1.0, "wolff"), (1.15, "wolff"), (0.85, "wolff"),
                           (1.25, "metropolis"), (0.5, "metropolis")]:
        got = mc.resolve_algorithm(auto, params(factor * bc))
        assert got == expect, (factor, got)


def test_init_state_requires_zero_field_and_cluster():
    cfg = mc.SamplerConfig(sweeps=100)
    with pytest.raises(ValueError, match="h = 0"):
        mc.init_state(params(1.0, h=0.1), cfg)
    with pytest.raises(ValueError, match="cluster"):
        mc.init_state(ThermoParams(J=J, beta=1.0, g=G, L=4), cfg)


def test_chain_rng_streams_are_distinct():
    states = [mc.chain_rng_state(12345, c) for c in range(4)]
    for s in states:
        assert s.dtype == np.uint64 and s.shape == (2,)
        assert s[0] != 0 or s[1] != 0
    as_tuples = {tuple(int(x) for x in s) for s in states}
    assert len(as_tuples) == 4
    other_seed = mc.chain_rng_state(12346, 0)
    assert tuple(other_seed) != tuple(states[0])


# ---------------------------------------------------------------------------
# Determinism and scheduling independence
# ---------------------------------------------------------------------------

def run(p, cfg, **kw):
    return mc.run_sampler(p, cfg, t_grid=t_grid(), **kw)


def test_same_seed_reproduces_bit_identical_results():
    p = params(0.3 / J)
    cfg = mc.SamplerConfig(algorithm="metropolis", sweeps=20_000, seed=7)
    stats_a, series_a = run(p, cfg)
    stats_b, series_b = run(p, cfg)
    assert np.array_equal(series_a.r, series_b.r)
    assert np.array_equal(series_a.dr_dbeta, series_b.dr_dbeta)
    assert np.array_equal(stats_a.block_z_counts, stats_b.block_z_counts)
    assert stats_a.mean_energy == stats_b.mean_energy
    assert stats_a.magnetization_hist == stats_b.magnetization_hist


def test_threaded_chains_match_serial_order():
    p = params(0.3 / J)
    cfg = mc.SamplerConfig(algorithm="metropolis", sweeps=20_000, seed=11,
                           chains=4)
    stats_1, series_1 = run(p, cfg, workers=1)
    stats_3, series_3 = run(p, cfg, workers=3)
    assert np.array_equal(series_1.r, series_3.r)
    assert np.array_equal(series_1.dr_dbeta, series_3.dr_dbeta)
    assert np.array_equal(stats_1.block_meas, stats_3.block_meas)
    assert np.array_equal(stats_1.block_z_bond_sum, stats_3.block_z_bond_sum)


def test_advance_in_segments_matches_single_shot():
    p = params(0.44 / J)
    cfg = mc.SamplerConfig(algorithm="wolff", sweeps=9_000, seed=3)
    whole = mc.advance(mc.init_state(p, cfg))
    pieces = mc.init_state(p, cfg)
    while not pieces.done:
        mc.advance(pieces, 1_700)
    _, series_w = mc.finalize(whole, t_grid=t_grid())
    _, series_p = mc.finalize(pieces, t_grid=t_grid())
    assert np.array_equal(series_w.r, series_p.r)
    assert np.array_equal(series_w.dr_dbeta, series_p.dr_dbeta)


def test_finalize_requires_completed_state():
    state = mc.init_state(params(0.3 / J), mc.SamplerConfig(sweeps=1000))
    with pytest.raises(ValueError, match="incomplete"):
        mc.finalize(state)


def test_sample_accounting_with_thinning_chains_and_symmetrize():
    p = params(0.3 / J)
    cfg = mc.SamplerConfig(algorithm="metropolis", sweeps=1000, thinning=7,
                           seed=5, symmetrize=True)
    stats, _ = run(p, cfg)
    assert stats.samples_used == 2 * (1 + 999 // 7)
    cfg = mc.SamplerConfig(algorithm="metropolis", sweeps=1000, thinning=7,
                           seed=5, chains=3)
    stats, _ = run(p, cfg)
    assert stats.samples_used == sum(1 + (sw - 1) // 7 for sw in (334, 333, 333))


# ---------------------------------------------------------------------------
# Agreement with exhaustive enumeration (L = 4, 2^16 configurations)
# ---------------------------------------------------------------------------

def check_against_enumeration(p, cfg, sector="full"):
    stats, series = run(p, cfg)
    oracle = exact.exact_decoherence(p, t_grid=series.t_grid, sector=sector)
    assert_within_sigma(series.r.real, oracle.r.real, series.se_r)
    assert_within_sigma(series.r.imag, oracle.r.imag, series.se_r)
    assert_within_sigma(series.dr_dbeta.real, oracle.dr_dbeta.real, series.se_dr)
    assert_within_sigma(series.dr_dbeta.imag, oracle.dr_dbeta.imag, series.se_dr)
    gibbs = exact.enumerate_gibbs(p)
    assert_within_sigma(stats.mean_energy, gibbs.mean_energy, stats.se_energy)
    fi, fi_se = mc.local_fi_jackknife(stats)
    assert_within_sigma(fi, exact.exact_local_fi(p, sector=sector), fi_se)
    marg = exact.exact_cluster_marginal(p, sector=sector)
    sampled = dict(zip(stats.cluster_marginal.keys.tolist(),
                       stats.cluster_marginal.probs.tolist()))
    for key, prob in zip(marg.keys.tolist(), marg.probs.tolist()):
        assert abs(sampled.get(key, 0.0) - prob) < 5e-3
    return stats, series


@pytest.mark.parametrize("beta_j,seed", [(0.0, 42), (0.3, 43), (0.6, 44)])
def test_metropolis_matches_enumeration(beta_j, seed):
    cfg = mc.SamplerConfig(algorithm="metropolis", sweeps=150_000, seed=seed,
                           symmetrize=True)
    check_against_enumeration(params(beta_j / J), cfg)


def test_wolff_matches_enumeration_near_critical_coupling():
    cfg = mc.SamplerConfig(algorithm="wolff", sweeps=150_000, seed=45,
                           symmetrize=True)
    stats, _ = check_against_enumeration(params(0.44 / J), cfg)
    assert stats.algorithm == "wolff"


@pytest.mark.parametrize("radius,beta_j,algorithm,seed", [
    (0.0, 0.6, "metropolis", 77),
    (1.0, 0.6, "metropolis", 78),
    (1.0, 0.44, "wolff", 79),
])
def test_positive_sector_matches_projected_enumeration(radius, beta_j,
                                                       algorithm, seed):
    cfg = mc.SamplerConfig(algorithm=algorithm, sweeps=150_000, seed=seed,
                           sector="positive")
    p = params(beta_j / J, radius=radius)
    stats, _ = check_against_enumeration(p, cfg, sector="positive")
    # every recorded sample sits in the nonnegative-magnetization sector
    assert all(m >= 0 for m in stats.magnetization_hist)


# ---------------------------------------------------------------------------
# Exact consequences of flip symmetrization
# ---------------------------------------------------------------------------

def test_symmetrize_zeroes_imaginary_parts_exactly():
    cfg = mc.SamplerConfig(algorithm="metropolis", sweeps=30_000, seed=9,
                           symmetrize=True)
    stats, series = run(params(0.6 / J), cfg)
    assert np.all(series.r.imag == 0.0)
    assert np.all(series.dr_dbeta.imag == 0.0)
    se_re_r, se_im_r, se_re_dr, se_im_dr = series.se_components
    assert np.all(se_im_r == 0.0) and np.all(se_im_dr == 0.0)
    # the magnetization histogram is mirror-exact, and Z-tables flip-symmetric
    for m, count in stats.magnetization_hist.items():
        assert stats.magnetization_hist[-m] == count
    assert np.array_equal(stats.block_z_counts, stats.block_z_counts[:, ::-1])


def test_single_spin_symmetrized_signal_vanishes_identically():
    cfg = mc.SamplerConfig(algorithm="metropolis", sweeps=20_000, seed=13,
                           symmetrize=True)
    _, series = run(params(0.9 / J, radius=0.0), cfg)
    np.testing.assert_allclose(series.r.real, np.cos(G * series.t_grid),
                               rtol=0, atol=1e-15)
    assert np.all(series.dr_dbeta == 0.0)
    with pytest.warns(UserWarning, match="boundary"):
        curve = optimize_qfi(series)  # flat curve: argmax degenerates to an edge
    assert curve.boundary_warning
    assert curve.qfi_opt == 0.0
    assert curve.qfi_opt_se == 0.0


# ---------------------------------------------------------------------------
# Derivative cross-check: two-point finite difference with shared seeds
# ---------------------------------------------------------------------------

def test_finite_difference_matches_its_exact_counterpart():
    p = params(0.44 / J)
    grid = t_grid(9)
    delta = 0.05
    cfg = mc.SamplerConfig(algorithm="wolff", sweeps=60_000, seed=99,
                           symmetrize=True)
    fd = mc.finite_difference_dr(p, cfg, grid, delta_beta=delta)
    shifted = [exact.exact_decoherence(
        ThermoParams(J=J, beta=p.beta + s * delta, g=G, L=4, cluster=p.cluster),
        t_grid=grid) for s in (+1, -1)]
    oracle = (shifted[0].r - shifted[1].r) / (2 * delta)
    # sampling noise at this sweep count measures ~0.03; bound with headroom
    assert np.abs(fd - oracle).max() < 0.10
    # the secant itself tracks the true derivative (truncation subdominant)
    true_dr = exact.exact_decoherence(p, t_grid=grid).dr_dbeta
    assert np.abs(oracle - true_dr).max() < 0.01


# ---------------------------------------------------------------------------
# Error bars: jackknife plateau under re-blocking
# ---------------------------------------------------------------------------

def test_jackknife_errors_stable_under_block_merging():
    cfg = mc.SamplerConfig(algorithm="wolff", sweeps=150_000, seed=45,
                           symmetrize=True)
    stats, series = run(params(0.44 / J), cfg)
    bz = stats.block_z_counts
    merged = mc.series_from_blocks(
        stats.block_meas.reshape(-1, 2).sum(axis=1),
        bz.reshape(-1, 2, bz.shape[1]).sum(axis=1),
        stats.block_z_bond_sum.reshape(-1, 2, bz.shape[1]).sum(axis=1),
        stats.block_bond_sum.reshape(-1, 2).sum(axis=1),
        stats.J, stats.beta, stats.g, stats.n, t_grid=series.t_grid)
    # identical point estimates, error bars on a plateau (no hidden
    # autocorrelation at twice the block length)
    assert np.array_equal(merged.r, series.r)
    mid = slice(6, 20)
    for coarse, fine in ((merged.se_r[mid], series.se_r[mid]),
                         (merged.se_dr[mid], series.se_dr[mid])):
        ratio = coarse / np.maximum(fine, SE_FLOOR)
        assert np.all(ratio > 0.5) and np.all(ratio < 2.0)


# ---------------------------------------------------------------------------
# Checkpoint format and resume semantics
# ---------------------------------------------------------------------------

def assert_states_equal(a, b):
    assert a.params == b.params
    assert a.cfg == b.cfg
    assert a.algorithm == b.algorithm
    assert (a.n, a.key_mode, a.kb) == (b.n, b.key_mode, b.kb)
    assert np.array_equal(a.cl, b.cl)
    assert len(a.chains) == len(b.chains)
    for ca, cb in zip(a.chains, b.chains):
        assert (ca.sweeps_target, ca.burn_in, ca.total_meas, ca.sweeps_done) \
            == (cb.sweeps_target, cb.burn_in, cb.total_meas, cb.sweeps_done)
        assert (ca.s_bond, ca.n_down) == (cb.s_bond, cb.n_down)
        for name in ("rng", "spins", "nm_b", "s_b", "zh", "zs", "mag",
                     "kc", "ks", "skeys", "scnt", "sks"):
            assert np.array_equal(getattr(ca, name), getattr(cb, name)), name


def test_checkpoint_roundtrip_preserves_full_state(tmp_path):
    p = params(0.44 / J)
    cfg = mc.SamplerConfig(algorithm="wolff", sweeps=8_000, seed=21, chains=2,
                           sector="positive")
    state = mc.init_state(p, cfg)
    mc.advance(state, 3_000)
    assert not state.done
    path = str(tmp_path / "mid.ckpt")
    mc.save_checkpoint(state, path)
    loaded = mc.load_checkpoint(path)
    assert_states_equal(state, loaded)
    # both finish to identical results
    _, series_a = mc.finalize(mc.advance(state), t_grid=t_grid())
    _, series_b = mc.finalize(mc.advance(loaded), t_grid=t_grid())
    assert np.array_equal(series_a.r, series_b.r)
    assert np.array_equal(series_a.dr_dbeta, series_b.dr_dbeta)


def test_checkpoint_roundtrip_sparse_tables(tmp_path):
    p = params(0.3 / J, radius=math.sqrt(5.0), L=12)
    cfg = mc.SamplerConfig(algorithm="metropolis", sweeps=2_000, seed=23)
    state = mc.init_state(p, cfg)
    assert state.key_mode == 2
    mc.advance(state, 900)
    path = str(tmp_path / "sparse.ckpt")
    mc.save_checkpoint(state, path)
    assert_states_equal(state, mc.load_checkpoint(path))


def test_interrupted_run_resumes_bit_identical(tmp_path):
    p = params(0.44 / J)
    cfg = mc.SamplerConfig(algorithm="wolff", sweeps=40_000, seed=31)
    stats_ref, series_ref = run(p, cfg)
    path = str(tmp_path / "run.ckpt")
    with pytest.raises(InterruptedError):
        mc.run_sampler(p, cfg, t_grid=t_grid(), checkpoint=path,
                       checkpoint_every=9_000, _abort_after_segments=2)
    stats_res, series_res = mc.run_sampler(
        p, cfg, t_grid=t_grid(), checkpoint=path, resume=True,
        checkpoint_every=9_000)
    assert np.array_equal(series_res.r, series_ref.r)
    assert np.array_equal(series_res.dr_dbeta, series_ref.dr_dbeta)
    assert stats_res.samples_used == stats_ref.samples_used
    assert np.array_equal(stats_res.cluster_marginal.keys,
                          stats_ref.cluster_marginal.keys)
    assert np.array_equal(stats_res.cluster_marginal.probs,
                          stats_ref.cluster_marginal.probs)


def test_resume_rejects_mismatched_parameters(tmp_path):
    p = params(0.44 / J)
    cfg = mc.SamplerConfig(algorithm="wolff", sweeps=5_000, seed=31)
    path = str(tmp_path / "a.ckpt")
    mc.run_sampler(p, cfg, checkpoint=path)
    with pytest.raises(mc.CheckpointMismatchError, match="parameters"):
        mc.run_sampler(params(0.6 / J), cfg, checkpoint=path, resume=True)
    other = mc.SamplerConfig(algorithm="wolff", sweeps=5_000, seed=32)
    with pytest.raises(mc.CheckpointMismatchError, match="config"):
        mc.run_sampler(p, other, checkpoint=path, resume=True)


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "bogus.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(ValueError, match="not a sampler checkpoint"):
        mc.load_checkpoint(str(path))


# ---------------------------------------------------------------------------
# Marginal tables: dense/blocked/sparse regimes and occupancy guards
# ---------------------------------------------------------------------------

def test_magnetization_histogram_accounting():
    cfg = mc.SamplerConfig(algorithm="metropolis", sweeps=10_000, seed=17)
    stats, _ = run(params(0.3 / J), cfg)
    hist = stats.magnetization_hist
    assert sum(hist.values()) == stats.samples_used
    assert all(m % 2 == 0 and -16 <= m <= 16 for m in hist)


def test_large_cluster_uses_sparse_tables_and_guards_local_fi():
    p = params(0.3 / J, radius=math.sqrt(5.0), L=12)
    cfg = mc.SamplerConfig(algorithm="metropolis", sweeps=4_000, seed=8)
    stats, _ = run(p, cfg)
    assert stats.n == 21
    assert stats.block_key_counts is None
    marginal = stats.cluster_marginal
    assert marginal.probs.sum() == pytest.approx(1.0, abs=1e-12)
    assert marginal.keys.min() >= 0 and marginal.keys.max() < 2 ** 21
    assert np.all(np.diff(marginal.keys) > 0)
    with pytest.raises(ValueError, match="exceeds max_n"):
        mc.local_fi(stats)
    with pytest.raises(ValueError, match="unavailable"):
        mc.local_fi_jackknife(stats, max_n=21)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UnderSampledMarginal)
        assert mc.local_fi(stats, max_n=21) >= 0.0


def test_thin_marginal_is_flagged_and_warns():
    p = params(0.3 / J, radius=2.0, L=6)
    cfg = mc.SamplerConfig(algorithm="metropolis", sweeps=3_000, seed=7)
    stats, series = run(p, cfg)
    assert stats.cluster_marginal.under_sampled
    assert "under_sampled" in series.flags
    with pytest.warns(UnderSampledMarginal):
        mc.local_fi(stats)


def test_well_sampled_marginal_is_not_flagged():
    cfg = mc.SamplerConfig(algorithm="metropolis", sweeps=20_000, seed=19)
    stats, series = run(params(0.3 / J), cfg)
    assert not stats.cluster_marginal.under_sampled
    assert "under_sampled" not in series.flags


# ---------------------------------------------------------------------------
# Single-update public wrappers
# ---------------------------------------------------------------------------

def test_single_update_wrappers_are_deterministic_and_pure():
    p = params(0.44 / J)
    start = SpinConfig(bits=np.zeros(16, dtype=np.uint8))
    for step in (mc.metropolis_sweep, mc.wolff_step):
        rng_a = mc.chain_rng_state(1234, 0)
        rng_b = rng_a.copy()
        out_a = step(start, p, rng_a)
        out_b = step(start, p, rng_b)
        assert np.array_equal(out_a.bits, out_b.bits)
        assert out_a.bits.dtype == np.uint8 and out_a.bits.shape == (16,)
        assert np.all(start.bits == 0), "input configuration must not mutate"
        assert tuple(rng_a) != tuple(mc.chain_rng_state(1234, 0)), \
            "rng state must advance in place"
        with pytest.raises(ValueError, match="h = 0"):
            step(start, params(0.44 / J, h=0.2), mc.chain_rng_state(1, 0))


def test_wolff_step_flips_whole_domain_at_strong_coupling():
    p = params(40.0)  # deep in the ordered phase: p_add ~ 1
    start = SpinConfig(bits=np.zeros(16, dtype=np.uint8))
    flipped = mc.wolff_step(start, p, mc.chain_rng_state(5, 0))
    assert np.all(flipped.bits == 1)
