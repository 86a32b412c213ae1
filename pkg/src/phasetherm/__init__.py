"""Dephasing-probe thermometry of 2D Ising lattices."""

from .lattice import (
    BondCounts,
    ClusterSpec,
    Lattice,
    SpinConfig,
    ThermoParams,
    adjacency_matrix,
    bond_counts,
    build_lattice,
    cluster_magnetization,
    cluster_sites,
    cluster_size,
    delta_energy,
    energy,
    onsager_beta_c,
)
from .marginal import ClusterMarginal, UnderSampledMarginal, local_fi_from_marginal
from .probe import (
    DecoherenceSeries,
    ProbeState,
    QfiCurve,
    evolve_probe,
    fid,
    optimize_qfi,
    qfi_from_r,
    qfi_sld_oracle,
    reparametrize,
)
from .exact import (
    ExactGibbs,
    enumerate_gibbs,
    exact_cluster_marginal,
    exact_decoherence,
    exact_local_fi,
)
from .analytic import (
    CwSolution,
    ExpansionDomainError,
    MftSolution,
    S_PEAK,
    S_PEAK_ARG,
    cw_exact_finite_n,
    cw_local_fi,
    cw_qfi,
    cw_qfi_ferro_limit,
    cw_qfi_para,
    cw_qfi_para_opt,
    cw_saddle_decoherence,
    cw_saddle_point,
    hte_decoherence,
    hte_qfi,
    mft_decoherence,
    mft_qfi,
    mft_solve,
    s_function,
)
from .montecarlo import (
    CheckpointMismatchError,
    DESK_SWEEPS,
    PRODUCTION_SWEEPS,
    SampleStats,
    SamplerConfig,
    advance,
    chain_rng_state,
    finalize,
    finite_difference_dr,
    init_state,
    load_checkpoint,
    local_fi,
    local_fi_jackknife,
    metropolis_sweep,
    resolve_algorithm,
    run_sampler,
    save_checkpoint,
    series_from_blocks,
    wolff_step,
)

__version__ = "0.1.0"

__all__ = [
    "BondCounts",
    "CheckpointMismatchError",
    "CwSolution",
    "DESK_SWEEPS",
    "ExpansionDomainError",
    "MftSolution",
    "PRODUCTION_SWEEPS",
    "S_PEAK",
    "S_PEAK_ARG",
    "ClusterMarginal",
    "ClusterSpec",
    "DecoherenceSeries",
    "ExactGibbs",
    "Lattice",
    "ProbeState",
    "QfiCurve",
    "SampleStats",
    "SamplerConfig",
    "SpinConfig",
    "ThermoParams",
    "UnderSampledMarginal",
    "adjacency_matrix",
    "advance",
    "bond_counts",
    "build_lattice",
    "chain_rng_state",
    "cluster_magnetization",
    "cluster_sites",
    "cluster_size",
    "cw_exact_finite_n",
    "cw_local_fi",
    "cw_qfi",
    "cw_qfi_ferro_limit",
    "cw_qfi_para",
    "cw_qfi_para_opt",
    "cw_saddle_decoherence",
    "cw_saddle_point",
    "delta_energy",
    "energy",
    "enumerate_gibbs",
    "evolve_probe",
    "exact_cluster_marginal",
    "exact_decoherence",
    "exact_local_fi",
    "fid",
    "finalize",
    "finite_difference_dr",
    "hte_decoherence",
    "hte_qfi",
    "init_state",
    "load_checkpoint",
    "local_fi",
    "local_fi_from_marginal",
    "local_fi_jackknife",
    "metropolis_sweep",
    "mft_decoherence",
    "mft_qfi",
    "mft_solve",
    "onsager_beta_c",
    "optimize_qfi",
    "qfi_from_r",
    "qfi_sld_oracle",
    "reparametrize",
    "resolve_algorithm",
    "run_sampler",
    "s_function",
    "save_checkpoint",
    "series_from_blocks",
    "wolff_step",
    "__version__",
]
