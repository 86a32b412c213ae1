"""Command-line scans over (beta, cluster) grids with deterministic outputs.

Four subcommands, one declarative config:

* ``qfi-scan``     rows (beta/beta_c, n, t_opt, beta^2 F_opt, stderr)
* ``local-fi-scan`` rows (beta/beta_c, n, F_lc, stderr, qfi_ratio)
* ``scaling``      rows (beta/beta_c, n, F_opt, stderr) plus a log-log slope per beta
* ``fid``          rows (beta/beta_c, t, fid, abs_r) plus a decay time per beta

Every config field has a default; unknown keys are rejected. CLI flags
override config-file values. Identical config + seed produces byte-identical
CSV (floats are written with shortest round-trip repr); a JSON metadata
sidecar (<out>.meta.json) records the resolved config, a hash of its
physics/sampling subset, package versions, per-point seeds, runtimes, and
warnings. ``--resume DIR`` caches completed scan points and checkpoints
in-flight sampling runs so interrupted scans finish with identical output.

Exit codes: 0 success; 2 config error (including checkpoint mismatches);
3 numerical-domain error; 4 under-sampled statistics escalated by --strict.
Environment: THREADS bounds the scan-point worker pool (default 1, max 16).

The reported decay time is the 1/e time of the coherence envelope
|r(t)|^2 - equivalently the e^{-1/2} time of |r| - which for Gaussian decay
equals the width parameter tau of exp(-t^2 / 2 tau^2).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import math
import os
import sys
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import __version__
from .analytic import (
    ExpansionDomainError,
    cw_exact_finite_n,
    cw_local_fi,
    cw_saddle_decoherence,
    cw_saddle_point,
    hte_decoherence,
    mft_decoherence,
    mft_solve,
)
from .exact import MAX_ENUM_SITES, exact_decoherence, exact_local_fi
from .lattice import (
    ClusterSpec,
    ThermoParams,
    bond_counts,
    build_lattice,
    cluster_size,
    onsager_beta_c,
)
from .montecarlo import (
    BLOCK_KEY_LIMIT,
    CheckpointMismatchError,
    SamplerConfig,
    _stream_word,
    local_fi_jackknife,
    run_sampler,
)
from .probe import fid as fid_value
from .probe import optimize_qfi

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DOMAIN = 3
EXIT_UNDER_SAMPLED = 4
EXIT_INTERRUPTED = 130

MODELS = ("mc", "exact", "cw", "cw-finite", "mft", "hte")
COMMANDS = ("qfi-scan", "local-fi-scan", "scaling", "fid")
_MAX_WORKERS = 16
_SCHEMA_VERSION = 1

# Defaults for every config key; unknown keys are rejected.
CONFIG_DEFAULTS: dict = {
    "model": "mc",            # mc | exact | cw | cw-finite | mft | hte
    "J": 0.25,                # ferromagnetic coupling
    "g": 0.1,                 # probe-cluster coupling (so g/J = 0.4 by default)
    "h": 0.0,                 # longitudinal field (exact/cw models only)
    "omega_p": 0.0,           # probe splitting (bookkeeping only)
    "L": 20,                  # lattice edge; n_spins defaults to L*L for cw
    "beta_unit": "relative",  # "relative": beta_grid in units of beta_c
    "beta_grid": [1.0],       # list, or {"start","stop","num"} for linspace
    "t_grid": None,           # None -> per-model default; list or linspace dict
    "radii": [1.0],           # cluster radii (lattice models)
    "cluster_center": None,   # None -> [L//2, L//2]
    "n_spins": None,          # cw system size override (None -> L*L)
    "sector": "full",         # evaluation ensemble (mc/exact/cw-finite)
    "include_drift": True,    # cw saddle: keep the mean-field phase drift
    "n_points": 400,          # default time-grid density
    "sampler": {
        "algorithm": "auto",  # metropolis | wolff | auto
        "sweeps": 1_000_000,
        "burn_in": None,      # None -> sweeps // 10
        "thinning": 1,
        "seed": 1,
        "symmetrize": False,
        "chains": 1,
        "blocks": 32,
    },
    "out": None,              # None -> <command>.csv / .json
    "format": "csv",
    "strict": False,
    "workers": None,          # None -> THREADS env or 1
}

_HASH_KEYS = ("model", "J", "g", "h", "omega_p", "L", "beta_unit",
              "beta_grid", "t_grid", "radii", "cluster_center", "n_spins",
              "sector", "include_drift", "n_points", "sampler")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


# ---------------------------------------------------------------------------
# Config loading
# ---------------------------------------------------------------------------

def _merge_config(file_cfg: dict) -> dict:
    merged = {k: (dict(v) if isinstance(v, dict) else v)
              for k, v in CONFIG_DEFAULTS.items()}
    unknown = set(file_cfg) - set(CONFIG_DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for key, val in file_cfg.items():
        if key == "sampler":
            if not isinstance(val, dict):
                raise ConfigError("sampler must be an object")
            bad = set(val) - set(CONFIG_DEFAULTS["sampler"])
            if bad:
                raise ConfigError(f"unknown sampler keys: {sorted(bad)}")
            merged["sampler"].update(val)
        else:
            merged[key] = val
    return merged


def _parse_grid_value(value, name: str) -> list[float] | None:
    """Accept None, a list of numbers, {"start","stop","num"}, or a CLI string
    "a:b:n" (linspace) / "v1,v2,..." (explicit values)."""
    if value is None:
        return None
    if isinstance(value, str):
        if ":" in value:
            parts = value.split(":")
            if len(parts) != 3:
                raise ConfigError(f"{name}: expected 'start:stop:num'")
            try:
                a, b, num = float(parts[0]), float(parts[1]), int(parts[2])
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from None
            value = {"start": a, "stop": b, "num": num}
        else:
            try:
                return [float(v) for v in value.split(",") if v.strip()]
            except ValueError as exc:
                raise ConfigError(f"{name}: {exc}") from None
    if isinstance(value, dict):
        if set(value) != {"start", "stop", "num"}:
            raise ConfigError(f"{name}: linspace spec needs exactly "
                              "start/stop/num")
        num = int(value["num"])
        if num < 1:
            raise ConfigError(f"{name}: num must be >= 1")
        return [float(v) for v in
                np.linspace(float(value["start"]), float(value["stop"]), num)]
    if isinstance(value, (list, tuple)):
        try:
            return [float(v) for v in value]
        except (TypeError, ValueError):
            raise ConfigError(f"{name}: entries must be numbers") from None
    raise ConfigError(f"{name}: expected a list, linspace spec, or string")


@dataclasses.dataclass
class RunConfig:
    """Fully resolved scan configuration (see CONFIG_DEFAULTS for the schema)."""

    command: str
    model: str
    J: float
    g: float
    h: float
    omega_p: float
    L: int
    beta_unit: str
    beta_grid: list[float]        # as given, in beta_unit
    t_grid: list[float] | None
    radii: list[float]
    cluster_center: tuple[int, int]
    n_spins: int
    sector: str
    include_drift: bool
    n_points: int
    sampler: SamplerConfig
    out: str
    format: str
    strict: bool
    workers: int
    resume: str | None

    @property
    def beta_c(self) -> float:
        if self.model in ("cw", "cw-finite"):
            return 1.0 / self.J
        return onsager_beta_c(self.J)

    @property
    def betas_absolute(self) -> list[float]:
        scale = self.beta_c if self.beta_unit == "relative" else 1.0
        return [b * scale for b in self.beta_grid]

    @property
    def t_grid_array(self) -> np.ndarray | None:
        if self.t_grid is None:
            return None
        return np.asarray(self.t_grid, dtype=np.float64)

    def hash_subset(self) -> dict:
        d = {k: getattr(self, k) for k in _HASH_KEYS if k != "sampler"}
        d["cluster_center"] = list(self.cluster_center)
        d["sampler"] = dataclasses.asdict(self.sampler)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.hash_subset(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def as_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["cluster_center"] = list(self.cluster_center)
        return d


def build_run_config(command: str, file_cfg: dict, overrides: dict,
                     resume: str | None) -> RunConfig:
    """Merge defaults <- config file <- CLI flags, then validate everything."""
    cfg = _merge_config(file_cfg)
    explicit_symmetrize = (
        isinstance(file_cfg.get("sampler"), dict)
        and "symmetrize" in file_cfg["sampler"]
    ) or overrides.get("symmetrize") is not None
    for key, val in overrides.items():
        if val is None:
            continue
        if key in ("sweeps", "seed", "symmetrize"):
            cfg["sampler"][key] = val
        else:
            cfg[key] = val
    if command == "scaling" and cfg["model"] == "mc" and not explicit_symmetrize:
        # slope fits need the flip-symmetric ensemble: there, estimates of
        # flip-odd signals (notably the whole n=1 probe signal at h=0) vanish
        # identically instead of leaving sampler noise that a log-log fit
        # would mistake for a data point
        cfg["sampler"]["symmetrize"] = True

    if cfg["model"] not in MODELS:
        raise ConfigError(f"model must be one of {MODELS}, got {cfg['model']!r}")
    if cfg["format"] not in ("csv", "json"):
        raise ConfigError("format must be 'csv' or 'json'")
    if cfg["beta_unit"] not in ("relative", "absolute"):
        raise ConfigError("beta_unit must be 'relative' or 'absolute'")
    try:
        L = int(cfg["L"])
        J = float(cfg["J"])
        g = float(cfg["g"])
        h = float(cfg["h"])
        omega_p = float(cfg["omega_p"])
        n_points = int(cfg["n_points"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad scalar in config: {exc}") from None
    if L < 2:
        raise ConfigError("L must be >= 2")
    if J <= 0 or g <= 0:
        raise ConfigError("J and g must be positive")
    if n_points < 2:
        raise ConfigError("n_points must be >= 2")

    beta_grid = _parse_grid_value(cfg["beta_grid"], "beta_grid")
    if not beta_grid:
        raise ConfigError("beta_grid must be nonempty")
    if any(b < 0 for b in beta_grid):
        raise ConfigError("beta values must be nonnegative")
    t_grid = _parse_grid_value(cfg["t_grid"], "t_grid")
    if t_grid is not None:
        if len(t_grid) < 2:
            raise ConfigError("t_grid needs at least 2 points")
        arr = np.asarray(t_grid)
        if arr[0] < 0 or np.any(np.diff(arr) <= 0):
            raise ConfigError("t_grid must be nonnegative and increasing")
    radii = _parse_grid_value(cfg["radii"], "radii")
    if not radii:
        raise ConfigError("radii must be nonempty")
    if any(r < 0 for r in radii):
        raise ConfigError("radii must be nonnegative")

    center = cfg["cluster_center"]
    if center is None:
        center = (L // 2, L // 2)
    else:
        try:
            row, col = (int(center[0]), int(center[1]))
        except (TypeError, ValueError, IndexError):
            raise ConfigError("cluster_center must be [row, col]") from None
        if not (0 <= row < L and 0 <= col < L):
            raise ConfigError("cluster_center outside the lattice")
        center = (row, col)

    n_spins = cfg["n_spins"]
    n_spins = L * L if n_spins is None else int(n_spins)
    if n_spins < 1:
        raise ConfigError("n_spins must be positive")
    if cfg["model"] == "cw-finite" and n_spins > 10_000:
        raise ConfigError("cw-finite supports n_spins <= 10000")
    if cfg["sector"] not in ("full", "positive", "negative"):
        raise ConfigError("sector must be full/positive/negative")
    if cfg["sector"] == "negative" and cfg["model"] in ("mc", "exact"):
        raise ConfigError("sector 'negative' is only supported by cw-finite")

    model = cfg["model"]
    if model == "exact" and L * L > MAX_ENUM_SITES:
        raise ConfigError(f"model 'exact' enumerates at most {MAX_ENUM_SITES} "
                          f"sites; L={L} has {L * L}")
    if h != 0.0 and model in ("mc", "mft", "hte"):
        raise ConfigError(f"model {model!r} requires h = 0")
    if model == "hte":
        lattice = build_lattice(L)
        for r in radii:
            if 2.0 * r >= L:
                raise ConfigError(f"radius {r} does not fit in L={L}")
            bond_counts(lattice, ClusterSpec(center=center, radius=r))
    if command == "scaling":
        if len(radii) < 4:
            raise ConfigError("scaling needs at least 4 cluster radii")
        if model in ("cw", "cw-finite"):
            raise ConfigError("scaling scans cluster radii; use a lattice model")
    if command == "local-fi-scan":
        if model not in ("mc", "exact", "cw"):
            raise ConfigError("local-fi-scan supports models mc, exact, cw")
        if model == "mc":
            for r in radii:
                n = cluster_size(ClusterSpec(center=center, radius=r), L)
                if n > BLOCK_KEY_LIMIT:
                    raise ConfigError(
                        f"local-fi-scan via mc supports clusters up to "
                        f"n={BLOCK_KEY_LIMIT} sites; radius {r} has n={n}")
    if command == "fid" and model in ("mc", "exact") and len(radii) != 1:
        raise ConfigError("fid traces one cluster; pass exactly one radius")

    sampler_cfg = dict(cfg["sampler"])
    try:
        sampler = SamplerConfig(
            algorithm=sampler_cfg["algorithm"],
            sweeps=int(sampler_cfg["sweeps"]),
            burn_in=(None if sampler_cfg["burn_in"] is None
                     else int(sampler_cfg["burn_in"])),
            thinning=int(sampler_cfg["thinning"]),
            seed=int(sampler_cfg["seed"]),
            symmetrize=bool(sampler_cfg["symmetrize"]),
            sector=cfg["sector"] if model == "mc" else "full",
            chains=int(sampler_cfg["chains"]),
            blocks=int(sampler_cfg["blocks"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"sampler: {exc}") from None

    workers = cfg["workers"]
    if workers is None:
        env = os.environ.get("THREADS", "").strip()
        if env:
            try:
                workers = int(env)
            except ValueError:
                raise ConfigError(f"THREADS must be an integer, got {env!r}") \
                    from None
        else:
            workers = 1
    workers = max(1, min(int(workers), _MAX_WORKERS))

    out = cfg["out"]
    if out is None:
        out = command.replace("-", "_") + ("." + cfg["format"])

    return RunConfig(
        command=command, model=model, J=J, g=g, h=h, omega_p=omega_p, L=L,
        beta_unit=cfg["beta_unit"], beta_grid=beta_grid, t_grid=t_grid,
        radii=radii, cluster_center=center, n_spins=n_spins,
        sector=cfg["sector"], include_drift=bool(cfg["include_drift"]),
        n_points=n_points, sampler=sampler, out=out, format=cfg["format"],
        strict=bool(cfg["strict"]), workers=workers, resume=resume)


# ---------------------------------------------------------------------------
# Scan-point computation
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class PointResult:
    rows: list[tuple]
    extras: dict
    seed: int | None
    under_sampled: bool
    runtime: float
    cached: bool = False


def _point_seed(rc: RunConfig, index: int) -> int:
    """Stable per-point seed, independent of worker scheduling."""
    return int(_stream_word(rc.sampler.seed, index))


def _make_params(rc: RunConfig, beta: float, radius: float | None) -> ThermoParams:
    cluster = None
    if radius is not None:
        cluster = ClusterSpec(center=rc.cluster_center, radius=radius)
    return ThermoParams(J=rc.J, beta=beta, g=rc.g, L=rc.L, h=rc.h,
                        omega_p=rc.omega_p, cluster=cluster)


def _compute_series(rc: RunConfig, beta: float, radius: float | None,
                    seed: int | None, ckpt: str | None):
    """Return (series, stats_or_None, n) for one scan point."""
    model = rc.model
    t_grid = rc.t_grid_array
    if model == "mc":
        params = _make_params(rc, beta, radius)
        cfg = dataclasses.replace(rc.sampler, seed=seed)
        stats, series = run_sampler(
            params, cfg, t_grid=t_grid, checkpoint=ckpt,
            resume=ckpt is not None,
            checkpoint_every=(max(cfg.sweeps // 8, 1) if ckpt else None),
            n_points=rc.n_points)
        return series, stats, stats.n
    if model == "exact":
        params = _make_params(rc, beta, radius)
        series = exact_decoherence(params, t_grid=t_grid, n_points=rc.n_points,
                                   sector=rc.sector)
        return series, None, cluster_size(params.cluster, rc.L)
    if model == "cw":
        params = _make_params(rc, beta, None)
        series = cw_saddle_decoherence(params, t_grid=t_grid,
                                       n_spins=rc.n_spins,
                                       include_drift=rc.include_drift,
                                       n_points=rc.n_points)
        return series, None, rc.n_spins
    if model == "cw-finite":
        params = _make_params(rc, beta, None)
        series = cw_exact_finite_n(params, t_grid=t_grid, n_spins=rc.n_spins,
                                   sector=rc.sector, n_points=rc.n_points)
        return series, None, rc.n_spins
    if model == "mft":
        params = _make_params(rc, beta, radius)
        sol = mft_solve(params)
        series = mft_decoherence(sol, params, t_grid=t_grid,
                                 n_points=rc.n_points)
        return series, None, cluster_size(params.cluster, rc.L)
    if model == "hte":
        params = _make_params(rc, beta, radius)
        counts = bond_counts(build_lattice(rc.L), params.cluster)
        series = hte_decoherence(counts, params, t_grid=t_grid,
                                 n_points=rc.n_points)
        return series, None, cluster_size(params.cluster, rc.L)
    raise ConfigError(f"unhandled model {model!r}")


def _series_under_sampled(series, stats) -> bool:
    if stats is not None and stats.cluster_marginal.under_sampled:
        return True
    return "under_sampled" in series.flags


def _decay_time(series) -> tuple[float, str]:
    """1/e time of |r|^2 (Gaussian width equivalent); inf + flag if no decay."""
    thr = 1.0 / math.e
    w = np.abs(series.r) ** 2
    below = np.nonzero(w <= thr)[0]
    if below.size == 0:
        return math.inf, "no_decay"
    i = int(below[0])
    if i == 0:
        return float(series.t_grid[0]), "immediate"
    lo, hi = float(series.t_grid[i - 1]), float(series.t_grid[i])
    if series.evaluate is not None:
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if abs(series.evaluate(mid)[0]) ** 2 > thr:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi), ""
    w0, w1 = w[i - 1], w[i]
    frac = (w0 - thr) / (w0 - w1) if w1 != w0 else 0.5
    return lo + frac * (hi - lo), ""


def _compute_point(rc: RunConfig, index: int, beta: float,
                   radius: float | None, ckpt: str | None) -> PointResult:
    start = time.perf_counter()
    seed = _point_seed(rc, index) if rc.model == "mc" else None
    series, stats, n = _compute_series(rc, beta, radius, seed, ckpt)
    bb = beta / rc.beta_c
    extras: dict = {"flags": sorted(set(series.flags))}
    under = _series_under_sampled(series, stats)
    rows: list[tuple]

    if rc.command == "qfi-scan":
        curve = optimize_qfi(series)
        rows = [(bb, n, curve.t_opt, curve.scaled_opt,
                 beta ** 2 * curve.qfi_opt_se)]
        extras.update(f_opt=curve.qfi_opt, f_opt_se=curve.qfi_opt_se,
                      flags=sorted(set(series.flags) | set(curve.flags)))
    elif rc.command == "local-fi-scan":
        if rc.model == "mc":
            flc, flc_se = local_fi_jackknife(stats)
            curve = optimize_qfi(series)
        elif rc.model == "exact":
            flc, flc_se = exact_local_fi(_make_params(rc, beta, radius)), 0.0
            curve = optimize_qfi(series)
        else:  # cw
            params = _make_params(rc, beta, None)
            sol = cw_saddle_point(params, n_spins=rc.n_spins)
            flc, flc_se = cw_local_fi(sol, params), 0.0
            curve = optimize_qfi(series)
        ratio = curve.qfi_opt / flc if flc > 0 else math.nan
        rows = [(bb, n, flc, flc_se, ratio)]
        extras.update(f_opt=curve.qfi_opt, f_opt_se=curve.qfi_opt_se,
                      flags=sorted(set(series.flags) | set(curve.flags)))
    elif rc.command == "scaling":
        curve = optimize_qfi(series)
        rows = [(bb, n, curve.qfi_opt, curve.qfi_opt_se)]
        extras.update(flags=sorted(set(series.flags) | set(curve.flags)))
    elif rc.command == "fid":
        rows = [(bb, float(t), fid_value(r), abs(r))
                for t, r in zip(series.t_grid, series.r)]
        tau, flag = _decay_time(series)
        extras.update(decay_time=tau)
        if flag:
            extras["flags"] = sorted(set(extras["flags"]) | {flag})
    else:
        raise ConfigError(f"unhandled command {rc.command!r}")

    return PointResult(rows=rows, extras=extras, seed=seed,
                       under_sampled=under, runtime=time.perf_counter() - start)


# ---------------------------------------------------------------------------
# Scan orchestration with resume cache
# ---------------------------------------------------------------------------

def _point_label(beta_rel: float, radius: float | None) -> str:
    r = "-" if radius is None else repr(float(radius))
    return f"beta={repr(float(beta_rel))},radius={r}"


def _point_key(rc: RunConfig, beta: float, radius: float | None) -> str:
    blob = json.dumps([rc.config_hash(), rc.command, float(beta),
                       None if radius is None else float(radius)])
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


def _load_row_cache(resume_dir: str) -> dict[str, dict]:
    cache: dict[str, dict] = {}
    path = os.path.join(resume_dir, "rows.jsonl")
    if not os.path.exists(path):
        return cache
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            entry = json.loads(line)
            cache[entry["key"]] = entry
    return cache


_CACHE_LOCK = threading.Lock()


def _append_row_cache(resume_dir: str, entry: dict) -> None:
    path = os.path.join(resume_dir, "rows.jsonl")
    with _CACHE_LOCK, open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(_jsonable(entry)) + "\n")
        fh.flush()


def run_scan(rc: RunConfig) -> dict:
    """Compute all scan points; returns rows, per-point extras, and metadata."""
    use_radius = rc.model not in ("cw", "cw-finite")
    radii = rc.radii if use_radius else [None]
    points = [(ib, beta, radius)
              for ib, beta in enumerate(rc.betas_absolute)
              for radius in radii]
    cache: dict[str, dict] = {}
    resumed = False
    if rc.resume:
        os.makedirs(rc.resume, exist_ok=True)
        cache = _load_row_cache(rc.resume)
    abort_after = os.environ.get("PHASETHERM_ABORT_AFTER_POINTS", "")
    abort_after = int(abort_after) if abort_after else None

    results: dict[int, PointResult] = {}
    pending: list[tuple[int, float, float | None, str | None, str]] = []
    for idx, (_, beta, radius) in enumerate(points):
        key = _point_key(rc, beta, radius)
        hit = cache.get(key)
        if hit is not None:
            results[idx] = PointResult(
                rows=[tuple(r) for r in hit["rows"]], extras=hit["extras"],
                seed=hit.get("seed"), under_sampled=hit.get("under_sampled", False),
                runtime=0.0, cached=True)
            resumed = True
            continue
        ckpt = (os.path.join(rc.resume, f"point_{key}.ckpt")
                if rc.resume and rc.model == "mc" else None)
        if ckpt and os.path.exists(ckpt):
            resumed = True
        pending.append((idx, beta, radius, ckpt, key))

    completed = 0

    def work(item):
        idx, beta, radius, ckpt, key = item
        res = _compute_point(rc, idx, beta, radius, ckpt)
        if rc.resume:
            _append_row_cache(rc.resume, {
                "key": key, "rows": [list(r) for r in res.rows],
                "extras": res.extras, "seed": res.seed,
                "under_sampled": res.under_sampled})
            if ckpt and os.path.exists(ckpt):
                os.remove(ckpt)  # row is cached; in-flight state now redundant
        return idx, res

    if abort_after is not None or rc.workers == 1 or len(pending) <= 1:
        for item in pending:
            idx, res = work(item)
            results[idx] = res
            completed += 1
            if abort_after is not None and completed >= abort_after \
                    and len(results) < len(points):
                raise InterruptedError(
                    f"aborted after {completed} points (test hook)")
    else:
        with ThreadPoolExecutor(max_workers=rc.workers) as pool:
            for idx, res in pool.map(work, pending):
                results[idx] = res

    rows: list[tuple] = []
    point_meta: dict[str, dict] = {}
    seeds: dict[str, int] = {}
    runtimes: dict[str, float] = {}
    under = False
    for idx, (_, beta, radius) in enumerate(points):
        res = results[idx]
        rows.extend(res.rows)
        label = _point_label(beta / rc.beta_c, radius)
        point_meta[label] = res.extras
        if res.seed is not None:
            seeds[label] = res.seed
        if not res.cached:
            runtimes[label] = res.runtime
        under = under or res.under_sampled
    return {"rows": rows, "points": point_meta, "seeds": seeds,
            "runtimes": runtimes, "under_sampled": under, "resumed": resumed}


# ---------------------------------------------------------------------------
# Fits and command-level extras
# ---------------------------------------------------------------------------

_F_ZERO_FLOOR = 1e-18


def _fit_slopes(rows: list[tuple]) -> list[dict]:
    """Per-beta log-log slope of F_opt vs n with its standard error.

    A log-domain fit cannot include points whose F_opt is compatible with
    zero (at h = 0 the single-spin probe signal vanishes identically in the
    flip-symmetric ensemble), so points with F_opt below twice its standard
    error are excluded and recorded per beta. Error-free models report
    stderr 0 and can leave a pure rounding residue (~1e-30) where the
    signal is exactly zero; the 1e-18 floor plays the role of their error
    bar. Fewer than 4 surviving points refuse the fit.
    """
    by_beta: dict[float, list[tuple[float, float, float]]] = {}
    for bb, n, f_opt, f_opt_se in rows:
        by_beta.setdefault(bb, []).append((n, f_opt, f_opt_se))
    slopes = []
    for bb, pts in by_beta.items():
        entry: dict = {"beta_over_beta_c": bb}
        kept, dropped = [], []
        for n, f_opt, f_opt_se in pts:
            if f_opt > max(2.0 * f_opt_se, _F_ZERO_FLOOR):
                kept.append((n, f_opt))
            else:
                dropped.append({"n": n, "f_opt": f_opt, "f_opt_se": f_opt_se,
                                "reason": "F_opt consistent with zero"})
        if dropped:
            entry["dropped"] = dropped
        if len(kept) < 4:
            entry.update(slope=math.nan, slope_se=math.nan,
                         note="fewer than 4 statistically positive points")
        else:
            ns = np.array([p[0] for p in kept], dtype=float)
            fs = np.array([p[1] for p in kept], dtype=float)
            coef, cov = np.polyfit(np.log(ns), np.log(fs), 1, cov=True)
            entry.update(slope=float(coef[0]),
                         slope_se=float(math.sqrt(max(cov[0, 0], 0.0))))
        slopes.append(entry)
    return slopes


def _fid_taus(point_meta: dict[str, dict]) -> list[dict]:
    taus = []
    for label, extras in point_meta.items():
        if "decay_time" not in extras:
            continue
        bb = float(label.split(",")[0].split("=")[1])
        entry = {"beta_over_beta_c": bb, "decay_time": extras["decay_time"]}
        if "no_decay" in extras.get("flags", ()):
            entry["flag"] = "no_decay"
        taus.append(entry)
    return taus


_COLUMNS = {
    "qfi-scan": ("beta_over_beta_c", "n", "t_opt", "beta2_f_opt", "stderr"),
    "local-fi-scan": ("beta_over_beta_c", "n", "f_lc", "stderr", "qfi_ratio"),
    "scaling": ("beta_over_beta_c", "n", "f_opt", "f_opt_se"),
    "fid": ("beta_over_beta_c", "t", "fid", "abs_r"),
}


# ---------------------------------------------------------------------------
# Output writing
# ---------------------------------------------------------------------------

def _cell(value) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    return repr(float(value))


def write_csv(path: str, columns: tuple[str, ...], rows: list[tuple]) -> None:
    lines = [",".join(columns)]
    lines.extend(",".join(_cell(v) for v in row) for row in rows)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, float) and (math.isnan(obj) or math.isinf(obj)):
        return repr(obj)  # JSON has no nan/inf; keep them readable
    return obj


def write_json_dataset(path: str, columns: tuple[str, ...], rows: list[tuple],
                       extras: dict) -> None:
    body = {"columns": list(columns),
            "rows": _jsonable([list(row) for row in rows]),
            "extras": _jsonable(extras)}
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_sidecar(rc: RunConfig, scan: dict, extras: dict,
                  total_runtime: float) -> str:
    import numba
    import scipy
    meta = {
        "schema_version": _SCHEMA_VERSION,
        "command": rc.command,
        "config": _jsonable(rc.as_dict()),
        "config_hash": rc.config_hash(),
        "versions": {
            "phasetherm": __version__,
            "python": sys.version.split()[0],
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "numba": numba.__version__,
        },
        "beta_c": rc.beta_c,
        "seeds": {"base": rc.sampler.seed, "points": scan["seeds"]},
        "runtimes_s": {"total": total_runtime, "points": scan["runtimes"]},
        "points": scan["points"],
        "warnings": (["under-sampled cluster marginal at one or more points"]
                     if scan["under_sampled"] else []),
        "resumed": scan["resumed"],
    }
    meta.update(extras)
    path = rc.out + ".meta.json"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(meta), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phasetherm",
        description="Thermometry scans of a dephasing probe on the lattice "
                    "or its mean-field model")
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "qfi-scan": "optimal-time probe QFI over a (beta, radius) grid",
        "local-fi-scan": "classical FI of direct cluster readout plus the "
                         "probe-QFI/local-FI ratio",
        "scaling": "probe QFI versus cluster size with a log-log slope per beta",
        "fid": "free-induction-decay trace and coherence decay time",
    }
    for cmd in COMMANDS:
        p = sub.add_parser(cmd, help=descriptions[cmd])
        p.add_argument("--config", help="JSON config file (see CONFIG_DEFAULTS)")
        p.add_argument("--model", choices=MODELS)
        p.add_argument("--L", type=int, dest="L")
        p.add_argument("--beta-grid", dest="beta_grid",
                       help="'start:stop:num' or comma-separated values "
                            "(units set by beta_unit; default relative to beta_c)")
        p.add_argument("--t-grid", dest="t_grid",
                       help="'start:stop:num' or comma-separated times")
        p.add_argument("--radii", help="comma-separated cluster radii")
        p.add_argument("--sweeps", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--symmetrize", action=argparse.BooleanOptionalAction)
        p.add_argument("--sector", choices=("full", "positive", "negative"),
                       help="evaluation ensemble; 'positive' projects onto "
                            "nonnegative total magnetization (the "
                            "symmetry-broken sector)")
        p.add_argument("--out")
        p.add_argument("--format", choices=("csv", "json"))
        p.add_argument("--resume", metavar="DIR",
                       help="checkpoint directory for resumable scans")
        p.add_argument("--strict", action="store_true", default=None,
                       help="escalate under-sampling warnings to exit code 4")
    return parser


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a JSON object")
    return data


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_cfg = _load_config_file(args.config)
        overrides = {
            "model": args.model, "L": args.L, "beta_grid": args.beta_grid,
            "t_grid": args.t_grid, "radii": args.radii, "out": args.out,
            "format": args.format, "strict": args.strict,
            "sweeps": args.sweeps, "seed": args.seed,
            "symmetrize": args.symmetrize, "sector": args.sector,
        }
        rc = build_run_config(args.command, file_cfg, overrides, args.resume)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    start = time.perf_counter()
    try:
        scan = run_scan(rc)
    except InterruptedError as exc:
        print(f"interrupted: {exc}", file=sys.stderr)
        return EXIT_INTERRUPTED
    except CheckpointMismatchError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ExpansionDomainError, ArithmeticError) as exc:
        print(f"numerical-domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except ValueError as exc:
        print(f"numerical-domain error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN

    extras: dict = {}
    if rc.command == "scaling":
        extras["slopes"] = _fit_slopes(scan["rows"])
    elif rc.command == "fid":
        extras["decay_times"] = _fid_taus(scan["points"])

    columns = _COLUMNS[rc.command]
    if rc.format == "csv":
        write_csv(rc.out, columns, scan["rows"])
    else:
        write_json_dataset(rc.out, columns, scan["rows"], extras)
    sidecar = write_sidecar(rc, scan, extras, time.perf_counter() - start)

    print(f"wrote {len(scan['rows'])} rows to {rc.out} (sidecar {sidecar})")
    for entry in extras.get("slopes", []):
        print(f"  beta/beta_c={entry['beta_over_beta_c']:g}: "
              f"slope={entry['slope']:.4f} +- {entry.get('slope_se', float('nan')):.4f}")
    for entry in extras.get("decay_times", []):
        tau = entry["decay_time"]
        tag = " (no decay in grid)" if entry.get("flag") == "no_decay" else ""
        tau_s = "inf" if (isinstance(tau, str) or math.isinf(tau)) else f"{tau:.6g}"
        print(f"  beta/beta_c={entry['beta_over_beta_c']:g}: "
              f"decay_time={tau_s}{tag}")
    if scan["under_sampled"]:
        print("warning: under-sampled cluster marginal at one or more points",
              file=sys.stderr)
        if rc.strict:
            return EXIT_UNDER_SAMPLED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
