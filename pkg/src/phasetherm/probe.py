"""Dephasing-probe dynamics and quantum Fisher information.

The probe is a qubit prepared in an equal superposition and coupled to the
cluster magnetization of a thermal lattice. Its populations are untouched; its
coherence acquires the bare phase e^{-i omega_p t} times the thermal
decoherence factor r(t, beta) = <e^{-i g t Z_n}>_beta. All temperature
information the probe can expose at time t is captured by the pair
(r, dr/dbeta), through

    F_beta(t) = [4 |dr|^2 + (r* dr - r dr*)^2] / (4 (1 - |r|^2)),

equivalent to |dr|^2 + Re(r* dr)^2 / (1 - |r|^2). F is invariant under
beta-independent phases r -> e^{i phi(t)} r and vanishes at t = 0 where
|r| = 1 with dr = 0.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "ProbeState",
    "DecoherenceSeries",
    "QfiCurve",
    "plus_state",
    "evolve_probe",
    "fid",
    "qfi_from_r",
    "qfi_sld_oracle",
    "dephasing_density",
    "dephasing_ddensity",
    "qfi_curve_values",
    "optimize_qfi",
    "reparametrize",
    "golden_max",
    "default_time_grid",
]

_REVIVAL_EPS = 1e-12   # |r|^2 within this of 1 counts as a revival point
_REFINE_D_FLOOR = 1e-6  # smallest coherence gap 1 - |r|^2 the refiner trusts
_OVER_TOL = 1e-9       # |r| beyond 1 + this flags broken input


@dataclass(frozen=True)
class ProbeState:
    """Qubit state [[p, c], [c*, 1-p]]; positivity requires |c| <= sqrt(p(1-p))."""

    population: float
    coherence: complex

    def __post_init__(self) -> None:
        p = self.population
        if not 0.0 <= p <= 1.0:
            raise ValueError("population must lie in [0, 1]")
        bound = math.sqrt(max(p * (1.0 - p), 0.0))
        if abs(self.coherence) > bound + 1e-12:
            raise ValueError("coherence violates positivity of the qubit state")

    def density_matrix(self) -> np.ndarray:
        c = complex(self.coherence)
        return np.array(
            [[self.population, c], [c.conjugate(), 1.0 - self.population]],
            dtype=complex,
        )


def plus_state() -> ProbeState:
    return ProbeState(population=0.5, coherence=0.5)


def evolve_probe(state: ProbeState, r: complex, omega_p: float, t: float) -> ProbeState:
    """Dephasing channel: populations fixed, coherence scaled by e^{-i w t} r."""
    if abs(r) > 1.0 + _OVER_TOL:
        raise ValueError(f"|r| = {abs(r)} exceeds 1; not a decoherence factor")
    phase = complex(math.cos(omega_p * t), -math.sin(omega_p * t))
    return ProbeState(state.population, state.coherence * phase * r)


def fid(r: complex) -> float:
    """Free-induction-decay signal: the real part of the decoherence factor."""
    return float(np.real(r))


@dataclass(frozen=True, eq=False)
class DecoherenceSeries:
    """r(t) and its beta-derivative on a time grid, with standard errors.

    se_r / se_dr are the quadrature sums of the real- and imaginary-part
    standard errors (zero for analytic sources). se_components optionally keeps
    the four component errors (re r, im r, re dr, im dr) for error propagation.
    evaluate, when present, maps an arbitrary t to (r, dr) exactly and enables
    optimizer refinement between grid points.
    """

    t_grid: np.ndarray
    r: np.ndarray
    dr_dbeta: np.ndarray
    se_r: np.ndarray
    se_dr: np.ndarray
    beta: float
    source: str = ""
    evaluate: Callable[[float], tuple[complex, complex]] | None = field(
        default=None, repr=False)
    se_components: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = field(
        default=None, repr=False)
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        n = self.t_grid.size
        for name in ("r", "dr_dbeta", "se_r", "se_dr"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must match the time grid shape")

    def validate_modulus(self) -> None:
        """Invariant: |r| <= 1 + 3 se elementwise (tiny float slack)."""
        excess = np.abs(self.r) - (1.0 + 3.0 * self.se_r + 1e-9)
        if np.any(excess > 0):
            bad = int(np.argmax(excess))
            raise ValueError(
                f"|r(t={self.t_grid[bad]})| = {abs(self.r[bad])} exceeds 1 "
                "beyond statistical tolerance")


def qfi_from_r(r: complex, dr_dbeta: complex) -> float:
    """Pointwise QFI of the dephasing probe from (r, dr/dbeta).

    Returns 0 at the fully coherent point (|r| = 1 with vanishing numerator,
    e.g. t = 0), NaN when |r| exceeds 1 beyond tolerance, and inf at an exact
    revival with a non-vanishing numerator (callers interpolate those).
    """
    r = complex(r)
    dr = complex(dr_dbeta)
    rr = r.real * r.real + r.imag * r.imag
    if rr > (1.0 + _OVER_TOL) ** 2:
        return math.nan
    comm = r.conjugate() * dr - r * dr.conjugate()  # purely imaginary
    num = 4.0 * abs(dr) ** 2 + (comm * comm).real
    num = max(num, 0.0)
    den = 4.0 * (1.0 - rr)
    if rr >= 1.0 - _REVIVAL_EPS:
        return 0.0 if num < 1e-24 else math.inf
    return num / den


def dephasing_density(r: complex) -> np.ndarray:
    """Equal-superposition probe after dephasing with factor r."""
    r = complex(r)
    return np.array([[0.5, 0.5 * r], [0.5 * r.conjugate(), 0.5]], dtype=complex)


def dephasing_ddensity(dr_dbeta: complex) -> np.ndarray:
    """beta-derivative of dephasing_density."""
    dr = complex(dr_dbeta)
    return np.array([[0.0, 0.5 * dr], [0.5 * dr.conjugate(), 0.0]], dtype=complex)


def qfi_sld_oracle(rho: np.ndarray, drho: np.ndarray, eig_floor: float = 1e-14) -> float:
    """QFI via the symmetric-logarithmic-derivative eigenbasis sum.

    F = 2 sum_{nm} |<m| drho |n>|^2 / (rho_n + rho_m), dropping eigenvalue
    pairs below eig_floor. Works for any finite dimension; used as the
    independent oracle for qfi_from_r.
    """
    rho = np.asarray(rho, dtype=complex)
    drho = np.asarray(drho, dtype=complex)
    if rho.shape != drho.shape or rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise ValueError("rho and drho must be equal square matrices")
    if not np.allclose(rho, rho.conj().T, atol=1e-10):
        raise ValueError("rho must be Hermitian")
    if not np.allclose(drho, drho.conj().T, atol=1e-10):
        raise ValueError("drho must be Hermitian")
    evals, vecs = np.linalg.eigh(rho)
    a = vecs.conj().T @ drho @ vecs
    denom = evals[:, None] + evals[None, :]
    keep = denom >= eig_floor
    total = 2.0 * np.sum(np.abs(a[keep]) ** 2 / denom[keep])
    return float(total)


def _qfi_sigma(r: complex, dr: complex,
               se: tuple[float, float, float, float]) -> float:
    """First-order error propagation through the QFI functional.

    Components are treated as independent; the result is approximate and
    documented as such. se = (sigma_re_r, sigma_im_r, sigma_re_dr, sigma_im_dr).
    """
    sx, sy, su, sv = se
    if sx == sy == su == sv == 0.0:
        return 0.0
    x, y = r.real, r.imag
    u, v = dr.real, dr.imag
    d = 1.0 - x * x - y * y
    if d <= _REVIVAL_EPS:
        return math.inf
    q = x * v - y * u
    f = (u * u + v * v - q * q) / d
    dfdx = 2.0 * (x * f - q * v) / d
    dfdy = 2.0 * (y * f + q * u) / d
    dfdu = 2.0 * (u + q * y) / d
    dfdv = 2.0 * (v - q * x) / d
    var = (dfdx * sx) ** 2 + (dfdy * sy) ** 2 + (dfdu * su) ** 2 + (dfdv * sv) ** 2
    return math.sqrt(var)


def qfi_curve_values(series: DecoherenceSeries) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise QFI, propagated errors, and the revival mask for a series.

    Exact revivals at t > 0 (|r| = 1 to machine tolerance) are replaced by a
    one-sided quadratic extrapolation from the three preceding valid points and
    marked in the mask.
    """
    t = series.t_grid
    n = t.size
    qfi = np.empty(n)
    se = np.zeros(n)
    revival = np.zeros(n, dtype=bool)
    if series.se_components is not None:
        comp = series.se_components
    else:
        comp = (series.se_r / math.sqrt(2.0), series.se_r / math.sqrt(2.0),
                series.se_dr / math.sqrt(2.0), series.se_dr / math.sqrt(2.0))
    for i in range(n):
        val = qfi_from_r(series.r[i], series.dr_dbeta[i])
        if math.isinf(val) or (abs(series.r[i]) ** 2 >= 1.0 - _REVIVAL_EPS and t[i] > 0):
            revival[i] = True
            val = _extrapolate_revival(t, qfi, revival, i)
        qfi[i] = val
        if not revival[i] and not math.isnan(val):
            se[i] = _qfi_sigma(
                complex(series.r[i]), complex(series.dr_dbeta[i]),
                (float(comp[0][i]), float(comp[1][i]),
                 float(comp[2][i]), float(comp[3][i])))
    return qfi, se, revival


def _extrapolate_revival(t: np.ndarray, qfi: np.ndarray,
                         revival: np.ndarray, i: int) -> float:
    valid = [j for j in range(i - 1, -1, -1) if not revival[j] and np.isfinite(qfi[j])]
    pts = sorted(valid[:3])
    if len(pts) < 3:
        return 0.0
    coeff = np.polyfit(t[pts], qfi[pts], 2)
    return float(np.polyval(coeff, t[i]))


def golden_max(f: Callable[[float], float], a: float, b: float,
               tol: float = 1e-10, maxiter: int = 200) -> tuple[float, float]:
    """Golden-section search for the maximum of f on [a, b]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    x1 = b - invphi * (b - a)
    x2 = a + invphi * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(maxiter):
        if b - a <= tol * (abs(a) + abs(b) + 1e-30):
            break
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + invphi * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - invphi * (b - a)
            f1 = f(x1)
    if f1 >= f2:
        return x1, f1
    return x2, f2


@dataclass(frozen=True, eq=False)
class QfiCurve:
    """QFI over a time grid together with its optimum.

    scaled_opt is the dimensionless form beta^2 * F_beta at the optimum.
    boundary_warning marks an argmax sitting on the grid edge (grid too short
    or QFI monotone); revivals marks extrapolated grid points.
    """

    beta: float
    t_grid: np.ndarray
    qfi: np.ndarray
    qfi_se: np.ndarray
    t_opt: float
    qfi_opt: float
    qfi_opt_se: float
    scaled_opt: float
    boundary_warning: bool
    revivals: np.ndarray
    flags: tuple[str, ...] = ()


def optimize_qfi(series: DecoherenceSeries, refine_tol: float = 1e-8) -> QfiCurve:
    """Grid scan of the QFI followed by golden-section refinement.

    Refinement runs on the bracket around the grid argmax whenever the series
    carries an exact evaluator; otherwise the grid optimum is reported as-is.
    A boundary argmax is reported unrefined with boundary_warning set.

    The refinement objective rejects points whose coherence gap 1 - |r|^2
    falls below 1e-6: approaching t = 0 or a revival the QFI functional
    degenerates to 0/0, so a bracket edge touching such a shoulder would
    otherwise let the search climb pure rounding noise. A resolved optimum
    always sits at an order-unity coherence gap, so nothing real is clipped.
    """
    qfi, se, revival = qfi_curve_values(series)
    flags = list(series.flags)
    finite = np.where(np.isfinite(qfi) & ~revival)[0]
    if finite.size == 0:
        raise ValueError("QFI curve contains no finite points")
    i = int(finite[np.argmax(qfi[finite])])
    t_opt = float(series.t_grid[i])
    f_opt = float(qfi[i])
    f_opt_se = float(se[i])
    boundary = i == 0 or i == series.t_grid.size - 1
    if boundary:
        warnings.warn("QFI argmax sits on the grid boundary; grid likely too short",
                      stacklevel=2)
        flags.append("boundary")
    elif series.evaluate is not None:
        def f(tt: float) -> float:
            r_val, dr_val = series.evaluate(tt)
            if 1.0 - abs(r_val) ** 2 <= _REFINE_D_FLOOR:
                return -math.inf
            val = qfi_from_r(r_val, dr_val)
            return val if math.isfinite(val) else -math.inf

        a, b = float(series.t_grid[i - 1]), float(series.t_grid[i + 1])
        t_ref, f_ref = golden_max(f, a, b, tol=refine_tol)
        if f_ref >= f_opt:
            t_opt, f_opt = t_ref, f_ref
    return QfiCurve(
        beta=series.beta,
        t_grid=series.t_grid,
        qfi=qfi,
        qfi_se=se,
        t_opt=t_opt,
        qfi_opt=f_opt,
        qfi_opt_se=f_opt_se,
        scaled_opt=series.beta ** 2 * f_opt,
        boundary_warning=boundary,
        revivals=revival,
        flags=tuple(flags),
    )


def reparametrize(qfi_beta, beta: float):
    """Convert F_beta to F_T via T^2 F_T = beta^2 F_beta, i.e. F_T = beta^4 F_beta."""
    if beta <= 0:
        raise ValueError("reparametrization to temperature needs beta > 0")
    return beta ** 4 * qfi_beta


def default_time_grid(evaluate: Callable[[float], tuple[complex, complex]],
                      t_cap: float,
                      n_points: int = 400,
                      span: float = 6.0) -> tuple[np.ndarray, float, tuple[str, ...]]:
    """Time grid [0, span * tau_hat] from the empirical 1/e time of |r|.

    tau_hat is found by geometric scan plus bisection below t_cap; when |r|
    never drops to 1/e the grid runs to t_cap and a no_decay flag is attached.
    """
    if t_cap <= 0:
        raise ValueError("t_cap must be positive")
    target = 1.0 / math.e

    def modulus(tt: float) -> float:
        return abs(evaluate(tt)[0])

    t = t_cap * 1e-6
    hit = None
    while t <= t_cap:
        if modulus(t) < target:
            hit = t
            break
        t *= 1.25
    flags: tuple[str, ...] = ()
    if hit is None:
        tau_hat = math.inf
        end = t_cap
        flags = ("no_decay",)
    else:
        lo, hi = hit / 1.25, hit
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            if modulus(mid) < target:
                hi = mid
            else:
                lo = mid
        tau_hat = 0.5 * (lo + hi)
        end = min(span * tau_hat, t_cap)
    return np.linspace(0.0, end, n_points), tau_hat, flags
