"""Mean and mean-square analysis of LMS under jointly cyclostationary signals.

The coefficient error is ``e_h[n] = h_o - h[n]``. Its mean ``m[n]`` and a
dual vector ``w[n]`` of length ``M^2`` are propagated forward; ``w`` is
defined by

    E{ e_h[n]^H Q e_h[n] } = w[n]^T vec(Q)    for every Hermitian Q,

which makes ``w[n] = vec(conj(K[n]))`` with ``K[n] = E{e_h e_h^H}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from cyclo_lms.cyclolinalg import (
    NumericalError,
    PeriodicSequence,
    common_period,
    periodic_product,
    solve,
    spectral_radius,
    real_eigenvalues,
    unvec,
    vec,
)
from cyclo_lms.moment_matrices import MomentMatrixSet, build_moment_matrices
from cyclo_lms.signal_models import GroundTruth, InputModel

# Spectral radii within this distance of one count as non-convergent.
BOUNDARY_TOL = 1e-12
# Coarse step of the step-size threshold search.
GRID_STEP = 1e-3
# Bisection refinements after the coarse sweep.
GRID_REFINEMENTS = 10
# Hard cap on coarse grid points when no stop is given.
MAX_GRID_POINTS = 200_000


def imag_tolerance(value: complex) -> float:
    return 1e-8 * (1.0 + abs(value))


class UnstableError(NumericalError):
    """Steady state requested for a configuration that is not mean-square stable."""

    def __init__(self, report: "StabilityReport"):
        super().__init__(
            f"mu={report.mu} is not mean-square stable "
            f"(max rho(Psi)={max(report.rho_psi):.6g}, max rho(Phi)={max(report.rho_phi):.6g})"
        )
        self.report = report


@dataclass
class TheoryTrace:
    """Theoretical learning curve.

    Attributes
    ----------
    mu : float
    horizon : int
    mean : ndarray, shape (horizon, M)
        ``m[n] = E{h_o - h[n]}``.
    dual_weight : ndarray, shape (horizon, M^2)
    mse : ndarray, shape (horizon,)
    """

    mu: float
    horizon: int
    mean: np.ndarray
    dual_weight: np.ndarray
    mse: np.ndarray


@dataclass
class StabilityReport:
    mu: float
    rho_phi: list
    rho_psi: list
    mean_convergent: bool
    ms_stable: bool
    mu_mean_product_bound: float | None = None
    mu_mean_eig_bound: float | None = None
    mu_ms_sufficient: float | None = None
    mu_mean_threshold: float | None = None
    mu_ms_threshold: float | None = None
    precondition_flags: list = field(default_factory=list)
    grid_resolution: float | None = None

    @property
    def inconclusive(self) -> bool:
        return bool(self.precondition_flags)

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "rho_phi": [float(r) for r in self.rho_phi],
            "rho_psi": [float(r) for r in self.rho_psi],
            "mean_convergent": self.mean_convergent,
            "ms_stable": self.ms_stable,
            "mu_mean_product_bound": self.mu_mean_product_bound,
            "mu_mean_eig_bound": self.mu_mean_eig_bound,
            "mu_ms_sufficient": self.mu_ms_sufficient,
            "mu_mean_threshold": self.mu_mean_threshold,
            "mu_ms_threshold": self.mu_ms_threshold,
            "precondition_flags": list(self.precondition_flags),
            "grid_resolution": self.grid_resolution,
        }


@dataclass
class SteadyState:
    """Periodic steady state of a mean-square stable configuration.

    Attributes
    ----------
    s : list of ndarray
        Per-phase vectors with ``lim E{h_o - h} = -mu s_k``.
    p : list of ndarray
        Per-phase forcing of the dual recursion.
    xi : ndarray
        Per-phase limiting MSE.
    ta_mse : float
        Mean of ``xi`` over one period.
    mean_limit : list of ndarray
        ``-mu s_k``.
    dual_limit : list of ndarray
        Limiting dual vectors.
    """

    s: list
    p: list
    xi: np.ndarray
    ta_mse: float
    mean_limit: list
    dual_limit: list


def _period(mm: MomentMatrixSet, gt: GroundTruth) -> int:
    return common_period(mm.period, gt.period)


def mean_step(m: np.ndarray, n: int, mm: MomentMatrixSet, gt: GroundTruth) -> np.ndarray:
    """One step of the mean coefficient-error recursion."""
    c = mm.C[n]
    return m - mm.mu * (c @ m) - mm.mu * (c @ gt.g[n])


def dual_weight_step(
    w: np.ndarray, m: np.ndarray, n: int, mm: MomentMatrixSet, gt: GroundTruth
) -> np.ndarray:
    """One step of the dual second-moment recursion.

    ``w[n+1]^T q == E{||e_h[n+1]||^2_q}`` given ``w[n]`` and ``m[n]``.
    """
    mu = mm.mu
    g = gt.g[n]
    cross = unvec(mm.P[n].T @ np.kron(g, m.conj()))
    return (
        mm.F[n].T @ w
        + mu * mu * (mm.B[n].T @ np.kron(g, g.conj()))
        - mu * vec(cross + cross.conj().T)
        + mu * mu * gt.sigma_v2[n] * mm.c_x[n].conj()
    )


def transient_mse(w: np.ndarray, m: np.ndarray, n: int, mm: MomentMatrixSet, gt: GroundTruth) -> float:
    """Instantaneous MSE from the state ``(w[n], m[n])``."""
    c = mm.C[n]
    g = gt.g[n]
    value = w @ mm.c_x[n] + 2.0 * np.real(g.conj() @ c @ m) + g.conj() @ c @ g + gt.sigma_v2[n]
    if abs(value.imag) > imag_tolerance(value):
        raise NumericalError(f"MSE at n={n} has imaginary residue {value.imag:.3e}")
    return float(value.real)


def initial_state(gt: GroundTruth, h0: np.ndarray | None = None):
    """``(m[0], w[0])`` for a deterministic initial filter (default zero)."""
    h0 = np.zeros_like(gt.h_o) if h0 is None else np.asarray(h0, dtype=complex)
    e0 = gt.h_o - h0
    return e0, np.kron(e0, e0.conj())


def run_theory(
    model: InputModel | None,
    gt: GroundTruth,
    mu: float,
    horizon: int,
    h0: np.ndarray | None = None,
    mm: MomentMatrixSet | None = None,
) -> TheoryTrace:
    """Theoretical mean, dual weight and MSE for ``n = 0 .. horizon-1``."""
    if horizon < 1:
        raise ValueError(f"horizon must be at least 1, got {horizon}")
    if mm is None:
        mm = build_moment_matrices(model, mu, common_period(model.period, gt.period))
    elif mm.mu != mu:
        mm = mm.with_mu(mu)
    m, w = initial_state(gt, h0)
    M = m.size
    means = np.empty((horizon, M), complex)
    duals = np.empty((horizon, M * M), complex)
    mse = np.empty(horizon)
    for n in range(horizon):
        means[n], duals[n] = m, w
        mse[n] = transient_mse(w, m, n, mm, gt)
        w = dual_weight_step(w, m, n, mm, gt)
        m = mean_step(m, n, mm, gt)
    return TheoryTrace(mu=mm.mu, horizon=horizon, mean=means, dual_weight=duals, mse=mse)


def mean_transition(mm: MomentMatrixSet) -> PeriodicSequence:
    eye = np.eye(mm.M)
    return mm.C.map(lambda c: eye - mm.mu * c)


def check_mean_convergence(mm: MomentMatrixSet) -> tuple[list, bool]:
    """Per-phase spectral radii of the one-period mean transition and the verdict."""
    seq = mean_transition(mm)
    rho = [spectral_radius(periodic_product(seq, k, k)) for k in range(seq.period)]
    return rho, all(r < 1.0 - BOUNDARY_TOL for r in rho)


def _singular_phases(mm: MomentMatrixSet) -> list:
    flags = []
    for k, c in enumerate(mm.C):
        lam = np.linalg.eigvalsh(c)
        if lam[0] <= 1e-12 * max(lam[-1], np.finfo(float).tiny):
            flags.append(f"singular input covariance at phase {k}")
    return flags


def check_ms_stability(mm: MomentMatrixSet) -> tuple[list, bool, list]:
    """Per-phase spectral radii of the one-period second-order transition.

    Returns ``(rho_psi, stable, flags)``; ``stable`` also requires mean
    convergence. ``flags`` lists violated preconditions (singular
    covariances), in which case the verdict is inconclusive.
    """
    rho = [spectral_radius(periodic_product(mm.F, k, k)) for k in range(mm.period)]
    _, mean_ok = check_mean_convergence(mm)
    stable = mean_ok and all(r < 1.0 - BOUNDARY_TOL for r in rho)
    return rho, stable, _singular_phases(mm)


def _cov_eigs(covs) -> list:
    return [np.linalg.eigvalsh(np.asarray(c)) for c in covs]


def covariances(source) -> list:
    """Per-phase covariances of a model or a moment-matrix set."""
    if isinstance(source, MomentMatrixSet):
        return list(source.C)
    return [source.covariance(n) for n in range(source.period)]


def mean_product_bound(eigs, mu: float) -> float:
    """``prod_k max(1 - mu lmin[k], mu lmax[k] - 1)``."""
    return float(np.prod([max(1.0 - mu * lam[0], mu * lam[-1] - 1.0) for lam in eigs]))


def sufficient_mu_mean(source, grid: tuple | None = None) -> tuple[float, float]:
    """Sufficient step-size bounds for mean convergence.

    Returns
    -------
    mu_product : float
        Grid-searched largest step size with a product bound below one.
    mu_eig : float
        ``min_k 2 / lambda_max(C_x[k])``.
    """
    eigs = _cov_eigs(covariances(source))
    # All-zero phases do not constrain the step size.
    mu_b = float(min((2.0 / lam[-1] for lam in eigs if lam[-1] > 0), default=np.inf))
    grid = grid or default_grid(eigs)
    mu_a = search_mu_threshold(lambda mu: mean_product_bound(eigs, mu) < 1.0, grid, known_pass=mu_b)
    return mu_a, mu_b


def sufficient_mu_ms(mm: MomentMatrixSet) -> float:
    """Sufficient step-size bound for mean-square stability.

    ``min_k min(1/lambda_max(A^-1 B), 1/lambda_max(H))``, omitting the
    ``H`` term at phases where ``H`` has no real positive eigenvalue.
    """
    flags = _singular_phases(mm)
    if flags:
        raise NumericalError("; ".join(flags) + ": A is singular")
    best = np.inf
    for a, b, h in zip(mm.A, mm.B, mm.H):
        lam_ab = scipy.linalg.eigh(b, a, eigvals_only=True)
        best = min(best, 1.0 / lam_ab[-1])
        lam_h = real_eigenvalues(h)
        lam_h = lam_h[lam_h > 0]
        if lam_h.size:
            best = min(best, 1.0 / lam_h[-1])
    return float(best)


def default_grid(eigs) -> tuple[float, float, float]:
    """Coarse grid reaching past the point where every factor is expansive."""
    scale = max(lam[-1] for lam in eigs)
    if not scale > 0:
        raise NumericalError("every input covariance is zero")
    # Singular phases are flagged elsewhere; size the grid by the smallest positive eigenvalue.
    smallest = min(l for lam in eigs for l in lam if l > 1e-12 * scale)
    stop = 2.0 / smallest * 1.05
    step = GRID_STEP
    if stop / step > MAX_GRID_POINTS:
        step = stop / MAX_GRID_POINTS
    return step, stop, step


def search_mu_threshold(
    predicate: Callable[[float], bool],
    grid: tuple[float, float, float],
    refinements: int = GRID_REFINEMENTS,
    known_pass: float | None = None,
) -> float:
    """Largest step size passing ``predicate`` before its first failure on a grid.

    The coarse sweep ``start, start+step, ... <= stop`` stops at the first
    failure; the bracket ``[last pass, first failure]`` is then bisected
    ``refinements`` times. ``known_pass`` tightens the lower end of the
    bracket when it lies inside and passes. Returns ``0.0`` when the first
    grid point already fails and ``stop`` when nothing fails.
    """
    start, stop, step = (float(v) for v in grid)
    if step <= 0 or start <= 0 or stop < start:
        raise ValueError(f"invalid grid start={start} stop={stop} step={step}")
    n_points = int(np.floor((stop - start) / step + 1e-9)) + 1
    lo, hi = 0.0, None
    for i in range(n_points):
        mu = start + i * step
        if predicate(mu):
            lo = mu
        else:
            hi = mu
            break
    if hi is None:
        return lo
    if known_pass is not None and lo < known_pass < hi and predicate(known_pass):
        lo = known_pass
    if lo == 0.0:
        return 0.0
    for _ in range(refinements):
        mid = 0.5 * (lo + hi)
        if predicate(mid):
            lo = mid
        else:
            hi = mid
    return lo


def mean_predicate(mm: MomentMatrixSet) -> Callable[[float], bool]:
    eye = np.eye(mm.M)

    def predicate(mu):
        seq = mm.C.map(lambda c: eye - mu * c)
        rho = spectral_radius(periodic_product(seq, 0, 0))
        return rho < 1.0 - BOUNDARY_TOL

    return predicate


def ms_predicate(mm: MomentMatrixSet) -> Callable[[float], bool]:
    """Mean-square stability at ``mu``; one phase suffices as the spectrum is phase-invariant."""
    mean_ok = mean_predicate(mm)
    eye = np.eye(mm.M * mm.M)

    def predicate(mu):
        if not mean_ok(mu):
            return False
        seq = PeriodicSequence([eye - mu * a + mu * mu * b for a, b in zip(mm.A, mm.B)])
        return spectral_radius(periodic_product(seq, 0, 0)) < 1.0 - BOUNDARY_TOL

    return predicate


def stability_report(
    mm: MomentMatrixSet, grid: tuple | None = None, thresholds: bool = True
) -> StabilityReport:
    """Spectral radii at ``mm.mu`` plus all step-size thresholds."""
    rho_phi, mean_ok = check_mean_convergence(mm)
    rho_psi, ms_ok, flags = check_ms_stability(mm)
    report = StabilityReport(
        mu=mm.mu,
        rho_phi=rho_phi,
        rho_psi=rho_psi,
        mean_convergent=mean_ok,
        ms_stable=ms_ok,
        precondition_flags=flags,
    )
    if not thresholds:
        return report
    eigs = _cov_eigs(mm.C)
    grid = grid or default_grid(eigs)
    report.grid_resolution = grid[2] / 2**GRID_REFINEMENTS
    report.mu_mean_product_bound, report.mu_mean_eig_bound = sufficient_mu_mean(mm, grid)
    report.mu_mean_threshold = search_mu_threshold(
        mean_predicate(mm), grid, known_pass=report.mu_mean_product_bound
    )
    if not flags:
        report.mu_ms_sufficient = sufficient_mu_ms(mm)
    report.mu_ms_threshold = search_mu_threshold(
        ms_predicate(mm), grid, known_pass=report.mu_ms_sufficient
    )
    return report


def steady_state(mm: MomentMatrixSet, gt: GroundTruth) -> SteadyState:
    """Per-phase limits of the mean, dual vector and MSE.

    The phase-0 limits solve the one-period fixed-point equations; the other
    phases follow by running the recursions over one period from there.

    Raises
    ------
    UnstableError
        If the configuration is not mean-square stable.
    """
    _, stable, _ = check_ms_stability(mm)
    if not stable:
        raise UnstableError(stability_report(mm, thresholds=False))
    n0 = _period(mm, gt)
    mu = mm.mu
    M = mm.M

    # Mean: m_0 = Phi_0 m_0 + (forced response over one period from zero).
    forced = np.zeros(M, complex)
    for l in range(n0):
        forced = mean_step(forced, l, mm, gt)
    phi0 = periodic_product(mean_transition(mm).unrolled(n0), 0, 0)
    m_lim = [solve(np.eye(M) - phi0, forced)]
    for l in range(n0 - 1):
        m_lim.append(mean_step(m_lim[-1], l, mm, gt))
    s = [-mk / mu for mk in m_lim]

    def forcing(l):
        g = gt.g[l]
        cross = unvec(mm.P[l].T @ np.kron(g, s[l].conj()))
        return (
            vec(cross + cross.conj().T)
            + mm.B[l].T @ np.kron(g, g.conj())
            + gt.sigma_v2[l] * mm.c_x[l].conj()
        )

    p = [forcing(l) for l in range(n0)]
    acc = np.zeros(M * M, complex)
    for l in range(n0):
        acc = mm.F[l].T @ acc + mu * mu * p[l]
    psi0 = periodic_product(mm.F.unrolled(n0).map(np.transpose), 0, 0)
    w_lim = [solve(np.eye(M * M) - psi0, acc)]
    for l in range(n0 - 1):
        w_lim.append(mm.F[l].T @ w_lim[-1] + mu * mu * p[l])

    xi = np.array([transient_mse(w_lim[k], m_lim[k], k, mm, gt) for k in range(n0)])
    return SteadyState(
        s=s, p=p, xi=xi, ta_mse=float(xi.mean()), mean_limit=m_lim, dual_limit=w_lim
    )


def detect_asymptotic_periodicity(
    seq: np.ndarray, period: int, window: int, tol: float
) -> tuple[bool, np.ndarray]:
    """Check that every phase subsequence has settled.

    Returns ``(settled, limits)`` where ``limits[k]`` is the last value of
    phase ``k`` (phases measured from index 0). Settled means the last
    ``window`` values of each phase spread by less than ``tol * (1 + |mean|)``.
    """
    seq = np.asarray(seq, dtype=float)
    if window < 1 or period < 1:
        raise ValueError("window and period must be positive")
    if seq.size < 2 * window * period:
        raise ValueError(f"need at least {2 * window * period} samples, got {seq.size}")
    n_periods = seq.size // period
    tail = seq[: n_periods * period].reshape(n_periods, period)[-window:]
    spread = tail.max(axis=0) - tail.min(axis=0)
    settled = bool(np.all(spread < tol * (1.0 + np.abs(tail.mean(axis=0)))))
    return settled, tail[-1].copy()
