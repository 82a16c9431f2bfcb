"""Cyclostationary input models and the ground-truth SOI model.

An input model describes the zero-mean, proper-complex ``M x 1`` vector
``x[n]`` through its per-phase covariance ``C_x[n]``, its per-phase fourth
moments and a sampler. The desired signal follows

    d[n] = h_M[n]^H x[n] + v[n]

with ``v[n]`` independent of the input and of variance ``sigma_v2[n]``.

Fourth moments are indexed as ``T[p1, p2, p3, p4] = E{x_p1 x*_p2 x_p3 x*_p4}``.
"""

from __future__ import annotations

import copy
import functools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from cyclo_lms.cyclolinalg import (
    DimensionError,
    PeriodicSequence,
    common_period,
    solve,
    vec,
)

# Smallest per-phase draw count accepted by ``estimate_moments`` by default.
MIN_DRAWS_PER_PHASE = 100_000


def _as_matrix_sequence(covs) -> PeriodicSequence:
    if isinstance(covs, PeriodicSequence):
        return covs.map(lambda c: np.asarray(c, dtype=complex))
    arr = np.asarray(covs, dtype=complex)
    if arr.ndim == 2:
        return PeriodicSequence([arr])
    return PeriodicSequence(list(arr))


def _as_scalar_sequence(values) -> PeriodicSequence:
    if isinstance(values, PeriodicSequence):
        return values.map(float)
    return PeriodicSequence([float(v) for v in np.atleast_1d(values)])


def psd_root(cov: np.ndarray) -> np.ndarray:
    """``R`` with ``R R^H = cov``; tolerates singular PSD matrices."""
    lam, u = np.linalg.eigh(np.asarray(cov, dtype=complex))
    return u * np.sqrt(np.clip(lam, 0.0, None))


def complex_gaussian(
    rng: np.random.Generator, cov: np.ndarray, size: int, root: np.ndarray | None = None
) -> np.ndarray:
    """Draw ``size`` proper-complex zero-mean Gaussian vectors with covariance ``cov``."""
    root = psd_root(cov) if root is None else root
    m = root.shape[0]
    z = rng.standard_normal((size, m)) + 1j * rng.standard_normal((size, m))
    return (z @ root.T) * np.sqrt(0.5)


def isserlis_tensor(cov: np.ndarray) -> np.ndarray:
    """Fourth-moment tensor of a proper-complex Gaussian vector."""
    c = np.asarray(cov, dtype=complex)
    return np.einsum("ab,cd->abcd", c, c) + np.einsum("ad,cb->abcd", c, c)


def gaussian_b_matrix(cov: np.ndarray) -> np.ndarray:
    """``E{(xx^H)^T ⊗ xx^H}`` for a proper-complex Gaussian vector."""
    c = np.asarray(cov, dtype=complex)
    vc = vec(c)
    return np.kron(c.T, c) + np.outer(vc, vc.conj())


def b_matrix_from_tensor(t: np.ndarray) -> np.ndarray:
    """Arrange a fourth-moment tensor as ``E{(xx^H)^T ⊗ xx^H}``.

    Entry ``(l1*M + q1, l2*M + q2)`` equals ``T[l2, l1, q1, q2]``.
    """
    m = t.shape[0]
    return np.transpose(t, (1, 2, 0, 3)).reshape(m * m, m * m)


def tensor_from_b_matrix(b: np.ndarray) -> np.ndarray:
    """Inverse of :func:`b_matrix_from_tensor`."""
    m = int(round(np.sqrt(b.shape[0])))
    return np.transpose(b.reshape(m, m, m, m), (2, 0, 1, 3))


class InputModel:
    """Base class for WSCS input models.

    Subclasses provide ``M``, ``period``, :meth:`covariance`,
    :meth:`fourth_moment_tensor` and :meth:`sample`. :meth:`b_matrix` has a
    generic tensor-based implementation that closed-form models override.
    """

    M: int
    period: int

    def covariance(self, n: int) -> np.ndarray:
        raise NotImplementedError

    def fourth_moment_tensor(self, n: int) -> np.ndarray:
        raise NotImplementedError

    def fourth_moment(self, n: int, p1: int, p2: int, p3: int, p4: int) -> complex:
        for p in (p1, p2, p3, p4):
            if not 0 <= p < self.M:
                raise IndexError(f"index {p} out of range for M={self.M}")
        return complex(self.fourth_moment_tensor(n)[p1, p2, p3, p4])

    def b_matrix(self, n: int) -> np.ndarray:
        return b_matrix_from_tensor(self.fourth_moment_tensor(n))

    def sample(self, n: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def sample_times(self, times: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Independent draws for each time index in ``times``, shape ``(len(times), M)``."""
        times = np.asarray(times)
        if self.period == 1:
            return self.sample(0, rng, times.size)
        x = np.empty((times.size, self.M), complex)
        phases = times % self.period
        for k in range(self.period):
            idx = np.flatnonzero(phases == k)
            if idx.size:
                x[idx] = self.sample(k, rng, idx.size)
        return x

    @property
    def has_sampler(self) -> bool:
        return True


@dataclass(frozen=True, eq=False)
class CompoundGaussianModel(InputModel):
    """``x[n] = sqrt(tau[n]) y[n]`` with Gaussian speckle and positive texture.

    Parameters
    ----------
    speckle_cov : PeriodicSequence
        Speckle covariance ``C_y[n]``.
    texture_mean, texture_second : PeriodicSequence
        ``E{tau[n]}`` and ``E{tau[n]^2}``.
    texture_sampler : callable
        ``texture_sampler(rng, n, size)`` returning positive draws of ``tau[n]``.
    """

    speckle_cov: PeriodicSequence
    texture_mean: PeriodicSequence
    texture_second: PeriodicSequence
    texture_sampler: Callable[[np.random.Generator, int, int], np.ndarray]

    def __post_init__(self):
        object.__setattr__(self, "speckle_cov", _as_matrix_sequence(self.speckle_cov))
        object.__setattr__(self, "texture_mean", _as_scalar_sequence(self.texture_mean))
        object.__setattr__(self, "texture_second", _as_scalar_sequence(self.texture_second))
        for n in range(common_period(self.texture_mean.period, self.texture_second.period)):
            m1, m2 = self.texture_mean[n], self.texture_second[n]
            if m1 <= 0:
                raise ValueError(f"texture mean must be positive, got {m1} at phase {n}")
            if m2 < m1 * m1 * (1 - 1e-12):
                raise ValueError(f"texture second moment {m2} violates Jensen bound at phase {n}")

    @functools.cached_property
    def _roots(self):
        return [psd_root(c) for c in self.speckle_cov]

    @property
    def M(self) -> int:
        return self.speckle_cov[0].shape[0]

    @property
    def period(self) -> int:
        return common_period(
            self.speckle_cov.period, self.texture_mean.period, self.texture_second.period
        )

    def covariance(self, n: int) -> np.ndarray:
        return self.texture_mean[n] * self.speckle_cov[n]

    def fourth_moment_tensor(self, n: int) -> np.ndarray:
        return self.texture_second[n] * isserlis_tensor(self.speckle_cov[n])

    def b_matrix(self, n: int) -> np.ndarray:
        return self.texture_second[n] * gaussian_b_matrix(self.speckle_cov[n])

    def sample(self, n, rng, size=None):
        k = 1 if size is None else size
        tau = np.asarray(self.texture_sampler(rng, n, k), dtype=float)
        y = complex_gaussian(rng, self.speckle_cov[n], k, self._roots[n % len(self._roots)])
        x = np.sqrt(tau)[:, None] * y
        return x[0] if size is None else x


TEXTURES = ("complex", "real")


def inverse_gamma_texture(dof: float, texture: str = "complex"):
    """Texture sampler and moments of a multivariate t distribution.

    ``texture="complex"`` draws ``tau = dof / s`` with ``s ~ Gamma(dof, 1)``,
    the complex-valued t; then ``E{tau} = dof/(dof-1)`` and
    ``E{tau^2} = dof^2/((dof-1)(dof-2))``.

    ``texture="real"`` draws ``tau = dof / chi2(dof)``, the texture of the
    real-valued t; then ``E{tau} = dof/(dof-2)`` and
    ``E{tau^2} = dof^2/((dof-2)(dof-4))``.

    Returns
    -------
    sampler, mean, second
    """
    if texture == "complex":
        if dof <= 2:
            raise ValueError("the complex t texture needs dof > 2 for finite fourth moments")

        def sampler(rng, n, size):
            return dof / rng.gamma(dof, 1.0, size)

        return sampler, dof / (dof - 1.0), dof * dof / ((dof - 1.0) * (dof - 2.0))
    if texture == "real":
        if dof <= 4:
            raise ValueError("the real t texture needs dof > 4 for finite fourth moments")

        def sampler(rng, n, size):
            return dof / rng.chisquare(dof, size)

        return sampler, dof / (dof - 2.0), dof * dof / ((dof - 2.0) * (dof - 4.0))
    raise ValueError(f"unknown texture {texture!r}, expected one of {TEXTURES}")


def multivariate_t(scatter: np.ndarray, dof: float, texture: str = "complex") -> CompoundGaussianModel:
    """Multivariate t with the given scatter matrix and degrees of freedom."""
    sampler, mean, second = inverse_gamma_texture(dof, texture)
    return CompoundGaussianModel(
        speckle_cov=PeriodicSequence([np.asarray(scatter, dtype=complex)]),
        texture_mean=PeriodicSequence([mean]),
        texture_second=PeriodicSequence([second]),
        texture_sampler=sampler,
    )


def gaussian(cov) -> CompoundGaussianModel:
    """Proper-complex Gaussian model (degenerate unit texture)."""

    def sampler(rng, n, size):
        return np.ones(size)

    return CompoundGaussianModel(
        speckle_cov=_as_matrix_sequence(cov),
        texture_mean=PeriodicSequence([1.0]),
        texture_second=PeriodicSequence([1.0]),
        texture_sampler=sampler,
    )


@dataclass(frozen=True, eq=False)
class GaussianMixtureModel(InputModel):
    """Finite mixture of zero-mean proper-complex Gaussians.

    Parameters
    ----------
    weights : PeriodicSequence
        Per-phase probability vectors of length ``n_G``.
    component_covs : list of PeriodicSequence
        ``C_{G_m}[n]`` for each component.
    """

    weights: PeriodicSequence
    component_covs: tuple

    def __post_init__(self):
        w = self.weights
        if not isinstance(w, PeriodicSequence):
            arr = np.asarray(w, dtype=float)
            w = PeriodicSequence([arr] if arr.ndim == 1 else list(arr))
        w = w.map(lambda v: np.asarray(v, dtype=float))
        object.__setattr__(self, "weights", w)
        covs = tuple(_as_matrix_sequence(c) for c in self.component_covs)
        object.__setattr__(self, "component_covs", covs)
        for n, gam in enumerate(w):
            if gam.shape != (len(covs),):
                raise DimensionError(f"phase {n}: {gam.size} weights for {len(covs)} components")
            if np.any(gam < 0) or abs(gam.sum() - 1.0) > 1e-12:
                raise ValueError(f"phase {n}: weights must be a probability vector, got {gam}")

    @functools.cached_property
    def _roots(self):
        return [[psd_root(c) for c in cov] for cov in self.component_covs]

    @property
    def n_components(self) -> int:
        return len(self.component_covs)

    @property
    def M(self) -> int:
        return self.component_covs[0][0].shape[0]

    @property
    def period(self) -> int:
        return common_period(self.weights.period, *(c.period for c in self.component_covs))

    def covariance(self, n):
        return sum(g * c[n] for g, c in zip(self.weights[n], self.component_covs))

    def fourth_moment_tensor(self, n):
        return sum(g * isserlis_tensor(c[n]) for g, c in zip(self.weights[n], self.component_covs))

    def b_matrix(self, n):
        return sum(g * gaussian_b_matrix(c[n]) for g, c in zip(self.weights[n], self.component_covs))

    def sample(self, n, rng, size=None):
        k = 1 if size is None else size
        labels = rng.choice(self.n_components, size=k, p=self.weights[n])
        x = np.empty((k, self.M), dtype=complex)
        for m, cov in enumerate(self.component_covs):
            idx = np.flatnonzero(labels == m)
            if idx.size:
                x[idx] = complex_gaussian(rng, cov[n], idx.size, self._roots[m][n % cov.period])
        return x[0] if size is None else x


@dataclass(frozen=True, eq=False)
class ModulatedModel(InputModel):
    """``x[n] = a[n] z[n]`` for a deterministic periodic real envelope ``a[n]``.

    Covariances scale by ``a^2``, fourth moments by ``a^4``.
    """

    base: InputModel
    envelope: PeriodicSequence

    def __post_init__(self):
        object.__setattr__(self, "envelope", _as_scalar_sequence(self.envelope))

    @property
    def M(self):
        return self.base.M

    @property
    def period(self):
        return common_period(self.base.period, self.envelope.period)

    def covariance(self, n):
        return self.envelope[n] ** 2 * self.base.covariance(n)

    def fourth_moment_tensor(self, n):
        return self.envelope[n] ** 4 * self.base.fourth_moment_tensor(n)

    def b_matrix(self, n):
        return self.envelope[n] ** 4 * self.base.b_matrix(n)

    def sample(self, n, rng, size=None):
        return self.envelope[n] * self.base.sample(n, rng, size)

    def sample_times(self, times, rng):
        times = np.asarray(times)
        env = np.asarray(self.envelope.values)[times % self.envelope.period]
        return env[:, None] * self.base.sample_times(times, rng)


@dataclass(frozen=True, eq=False)
class EmpiricalModel(InputModel):
    """Input model whose moments were estimated from samples.

    The fourth moments are stored in their ``M^2 x M^2`` arrangement
    ``b[n] = E{(xx^H)^T ⊗ xx^H}``; :meth:`fourth_moment_tensor` reshapes it.

    Attributes
    ----------
    cov, b : PeriodicSequence
        Estimated ``C_x[n]`` and ``B[n]``.
    cov_stderr, b_stderr : PeriodicSequence
        Entrywise standard errors of the estimates.
    n_draws : int
        Draws per phase used for the estimate.
    sampler : callable or None
        ``sampler(n, rng, size)`` for independent per-phase draws, if any.
    """

    cov: PeriodicSequence
    b: PeriodicSequence
    cov_stderr: PeriodicSequence
    b_stderr: PeriodicSequence
    n_draws: int
    sampler: Callable | None = None

    @property
    def M(self):
        return self.cov[0].shape[0]

    @property
    def period(self):
        return self.cov.period

    def covariance(self, n):
        return self.cov[n]

    def fourth_moment_tensor(self, n):
        return tensor_from_b_matrix(self.b[n])

    def b_matrix(self, n):
        return self.b[n]

    @property
    def has_sampler(self) -> bool:
        return self.sampler is not None

    def sample(self, n, rng, size=None):
        if self.sampler is None:
            raise RuntimeError("this empirical model carries no per-phase sampler")
        return self.sampler(n, rng, size)


class MomentAccumulator:
    """Streaming per-phase accumulator of second and fourth sample moments.

    Fed with blocks of shape ``(draws, period, M)``. Draws are centred by
    ``center`` (per-phase, shape ``(period, M)``) before accumulation; the
    optional desired-signal block of shape ``(draws, period)`` adds
    cross-correlation and power estimates, centred by ``d_center``.
    """

    def __init__(self, period, M, fourth=True, center=None, d_center=None):
        self.period, self.M, self.fourth = period, M, fourth
        self.center = np.zeros((period, M), complex) if center is None else np.asarray(center)
        self.d_center = np.zeros(period, complex) if d_center is None else np.asarray(d_center)
        self.count = 0
        self.has_d = False
        self.s2 = np.zeros((period, M, M), complex)
        self.s2abs = np.zeros((period, M, M))
        self.sxd = np.zeros((period, M), complex)
        self.sxdabs = np.zeros((period, M))
        self.sdd = np.zeros(period)
        if fourth:
            self.s4 = np.zeros((period, M * M, M * M), complex)
            self.s4abs = np.zeros((period, M * M, M * M))

    def add(self, x: np.ndarray, d: np.ndarray | None = None) -> None:
        self.count += x.shape[0]
        for k in range(self.period):
            xk = x[:, k, :] - self.center[k]
            outer = xk[:, :, None] * xk[:, None, :].conj()
            self.s2[k] += outer.sum(axis=0)
            self.s2abs[k] += (np.abs(outer) ** 2).sum(axis=0)
            if d is not None:
                self.has_d = True
                dk = d[:, k] - self.d_center[k]
                prod = xk * dk.conj()[:, None]
                self.sxd[k] += prod.sum(axis=0)
                self.sxdabs[k] += (np.abs(prod) ** 2).sum(axis=0)
                self.sdd[k] += np.sum(np.abs(dk) ** 2)
            if self.fourth:
                # u = vec(x x^H) = conj(x) ⊗ x, B = E{u u^H}
                u = (xk.conj()[:, :, None] * xk[:, None, :]).reshape(xk.shape[0], -1)
                self.s4[k] += u.T @ u.conj()
                ua = np.abs(u) ** 2
                self.s4abs[k] += ua.T @ ua

    def finalize(self) -> dict:
        """Per-phase estimates and entrywise standard errors."""
        n = self.count
        cov = self.s2 / n
        cov_var = np.clip(self.s2abs / n - np.abs(cov) ** 2, 0.0, None)
        cov = 0.5 * (cov + np.conj(np.swapaxes(cov, 1, 2)))
        out = {"cov": cov, "cov_stderr": np.sqrt(cov_var / n), "count": n}
        if self.fourth:
            b = self.s4 / n
            b_var = np.clip(self.s4abs / n - np.abs(b) ** 2, 0.0, None)
            out["b"] = 0.5 * (b + np.conj(np.swapaxes(b, 1, 2)))
            out["b_stderr"] = np.sqrt(b_var / n)
        if self.has_d:
            xd = self.sxd / n
            out["xd"] = xd
            out["xd_stderr"] = np.sqrt(np.clip(self.sxdabs / n - np.abs(xd) ** 2, 0.0, None) / n)
            out["dd"] = self.sdd / n
        return out


def _chunks(total, chunk):
    while total:
        k = min(chunk, total)
        yield k
        total -= k


def estimate_moments(
    sampler: Callable[[np.random.Generator, int], np.ndarray],
    period: int,
    M: int,
    n_draws_per_phase: int,
    rng: np.random.Generator,
    min_draws: int = MIN_DRAWS_PER_PHASE,
    chunk: int = 20_000,
    phase_sampler: Callable | None = None,
) -> EmpiricalModel:
    """Estimate per-phase covariance and fourth moments from draws.

    Two passes over the same random stream: the first estimates the
    per-phase mean, the second accumulates centred moments. ``sampler``
    must therefore be a deterministic function of the generator state.

    Parameters
    ----------
    sampler : callable
        ``sampler(rng, size)`` returning an array of shape ``(size, period, M)``.
    n_draws_per_phase : int
        Number of draws per phase, at least ``min_draws``.
    phase_sampler : callable, optional
        Per-phase sampler attached to the returned model.
    """
    if n_draws_per_phase < min_draws:
        raise ValueError(f"need at least {min_draws} draws per phase, got {n_draws_per_phase}")
    state = copy.deepcopy(rng.bit_generator.state)
    total = np.zeros((period, M), complex)
    for k in _chunks(n_draws_per_phase, chunk):
        x = np.asarray(sampler(rng, k))
        if x.shape != (k, period, M):
            raise DimensionError(f"sampler returned shape {x.shape}, expected {(k, period, M)}")
        total += x.sum(axis=0)
    end_state = rng.bit_generator.state
    rng.bit_generator.state = state
    acc = MomentAccumulator(period, M, center=total / n_draws_per_phase)
    for k in _chunks(n_draws_per_phase, chunk):
        acc.add(np.asarray(sampler(rng, k)))
    rng.bit_generator.state = end_state
    est = acc.finalize()
    return EmpiricalModel(
        cov=PeriodicSequence(list(est["cov"])),
        b=PeriodicSequence(list(est["b"])),
        cov_stderr=PeriodicSequence(list(est["cov_stderr"])),
        b_stderr=PeriodicSequence(list(est["b_stderr"])),
        n_draws=n_draws_per_phase,
        sampler=phase_sampler,
    )


def phase_block_sampler(model: InputModel, period: int | None = None):
    """Wrap a temporally independent model as an ``estimate_moments`` sampler."""
    n0 = period or model.period

    def sampler(rng, size):
        return np.stack([model.sample(n, rng, size) for n in range(n0)], axis=1)

    return sampler


def compute_ta_wiener(
    h_M: PeriodicSequence, model: InputModel, period: int | None = None
) -> tuple[np.ndarray, PeriodicSequence]:
    """Coefficients of the time-averaged Wiener filter and the deviation sequence.

    Solves ``mean_n(C_x[n]) h_o = mean_n(C_x[n] h_M[n])`` over one common
    period and returns ``(h_o, g)`` with ``g[n] = h_M[n] - h_o``.
    """
    n0 = period or common_period(h_M.period, model.period)
    covs = [model.covariance(n) for n in range(n0)]
    c_bar = sum(covs) / n0
    r_bar = sum(c @ h_M[n] for n, c in enumerate(covs)) / n0
    h_o = solve(c_bar, r_bar)
    g = PeriodicSequence([h_M[n] - h_o for n in range(n0)])
    return h_o, g


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """LPTV LMMSE filter, its error variance, and the derived TA-Wiener quantities."""

    h_M: PeriodicSequence
    sigma_v2: PeriodicSequence
    h_o: np.ndarray
    g: PeriodicSequence
    period: int = field(default=1)

    @classmethod
    def from_model(cls, h_M, sigma_v2, model: InputModel) -> "GroundTruth":
        h_M = h_M if isinstance(h_M, PeriodicSequence) else PeriodicSequence([np.asarray(h_M)])
        h_M = h_M.map(lambda h: np.asarray(h, dtype=complex))
        sigma_v2 = _as_scalar_sequence(sigma_v2)
        for n, s in enumerate(sigma_v2):
            if s < 0:
                raise ValueError(f"noise variance must be non-negative, got {s} at phase {n}")
        n0 = common_period(h_M.period, sigma_v2.period, model.period)
        h_o, g = compute_ta_wiener(h_M, model, n0)
        return cls(h_M=h_M, sigma_v2=sigma_v2, h_o=h_o, g=g, period=n0)


def soi_sample(gt: GroundTruth, x: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``d[n] = h_M[n]^H x + v`` for one vector or a ``(size, M)`` batch."""
    x = np.asarray(x)
    clean = x @ gt.h_M[n].conj()
    var = gt.sigma_v2[n]
    if var == 0.0:
        return clean
    shape = np.shape(clean)
    v = np.sqrt(var / 2.0) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    return clean + v
