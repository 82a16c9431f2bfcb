"""LMS filter and seeded Monte Carlo harness.

Every trial draws its data from its own counter-based stream derived from
``(base_seed, trial_index)``, so results do not depend on batching or on
the number of worker threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from cyclo_lms.cyclolinalg import NumericalError

# Squared coefficient norm above which a trial is declared diverged.
DIVERGENCE_NORM2 = 1e12
DEFAULT_SETTLE_FRACTION = 0.8
# Budget for one batch of trajectories, in bytes.
DEFAULT_MEMORY_BUDGET = 256 * 2**20
THREADS_ENV = "CYCLO_LMS_THREADS"


class AllDivergedError(NumericalError):
    """Every Monte Carlo trial diverged."""


@dataclass
class LmsState:
    h: np.ndarray
    mu: float
    diverged: bool = False


def lms_step(state: LmsState, x: np.ndarray, d: complex) -> tuple[LmsState, complex]:
    """One LMS update; returns the new state and the a-priori error."""
    e = d - np.vdot(state.h, x)
    h = state.h + state.mu * x * np.conj(e)
    diverged = state.diverged or not np.all(np.isfinite(h)) or np.vdot(h, h).real > DIVERGENCE_NORM2
    return LmsState(h=h, mu=state.mu, diverged=diverged), e


@dataclass
class EmpiricalCurve:
    """Trial-averaged squared error.

    Attributes
    ----------
    horizon, n_trials : int
    mse : ndarray
        Mean of ``|e[n]|^2`` over the trials that did not diverge.
    stderr : ndarray
        Standard error of ``mse``.
    n_diverged : int
    diverged : ndarray of bool
        Per-trial divergence flags.
    """

    horizon: int
    n_trials: int
    mse: np.ndarray
    stderr: np.ndarray
    n_diverged: int
    diverged: np.ndarray = field(repr=False)


def trial_rng(base_seed: int, trial: int) -> np.random.Generator:
    """Independent Philox stream for one trial."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(base_seed, spawn_key=(trial,))))


def _run_batch(scenario, mu, horizon, base_seed, trials, h0):
    """Squared errors ``(len(trials), horizon)`` and divergence flags; NaN after divergence."""
    b = len(trials)
    M = scenario.M
    x = np.empty((b, horizon, M), complex)
    d = np.empty((b, horizon), complex)
    for i, t in enumerate(trials):
        x[i], d[i] = scenario.trajectory(trial_rng(base_seed, t), horizon)
    h = np.tile(np.asarray(h0, dtype=complex), (b, 1))
    err2 = np.empty((b, horizon))
    stop = np.full(b, horizon)
    alive = np.ones(b, dtype=bool)
    # Diverging trials may overflow within one step before the guard sees them.
    with np.errstate(over="ignore", invalid="ignore"):
        _lms_loop(x, d, h, mu, err2, stop, alive)
    err2[np.arange(horizon)[None, :] >= stop[:, None]] = np.nan
    return err2, ~alive


def _lms_loop(x, d, h, mu, err2, stop, alive):
    for n in range(x.shape[1]):
        xn = x[:, n]
        e = d[:, n] - (h.conj() * xn).sum(axis=1)
        err2[:, n] = e.real**2 + e.imag**2
        h += mu * xn * e.conj()[:, None]
        norm2 = (h.real**2 + h.imag**2).sum(axis=1)
        bad = alive & ~(norm2 <= DIVERGENCE_NORM2)
        if bad.any():
            alive &= ~bad
            stop[bad] = n + 1
            h[bad] = 0.0


def _thread_count(requested: int | None) -> int:
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
    return 1


def run_trial_errors(scenario, mu, horizon, base_seed, n_trials, h0=None, threads=None,
                     memory_budget=DEFAULT_MEMORY_BUDGET):
    """Per-trial squared-error traces ``(n_trials, horizon)`` and divergence flags."""
    if n_trials < 1:
        raise ValueError(f"n_trials must be at least 1, got {n_trials}")
    if horizon < 1:
        raise ValueError(f"horizon must be at least 1, got {horizon}")
    h0 = scenario.h0 if h0 is None else h0
    per_trial = horizon * (scenario.M + 2) * 16
    batch = int(max(1, min(n_trials, memory_budget // per_trial)))
    batches = [list(range(s, min(s + batch, n_trials))) for s in range(0, n_trials, batch)]
    work = lambda tr: _run_batch(scenario, mu, horizon, base_seed, tr, h0)
    workers = min(_thread_count(threads), len(batches))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, batches))
    else:
        results = [work(tr) for tr in batches]
    err2 = np.concatenate([r[0] for r in results])
    diverged = np.concatenate([r[1] for r in results])
    return err2, diverged


def run_trial(scenario, mu: float, horizon: int, seed: int, trial: int = 0, h0=None):
    """Squared-error trace of a single trial and its divergence flag."""
    err2, diverged = _run_batch(scenario, mu, horizon, seed, [trial], scenario.h0 if h0 is None else h0)
    return err2[0], bool(diverged[0])


def monte_carlo_mse(
    scenario,
    mu: float,
    horizon: int,
    n_trials: int,
    base_seed: int = 0,
    h0=None,
    threads: int | None = None,
    memory_budget: int = DEFAULT_MEMORY_BUDGET,
) -> EmpiricalCurve:
    """Trial-averaged learning curve with standard errors.

    Diverged trials are counted and excluded from the average.

    Raises
    ------
    AllDivergedError
        If no trial stays bounded.
    """
    err2, diverged = run_trial_errors(
        scenario, mu, horizon, base_seed, n_trials, h0, threads, memory_budget
    )
    kept = err2[~diverged]
    if kept.shape[0] == 0:
        raise AllDivergedError(f"all {n_trials} trials diverged at mu={mu}")
    mse = kept.mean(axis=0)
    if kept.shape[0] > 1:
        stderr = kept.std(axis=0, ddof=1) / np.sqrt(kept.shape[0])
    else:
        stderr = np.full(horizon, np.nan)
    return EmpiricalCurve(
        horizon=horizon,
        n_trials=n_trials,
        mse=mse,
        stderr=stderr,
        n_diverged=int(diverged.sum()),
        diverged=diverged,
    )


def empirical_steady_state(
    mse: np.ndarray, period: int, settle_fraction: float = DEFAULT_SETTLE_FRACTION
) -> tuple[np.ndarray, float]:
    """Per-phase averages of the post-settle part of a curve, and their mean.

    Phase ``k`` collects indices ``n`` with ``n % period == k``.
    """
    mse = np.asarray(getattr(mse, "mse", mse), dtype=float)
    if not 0.0 <= settle_fraction < 1.0:
        raise ValueError(f"settle_fraction must lie in [0, 1), got {settle_fraction}")
    start = int(np.ceil(settle_fraction * mse.size))
    if mse.size - start < 10 * period:
        raise ValueError(
            f"only {mse.size - start} post-settle samples, need at least {10 * period}"
        )
    idx = np.arange(start, mse.size)
    phases = np.array([mse[idx[idx % period == k]].mean() for k in range(period)])
    return phases, float(phases.mean())


def compare_curves(theory: np.ndarray, curve: EmpiricalCurve, n_stderr: float = 4.0) -> dict:
    """Agreement summary between a theoretical and an empirical curve."""
    theory = np.asarray(theory, dtype=float)
    diff = np.abs(curve.mse - theory)
    within = diff <= n_stderr * curve.stderr
    # Floor keeps the ratio finite on exactly-zero theory values.
    rel = diff / np.maximum(np.abs(theory), np.finfo(float).tiny)
    return {
        "pct_within_4stderr": float(100.0 * within.mean()),
        "max_rel_err": float(np.max(rel)),
        "n_diverged": curve.n_diverged,
    }
