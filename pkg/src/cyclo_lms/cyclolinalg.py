"""Dense complex linear-algebra kernels.

Vectorization is column-major throughout, so that

    vec(A1 @ A2 @ A3) == kron(A3.T, A1) @ vec(A2)

holds exactly. Every weighted norm, moment matrix and dual recursion in the
package relies on that orientation.
"""

from __future__ import annotations

import math
from typing import Callable, Generic, Iterator, Sequence, TypeVar

import numpy as np

T = TypeVar("T")

# Relative residual accepted by ``solve``.
SOLVE_RTOL = 1e-8
# Condition number above which ``solve`` refuses.
MAX_CONDITION = 1e13


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericalError(ArithmeticError):
    """A numerical kernel failed or produced an inconsistent result."""


class SolverError(NumericalError):
    """Linear system is singular or too ill-conditioned to trust.

    Attributes
    ----------
    condition : float
        Estimated 2-norm condition number of the system matrix.
    """

    def __init__(self, message: str, condition: float):
        super().__init__(f"{message} (condition number ~ {condition:.3e})")
        self.condition = condition


class PeriodicSequence(Generic[T]):
    """An ``N0``-periodic sequence indexed by any non-negative time index.

    ``seq[n]`` returns ``values[n % period]``. Iteration and ``len`` cover a
    single period.
    """

    __slots__ = ("_values",)

    def __init__(self, values: Sequence[T]):
        values = tuple(values)
        if not values:
            raise ValueError("a periodic sequence needs at least one value")
        self._values = values

    @classmethod
    def constant(cls, value: T) -> "PeriodicSequence[T]":
        return cls([value])

    @classmethod
    def from_function(cls, fn: Callable[[int], T], period: int) -> "PeriodicSequence[T]":
        return cls([fn(n) for n in range(period)])

    @property
    def period(self) -> int:
        return len(self._values)

    @property
    def values(self) -> tuple:
        return self._values

    def __getitem__(self, n: int) -> T:
        return self._values[int(n) % len(self._values)]

    def __len__(self) -> int:
        return len(self._values)

    def __iter__(self) -> Iterator[T]:
        return iter(self._values)

    def map(self, fn: Callable[[T], object]) -> "PeriodicSequence":
        return PeriodicSequence([fn(v) for v in self._values])

    def unrolled(self, period: int) -> "PeriodicSequence[T]":
        """Re-express the sequence over a multiple of its own period."""
        if period % self.period:
            raise DimensionError(
                f"period {period} is not a multiple of {self.period}"
            )
        return PeriodicSequence([self[n] for n in range(period)])

    def __repr__(self) -> str:
        return f"PeriodicSequence(period={self.period})"


def common_period(*periods: int) -> int:
    """Least common multiple of the constituent periods."""
    return math.lcm(*(int(p) for p in periods))


def kron(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Kronecker product, ``(a ⊗ b)[i*p + r, j*q + s] = a[i, j] * b[r, s]``."""
    return np.kron(np.atleast_2d(a), np.atleast_2d(b))


def vec(x: np.ndarray) -> np.ndarray:
    """Stack the columns of a matrix into a vector."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise DimensionError(f"vec expects a matrix, got shape {x.shape}")
    return x.reshape(-1, order="F")


def unvec(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`vec` for square matrices."""
    x = np.asarray(x).reshape(-1)
    n = math.isqrt(x.size)
    if n * n != x.size:
        raise DimensionError(f"length {x.size} is not a perfect square")
    return x.reshape(n, n, order="F")


def weighted_sq_norm(y: np.ndarray, q: np.ndarray) -> complex:
    """Weighted squared norm ``y^H unvec(q) y``.

    The result is returned as a complex scalar. It is real when
    ``unvec(q)`` is Hermitian; callers decide how to treat the residue.
    """
    y = np.asarray(y).reshape(-1)
    q = np.asarray(q).reshape(-1)
    if q.size != y.size**2:
        raise DimensionError(f"weight of length {q.size} does not match vector of length {y.size}")
    return complex(y.conj() @ unvec(q) @ y)


def _eigvals(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericalError("matrix has non-finite entries")
    try:
        return np.linalg.eigvals(x)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigenvalue computation failed: {exc}") from exc


def spectral_radius(x: np.ndarray) -> float:
    """Largest eigenvalue modulus."""
    return float(np.max(np.abs(_eigvals(x))))


def real_eigenvalues(x: np.ndarray) -> np.ndarray:
    """Eigenvalues whose imaginary part is below ``1e-9 * (1 + rho(x))``."""
    lam = _eigvals(x)
    tol = 1e-9 * (1.0 + np.max(np.abs(lam)))
    return np.sort(lam[np.abs(lam.imag) <= tol].real)


def max_real_eig(x: np.ndarray) -> float | None:
    """Largest real eigenvalue, or ``None`` when ``x`` has none."""
    lam = real_eigenvalues(x)
    return float(lam[-1]) if lam.size else None


def min_real_eig(x: np.ndarray) -> float | None:
    """Smallest real eigenvalue, or ``None`` when ``x`` has none."""
    lam = real_eigenvalues(x)
    return float(lam[0]) if lam.size else None


def periodic_product(seq: PeriodicSequence, k1: int, k2: int) -> np.ndarray:
    """Ordered product ``S[N0-1+k2] @ ... @ S[k1+1] @ S[k1]``.

    Factors are taken at ``l mod N0`` for ``l = k1, ..., N0 - 1 + k2``; later
    indices multiply from the left. An empty range gives the identity.
    """
    n = np.asarray(seq[0]).shape[0]
    out = np.eye(n, dtype=complex)
    for l in range(k1, seq.period + k2):
        factor = np.asarray(seq[l])
        if factor.shape != (n, n):
            raise DimensionError(
                f"factor at index {l} has shape {factor.shape}, expected {(n, n)}"
            )
        out = factor @ out
    return out


def solve(a: np.ndarray, b: np.ndarray, max_condition: float = MAX_CONDITION) -> np.ndarray:
    """Solve ``a @ x = b`` with a conditioning and residual check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] != b.shape[0]:
        raise DimensionError(f"cannot solve system with shapes {a.shape} and {b.shape}")
    cond = float(np.linalg.cond(a))
    if not np.isfinite(cond) or cond > max_condition:
        raise SolverError("system matrix is singular or ill-conditioned", cond)
    try:
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"solve failed: {exc}", cond) from exc
    resid = np.linalg.norm(a @ x - b)
    if resid > SOLVE_RTOL * max(np.linalg.norm(b), np.finfo(float).tiny) + 1e-300:
        raise SolverError(f"residual {resid:.3e} exceeds tolerance", cond)
    return x
