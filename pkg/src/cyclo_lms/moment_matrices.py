"""Per-phase ``M^2 x M^2`` analysis matrices of the LMS second-order recursion.

For ``R = I - mu x x^H`` and any ``M x M`` matrix ``Q``::

    vec(E{x x^H Q x x^H}) = B[n] vec(Q)
    vec(E{R Q R})         = F[n] vec(Q)   with F = I - mu A + mu^2 B
    vec(E{R Q x x^H})     = P[n] vec(Q)   with P = C_x^T ⊗ I - mu B

where ``A = C_x^T ⊗ I + I ⊗ C_x`` and ``B = E{(xx^H)^T ⊗ xx^H}``. All four
matrices are Hermitian, so ``F^T = conj(F)`` and likewise for ``P`` and ``B``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from cyclo_lms.cyclolinalg import PeriodicSequence, vec
from cyclo_lms.signal_models import InputModel, b_matrix_from_tensor

B_METHODS = ("closed", "tensor")


def build_B(model: InputModel, n: int, method: str = "closed") -> np.ndarray:
    """Fourth-moment matrix ``E{(xx^H)^T ⊗ xx^H}`` at phase ``n``.

    ``method="closed"`` uses the model's closed form where it has one;
    ``"tensor"`` rearranges the full fourth-moment tensor.
    """
    if method == "closed":
        return np.asarray(model.b_matrix(n), dtype=complex)
    if method == "tensor":
        return b_matrix_from_tensor(model.fourth_moment_tensor(n))
    raise ValueError(f"unknown B method {method!r}, expected one of {B_METHODS}")


def build_A(model: InputModel, n: int) -> np.ndarray:
    c = np.asarray(model.covariance(n), dtype=complex)
    eye = np.eye(c.shape[0])
    return np.kron(c.T, eye) + np.kron(eye, c)


def build_F(model: InputModel, n: int, mu: float, b: np.ndarray | None = None) -> np.ndarray:
    _check_mu(mu)
    a = build_A(model, n)
    b = build_B(model, n) if b is None else b
    return np.eye(a.shape[0]) - mu * a + mu * mu * b


def build_P(model: InputModel, n: int, mu: float, b: np.ndarray | None = None) -> np.ndarray:
    _check_mu(mu)
    c = np.asarray(model.covariance(n), dtype=complex)
    b = build_B(model, n) if b is None else b
    return np.kron(c.T, np.eye(c.shape[0])) - mu * b


def build_H(model: InputModel, n: int, b: np.ndarray | None = None) -> np.ndarray:
    """Companion-type ``2M^2 x 2M^2`` matrix ``0.5 [[A, -B], [2I, 0]]``."""
    a = build_A(model, n)
    b = build_B(model, n) if b is None else b
    return _h_from(a, b)


def _h_from(a, b):
    k = a.shape[0]
    return 0.5 * np.block([[a, -b], [2.0 * np.eye(k), np.zeros((k, k))]])


def _check_mu(mu):
    if not mu > 0:
        raise ValueError(f"step size must be positive, got {mu}")


@dataclass(frozen=True, eq=False)
class MomentMatrixSet:
    """Cached per-phase matrices for one model and step size.

    Attributes
    ----------
    mu : float
    C : PeriodicSequence
        Input covariances ``C_x[n]``.
    c_x : PeriodicSequence
        ``vec(C_x[n])``.
    A, B, F, P, H : PeriodicSequence
    """

    mu: float
    C: PeriodicSequence
    c_x: PeriodicSequence
    A: PeriodicSequence
    B: PeriodicSequence
    F: PeriodicSequence
    P: PeriodicSequence
    H: PeriodicSequence

    @property
    def period(self) -> int:
        return self.C.period

    @property
    def M(self) -> int:
        return self.C[0].shape[0]

    def with_mu(self, mu: float) -> "MomentMatrixSet":
        """Same model at a different step size; ``A``, ``B`` and ``H`` are reused."""
        _check_mu(mu)
        f, p = _mu_dependent(self.C, self.A, self.B, mu)
        return replace(self, mu=float(mu), F=f, P=p)


def _mu_dependent(C, A, B, mu):
    f, p = [], []
    for c, a, b in zip(C, A, B):
        eye_m = np.eye(c.shape[0])
        f.append(np.eye(a.shape[0]) - mu * a + mu * mu * b)
        p.append(np.kron(c.T, eye_m) - mu * b)
    return PeriodicSequence(f), PeriodicSequence(p)


def build_moment_matrices(
    model: InputModel, mu: float, period: int | None = None, b_method: str = "closed"
) -> MomentMatrixSet:
    """Precompute every per-phase matrix over one period of ``model``."""
    _check_mu(mu)
    n0 = period or model.period
    C, A, B, H = [], [], [], []
    for n in range(n0):
        c = np.asarray(model.covariance(n), dtype=complex)
        b = build_B(model, n, b_method)
        a = build_A(model, n)
        C.append(c)
        A.append(a)
        B.append(b)
        H.append(_h_from(a, b))
    C, A, B = PeriodicSequence(C), PeriodicSequence(A), PeriodicSequence(B)
    F, P = _mu_dependent(C, A, B, mu)
    return MomentMatrixSet(
        mu=float(mu),
        C=C,
        c_x=C.map(vec),
        A=A,
        B=B,
        F=F,
        P=P,
        H=PeriodicSequence(H),
    )
