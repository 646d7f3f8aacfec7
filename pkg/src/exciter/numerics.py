"""Dense linear-algebra and ODE kernels.

Everything here works on small dense matrices (the models use d <= 8).
The matrix exponential is the Higham (2005) scaling-and-squaring Padé
scheme, compiled with numba so the simulator and likelihood kernels can
call it from inside their own jitted loops.
"""
from __future__ import annotations

from typing import Callable, NamedTuple

import numba as nb
import numpy as np

from .errors import DimensionError, DomainError, IntegrationError, StabilityError

MAX_DIM = 8
SYMMETRY_TOL = 1e-10

# Padé coefficients b_0..b_m for each degree, and the 1-norm bound up to which
# that degree reaches unit roundoff without scaling.
_PADE3 = np.array([120.0, 60.0, 12.0, 1.0])
_PADE5 = np.array([30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0])
_PADE7 = np.array([17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0,
                   1512.0, 56.0, 1.0])
_PADE9 = np.array([17643225600.0, 8821612800.0, 2075673600.0, 302702400.0,
                   30270240.0, 2162160.0, 110880.0, 3960.0, 90.0, 1.0])
_PADE13 = np.array([64764752532480000.0, 32382376266240000.0,
                    7771770303897600.0, 1187353796428800.0,
                    129060195264000.0, 10559470521600.0, 670442572800.0,
                    33522128640.0, 1323241920.0, 40840800.0, 960960.0,
                    16380.0, 182.0, 1.0])
_THETA3 = 1.495585217958292e-2
_THETA5 = 2.539398330063230e-1
_THETA7 = 9.504178996162932e-1
_THETA9 = 2.097847961257068
_THETA13 = 5.371920351148152


@nb.njit(cache=True)
def _onenorm(A):
    n, m = A.shape
    best = 0.0
    for j in range(m):
        s = 0.0
        for i in range(n):
            s += abs(A[i, j])
        if s > best:
            best = s
    return best


@nb.njit(cache=True)
def _pade_low(X, b):
    # U = X * sum(b_odd X^2k), V = sum(b_even X^2k) for degree len(b)-1 <= 9
    n = X.shape[0]
    X2 = X @ X
    P = np.eye(n)
    U = b[1] * np.eye(n)
    V = b[0] * np.eye(n)
    m = b.size - 1
    for k in range(1, m // 2 + 1):
        P = P @ X2
        V += b[2 * k] * P
        U += b[2 * k + 1] * P
    return np.ascontiguousarray(X @ U), V


@nb.njit(cache=True)
def _pade13(X):
    b = _PADE13
    n = X.shape[0]
    ident = np.eye(n)
    X2 = X @ X
    X4 = X2 @ X2
    X6 = X4 @ X2
    W1 = b[13] * X6 + b[11] * X4 + b[9] * X2
    W2 = b[7] * X6 + b[5] * X4 + b[3] * X2 + b[1] * ident
    Z1 = b[12] * X6 + b[10] * X4 + b[8] * X2
    Z2 = b[6] * X6 + b[4] * X4 + b[2] * X2 + b[0] * ident
    U = X @ (X6 @ W1 + W2)
    V = X6 @ Z1 + Z2
    return U, V


@nb.njit(cache=True)
def expm_kernel(A):
    """exp(A) for a finite square float64 array (no validation)."""
    A = np.ascontiguousarray(A)
    norm = _onenorm(A)
    squarings = 0
    if norm <= _THETA3:
        U, V = _pade_low(A, _PADE3)
    elif norm <= _THETA5:
        U, V = _pade_low(A, _PADE5)
    elif norm <= _THETA7:
        U, V = _pade_low(A, _PADE7)
    elif norm <= _THETA9:
        U, V = _pade_low(A, _PADE9)
    else:
        if norm > _THETA13:
            squarings = int(np.ceil(np.log2(norm / _THETA13)))
        X = A / (2.0 ** squarings)
        U, V = _pade13(X)
    R = np.ascontiguousarray(np.linalg.solve(V - U, V + U))
    for _ in range(squarings):
        R = R @ R
    return R


@nb.njit(cache=True)
def expm_phi_kernel(A, dt):
    """Return (exp(A dt), int_0^dt exp(A s) ds) from one augmented exponential."""
    n = A.shape[0]
    Z = np.zeros((2 * n, 2 * n))
    for i in range(n):
        for j in range(n):
            Z[i, j] = A[i, j] * dt
        Z[i, n + i] = dt
    R = expm_kernel(Z)
    return np.ascontiguousarray(R[:n, :n]), np.ascontiguousarray(R[:n, n:])


@nb.njit(cache=True)
def expm_phi_batch(A, dts):
    n = A.shape[0]
    m = dts.size
    E = np.empty((m, n, n))
    Phi = np.empty((m, n, n))
    for i in range(m):
        e, p = expm_phi_kernel(A, dts[i])
        E[i] = e
        Phi[i] = p
    return E, Phi


def _as_square(A, name="A"):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"{name} must be a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise DomainError(f"{name} has non-finite entries")
    return np.ascontiguousarray(A)


def mat_exp(A, t=1.0):
    """Matrix exponential ``exp(t A)``.

    Parameters
    ----------
    A : array_like, shape (d, d)
    t : float
        Time multiplier.

    Returns
    -------
    ndarray, shape (d, d)
    """
    A = _as_square(A)
    t = float(t)
    if not np.isfinite(t):
        raise DomainError(f"t must be finite, got {t}")
    return expm_kernel(A * t)


def int_exp(A, delta):
    """Integrated exponential ``int_0^delta exp(A s) ds``.

    Computed from the exponential of the block matrix ``[[A, I], [0, 0]]`` so
    that singular ``A`` needs no special case.
    """
    A = _as_square(A)
    delta = float(delta)
    if not np.isfinite(delta) or delta < 0:
        raise DomainError(f"delta must be finite and >= 0, got {delta}")
    return expm_phi_kernel(A, delta)[1]


def sym_eigenvalues(S, tol=SYMMETRY_TOL):
    """Ascending eigenvalues of a symmetric matrix.

    The input is symmetrized as ``(S + S.T) / 2`` after checking that the
    asymmetry is below ``tol`` relative to ``max(1, max|S|)``.
    """
    S = _as_square(S, "S")
    scale = max(1.0, float(np.max(np.abs(S))) if S.size else 1.0)
    asym = float(np.max(np.abs(S - S.T))) if S.size else 0.0
    if asym > tol * scale:
        raise DomainError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    return np.linalg.eigvalsh(0.5 * (S + S.T))


def solve_lyapunov(M, Q):
    """Solve ``M X + X M^T + Q = 0`` for symmetric ``X``.

    Uses the Kronecker-sum form ``(I (x) M + M (x) I) vec(X) = -vec(Q)``,
    which is fine for the small dimensions used here.

    Raises
    ------
    StabilityError
        If ``M + M^T`` is not negative definite or the Kronecker sum is singular.
    """
    M = _as_square(M, "M")
    Q = _as_square(Q, "Q")
    if M.shape != Q.shape:
        raise DimensionError(f"M {M.shape} and Q {Q.shape} differ in shape")
    gamma = sym_eigenvalues(M + M.T)
    if gamma[-1] >= 0:
        raise StabilityError(
            f"M + M^T has a non-negative eigenvalue ({gamma[-1]:.6g})", gamma[-1])
    Q = 0.5 * (Q + Q.T)
    d = M.shape[0]
    ident = np.eye(d)
    K = np.kron(ident, M) + np.kron(M, ident)
    try:
        x = np.linalg.solve(K, -Q.reshape(-1, order="F"))
    except np.linalg.LinAlgError as exc:
        raise StabilityError(f"singular Kronecker sum: {exc}", gamma[-1]) from exc
    X = x.reshape(d, d, order="F")
    return 0.5 * (X + X.T)


class RK4Result(NamedTuple):
    y: np.ndarray
    error: float


def _rk4_run(f, y, t0, h, steps):
    with np.errstate(over="ignore", invalid="ignore"):
        return _rk4_steps(f, y, t0, h, steps)


def _rk4_steps(f, y, t0, h, steps):
    t = t0
    for i in range(steps):
        k1 = f(t, y)
        k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = f(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        t = t0 + (i + 1) * h
        if not np.all(np.isfinite(y)):
            raise IntegrationError(f"non-finite state at t={t:.6g}", time=t)
    return y


def rk4_integrate(f: Callable, y0, t0, t1, steps, estimate_error=True) -> RK4Result:
    """Fixed-step classical Runge-Kutta from ``t0`` to ``t1``.

    Parameters
    ----------
    f : callable
        Vector field ``f(t, y) -> dy/dt``.
    y0 : array_like
    t0, t1 : float
        ``t1 >= t0``.
    steps : int
        Number of steps; ``h = (t1 - t0) / steps``.
    estimate_error : bool
        Also run with ``2 * steps`` and report the max-norm difference.

    Returns
    -------
    RK4Result
        ``y`` at ``t1`` (from the ``steps`` run) and the step-halving error
        estimate (0.0 when not requested).
    """
    y0 = np.array(y0, dtype=float)
    if t1 < t0:
        raise DomainError(f"t1={t1} precedes t0={t0}")
    steps = int(steps)
    if steps < 1:
        raise DomainError("steps must be a positive integer")
    if t1 == t0:
        return RK4Result(y0, 0.0)
    h = (t1 - t0) / steps
    y = _rk4_run(f, y0, t0, h, steps)
    err = 0.0
    if estimate_error:
        y2 = _rk4_run(f, y0, t0, h / 2.0, 2 * steps)
        err = float(np.max(np.abs(y2 - y)))
    return RK4Result(y, err)
