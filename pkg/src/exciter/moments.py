"""Stability diagnostics and moment curves of the linear model with homogeneous marks.

With ``J = diag(E Y_k)`` and ``M = A + B J`` the mean intensity solves
``y' = M y - A lambda0`` and the second moment ``V = E[lambda lambda^T]`` solves

    V' = V M^T + M V + F(y),
    F(y) = -y lambda0^T A^T - A lambda0 y^T + B diag(y_k E Y_k^2) B^T.

The process is stable when every eigenvalue of ``M + M^T`` is negative.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import IntegrationError, StabilityError, UnsupportedConfigurationError
from .model import mark_moment
from .numerics import mat_exp, rk4_integrate, solve_lyapunov, sym_eigenvalues

SINGULAR_COND = 1e12


@dataclass
class StabilityReport:
    M: np.ndarray
    gamma: np.ndarray
    stable: bool
    stationary_mean: np.ndarray | None
    J_diag: np.ndarray

    @property
    def gamma_max(self):
        return float(self.gamma[-1])

    def to_dict(self):
        return {
            "M": self.M.tolist(),
            "gamma": self.gamma.tolist(),
            "gamma_max": self.gamma_max,
            "stable": self.stable,
            "stationary_mean": None if self.stationary_mean is None else self.stationary_mean.tolist(),
            "J_diag": self.J_diag.tolist(),
        }


@dataclass
class MomentCurve:
    grid: np.ndarray
    y: np.ndarray   # (n, d)
    V: np.ndarray   # (n, d, d)
    C0: np.ndarray  # (n, d, d)


def _require_closed_form(spec):
    if spec.nonlinear:
        raise UnsupportedConfigurationError(
            "moment formulas need the linear drift; use estimate.stability_surrogate for exp-regime models")
    if not spec.homogeneous_marks:
        raise UnsupportedConfigurationError(
            "moment formulas need intensity-independent marks; use estimate.stability_surrogate "
            "for intensity-dependent mark laws")


def mark_moments(spec, lam_ref=None, order=1):
    lam_ref = spec.lambda0 if lam_ref is None else np.asarray(lam_ref, dtype=float)
    return np.array([mark_moment(m, lam_ref, order) for m in spec.marks])


def excitation_matrix(spec, lam_ref=None):
    """``M = A + B J`` with ``J`` the first mark moments at ``lam_ref`` (default ``lambda0``)."""
    J = mark_moments(spec, lam_ref, 1)
    return spec.A + spec.B * J[None, :], J


def _stationary_mean(M, A, lam0):
    if np.linalg.cond(M) > SINGULAR_COND:
        return None
    return np.linalg.solve(M, A @ lam0)


def stability_report(spec):
    """Stability verdict from the eigenvalues of ``M + M^T``."""
    _require_closed_form(spec)
    M, J = excitation_matrix(spec)
    gamma = sym_eigenvalues(M + M.T)
    stable = bool(gamma[-1] < 0)
    mean = _stationary_mean(M, spec.A, spec.lambda0) if stable else None
    return StabilityReport(M, gamma, stable, mean, J)


def require_stable(spec):
    rep = stability_report(spec)
    if not rep.stable:
        raise StabilityError(f"model is unstable: largest eigenvalue of M + M^T is {rep.gamma_max:.6g}",
                             rep.gamma_max)
    return rep


def stationary_mean(spec):
    rep = require_stable(spec)
    if rep.stationary_mean is None:
        raise StabilityError("M is singular; no stationary mean", rep.gamma_max)
    return rep.stationary_mean


def _grid(grid):
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if np.any(grid < 0) or np.any(np.diff(grid) < 0):
        raise ValueError("grid must be non-negative and non-decreasing")
    return grid


def mean_curve(spec, lambda_init=None, grid=(0.0,), steps_per_unit=200):
    """``E[lambda(t)]`` on ``grid`` starting from ``lambda_init`` (default ``lambda0``).

    Uses the closed form ``m + exp(tM)(lambda - m)`` with ``m = M^{-1} A lambda0``,
    or RK4 on ``y' = M y - A lambda0`` when ``M`` is numerically singular.
    """
    _require_closed_form(spec)
    grid = _grid(grid)
    lam = spec.lambda0 if lambda_init is None else np.asarray(lambda_init, dtype=float)
    M, _ = excitation_matrix(spec)
    m = _stationary_mean(M, spec.A, spec.lambda0)
    if m is not None:
        return np.array([m + mat_exp(M, t) @ (lam - m) for t in grid])
    forcing = spec.A @ spec.lambda0
    out = []
    y, t_prev = np.array(lam, dtype=float), 0.0
    for t in grid:
        steps = max(1, int(np.ceil((t - t_prev) * steps_per_unit)))
        y = rk4_integrate(lambda _t, z: M @ z - forcing, y, t_prev, t, steps, estimate_error=False).y
        out.append(y)
        t_prev = t
    return np.array(out)


def forcing_matrix(spec, y):
    """``F(y)`` of the second-moment equation."""
    J2 = mark_moments(spec, None, 2)
    Al0 = spec.A @ spec.lambda0
    return -np.outer(y, Al0) - np.outer(Al0, y) + spec.B @ np.diag(y * J2) @ spec.B.T


def second_moment_curve(spec, lambda_init=None, grid=(0.0,), steps_per_unit=100):
    """``V(t) = E[lambda(t) lambda(t)^T]`` on ``grid`` by RK4 on the joint (y, V) system."""
    _require_closed_form(spec)
    grid = _grid(grid)
    d = spec.d
    lam = spec.lambda0 if lambda_init is None else np.asarray(lambda_init, dtype=float)
    M, _ = excitation_matrix(spec)
    Al0 = spec.A @ spec.lambda0

    def field(_t, z):
        y = z[:d]
        V = z[d:].reshape(d, d)
        dV = V @ M.T + M @ V + forcing_matrix(spec, y)
        return np.concatenate([M @ y - Al0, dV.ravel()])

    z = np.concatenate([lam, np.outer(lam, lam).ravel()])
    t_prev = 0.0
    out = []
    for t in grid:
        steps = max(1, int(np.ceil((t - t_prev) * steps_per_unit)))
        try:
            z = rk4_integrate(field, z, t_prev, t, steps, estimate_error=False).y
        except IntegrationError as exc:
            gmax = sym_eigenvalues(M + M.T)[-1]
            raise IntegrationError(f"second moment blew up (gamma_max={gmax:.6g}): {exc}",
                                   time=exc.time) from exc
        V = z[d:].reshape(d, d)
        out.append(0.5 * (V + V.T))
        t_prev = t
    return np.array(out)


def moment_curve(spec, lambda_init=None, grid=(0.0,), steps_per_unit=100):
    y = mean_curve(spec, lambda_init, grid)
    V = second_moment_curve(spec, lambda_init, grid, steps_per_unit)
    C0 = V - np.einsum("ni,nj->nij", y, y)
    return MomentCurve(_grid(grid), y, V, C0)


def stationary_second_moment(spec):
    """``lim V(t)``: solves ``M V + V M^T + F(m) = 0`` at the stationary mean ``m``."""
    m = stationary_mean(spec)
    M, _ = excitation_matrix(spec)
    return solve_lyapunov(M, forcing_matrix(spec, m))


def autocovariance(spec, lambda_init=None, t=0.0, h=0.0, steps_per_unit=100):
    """``Cov(lambda(t + h), lambda(t))`` given ``lambda(0) = lambda_init``.

    ``exp(hM) (V(t) - exp(tM) lambda y(t)^T + (exp(tM) - I) M^{-1} A lambda0 y(t)^T)``
    """
    _require_closed_form(spec)
    lam = spec.lambda0 if lambda_init is None else np.asarray(lambda_init, dtype=float)
    M, _ = excitation_matrix(spec)
    y = mean_curve(spec, lam, [t])[0]
    V = second_moment_curve(spec, lam, [t], steps_per_unit)[0]
    Et = mat_exp(M, t)
    m = _stationary_mean(M, spec.A, spec.lambda0)
    if m is None:
        inner = V - np.outer(y, y)
    else:
        inner = V - np.outer(Et @ lam, y) + np.outer((Et - np.eye(spec.d)) @ m, y)
    return mat_exp(M, h) @ inner


def autocovariance_stationary(spec, h=0.0):
    """``exp(hM) (V_inf - m m^T)`` for the stationary process."""
    m = stationary_mean(spec)
    M, _ = excitation_matrix(spec)
    Vinf = stationary_second_moment(spec)
    return mat_exp(M, h) @ (Vinf - np.outer(m, m))


def autocovariance_curve(spec, lambda_init=None, grid=(0.0,), h=0.0, steps_per_unit=100):
    """``C(t, h)`` for every ``t`` in ``grid`` from a single pass of the moment ODE."""
    _require_closed_form(spec)
    lam = spec.lambda0 if lambda_init is None else np.asarray(lambda_init, dtype=float)
    curve = moment_curve(spec, lam, grid, steps_per_unit)
    M, _ = excitation_matrix(spec)
    Eh = mat_exp(M, h)
    m = _stationary_mean(M, spec.A, spec.lambda0)
    out = []
    for t, y, V, C0 in zip(curve.grid, curve.y, curve.V, curve.C0):
        if m is None:
            inner = C0
        else:
            Et = mat_exp(M, t)
            inner = V - np.outer(Et @ lam, y) + np.outer((Et - np.eye(spec.d)) @ m, y)
        out.append(Eh @ inner)
    return curve, np.array(out)
