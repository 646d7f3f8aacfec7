"""Maximum-likelihood fitting of variant masks.

The negative log-likelihood is minimized by Nelder-Mead with quadratic
penalties for instability (largest eigenvalue of ``M + M^T``), negative
baseline intensities and negative excitation coefficients. Several jittered
starts are run around a moment-based heuristic and the best is kept.
"""
from __future__ import annotations

import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .errors import ExciterError, FitError
from .likelihood import log_likelihood
from .model import VariantMask, default_marks, mark_moment, pack_params, unpack_params
from .moments import StabilityReport
from .numerics import sym_eigenvalues


class HessianWarning(RuntimeWarning):
    """The finite-difference Hessian was not positive definite."""


def worker_count():
    try:
        return max(1, int(os.environ.get("EXCITER_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class OptimizerSettings:
    """Nelder-Mead and multistart controls.

    ``tol`` is the absolute change in objective at which the simplex stops;
    ``xtol`` is the matching vertex spread, kept loose so that flat ridges do
    not hold the simplex after the objective has settled;
    ``restarts`` is the total number of starts, the first being the heuristic
    point itself. For the exp-regime drift the simplex works on a coarser RK4
    grid, the smallest doubling from one step per unit whose log-likelihood
    moves by less than ``objective_tol`` (capped at ``steps_per_unit``); the
    reported log-likelihood always uses ``steps_per_unit`` with refinement.
    Exp-regime drifts whose rate bound (see :func:`drift_rate`) exceeds
    ``rate_resolution`` over the smallest inter-event gap are outside the
    domain: such dynamics are not resolved by the event times. Exp-regime
    fits also screen their starts: each gets ``screen_iterations`` simplex
    iterations and only the best one is run to convergence.
    """

    max_iterations: int = 4000
    tol: float = 1e-6
    restarts: int = 3
    kappa: float = 1e6
    jitter: float = 0.2
    seed: int = 0
    xtol: float = 1e-4
    polish: int = 6
    steps_per_unit: int = 20
    objective_tol: float = 1e-5
    rate_resolution: float = 10.0
    screen_iterations: int = 300

    def __post_init__(self):
        for name in ("max_iterations", "tol", "restarts", "kappa", "jitter", "xtol", "steps_per_unit",
                     "rate_resolution", "screen_iterations"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.seed < 0 or self.polish < 0:
            raise ValueError("seed and polish must be non-negative")

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class FitResult:
    variant_id: str
    theta_hat: np.ndarray
    spec_hat: object
    loglik: float
    n_events: np.ndarray
    converged: bool
    restarts_used: int
    stability: StabilityReport
    stderr: np.ndarray | None = None
    param_names: list = field(default_factory=list)
    objective: float = float("nan")
    diagnostics: list = field(default_factory=list)
    mask: VariantMask | None = field(default=None, repr=False)

    def params(self):
        return dict(zip(self.param_names, self.theta_hat.tolist()))

    def to_dict(self):
        from .io import spec_to_dict

        return {
            "variant_id": self.variant_id,
            "param_names": list(self.param_names),
            "theta_hat": self.theta_hat.tolist(),
            "stderr": None if self.stderr is None else self.stderr.tolist(),
            "loglik": self.loglik,
            "objective": self.objective,
            "n_events": self.n_events.tolist(),
            "converged": self.converged,
            "restarts_used": self.restarts_used,
            "stability": self.stability.to_dict(),
            "spec_hat": spec_to_dict(self.spec_hat),
            "diagnostics": self.diagnostics,
        }


# ---------------------------------------------------------------------------
# Stability surrogate and penalty
# ---------------------------------------------------------------------------


def _first_moments(spec, lam):
    return np.array([mark_moment(m, lam, 1) for m in spec.marks])


def surrogate_matrix(spec):
    """``M = A + B J`` used by the stability penalty.

    Intensity-dependent mark laws take ``J`` at the stationary mean implied by
    ``J(lambda0)``, iterated once. The exp-regime term vanishes for large
    intensities, so only ``A`` enters.
    """
    J = _first_moments(spec, spec.lambda0)
    M = spec.A + spec.B * J[None, :]
    if not spec.homogeneous_marks:
        try:
            m = np.linalg.solve(M, spec.A @ spec.lambda0)
        except np.linalg.LinAlgError:
            m = spec.lambda0
        if not np.all(np.isfinite(m)):
            m = spec.lambda0
        J = _first_moments(spec, np.maximum(m, 0.0))
        M = spec.A + spec.B * J[None, :]
    return M, J


def surrogate_stability(spec):
    """:class:`StabilityReport` built from :func:`surrogate_matrix`; exact for the closed-form case."""
    M, J = surrogate_matrix(spec)
    gamma = sym_eigenvalues(M + M.T)
    stable = bool(gamma[-1] < 0)
    mean = None
    if stable and np.linalg.cond(M) < 1e12:
        mean = np.linalg.solve(M, spec.A @ spec.lambda0)
    return StabilityReport(M, gamma, stable, mean, J)


def penalty_terms(spec, kappa):
    M, _ = surrogate_matrix(spec)
    gmax = sym_eigenvalues(M + M.T)[-1]
    pen = kappa * max(0.0, gmax) ** 2
    pen += kappa * float(np.sum(np.minimum(spec.lambda0, 0.0) ** 2))
    pen += kappa * float(np.sum(np.minimum(spec.B, 0.0) ** 2))
    return pen


def penalized_objective(theta, mask, path, settings=None, template=None):
    """``-loglik`` plus quadratic penalties; ``+inf`` when evaluation fails."""
    settings = settings or OptimizerSettings()
    template = template if template is not None else _template(path)
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        return np.inf
    if mask.nonlinear and not theta[mask.n_free - mask.d - 1] > 0:
        return np.inf
    try:
        spec = unpack_params(theta, mask, template)
        pen = penalty_terms(spec, settings.kappa)
        spu = settings.steps_per_unit
        if mask.nonlinear:
            if drift_rate(spec) > settings.rate_resolution / min_gap(path):
                return np.inf
            spu = stiff_resolution(spec, spu)
        ll = log_likelihood(spec, path, steps_per_unit=spu, refine=False).loglik
    except (ExciterError, ValueError, FloatingPointError, np.linalg.LinAlgError):
        return np.inf
    if not np.isfinite(ll):
        return np.inf
    return -ll + pen


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


class _Template:
    """Minimal stand-in carrying marks when no template spec is supplied."""

    def __init__(self, marks):
        self.marks = marks
        self.d = len(marks)


def _template(path):
    return _Template(default_marks(path))


def heuristic_start(path, mask, template):
    """``lambda0 = N/(2T)``, ``A = -0.1 I``, ``B = 0.5 I`` (halved until stable), ``c = 0.1``, ``D = -0.1``."""
    d = mask.d
    T = max(path.T, 1e-12)
    lam0 = np.maximum(path.n_events / (2.0 * T), 1e-6)
    A = -0.1 * np.eye(d)
    B = 0.5 * np.eye(d)
    A[~mask.A_mask] = 0.0
    B[~mask.B_mask] = 0.0
    theta = _pack(lam0, A, B, mask)
    for _ in range(60):
        spec = unpack_params(theta, mask, template)
        M, _ = surrogate_matrix(spec)
        if mask.is_poisson or sym_eigenvalues(M + M.T)[-1] < 0:
            break
        B *= 0.5
        theta = _pack(lam0, A, B, mask)
    return theta


def _pack(lam0, A, B, mask):
    parts = [lam0, A[mask.A_mask], B[mask.B_mask]]
    if mask.nonlinear:
        parts += [[0.1], -0.1 * np.ones(mask.d)]
    return np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])


def _jitter(theta, mask, scale, seed, r):
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(r),)))
    out = theta + scale * (np.abs(theta) + 0.05) * rng.standard_normal(theta.size)
    d = mask.d
    out[:d] = np.abs(out[:d])
    if mask.nonlinear:
        out[mask.n_free - d - 1] = abs(out[mask.n_free - d - 1])
    return out


def _simplex(x0, scale=0.1):
    steps = scale * (np.abs(x0) + 0.1)
    return np.vstack([x0] + [x0 + np.eye(x0.size)[i] * steps[i] for i in range(x0.size)])


def _run_start(x0, f, settings):
    """Nelder-Mead from ``x0`` followed by up to ``settings.polish`` fresh-simplex restarts.

    Each restart halves the initial simplex, which helps the search settle
    when the optimum lies on the stability boundary.
    """
    opts = dict(maxiter=settings.max_iterations, maxfev=2 * settings.max_iterations,
                xatol=settings.xtol, fatol=settings.tol, adaptive=x0.size > 4)
    x, fx = np.array(x0, dtype=float), f(x0)
    nit = nfev = 0
    success = False
    rounds = []
    for r in range(1 + settings.polish):
        res = minimize(f, x, method="Nelder-Mead", options=dict(opts, initial_simplex=_simplex(x, 0.1 / 2 ** r)))
        nit += int(res.nit)
        nfev += int(res.nfev)
        improvement = fx - res.fun if np.isfinite(fx) else np.inf
        if res.fun <= fx or not np.isfinite(fx):
            x, fx = res.x, float(res.fun)
        success = bool(res.success)
        rounds.append((int(res.nit), bool(res.success), float(res.fun)))
        if success and improvement < settings.tol:
            break
    return x, fx, {"nit": nit, "nfev": nfev, "success": success, "objective": fx, "rounds": rounds}


def _map_starts(starts, f, settings):
    workers = min(worker_count(), len(starts))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(lambda x0: _run_start(x0, f, settings), starts))
    return [_run_start(x0, f, settings) for x0 in starts]


def fit(path, mask, template=None, settings=None, warm_starts=()):
    """Fit ``mask`` to ``path`` by penalized maximum likelihood.

    Parameters
    ----------
    path : MarkedPath
    mask : VariantMask
    template : ModelSpec, optional
        Supplies the mark laws; defaults to the path's empirical marks.
    settings : OptimizerSettings, optional
    warm_starts : sequence of array_like
        Extra starting points, tried after the jittered ones.

    Returns
    -------
    FitResult

    Raises
    ------
    FitError
        The path has no events, or no start reaches a finite objective.
    """
    settings = settings or OptimizerSettings()
    if path.d != mask.d:
        raise FitError(f"path has d={path.d}, mask has d={mask.d}")
    n_events = path.n_events
    if n_events.sum() == 0:
        raise FitError("path has no events; nothing to fit", {"n_events": n_events.tolist()})
    if np.any(n_events == 0):
        warnings.warn(f"components {np.flatnonzero(n_events == 0).tolist()} have no events", RuntimeWarning)
    template = template if template is not None else _template(path)

    base = heuristic_start(path, mask, template)
    obj_settings = settings
    if mask.nonlinear:
        spu = objective_resolution(unpack_params(base, mask, template), path, settings)
        obj_settings = replace(settings, steps_per_unit=spu)

    def f(theta):
        return penalized_objective(theta, mask, path, obj_settings, template)

    def final(theta):
        # candidates are ranked on the grid used for the reported likelihood
        return penalized_objective(theta, mask, path, settings, template) if mask.nonlinear else f(theta)

    starts = [base] + [_jitter(base, mask, settings.jitter, settings.seed, r)
                       for r in range(1, settings.restarts)]
    starts += [np.asarray(w, dtype=float) for w in warm_starts]

    if mask.nonlinear and len(starts) > 1:
        screen = replace(settings, max_iterations=settings.screen_iterations, polish=0)
        screened = _map_starts(starts, f, screen)
        keep = min(range(len(starts)), key=lambda i: (not np.isfinite(screened[i][1]), screened[i][1]))
        runs = [(x, fx, dict(info, screened_out=True)) for x, fx, info in screened]
        x, fx, info = _run_start(screened[keep][0], f, settings)
        info["nit"] += screened[keep][2]["nit"]
        info["nfev"] += screened[keep][2]["nfev"]
        runs[keep] = (x, fx, info)
    else:
        runs = _map_starts(starts, f, settings)

    diagnostics = [dict(info, start=i, objective_steps_per_unit=obj_settings.steps_per_unit)
                   for i, (_, _, info) in enumerate(runs)]
    if not any(np.isfinite(fx) for _, fx, _ in runs):
        raise FitError("no start produced a finite objective", {"runs": diagnostics})

    # The penalized optimum can sit slightly outside the feasible set; each
    # endpoint is projected back and the starts compete too, so a warm start
    # from a nested fit is never beaten by an infeasible endpoint.
    candidates = []
    for i, (theta, fx, info) in enumerate(runs):
        for x, is_start in ((theta, False), (starts[i], True)):
            if not np.isfinite(fx) and not is_start:
                continue
            feasible, shrink = project_feasible(x, mask, template)
            if feasible is None:
                continue
            obj = final(feasible)
            if np.isfinite(obj):
                candidates.append((obj, is_start, i, feasible, shrink))
    if not candidates:
        theta, obj, info = min((r for r in runs if np.isfinite(r[1])), key=lambda r: r[1])
        shrink, best, from_start = None, None, False
    else:
        obj, from_start, best, theta, shrink = min(candidates, key=lambda c: (c[0], c[1], c[2]))
        info = runs[best][2]
        diagnostics[best]["projection_shrink"] = shrink
        diagnostics[best]["chosen_from_start"] = from_start
    spec_hat = unpack_params(theta, mask, template)
    ll = log_likelihood(spec_hat, path, steps_per_unit=settings.steps_per_unit).loglik
    stab = surrogate_stability(spec_hat)
    converged = bool(info["success"] and np.isfinite(ll) and (stab.stable or mask.is_poisson))
    return FitResult(mask.variant_id, np.asarray(theta, dtype=float), spec_hat, float(ll), n_events,
                     converged, len(starts), stab, None, mask.param_names(), float(obj),
                     diagnostics, mask)


def drift_rate(spec):
    """Infinity-norm bound on the drift Jacobian ``A + g D`` over ``g`` in [0, 1]."""
    rho = np.linalg.norm(spec.A, np.inf)
    if spec.nonlinear:
        rho = max(rho, np.linalg.norm(spec.A + spec.drift.D, np.inf))
    return float(rho)


def min_gap(path):
    """Smallest positive spacing among 0, the event times and T."""
    gaps = np.diff(np.concatenate(([0.0], path.times, [path.T])))
    gaps = gaps[gaps > 0]
    return float(gaps.min()) if gaps.size else float(path.T)


def stiff_resolution(spec, steps_per_unit):
    """Raise ``steps_per_unit`` so that ``h`` times :func:`drift_rate` is at most 1/2.

    The drift Jacobian away from the regime peak is ``A + g D`` with
    ``g = exp(-c |lambda|^2)``, whose infinity norm is at most that at an
    endpoint. Without this floor a coarse grid lets the simplex drift into
    stiff regions where the RK4 error, not the data, drives the objective.
    """
    return max(int(steps_per_unit), int(math.ceil(2.0 * drift_rate(spec))))


def objective_resolution(spec, path, settings):
    """RK4 steps per unit for the simplex objective (see :class:`OptimizerSettings`)."""
    spu = 1
    prev = log_likelihood(spec, path, steps_per_unit=spu, refine=False).loglik
    while spu < settings.steps_per_unit:
        spu = min(2 * spu, settings.steps_per_unit)
        cur = log_likelihood(spec, path, steps_per_unit=spu, refine=False).loglik
        if abs(cur - prev) < settings.objective_tol:
            break
        prev = cur
    return spu


def project_feasible(theta, mask, template, margin=1e-10, iterations=60):
    """Nearest point along a ``B`` shrink path that satisfies every constraint.

    Negative ``lambda0`` and ``B`` entries are clipped to zero; if the
    surrogate is still unstable, ``B`` is scaled by the largest factor in
    ``[0, 1]`` (found by bisection) that gives ``gamma_max < -margin``.
    Returns ``(theta, factor)``, or ``(None, None)`` when even ``B = 0`` is
    unstable.
    """
    theta = np.array(theta, dtype=float)
    d = mask.d
    n_A = int(mask.A_mask.sum())
    b = slice(d + n_A, d + n_A + int(mask.B_mask.sum()))
    theta[:d] = np.maximum(theta[:d], 0.0)
    theta[b] = np.maximum(theta[b], 0.0)
    if mask.is_poisson:
        return theta, 1.0

    def gmax(s):
        x = theta.copy()
        x[b] *= s
        M, _ = surrogate_matrix(unpack_params(x, mask, template))
        return sym_eigenvalues(M + M.T)[-1]

    if gmax(1.0) < -margin:
        return theta, 1.0
    if not gmax(0.0) < -margin:
        return None, None
    lo, hi = 0.0, 1.0
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if gmax(mid) < -margin:
            lo = mid
        else:
            hi = mid
    theta[b] *= lo
    return theta, lo


def nest_start(fit_result, mask):
    """Embed a fitted optimum into a larger ``mask`` with the new entries at zero.

    For the exp-regime masks ``D = 0`` and ``c = 0.1``, which reproduces the
    linear fit exactly, so the larger variant can only improve on it.
    """
    spec = fit_result.spec_hat
    theta = pack_params(spec, mask)
    if mask.nonlinear and not spec.nonlinear:
        d = mask.d
        theta[mask.n_free - d - 1] = 0.1
        theta[mask.n_free - d:] = 0.0
    return theta


def hessian_fd(f, theta, rel_step=1e-4):
    """Central-difference Hessian with steps ``rel_step * (1 + |theta_i|)``."""
    theta = np.asarray(theta, dtype=float)
    n = theta.size
    h = rel_step * (1.0 + np.abs(theta))
    f0 = f(theta)
    H = np.empty((n, n))
    E = np.diag(h)
    for i in range(n):
        H[i, i] = (f(theta + E[i]) - 2.0 * f0 + f(theta - E[i])) / h[i] ** 2
        for j in range(i):
            v = (f(theta + E[i] + E[j]) - f(theta + E[i] - E[j])
                 - f(theta - E[i] + E[j]) + f(theta - E[i] - E[j])) / (4.0 * h[i] * h[j])
            H[i, j] = H[j, i] = v
    return H


def stderr_fd(fit_result, path, settings=None, rel_step=1e-4):
    """Standard errors from the inverse finite-difference Hessian of ``-loglik`` at the optimum."""
    if not fit_result.converged:
        raise FitError("standard errors need a converged fit")
    settings = settings or OptimizerSettings()
    mask = fit_result.mask or VariantMask.table(fit_result.variant_id)
    template = fit_result.spec_hat

    def nll(theta):
        spec = unpack_params(theta, mask, template)
        return -log_likelihood(spec, path, steps_per_unit=settings.steps_per_unit, refine=False).loglik

    H = hessian_fd(nll, fit_result.theta_hat, rel_step)
    cov = np.linalg.pinv(H)
    if np.any(np.linalg.eigvalsh(0.5 * (H + H.T)) <= 0):
        warnings.warn("Hessian of -loglik is not positive definite; using |diag(H^-1)|", HessianWarning)
    se = np.sqrt(np.abs(np.diag(cov)))
    fit_result.stderr = se
    return se


# ---------------------------------------------------------------------------
# Table rendering
# ---------------------------------------------------------------------------


def canonical_rows(d, nonlinear):
    return VariantMask.full(d, nonlinear).param_names()


def table_layout(fits):
    """Row names shared by :func:`render_table` and :func:`table_rows`."""
    fits = list(fits)
    if len(fits) == 1:
        return list(fits[0].param_names)
    d = fits[0].spec_hat.d
    nonlinear = any(f.mask is not None and f.mask.nonlinear for f in fits)
    wanted = set().union(*[f.param_names for f in fits])
    return [r for r in canonical_rows(d, nonlinear) if r in wanted]


def table_rows(fits):
    """``(header, rows)`` with full-precision values, ``None`` where a parameter is not estimated."""
    fits = list(fits)
    header = ["param"] + [f.variant_id for f in fits]
    rows = [[r] + [f.params().get(r) for f in fits] for r in table_layout(fits)]
    rows.append(["LL"] + [f.loglik for f in fits])
    return header, rows


def render_table(fits, digits=4):
    """Text table with one column per fit, one row per parameter and ``LL`` last.

    A single fit shows only its free parameters; several fits share the
    canonical row set and show ``-`` where a parameter is not estimated.
    """
    fits = list(fits)
    if not fits:
        return ""
    header, rows = table_rows(fits)
    header[0] = ""
    body = [[r[0]] + ["-" if v is None else f"{v:.{digits}g}" for v in r[1:]] for r in rows[:-1]]
    body.append(["LL"] + [f"{v:.{digits + 2}g}" for v in rows[-1][1:]])
    table = [header] + body
    widths = [max(len(row[c]) for row in table) for c in range(len(header))]
    return "\n".join("  ".join(cell.rjust(w) for cell, w in zip(row, widths)).rstrip()
                     for row in table) + "\n"
