"""Point-process log-likelihood of a model against an observed marked path.

    log L = sum_k ( sum_{i: k_i = k} log lambda_k(T_i-) - Lambda_k(T) )

Marks only enter through the intensity jumps ``B dU``; there is no mark
density term.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .simulate import replay

CLAMP = 1e-10
REFINE_TOL = 1e-8


@dataclass
class LikelihoodReport:
    loglik: float
    per_component: np.ndarray
    clamped_events: int
    compensators: np.ndarray
    steps_per_unit: int | None = None

    def to_dict(self):
        return {
            "loglik": self.loglik,
            "per_component": self.per_component.tolist(),
            "clamped_events": self.clamped_events,
            "compensators": self.compensators.tolist(),
            "steps_per_unit": self.steps_per_unit,
        }


def _check_finite(spec):
    arrays = [spec.lambda0, spec.A, spec.B]
    if spec.nonlinear:
        arrays += [spec.drift.D, np.array([spec.drift.c])]
    if not all(np.all(np.isfinite(a)) for a in arrays):
        raise DomainError("model parameters contain NaN or infinite values")


def compensator(spec, path, lambda_init=None, steps_per_unit=20):
    """``Lambda_k(T) = int_0^T lambda_k(s) ds`` for each component."""
    _check_finite(spec)
    return replay(spec, path, lambda_init, steps_per_unit).compensator


def _evaluate(spec, path, lambda_init, clamp, steps_per_unit):
    rep = replay(spec, path, lambda_init, steps_per_unit)
    d = spec.d
    n = len(path)
    at_events = rep.lambda_minus[np.arange(n), path.components] if n else np.empty(0)
    clamped = at_events < clamp
    logs = np.log(np.where(clamped, clamp, at_events))
    per = np.bincount(path.components, weights=logs, minlength=d) - rep.compensator
    return LikelihoodReport(float(per.sum()), per, int(clamped.sum()), rep.compensator)


def log_likelihood(spec, path, lambda_init=None, *, clamp=CLAMP, steps_per_unit=20,
                   refine=True, tol=REFINE_TOL, max_refinements=8):
    """Log-likelihood of ``spec`` on ``path``.

    Parameters
    ----------
    spec : ModelSpec
    path : MarkedPath
    lambda_init : array_like, optional
        Intensity at time 0; defaults to ``spec.lambda0``.
    clamp : float
        Event intensities below this are replaced by it inside the log; the
        number of such events is reported.
    steps_per_unit : int
        RK4 resolution for the exp-regime drift (ignored for linear drift).
    refine : bool
        For the exp-regime drift, double ``steps_per_unit`` until two
        successive log-likelihoods differ by less than ``tol``.

    Returns
    -------
    LikelihoodReport
    """
    _check_finite(spec)
    if not spec.nonlinear:
        return _evaluate(spec, path, lambda_init, clamp, steps_per_unit)
    spu = int(steps_per_unit)
    rep = _evaluate(spec, path, lambda_init, clamp, spu)
    rep.steps_per_unit = spu
    if not refine:
        return rep
    for _ in range(max_refinements):
        spu *= 2
        finer = _evaluate(spec, path, lambda_init, clamp, spu)
        finer.steps_per_unit = spu
        converged = abs(finer.loglik - rep.loglik) < tol
        rep = finer
        if converged:
            break
    return rep
