"""Path simulation by thinning, plus exact replay of the intensity along a path.

Between events the intensity follows a deterministic flow: exact matrix
exponentials for the linear drift and fixed-step RK4 for the exp-regime drift.
The thinning majorant on each window is the largest total rate of that flow
sampled on a sub-grid, inflated by a safety factor. If a candidate ever
exceeds it, the window is halved and the scheme resumes from the last point
it had fully processed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import DimensionError, DomainError, IntegrationError, SimulationError
from .model import MarkedPath, encode_marks, validate_spec
from .numerics import expm_phi_batch

RATE_FLOOR = 1e-12
EIG_COND = 1e6


@dataclass
class IntensityState:
    """Intensity ``lam`` and accumulated compensator ``compensator`` at time ``t``."""

    t: float
    lam: np.ndarray
    compensator: np.ndarray

    def copy(self):
        return IntensityState(self.t, self.lam.copy(), self.compensator.copy())


@dataclass
class SimConfig:
    """Thinning and integration settings.

    ``record_grid`` is either a sampling step (intensity checkpoints at
    ``0, step, 2 step, ...``) or an explicit sequence of times.
    """

    seed: int = 0
    lookahead: float = 1.0
    eta: float = 1.05
    rk4_steps_per_unit: int = 20
    record_grid: float | tuple | None = None
    n_sub: int = 16
    max_events: int = 10_000_000

    def __post_init__(self):
        if not self.lookahead > 0:
            raise DomainError("lookahead must be > 0")
        if not self.eta >= 1:
            raise DomainError("eta must be >= 1")
        if int(self.rk4_steps_per_unit) < 1:
            raise DomainError("rk4_steps_per_unit must be a positive integer")

    def grid_times(self, T):
        if self.record_grid is None:
            return np.empty(0)
        if np.ndim(self.record_grid) == 0:
            step = float(self.record_grid)
            if not step > 0:
                raise DomainError("record_grid step must be > 0")
            n = int(np.floor(T / step + 1e-9))
            return step * np.arange(n + 1)
        grid = np.sort(np.asarray(self.record_grid, dtype=float))
        return grid[(grid >= 0) & (grid <= T)]


@dataclass
class SimulationResult:
    path: MarkedPath
    checkpoint_times: np.ndarray
    checkpoint_lambda: np.ndarray
    checkpoint_compensator: np.ndarray
    final: IntensityState
    majorant_shrinks: int = 0
    lambda_init: np.ndarray = field(default=None, repr=False)


def _check_lambda(spec, lam, name="lambda"):
    lam = np.array(lam, dtype=float).ravel()
    if lam.shape != (spec.d,):
        raise DimensionError(f"{name} must have shape ({spec.d},), got {lam.shape}")
    return lam


def propagate(spec, state, t_target, steps_per_unit=20):
    """Flow the intensity and compensator from ``state.t`` to ``t_target`` without events."""
    dt = float(t_target) - state.t
    if dt < 0:
        raise DomainError(f"t_target={t_target} precedes state time {state.t}")
    lam0, A, _, Dd, c, nl = spec.kernel_args()
    lam = np.array(state.lam, dtype=float)
    comp = np.array(state.compensator, dtype=float)
    ok = K.flow(lam, comp, dt, lam0, A, Dd, c, nl, float(steps_per_unit), np.empty((5, spec.d)))
    if not ok:
        raise IntegrationError(f"intensity blew up between t={state.t} and t={t_target}",
                               time=state.t)
    return IntensityState(float(t_target), lam, comp)


def apply_jump(spec, state, k, y):
    """Add ``y * B[:, k]`` to the intensity; time and compensator are unchanged."""
    if not 0 <= k < spec.d:
        raise DimensionError(f"component {k} out of range 0..{spec.d - 1}")
    if not y > 0:
        raise DomainError(f"mark must be > 0, got {y}")
    return IntensityState(state.t, state.lam + spec.B[:, k] * y, state.compensator.copy())


def path_rng(seed, stream=0):
    """Counter-based generator for replication ``stream`` of a run seeded by ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(stream),))
    return np.random.Generator(np.random.Philox(ss))


def simulate_path(spec, T, config=None, lambda_init=None, stream=0, rng=None):
    """Simulate one marked path on ``[0, T]``.

    Parameters
    ----------
    spec : ModelSpec
    T : float
        Horizon; ``T == 0`` gives an empty path.
    config : SimConfig, optional
    lambda_init : array_like, optional
        Intensity at time 0, defaults to ``spec.lambda0``.
    stream : int
        Replication index; selects an independent stream of ``config.seed``.
    rng : numpy.random.Generator, optional
        Overrides the seeded stream.

    Returns
    -------
    SimulationResult
    """
    config = config or SimConfig()
    problems = validate_spec(spec)
    if problems:
        raise DomainError("invalid model spec: " + "; ".join(problems))
    T = float(T)
    if not (T >= 0 and np.isfinite(T)):
        raise DomainError(f"T must be finite and >= 0, got {T}")
    lam_init = spec.lambda0.copy() if lambda_init is None else _check_lambda(spec, lambda_init, "lambda_init")
    rng = rng if rng is not None else path_rng(config.seed, stream)
    grid = config.grid_times(T)
    lam0, A, B, Dd, c, nl = spec.kernel_args()
    codes, params, emp, off = encode_marks(spec.marks)
    (t, k, y, rec, rec_c, lam, comp, t_end, status, shrinks) = K.simulate_kernel(
        T, lam_init, lam0, A, B, Dd, c, nl, float(config.rk4_steps_per_unit),
        codes, params, emp, off, float(config.lookahead), float(config.eta),
        int(config.n_sub), grid, rng, RATE_FLOOR, int(config.max_events))
    if status == K.BLOWUP:
        raise SimulationError(f"intensity became non-finite near t={t_end:.6g}")
    if status == K.MAJORANT_FAILURE:
        raise SimulationError(f"thinning majorant kept failing near t={t_end:.6g}")
    if status == K.TOO_MANY_EVENTS:
        raise SimulationError(f"more than {config.max_events} events by t={t_end:.6g}; "
                              "the model is probably unstable")
    path = MarkedPath(T, t, k, y, spec.d)
    return SimulationResult(path, grid, rec, rec_c, IntensityState(T, lam, comp), int(shrinks),
                            lam_init)


def simulate_paths(spec, T, n_paths, config=None, lambda_init=None):
    """``n_paths`` independent replications (streams ``0 .. n_paths - 1``)."""
    config = config or SimConfig()
    return [simulate_path(spec, T, config, lambda_init, stream=i) for i in range(int(n_paths))]


@dataclass
class Replay:
    """Intensity along a fixed path: left limits at events and totals at the horizon."""

    lambda_minus: np.ndarray
    compensator: np.ndarray
    lambda_T: np.ndarray


def replay(spec, path, lambda_init=None, steps_per_unit=20):
    """Reconstruct ``lambda(T_i-)`` for every event and the compensator at ``path.T``."""
    if path.d != spec.d:
        raise DimensionError(f"path has d={path.d}, spec has d={spec.d}")
    lam_init = spec.lambda0.copy() if lambda_init is None else _check_lambda(spec, lambda_init, "lambda_init")
    lam0, A, B, Dd, c, nl = spec.kernel_args()
    times, comps, marks = path.times, path.components, path.marks
    if nl:
        lm, comp, lam_T, ok, t_fail = K.replay_rk4(times, comps, marks, path.T, lam_init,
                                                  lam0, A, B, Dd, c, nl, float(steps_per_unit))
        if not ok:
            raise IntegrationError(f"intensity blew up after t={t_fail:.6g}", time=t_fail)
    else:
        eig = _eigenbasis(A)
        if eig is not None:
            w, V, Vinv = eig
            lm, comp, lam_T = K.replay_eigen(w, V, Vinv, times, comps, marks, path.T,
                                             lam_init, lam0, B)
        else:
            lm, comp, lam_T = _replay_expm(A, times, comps, marks, path.T, lam_init, lam0, B)
        if not (np.all(np.isfinite(comp)) and np.all(np.isfinite(lam_T))):
            raise IntegrationError("intensity overflowed during replay", time=path.T)
    return Replay(lm, comp, lam_T)


def _replay_expm(A, times, comps, marks, T, lam_init, lam0, B):
    gaps = np.diff(np.concatenate([[0.0], times, [T]]))
    uniq, inv = np.unique(gaps, return_inverse=True)
    E, Phi = expm_phi_batch(A, uniq)
    return K.replay_linear(E, Phi, inv.astype(np.int64), times, comps, marks, T, lam_init, lam0, B)


def _eigenbasis(A):
    """``(w, V, V^{-1})`` when A is diagonalizable with a well-conditioned basis, else None."""
    d = A.shape[0]
    if np.count_nonzero(A - np.diag(np.diag(A))) == 0:
        I = np.eye(d, dtype=np.complex128)
        return np.diag(A).astype(np.complex128), I, I
    w, V = np.linalg.eig(A)
    if np.linalg.cond(V) > EIG_COND:
        return None
    V = V.astype(np.complex128)
    return w.astype(np.complex128), V, np.linalg.inv(V)


def intensity_at(spec, path, t, lambda_init=None, steps_per_unit=20):
    """Left limit ``lambda(t-)``: events at times ``>= t`` are excluded."""
    t = float(t)
    if not 0 <= t <= path.T:
        raise DomainError(f"t={t} outside [0, {path.T}]")
    keep = path.times < t
    sub = MarkedPath(t, path.times[keep], path.components[keep], path.marks[keep], path.d)
    return replay(spec, sub, lambda_init, steps_per_unit).lambda_T
