"""Model parameterization: intensity SDE parameters, mark laws, variant masks, paths.

The intensity follows

    d lambda(t) = mu(lambda(t)) dt + B dU(t),

with either the linear drift ``A (lambda - lambda0)`` or the exp-regime drift
``(A + D exp(-c |lambda|^2)) (lambda - lambda0)``. ``U_k`` jumps by the mark
``y`` whenever component ``k`` fires, so an event on ``k`` adds ``y * B[:, k]``
to the intensity.

Components are 0-based in the Python API; files and tables use 1-based labels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import ClassVar

import numpy as np

from .errors import DimensionError, DomainError
from .numerics import MAX_DIM

# ---------------------------------------------------------------------------
# Mark laws
# ---------------------------------------------------------------------------

MARK_EXPONENTIAL = 0
MARK_LOGNORMAL = 1
MARK_EMPIRICAL = 2
MARK_INTENSITY_LOGNORMAL = 3


@dataclass(frozen=True)
class ConstantExponential:
    """Exponential marks with fixed ``rate`` (mean ``1 / rate``)."""

    rate: float
    family: ClassVar[str] = "exponential"
    homogeneous: ClassVar[bool] = True

    def __post_init__(self):
        if not (self.rate > 0 and math.isfinite(self.rate)):
            raise DomainError(f"exponential rate must be > 0, got {self.rate}")

    def moment(self, lam, order):
        return 1.0 / self.rate if order == 1 else 2.0 / self.rate ** 2

    def sample(self, lam, rng):
        return float(rng.exponential(1.0 / self.rate))

    def to_dict(self):
        return {"family": self.family, "rate": self.rate}

    def encode(self):
        return MARK_EXPONENTIAL, (self.rate, 0.0, 0.0), ()


@dataclass(frozen=True)
class ConstantLognormal:
    """Log-normal marks, ``log Y ~ N(mu, sigma^2)``."""

    mu: float
    sigma: float
    family: ClassVar[str] = "lognormal"
    homogeneous: ClassVar[bool] = True

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma) and math.isfinite(self.mu)):
            raise DomainError(f"lognormal needs finite mu and sigma > 0, got {self}")

    def moment(self, lam, order):
        n = float(order)
        return math.exp(n * self.mu + 0.5 * n * n * self.sigma ** 2)

    def sample(self, lam, rng):
        return float(math.exp(self.mu + self.sigma * rng.standard_normal()))

    def to_dict(self):
        return {"family": self.family, "mu": self.mu, "sigma": self.sigma}

    def encode(self):
        return MARK_LOGNORMAL, (self.mu, self.sigma, 0.0), ()


@dataclass(frozen=True)
class Empirical:
    """Resample uniformly from observed positive marks."""

    samples: tuple
    family: ClassVar[str] = "empirical"
    homogeneous: ClassVar[bool] = True

    def __post_init__(self):
        samples = tuple(float(s) for s in np.ravel(self.samples))
        if not samples:
            raise DomainError("empirical mark law needs at least one sample")
        if not all(s > 0 and math.isfinite(s) for s in samples):
            raise DomainError("empirical mark samples must be finite and > 0")
        object.__setattr__(self, "samples", samples)

    def moment(self, lam, order):
        return float(np.mean(np.asarray(self.samples) ** order))

    def sample(self, lam, rng):
        return self.samples[int(rng.integers(0, len(self.samples)))]

    def to_dict(self):
        return {"family": self.family, "samples": list(self.samples)}

    def encode(self):
        return MARK_EMPIRICAL, (0.0, 0.0, 0.0), self.samples


@dataclass(frozen=True)
class IntensityScaledLognormal:
    """Log-normal marks whose log-mean grows with the intensity level.

    ``log Y ~ N(m0 + m1 * log(1 + |lambda|_2), sigma^2)`` where ``lambda`` is
    the intensity just before the event.
    """

    m0: float
    m1: float
    sigma: float
    family: ClassVar[str] = "intensity_lognormal"

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)
                and math.isfinite(self.m0) and math.isfinite(self.m1)):
            raise DomainError(f"intensity_lognormal needs finite m0, m1 and sigma > 0, got {self}")

    @property
    def homogeneous(self):
        return self.m1 == 0.0

    def log_mean(self, lam):
        lam = np.asarray(lam, dtype=float)
        return self.m0 + self.m1 * math.log1p(float(np.sqrt(lam @ lam)))

    def moment(self, lam, order):
        n = float(order)
        return math.exp(n * self.log_mean(lam) + 0.5 * n * n * self.sigma ** 2)

    def sample(self, lam, rng):
        return float(math.exp(self.log_mean(lam) + self.sigma * rng.standard_normal()))

    def to_dict(self):
        return {"family": self.family, "m0": self.m0, "m1": self.m1, "sigma": self.sigma}

    def encode(self):
        return MARK_INTENSITY_LOGNORMAL, (self.m0, self.m1, self.sigma), ()


MarkModel = ConstantExponential | ConstantLognormal | Empirical | IntensityScaledLognormal

_MARK_FAMILIES = {cls.family: cls for cls in
                  (ConstantExponential, ConstantLognormal, Empirical, IntensityScaledLognormal)}


def mark_from_dict(doc):
    doc = dict(doc)
    try:
        cls = _MARK_FAMILIES[doc.pop("family")]
    except KeyError as exc:
        raise DomainError(f"unknown or missing mark family in {doc!r}") from exc
    try:
        return cls(**doc)
    except TypeError as exc:
        raise DomainError(f"bad fields for mark family {cls.family}: {exc}") from exc


def mark_moment(model, lam, order):
    """First or second raw moment of the mark law at intensity ``lam``."""
    if order not in (1, 2):
        raise DomainError(f"order must be 1 or 2, got {order}")
    return model.moment(lam, order)


def sample_mark(model, lam, rng):
    """Draw one mark at intensity ``lam`` using ``rng`` (a numpy Generator)."""
    return model.sample(lam, rng)


def encode_marks(marks):
    """Flatten mark laws into arrays for the compiled kernels."""
    d = len(marks)
    codes = np.empty(d, dtype=np.int64)
    params = np.zeros((d, 3))
    offsets = np.zeros(d + 1, dtype=np.int64)
    flat = []
    for k, m in enumerate(marks):
        code, p, samples = m.encode()
        codes[k] = code
        params[k] = p
        flat.extend(samples)
        offsets[k + 1] = len(flat)
    return codes, params, np.asarray(flat, dtype=float), offsets


# ---------------------------------------------------------------------------
# Drift and model specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearDrift:
    kind: ClassVar[str] = "linear"


@dataclass(frozen=True, eq=False)
class ExpRegimeDrift:
    """Regime factor ``D exp(-c |lambda|^2)`` added to ``A``."""

    D: np.ndarray
    c: float
    kind: ClassVar[str] = "exp_regime"

    def __post_init__(self):
        D = np.asarray(self.D, dtype=float)
        if D.ndim == 1:
            D = np.diag(D)
        D = D.copy()
        D.setflags(write=False)
        object.__setattr__(self, "D", D)
        object.__setattr__(self, "c", float(self.c))

    @property
    def D_diag(self):
        return np.diag(self.D).copy()

    def __eq__(self, other):
        return (isinstance(other, ExpRegimeDrift) and self.c == other.c
                and np.array_equal(self.D, other.D))


def _frozen(x, shape, name):
    arr = np.array(x, dtype=float)
    if arr.shape != shape:
        raise DimensionError(f"{name} must have shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """Full parameterization of the intensity SDE.

    Construction checks shapes only; parameter-domain rules are reported by
    :func:`validate_spec`.
    """

    lambda0: np.ndarray
    A: np.ndarray
    B: np.ndarray
    marks: tuple
    drift: LinearDrift | ExpRegimeDrift = field(default_factory=LinearDrift)

    def __post_init__(self):
        lam0 = np.array(self.lambda0, dtype=float).ravel()
        d = lam0.size
        if not 1 <= d <= MAX_DIM:
            raise DimensionError(f"dimension must be in 1..{MAX_DIM}, got {d}")
        lam0.setflags(write=False)
        object.__setattr__(self, "lambda0", lam0)
        object.__setattr__(self, "A", _frozen(self.A, (d, d), "A"))
        object.__setattr__(self, "B", _frozen(self.B, (d, d), "B"))
        marks = tuple(self.marks)
        if len(marks) != d:
            raise DimensionError(f"need {d} mark laws, got {len(marks)}")
        object.__setattr__(self, "marks", marks)
        if isinstance(self.drift, ExpRegimeDrift) and self.drift.D.shape != (d, d):
            raise DimensionError(f"D must be {d}x{d}, got {self.drift.D.shape}")

    @property
    def d(self):
        return self.lambda0.size

    @property
    def nonlinear(self):
        return isinstance(self.drift, ExpRegimeDrift)

    @property
    def homogeneous_marks(self):
        return all(m.homogeneous for m in self.marks)

    def replace(self, **changes):
        return replace(self, **changes)

    def kernel_args(self):
        """Parameters in the flat form used by the compiled kernels."""
        if self.nonlinear:
            Dd, c, nl = self.drift.D_diag, self.drift.c, True
        else:
            Dd, c, nl = np.zeros(self.d), 0.0, False
        return (np.ascontiguousarray(self.lambda0), np.ascontiguousarray(self.A),
                np.ascontiguousarray(self.B), np.ascontiguousarray(Dd), float(c), nl)

    def __eq__(self, other):
        return (isinstance(other, ModelSpec)
                and np.array_equal(self.lambda0, other.lambda0)
                and np.array_equal(self.A, other.A)
                and np.array_equal(self.B, other.B)
                and self.marks == other.marks
                and self.drift == other.drift)

    def __repr__(self):
        return (f"ModelSpec(d={self.d}, drift={self.drift.kind}, lambda0={self.lambda0.tolist()}, "
                f"A={self.A.tolist()}, B={self.B.tolist()})")


def drift_eval(spec, lam):
    """Drift ``mu(lambda)`` of the intensity between events."""
    lam = np.asarray(lam, dtype=float)
    if lam.shape != (spec.d,):
        raise DimensionError(f"lambda must have shape ({spec.d},), got {lam.shape}")
    x = lam - spec.lambda0
    if spec.nonlinear:
        g = math.exp(-spec.drift.c * float(lam @ lam))
        return spec.A @ x + g * (spec.drift.D @ x)
    return spec.A @ x


def validate_spec(spec):
    """List every violated invariant of ``spec`` (empty when well formed)."""
    problems = []
    for name in ("lambda0", "A", "B"):
        if not np.all(np.isfinite(getattr(spec, name))):
            problems.append(f"{name} must have finite entries")
    if np.any(spec.lambda0 < 0):
        problems.append("lambda0 must be entrywise ≥ 0")
    if np.any(spec.B < 0):
        problems.append("B must be entrywise ≥ 0")
    if spec.nonlinear:
        D = spec.drift.D
        if not np.all(np.isfinite(D)):
            problems.append("D must have finite entries")
        if np.any(D[~np.eye(spec.d, dtype=bool)] != 0):
            problems.append("D must be diagonal")
        if not (spec.drift.c > 0 and math.isfinite(spec.drift.c)):
            problems.append("c must be > 0")
    return problems


# ---------------------------------------------------------------------------
# Variant masks and parameter packing
# ---------------------------------------------------------------------------


def _bool_matrix(rows):
    arr = np.array(rows, dtype=bool)
    return tuple(tuple(bool(v) for v in row) for row in arr)


@dataclass(frozen=True)
class VariantMask:
    """Which entries of ``A`` and ``B`` are estimated; the rest are fixed at 0.

    ``lambda0`` is always free. Nonlinear masks add ``c`` and the diagonal of
    ``D`` after the linear parameters.
    """

    variant_id: str
    free_A: tuple
    free_B: tuple
    nonlinear: bool = False

    def __post_init__(self):
        object.__setattr__(self, "free_A", _bool_matrix(self.free_A))
        object.__setattr__(self, "free_B", _bool_matrix(self.free_B))
        d = len(self.free_A)
        if np.shape(self.free_A) != (d, d) or np.shape(self.free_B) != (d, d):
            raise DimensionError("free_A and free_B must both be d x d")

    @property
    def d(self):
        return len(self.free_A)

    @property
    def A_mask(self):
        return np.array(self.free_A, dtype=bool)

    @property
    def B_mask(self):
        return np.array(self.free_B, dtype=bool)

    @property
    def is_poisson(self):
        """True when no dynamics are estimated: lambda stays at lambda0."""
        return not (self.A_mask.any() or self.B_mask.any() or self.nonlinear)

    @property
    def n_free(self):
        d = self.d
        return d + int(self.A_mask.sum()) + int(self.B_mask.sum()) + ((1 + d) if self.nonlinear else 0)

    @property
    def free_offdiag_A(self):
        m = self.A_mask
        return tuple(bool(m[i, j]) for i in range(self.d) for j in range(self.d) if i != j)

    @property
    def free_offdiag_B(self):
        m = self.B_mask
        return tuple(bool(m[i, j]) for i in range(self.d) for j in range(self.d) if i != j)

    def nests_in(self, other):
        """True when every parameter free here is also free in ``other``."""
        if self.d != other.d or (self.nonlinear and not other.nonlinear):
            return False
        return not (np.any(self.A_mask & ~other.A_mask) or np.any(self.B_mask & ~other.B_mask))

    def param_names(self):
        d = self.d
        names = [f"lambda0{k + 1}" for k in range(d)]
        names += [f"a{i + 1}{j + 1}" for i in range(d) for j in range(d) if self.free_A[i][j]]
        names += [f"b{i + 1}{j + 1}" for i in range(d) for j in range(d) if self.free_B[i][j]]
        if self.nonlinear:
            names += ["c"] + [f"d{k + 1}" for k in range(d)]
        return names

    @classmethod
    def table(cls, variant_id):
        """One of the eight bivariate variants ``I`` .. ``VIII``."""
        key = str(variant_id).upper()
        try:
            a12, a21, b12, b21, nonlinear = _TABLE_VARIANTS[key]
        except KeyError as exc:
            raise DomainError(f"unknown variant {variant_id!r}; expected one of {VARIANT_IDS}") from exc
        return cls(key, [[True, a12], [a21, True]], [[True, b12], [b21, True]], nonlinear)

    @classmethod
    def diagonal(cls, d, nonlinear=False):
        eye = np.eye(d, dtype=bool)
        return cls(f"diag{d}", eye, eye, nonlinear)

    @classmethod
    def full(cls, d, nonlinear=False):
        ones = np.ones((d, d), dtype=bool)
        return cls(f"full{d}", ones, ones, nonlinear)

    @classmethod
    def poisson(cls, d):
        zeros = np.zeros((d, d), dtype=bool)
        return cls(f"poisson{d}", zeros, zeros, False)


# (a12, a21, b12, b21, nonlinear); diagonal entries always free
_TABLE_VARIANTS = {
    "I": (False, False, False, False, False),
    "II": (True, True, True, True, False),
    "III": (False, False, True, True, False),
    "IV": (True, True, False, False, False),
    "V": (False, True, False, True, False),
    "VI": (True, False, True, False, False),
    "VII": (True, True, True, True, True),
    "VIII": (False, True, False, True, True),
}
VARIANT_IDS = tuple(_TABLE_VARIANTS)


def pack_params(spec, mask):
    """Free parameters of ``spec`` under ``mask`` as a flat vector."""
    if spec.d != mask.d:
        raise DimensionError(f"spec has d={spec.d}, mask has d={mask.d}")
    parts = [spec.lambda0, spec.A[mask.A_mask], spec.B[mask.B_mask]]
    if mask.nonlinear:
        if spec.nonlinear:
            parts += [[spec.drift.c], spec.drift.D_diag]
        else:
            parts += [[np.nan], np.zeros(spec.d)]
    theta = np.concatenate([np.asarray(p, dtype=float).ravel() for p in parts])
    return theta


def unpack_params(theta, mask, template):
    """Inverse of :func:`pack_params`; masked entries are zero, marks come from ``template``."""
    theta = np.asarray(theta, dtype=float).ravel()
    if theta.size != mask.n_free:
        raise DimensionError(f"theta has {theta.size} entries, mask {mask.variant_id} needs {mask.n_free}")
    d = mask.d
    if template.d != d:
        raise DimensionError(f"template has d={template.d}, mask has d={d}")
    pos = 0
    lam0 = theta[pos:pos + d]
    pos += d
    A = np.zeros((d, d))
    nA = int(mask.A_mask.sum())
    A[mask.A_mask] = theta[pos:pos + nA]
    pos += nA
    B = np.zeros((d, d))
    nB = int(mask.B_mask.sum())
    B[mask.B_mask] = theta[pos:pos + nB]
    pos += nB
    drift = LinearDrift()
    if mask.nonlinear:
        drift = ExpRegimeDrift(D=theta[pos + 1:pos + 1 + d], c=theta[pos])
    return ModelSpec(lam0, A, B, template.marks, drift)


# ---------------------------------------------------------------------------
# Marked paths
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class MarkedPath:
    """Ordered events ``(t, k, y)`` on ``[0, T]``.

    ``components`` are 0-based. ``metadata`` carries provenance such as the
    calendar used by the data pipeline and does not take part in equality.
    """

    T: float
    times: np.ndarray
    components: np.ndarray
    marks: np.ndarray
    d: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.T = float(self.T)
        self.times = np.asarray(self.times, dtype=float).ravel()
        self.components = np.asarray(self.components, dtype=np.int64).ravel()
        self.marks = np.asarray(self.marks, dtype=float).ravel()
        self.d = int(self.d)
        n = self.times.size
        if self.components.size != n or self.marks.size != n:
            raise DimensionError("times, components and marks must have equal length")
        if not (self.T >= 0 and math.isfinite(self.T)):
            raise DomainError(f"horizon T must be finite and >= 0, got {self.T}")
        if n:
            if self.times[0] <= 0 or self.times[-1] > self.T:
                raise DomainError("event times must lie in (0, T]")
            if np.any(np.diff(self.times) <= 0):
                raise DomainError("event times must be strictly increasing")
            if self.components.min() < 0 or self.components.max() >= self.d:
                raise DomainError(f"components must lie in 0..{self.d - 1}")
            if not np.all(self.marks > 0) or not np.all(np.isfinite(self.marks)):
                raise DomainError("marks must be finite and > 0")

    @classmethod
    def empty(cls, T, d):
        return cls(T, [], [], [], d)

    def __len__(self):
        return self.times.size

    @property
    def n_events(self):
        return np.bincount(self.components, minlength=self.d)

    def component_marks(self, k):
        return self.marks[self.components == k]

    def events(self):
        return list(zip(self.times.tolist(), self.components.tolist(), self.marks.tolist()))

    def concatenate(self, other):
        """Append ``other`` shifted by this path's horizon."""
        if other.d != self.d:
            raise DimensionError("paths have different dimensions")
        return MarkedPath(self.T + other.T,
                          np.concatenate([self.times, other.times + self.T]),
                          np.concatenate([self.components, other.components]),
                          np.concatenate([self.marks, other.marks]), self.d,
                          dict(self.metadata))

    def __eq__(self, other):
        return (isinstance(other, MarkedPath) and self.T == other.T and self.d == other.d
                and np.array_equal(self.times, other.times)
                and np.array_equal(self.components, other.components)
                and np.array_equal(self.marks, other.marks))

    def __repr__(self):
        return f"MarkedPath(T={self.T}, d={self.d}, n_events={self.n_events.tolist()})"


def default_marks(path):
    """Empirical mark laws built from a path's own marks (unit marks when empty)."""
    marks = []
    for k in range(path.d):
        ys = path.component_marks(k)
        marks.append(Empirical(tuple(ys) if ys.size else (1.0,)))
    return tuple(marks)
