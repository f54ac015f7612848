"""Domain types and model-implied moments for bilinear-spline mediation models.

Every longitudinal process follows a linear-linear trajectory with a fixed,
process-specific knot. Growth factors are ordered ``(slope1, level_at_knot,
slope2)`` and referred to by the suffixes ``1``, ``g`` and ``2``.

Model 1 links a scalar baseline covariate ``x`` to a longitudinal mediator
``m`` and a longitudinal outcome ``y``.  Model 2 replaces the covariate by a
third longitudinal process whose growth factors drive the other two.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import ClassVar

import numpy as np

FACTORS = ("1", "g", "2")

# Lower-triangle positions in the canonical order 11, 1g, 12, gg, g2, 22.
# Entry (r, c) is the path from factor c of the source to factor r of the target.
TRI_INDEX = ((0, 0), (1, 0), (2, 0), (1, 1), (2, 1), (2, 2))
TRI_SUFFIX = tuple(FACTORS[c] + FACTORS[r] for r, c in TRI_INDEX)

MODEL_PROCESSES = {1: ("m", "y"), 2: ("x", "m", "y")}


def lower_tri(values) -> np.ndarray:
    """Build a 3x3 coefficient matrix from its six free entries.

    ``values`` are given as (b11, b1g, b12, bgg, bg2, b22); the strict upper
    triangle is structurally zero.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (6,):
        raise ValueError(f"expected 6 lower-triangle entries, got shape {values.shape}")
    out = np.zeros((3, 3))
    for (r, c), v in zip(TRI_INDEX, values):
        out[r, c] = v
    return out


def tri_entries(mat: np.ndarray) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    return np.array([mat[r, c] for r, c in TRI_INDEX])


def sym_from_tri(values) -> np.ndarray:
    low = lower_tri(values)
    return low + np.tril(low, -1).T


def _check_lower_tri(name: str, mat: np.ndarray) -> None:
    if mat.shape != (3, 3):
        raise ValueError(f"{name} must be 3x3, got {mat.shape}")
    if np.any(np.triu(mat, 1) != 0.0):
        raise ValueError(f"{name} must have structural zeros above the diagonal")
    if not np.all(np.isfinite(mat)):
        raise ValueError(f"{name} has non-finite entries")


def _check_spd(name: str, mat: np.ndarray) -> None:
    if mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T, rtol=0, atol=1e-12):
        raise ValueError(f"{name} must be a symmetric matrix")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ValueError(f"{name} is not positive definite") from None


def _check_psd(name: str, mat: np.ndarray) -> None:
    if mat.shape[0] != mat.shape[1] or not np.allclose(mat, mat.T, rtol=0, atol=1e-12):
        raise ValueError(f"{name} must be a symmetric matrix")
    if np.linalg.eigvalsh(mat).min() < -1e-10 * max(1.0, np.abs(mat).max()):
        raise ValueError(f"{name} is not positive semi-definite")


def bilinear_loadings(times, knot: float) -> np.ndarray:
    """Factor loadings of a linear-linear trajectory.

    Row ``j`` is ``(min(0, t_j - knot), 1, max(0, t_j - knot))``. Works on any
    leading batch shape: ``times`` of shape ``(..., J)`` gives ``(..., J, 3)``.
    """
    times = np.asarray(times, dtype=float)
    knot = float(knot)
    if not np.all(np.isfinite(times)) or not np.isfinite(knot):
        raise ValueError("times and knot must be finite")
    d = times - knot
    out = np.empty(times.shape + (3,))
    out[..., 0] = np.minimum(0.0, d)
    out[..., 1] = 1.0
    out[..., 2] = np.maximum(0.0, d)
    return out


@dataclass(frozen=True)
class MeasurementSchedule:
    """Observation times of one individual, keyed by process label."""

    times: dict

    def __post_init__(self):
        clean = {}
        n_occ = None
        for label, t in self.times.items():
            if label not in ("x", "m", "y"):
                raise ValueError(f"unknown process label {label!r}")
            t = np.array(t, dtype=float)
            if t.ndim != 1 or t.size < 2:
                raise ValueError(f"process {label}: need a 1-d vector of at least 2 times")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"process {label}: times must be finite")
            if np.any(np.diff(t) <= 0):
                raise ValueError(f"process {label}: times must be strictly increasing")
            if n_occ is not None and t.size != n_occ:
                raise ValueError("all processes must have the same number of occasions")
            n_occ = t.size
            t.setflags(write=False)
            clean[label] = t
        object.__setattr__(self, "times", clean)

    @property
    def processes(self) -> tuple:
        return tuple(self.times)

    @property
    def n_occasions(self) -> int:
        return len(next(iter(self.times.values())))


@dataclass(frozen=True)
class GrowthFactorMoments:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean, dtype=float)
        cov = np.array(self.cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ValueError("mean and cov dimensions disagree")
        _check_psd("growth-factor covariance", cov)
        mean.setflags(write=False)
        cov.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True)
class ImpliedMoments:
    mean: np.ndarray
    cov: np.ndarray


# Field kinds used for flattening parameters into the canonical vector.
_SCALAR, _VEC3, _COEF6, _COV6 = "scalar", "vec3", "coef6", "cov6"


def _kind_names(name: str, kind: str) -> list:
    if kind == _SCALAR:
        return [name]
    if kind == _VEC3:
        return [f"{name}_{s}" for s in FACTORS]
    return [f"{name}_{s}" for s in TRI_SUFFIX]


class _ParamsBase:
    """Shared flattening logic; subclasses declare ``LAYOUT``."""

    LAYOUT: ClassVar[tuple] = ()
    PROCESSES: ClassVar[tuple] = ()
    MODEL: ClassVar[object] = None

    def __post_init__(self):
        for name, kind in self.LAYOUT:
            value = getattr(self, name)
            if kind == _SCALAR:
                object.__setattr__(self, name, float(value))
                continue
            arr = np.array(value, dtype=float)
            if kind == _VEC3 and arr.shape != (3,):
                raise ValueError(f"{name} must be a 3-vector")
            if kind in (_COEF6, _COV6) and arr.shape != (3, 3):
                raise ValueError(f"{name} must be 3x3")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        self.validate()

    @classmethod
    def names(cls) -> list:
        out = []
        for name, kind in cls.LAYOUT:
            out.extend(_kind_names(name, kind))
        return out

    @classmethod
    def n_free(cls) -> int:
        return len(cls.names())

    def to_vector(self) -> np.ndarray:
        """Natural-space free parameters in canonical order."""
        out = []
        for name, kind in self.LAYOUT:
            value = getattr(self, name)
            if kind == _SCALAR:
                out.append(value)
            elif kind == _VEC3:
                out.extend(value)
            else:
                out.extend(tri_entries(value))
        return np.array(out, dtype=float)

    @classmethod
    def from_vector(cls, vec, validate: bool = True):
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (cls.n_free(),):
            raise ValueError(f"expected {cls.n_free()} parameters, got {vec.shape}")
        kwargs, pos = {}, 0
        for name, kind in cls.LAYOUT:
            if kind == _SCALAR:
                kwargs[name] = vec[pos]
                pos += 1
            elif kind == _VEC3:
                kwargs[name] = vec[pos:pos + 3]
                pos += 3
            elif kind == _COEF6:
                kwargs[name] = lower_tri(vec[pos:pos + 6])
                pos += 6
            else:
                kwargs[name] = sym_from_tri(vec[pos:pos + 6])
                pos += 6
        if validate:
            return cls(**kwargs)
        obj = cls.__new__(cls)
        for key, value in kwargs.items():
            object.__setattr__(obj, key, value)
        return obj

    def replace(self, validate: bool = True, **changes):
        """Copy with fields changed; ``validate=False`` skips invariant checks."""
        kwargs = {f.name: getattr(self, f.name) for f in fields(self)}
        kwargs.update(changes)
        if validate:
            return type(self)(**kwargs)
        probe = type(self).from_vector(self.to_vector(), validate=False)
        for name, kind in self.LAYOUT:
            value = kwargs[name]
            value = float(value) if kind == _SCALAR else np.array(value, dtype=float)
            object.__setattr__(probe, name, value)
        return probe

    def knots(self) -> dict:
        return {p: getattr(self, f"knot_{p}") for p in self.PROCESSES}

    def residual_cov(self) -> np.ndarray:
        """Per-occasion residual covariance across processes."""
        procs = self.PROCESSES
        out = np.empty((len(procs), len(procs)))
        for a, p in enumerate(procs):
            out[a, a] = getattr(self, f"theta_{p}")
            for b in range(a + 1, len(procs)):
                q = procs[b]
                out[a, b] = out[b, a] = getattr(self, f"theta_{p}{q}")
        return out

    def _validate_common(self):
        vec = self.to_vector()
        if not np.all(np.isfinite(vec)):
            raise ValueError("parameters must be finite")
        for name, kind in self.LAYOUT:
            if kind == _COEF6:
                _check_lower_tri(name, getattr(self, name))
            elif kind == _COV6:
                _check_psd(name, getattr(self, name))
        for p in self.PROCESSES:
            if getattr(self, f"theta_{p}") <= 0:
                raise ValueError(f"residual variance theta_{p} must be positive")
        _check_spd("residual covariance", self.residual_cov())

    def validate(self):
        self._validate_common()

    def __eq__(self, other):
        return type(self) is type(other) and np.array_equal(self.to_vector(), other.to_vector())

    __hash__ = None


@dataclass(frozen=True, eq=False)
class ParamsUnivariate(_ParamsBase):
    """Single bilinear-spline growth curve with a fixed knot."""

    mean: np.ndarray
    psi: np.ndarray
    knot: float
    theta: float

    LAYOUT: ClassVar[tuple] = (("mean", _VEC3), ("psi", _COV6), ("knot", _SCALAR),
                               ("theta", _SCALAR))
    PROCESSES: ClassVar[tuple] = ("u",)
    MODEL: ClassVar[object] = "univariate"

    def knots(self) -> dict:
        return {"u": self.knot}

    def residual_cov(self) -> np.ndarray:
        return np.array([[self.theta]])

    def validate(self):
        vec = self.to_vector()
        if not np.all(np.isfinite(vec)):
            raise ValueError("parameters must be finite")
        _check_psd("psi", self.psi)
        if self.theta <= 0:
            raise ValueError("residual variance must be positive")


@dataclass(frozen=True, eq=False)
class ParamsModel1(_ParamsBase):
    """Baseline covariate -> longitudinal mediator -> longitudinal outcome."""

    mu_x: float
    phi_x: float
    knot_m: float
    knot_y: float
    alpha_m: np.ndarray
    alpha_y: np.ndarray
    b_xm: np.ndarray
    b_xy: np.ndarray
    b_my: np.ndarray
    psi_m: np.ndarray
    psi_y: np.ndarray
    theta_m: float
    theta_y: float
    theta_my: float

    LAYOUT: ClassVar[tuple] = (
        ("mu_x", _SCALAR), ("phi_x", _SCALAR), ("knot_m", _SCALAR), ("knot_y", _SCALAR),
        ("alpha_m", _VEC3), ("alpha_y", _VEC3), ("b_xm", _VEC3), ("b_xy", _VEC3),
        ("b_my", _COEF6), ("psi_m", _COV6), ("psi_y", _COV6),
        ("theta_m", _SCALAR), ("theta_y", _SCALAR), ("theta_my", _SCALAR),
    )
    PROCESSES: ClassVar[tuple] = ("m", "y")
    MODEL: ClassVar[object] = 1

    def validate(self):
        self._validate_common()
        if self.phi_x <= 0:
            raise ValueError("covariate variance phi_x must be positive")


@dataclass(frozen=True, eq=False)
class ParamsModel2(_ParamsBase):
    """Longitudinal covariate -> longitudinal mediator -> longitudinal outcome."""

    mu_x: np.ndarray
    psi_x: np.ndarray
    knot_x: float
    knot_m: float
    knot_y: float
    alpha_m: np.ndarray
    alpha_y: np.ndarray
    b_xm: np.ndarray
    b_xy: np.ndarray
    b_my: np.ndarray
    psi_m: np.ndarray
    psi_y: np.ndarray
    theta_x: float
    theta_m: float
    theta_y: float
    theta_xm: float = 0.0
    theta_xy: float = 0.0
    theta_my: float = 0.0

    LAYOUT: ClassVar[tuple] = (
        ("mu_x", _VEC3), ("psi_x", _COV6),
        ("knot_x", _SCALAR), ("knot_m", _SCALAR), ("knot_y", _SCALAR),
        ("alpha_m", _VEC3), ("alpha_y", _VEC3),
        ("b_xm", _COEF6), ("b_xy", _COEF6), ("b_my", _COEF6),
        ("psi_m", _COV6), ("psi_y", _COV6),
        ("theta_x", _SCALAR), ("theta_m", _SCALAR), ("theta_y", _SCALAR),
        ("theta_xm", _SCALAR), ("theta_xy", _SCALAR), ("theta_my", _SCALAR),
    )
    PROCESSES: ClassVar[tuple] = ("x", "m", "y")
    MODEL: ClassVar[object] = 2


PARAM_CLASSES = {1: ParamsModel1, 2: ParamsModel2, "univariate": ParamsUnivariate}


def params_class(model):
    try:
        return PARAM_CLASSES[model]
    except KeyError:
        raise ValueError(f"unknown model {model!r}; expected 1, 2 or 'univariate'") from None


def _recursive_moments(intercept, coef, disturbance_cov):
    """Solve ``v = c + B v + e`` for a recursive (acyclic) system."""
    a = np.linalg.inv(np.eye(len(intercept)) - coef)
    mean = a @ intercept
    cov = a @ disturbance_cov @ a.T
    return mean, 0.5 * (cov + cov.T)


def _block_diag(*blocks):
    size = sum(b.shape[0] for b in blocks)
    out = np.zeros((size, size))
    pos = 0
    for b in blocks:
        k = b.shape[0]
        out[pos:pos + k, pos:pos + k] = b
        pos += k
    return out


def reduced_form_gf_moments_m1(params: ParamsModel1) -> GrowthFactorMoments:
    """Joint moments of ``(x, eta_m, eta_y)`` (7-dim) for Model 1."""
    coef = np.zeros((7, 7))
    coef[1:4, 0] = params.b_xm
    coef[4:7, 0] = params.b_xy
    coef[4:7, 1:4] = params.b_my
    intercept = np.concatenate([[params.mu_x], params.alpha_m, params.alpha_y])
    dist = _block_diag(np.array([[params.phi_x]]), params.psi_m, params.psi_y)
    return GrowthFactorMoments(*_recursive_moments(intercept, coef, dist))


def reduced_form_gf_moments_m2(params: ParamsModel2) -> GrowthFactorMoments:
    """Joint moments of ``(eta_x, eta_m, eta_y)`` (9-dim) for Model 2."""
    coef = np.zeros((9, 9))
    coef[3:6, 0:3] = params.b_xm
    coef[6:9, 0:3] = params.b_xy
    coef[6:9, 3:6] = params.b_my
    intercept = np.concatenate([params.mu_x, params.alpha_m, params.alpha_y])
    dist = _block_diag(params.psi_x, params.psi_m, params.psi_y)
    return GrowthFactorMoments(*_recursive_moments(intercept, coef, dist))


def reduced_form_gf_moments(params) -> GrowthFactorMoments:
    if isinstance(params, ParamsModel1):
        return reduced_form_gf_moments_m1(params)
    if isinstance(params, ParamsModel2):
        return reduced_form_gf_moments_m2(params)
    if isinstance(params, ParamsUnivariate):
        return GrowthFactorMoments(params.mean, params.psi)
    raise TypeError(f"unsupported parameter type {type(params).__name__}")


def _stacked_loadings(params, times):
    """Block-diagonal loadings for times of shape (n, P, J) -> (n, P*J, 3P)."""
    knots = list(params.knots().values())
    n, n_proc, n_occ = times.shape
    lam = np.zeros((n, n_proc * n_occ, 3 * n_proc))
    for p, knot in enumerate(knots):
        lam[:, p * n_occ:(p + 1) * n_occ, 3 * p:3 * p + 3] = bilinear_loadings(times[:, p, :], knot)
    return lam


def implied_moments_batch(params, times) -> tuple:
    """Implied means ``(n, d)`` and covariances ``(n, d, d)`` for stacked schedules.

    ``times`` has shape ``(n, P, J)`` with processes in the model's canonical
    order. For Model 1 the first coordinate is the baseline covariate and the
    remaining ``2J`` are the mediator then outcome occasions.
    """
    times = np.asarray(times, dtype=float)
    n, n_proc, n_occ = times.shape
    if n_proc != len(params.PROCESSES):
        raise ValueError(f"schedule has {n_proc} processes, model expects {len(params.PROCESSES)}")
    joint = reduced_form_gf_moments(params)
    lam = _stacked_loadings(params, times)
    theta = np.kron(params.residual_cov(), np.eye(n_occ))
    if isinstance(params, ParamsModel1):
        d = 1 + 2 * n_occ
        full = np.zeros((n, d, 7))
        full[:, 0, 0] = 1.0
        full[:, 1:, 1:] = lam
        lam = full
        theta = _block_diag(np.zeros((1, 1)), theta)
    mean = lam @ joint.mean
    cov = lam @ joint.cov @ lam.transpose(0, 2, 1) + theta
    cov = 0.5 * (cov + cov.transpose(0, 2, 1))
    return mean, cov


def _schedule_array(params, schedule: MeasurementSchedule) -> np.ndarray:
    if isinstance(params, ParamsUnivariate):
        if len(schedule.processes) != 1:
            raise ValueError("univariate model needs a single-process schedule")
        return np.asarray(next(iter(schedule.times.values())))[None, None, :]
    missing = [p for p in params.PROCESSES if p not in schedule.times]
    extra = [p for p in schedule.processes if p not in params.PROCESSES]
    if missing or extra:
        raise ValueError(f"schedule processes {schedule.processes} do not match "
                         f"model processes {params.PROCESSES}")
    return np.stack([schedule.times[p] for p in params.PROCESSES])[None]


def implied_individual_moments(params, schedule: MeasurementSchedule, model=None) -> ImpliedMoments:
    """Model-implied mean and covariance of one individual's stacked observations."""
    if model is not None and params_class(model) is not type(params):
        raise ValueError(f"parameters of type {type(params).__name__} do not match model {model!r}")
    mean, cov = implied_moments_batch(params, _schedule_array(params, schedule))
    return ImpliedMoments(mean[0], cov[0])


@dataclass(frozen=True, eq=False)
class Dataset:
    """Balanced, complete panel of individuals.

    ``times`` and ``values`` have shape ``(n, P, J)`` with processes in the
    order given by ``processes``; ``x`` holds the scalar baseline covariate
    used by Model 1.
    """

    processes: tuple
    times: np.ndarray
    values: np.ndarray
    x: np.ndarray | None = None
    ids: np.ndarray | None = None
    truth: object = None
    seed: object = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        times = np.array(self.times, dtype=float)
        values = np.array(self.values, dtype=float)
        if times.ndim != 3 or times.shape != values.shape:
            raise ValueError("times and values must share shape (n, P, J)")
        if times.shape[1] != len(self.processes):
            raise ValueError("process labels do not match the second axis of times")
        if times.shape[0] == 0:
            raise ValueError("dataset is empty")
        if not (np.all(np.isfinite(times)) and np.all(np.isfinite(values))):
            raise ValueError("missing or non-finite cells are not supported")
        bad = np.argwhere(np.any(np.diff(times, axis=2) <= 0, axis=2))
        if bad.size:
            i, p = bad[0]
            raise ValueError(f"row {i}: occasions of process {self.processes[p]!r} "
                             "are not strictly increasing")
        x = None
        if self.x is not None:
            x = np.array(self.x, dtype=float)
            if x.shape != (times.shape[0],) or not np.all(np.isfinite(x)):
                raise ValueError("covariate x must be a finite vector with one entry per row")
            x.setflags(write=False)
        ids = np.arange(times.shape[0]) if self.ids is None else np.asarray(self.ids)
        for arr in (times, values):
            arr.setflags(write=False)
        object.__setattr__(self, "processes", tuple(self.processes))
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "ids", ids)

    @property
    def n(self) -> int:
        return self.times.shape[0]

    @property
    def n_occasions(self) -> int:
        return self.times.shape[2]

    def schedule(self, i: int) -> MeasurementSchedule:
        return MeasurementSchedule({p: self.times[i, k] for k, p in enumerate(self.processes)})

    def process(self, label: str) -> "Dataset":
        """Single-process view, used for univariate fits."""
        k = self.processes.index(label)
        return Dataset((label,), self.times[:, k:k + 1], self.values[:, k:k + 1], ids=self.ids)

    def take(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.processes, self.times[index], self.values[index],
                       None if self.x is None else self.x[index], self.ids[index])

    def check_model(self, model) -> None:
        if model == "univariate":
            if len(self.processes) != 1:
                raise ValueError("univariate fits need a single-process dataset")
            return
        expected = MODEL_PROCESSES[model]
        if self.processes != expected:
            raise ValueError(f"model {model} needs processes {expected}, got {self.processes}")
        if model == 1 and self.x is None:
            raise ValueError("model 1 needs the baseline covariate x")
