"""Full-information maximum likelihood for the bilinear-spline mediation models.

The optimiser works on an unconstrained vector: variances are log-transformed,
growth-factor covariance matrices use a Cholesky factor with log diagonal,
residual covariances across processes use log variances plus canonical partial
correlations on the ``atanh`` scale, and knots go through a scaled logistic
onto the interior of the observed time range.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import _kernels
from .model_core import (
    Dataset,
    ParamsModel1,
    ParamsModel2,
    ParamsUnivariate,
    _COV6,
    _SCALAR,
    _VEC3,
    _block_diag,
    _recursive_moments,
    implied_moments_batch,
    params_class,
    sym_from_tri,
    tri_entries,
)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
INFEASIBLE_PENALTY = 1e10
_CHOL_DIAG = (0, 3, 5)  # positions of diagonal entries in the 6-entry lower triangle


# --------------------------------------------------------------------------
# likelihood


def _as_arrays(dataset: Dataset):
    return (np.ascontiguousarray(dataset.times), np.ascontiguousarray(dataset.values))


def _loglik_conditional(params, times, values, x):
    """Fast route: p(x) * p(z | x) with Woodbury per individual.

    Returns None when the growth-factor covariance is singular, in which case
    callers fall back to the dense evaluation.
    """
    joint = _joint_moments_unchecked(params)
    mean, cov = joint
    total = 0.0
    if isinstance(params, ParamsModel1):
        mu_x, phi_x = params.mu_x, params.phi_x
        if not phi_x > 0:
            return -np.inf
        s_ex = cov[1:, 0]
        cond_cov = cov[1:, 1:] - np.outer(s_ex, s_ex) / phi_x
        dev = x - mu_x
        cond_mean = mean[1:][None, :] + np.outer(dev, s_ex / phi_x)
        total += -0.5 * (len(x) * (LOG_2PI + math.log(phi_x)) + math.fsum(dev * dev) / phi_x)
    else:
        cond_cov = cov
        cond_mean = np.broadcast_to(mean, (times.shape[0], mean.size))
    try:
        chol = np.linalg.cholesky(cond_cov)
    except np.linalg.LinAlgError:
        return None
    logdet_sigma = 2.0 * np.log(np.diag(chol)).sum()
    eye = np.eye(cond_cov.shape[0])
    chol_inv = np.linalg.solve(chol, eye)
    sigma_inv = chol_inv.T @ chol_inv
    rcov = params.residual_cov()
    try:
        rchol = np.linalg.cholesky(rcov)
    except np.linalg.LinAlgError:
        return -np.inf
    rchol_inv = np.linalg.solve(rchol, np.eye(rcov.shape[0]))
    r_inv = rchol_inv.T @ rchol_inv
    logdet_r = 2.0 * np.log(np.diag(rchol)).sum()
    knots = np.array(list(params.knots().values()), dtype=float)
    terms = _kernels.individual_logliks(
        times, values, knots, np.ascontiguousarray(cond_mean), sigma_inv,
        logdet_sigma, r_inv, logdet_r)
    # exactly rounded sums keep the value independent of row order
    return total + math.fsum(terms)


def _joint_moments_unchecked(params):
    # reduced form without the PSD validation performed by GrowthFactorMoments
    if isinstance(params, ParamsModel1):
        coef = np.zeros((7, 7))
        coef[1:4, 0] = params.b_xm
        coef[4:7, 0] = params.b_xy
        coef[4:7, 1:4] = params.b_my
        intercept = np.concatenate([[params.mu_x], params.alpha_m, params.alpha_y])
        dist = _block_diag(np.array([[params.phi_x]]), params.psi_m, params.psi_y)
        return _recursive_moments(intercept, coef, dist)
    if isinstance(params, ParamsModel2):
        coef = np.zeros((9, 9))
        coef[3:6, 0:3] = params.b_xm
        coef[6:9, 0:3] = params.b_xy
        coef[6:9, 3:6] = params.b_my
        intercept = np.concatenate([params.mu_x, params.alpha_m, params.alpha_y])
        dist = _block_diag(params.psi_x, params.psi_m, params.psi_y)
        return _recursive_moments(intercept, coef, dist)
    return np.asarray(params.mean), np.asarray(params.psi)


def loglik_dense(params, dataset: Dataset) -> float:
    """Direct evaluation from the full implied moments of every individual."""
    mean, cov = implied_moments_batch(params, dataset.times)
    obs = dataset.values.reshape(dataset.n, -1)
    if isinstance(params, ParamsModel1):
        obs = np.concatenate([dataset.x[:, None], obs], axis=1)
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return -np.inf
    resid = (obs - mean)[..., None]
    w = np.linalg.solve(chol, resid)[..., 0]
    per_row = (2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
               + np.sum(w * w, axis=1))
    d = obs.shape[1]
    return float(-0.5 * (dataset.n * d * LOG_2PI + math.fsum(per_row)))


def fiml_loglik(params, dataset: Dataset, model=None) -> float:
    """Sum over individuals of the multivariate-normal log-density.

    Each individual contributes through moments built from its own
    measurement occasions. Returns ``-inf`` if the implied covariance of any
    individual is not positive definite.
    """
    if model is not None:
        if params_class(model) is not type(params):
            raise ValueError(f"{type(params).__name__} does not match model {model!r}")
        dataset.check_model(model)
    times, values = _as_arrays(dataset)
    value = _loglik_conditional(params, times, values, dataset.x)
    if value is None:
        value = loglik_dense(params, dataset)
    return float(value) if np.isfinite(value) else -np.inf


# --------------------------------------------------------------------------
# parameter transform


def _corr_to_cpc(corr):
    chol = np.linalg.cholesky(corr)
    size = corr.shape[0]
    cpc = np.zeros((size, size))
    for i in range(1, size):
        remaining = 1.0
        for j in range(i):
            cpc[j, i] = chol[i, j] / math.sqrt(remaining)
            remaining -= chol[i, j] ** 2
    return cpc


def _cpc_to_corr(cpc):
    size = cpc.shape[0]
    chol = np.zeros((size, size))
    chol[0, 0] = 1.0
    for i in range(1, size):
        remaining = 1.0
        for j in range(i):
            chol[i, j] = cpc[j, i] * math.sqrt(max(remaining, 0.0))
            remaining -= chol[i, j] ** 2
        chol[i, i] = math.sqrt(max(remaining, 0.0))
    corr = chol @ chol.T
    np.fill_diagonal(corr, 1.0)
    return corr


def _expit(v):
    return 1.0 / (1.0 + math.exp(-v)) if v >= 0 else math.exp(v) / (1.0 + math.exp(v))


_LOG_CLIP = 300.0  # keeps exp() finite so untransform never raises


class ParameterSpace:
    """Maps natural parameters to and from the unconstrained optimiser space.

    Knot bounds are ``(t_min + delta, t_max - delta)`` over the pooled observed
    times of each process, where ``delta`` is one tenth of the typical gap
    between consecutive waves.
    """

    def __init__(self, model, knot_bounds: dict, knot_gaps: dict | None = None):
        self.model = model
        self.cls = params_class(model)
        self.names = self.cls.names()
        self.knot_bounds = {k: (float(lo), float(hi)) for k, (lo, hi) in knot_bounds.items()}
        self.knot_gaps = {k: 1.0 for k in self.knot_bounds}
        self.knot_gaps.update(knot_gaps or {})
        self._resid_fields = [name for name, kind in self.cls.LAYOUT
                              if kind == _SCALAR and name.startswith("theta")]

    @classmethod
    def from_dataset(cls, dataset: Dataset, model):
        dataset.check_model(model)
        bounds, gaps = {}, {}
        for k, label in enumerate(dataset.processes):
            t = dataset.times[:, k, :]
            # sorting first makes the bounds independent of row order
            gap = float(np.median(np.diff(np.sort(t, axis=0).mean(axis=0))))
            delta = 0.1 * gap
            key = "knot" if model == "univariate" else f"knot_{label}"
            bounds[key] = (t.min() + delta, t.max() - delta)
            gaps[key] = gap
        return cls(model, bounds, gaps)

    @property
    def size(self) -> int:
        return len(self.names)

    def _resid_transform(self, params):
        rcov = params.residual_cov()
        sd = np.sqrt(np.diag(rcov))
        corr = rcov / np.outer(sd, sd)
        cpc = _corr_to_cpc(corr)
        out = {}
        procs = list(params.PROCESSES)
        for a, p in enumerate(procs):
            key = "theta" if isinstance(params, ParamsUnivariate) else f"theta_{p}"
            out[key] = 2.0 * math.log(sd[a])
            for b in range(a + 1, len(procs)):
                w = cpc[a, b]
                if abs(w) >= 1.0:
                    raise ValueError("residual correlation must lie strictly inside (-1, 1)")
                out[f"theta_{p}{procs[b]}"] = math.atanh(w)
        return out

    def transform(self, params) -> np.ndarray:
        """Natural parameters to the unconstrained vector (validates first)."""
        if type(params) is not self.cls:
            raise TypeError(f"expected {self.cls.__name__}, got {type(params).__name__}")
        params.validate()
        resid = self._resid_transform(params)
        out = []
        for name, kind in self.cls.LAYOUT:
            value = getattr(params, name)
            if kind == _SCALAR:
                if name in self.knot_bounds:
                    lo, hi = self.knot_bounds[name]
                    if not lo < value < hi:
                        raise ValueError(f"{name}={value} outside admissible range ({lo}, {hi})")
                    q = (value - lo) / (hi - lo)
                    out.append(math.log(q) - math.log1p(-q))
                elif name == "phi_x":
                    out.append(math.log(value))
                elif name in resid:
                    out.append(resid[name])
                else:
                    out.append(value)
            elif kind == _VEC3:
                out.extend(value)
            elif kind == _COV6:
                try:
                    chol = np.linalg.cholesky(value)
                except np.linalg.LinAlgError:
                    raise ValueError(f"{name} must be positive definite") from None
                entries = tri_entries(chol)
                entries[list(_CHOL_DIAG)] = np.log(entries[list(_CHOL_DIAG)])
                out.extend(entries)
            else:
                out.extend(tri_entries(value))
        return np.array(out, dtype=float)

    def untransform(self, vec) -> object:
        """Unconstrained vector to natural parameters; never raises on finite input."""
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.size,):
            raise ValueError(f"expected {self.size} coordinates, got {vec.shape}")
        nat = np.empty(self.size)
        pos = 0
        resid_pos = {}
        for name, kind in self.cls.LAYOUT:
            if kind == _SCALAR:
                v = vec[pos]
                if name in self.knot_bounds:
                    lo, hi = self.knot_bounds[name]
                    nat[pos] = lo + (hi - lo) * _expit(v)
                elif name == "phi_x":
                    nat[pos] = math.exp(min(max(v, -_LOG_CLIP), _LOG_CLIP))
                elif name in self._resid_fields:
                    resid_pos[name] = pos
                else:
                    nat[pos] = v
                pos += 1
            elif kind == _VEC3:
                nat[pos:pos + 3] = vec[pos:pos + 3]
                pos += 3
            elif kind == _COV6:
                entries = vec[pos:pos + 6].copy()
                diag = list(_CHOL_DIAG)
                entries[diag] = np.exp(np.clip(entries[diag], -_LOG_CLIP, _LOG_CLIP))
                low = np.tril(sym_from_tri(entries))
                nat[pos:pos + 6] = tri_entries(low @ low.T)
                pos += 6
            else:
                nat[pos:pos + 6] = vec[pos:pos + 6]
                pos += 6
        self._fill_residuals(vec, nat, resid_pos)
        return self.cls.from_vector(nat, validate=False)

    def _fill_residuals(self, vec, nat, resid_pos):
        if self.model == "univariate":
            p = resid_pos["theta"]
            nat[p] = math.exp(min(max(vec[p], -_LOG_CLIP), _LOG_CLIP))
            return
        procs = list(self.cls.PROCESSES)
        size = len(procs)
        sd = np.empty(size)
        cpc = np.zeros((size, size))
        for a, p in enumerate(procs):
            sd[a] = math.exp(0.5 * min(max(vec[resid_pos[f"theta_{p}"]], -_LOG_CLIP), _LOG_CLIP))
            for b in range(a + 1, size):
                cpc[a, b] = math.tanh(vec[resid_pos[f"theta_{p}{procs[b]}"]])
        cov = _cpc_to_corr(cpc) * np.outer(sd, sd)
        for a, p in enumerate(procs):
            nat[resid_pos[f"theta_{p}"]] = cov[a, a]
            for b in range(a + 1, size):
                nat[resid_pos[f"theta_{p}{procs[b]}"]] = cov[a, b]


# --------------------------------------------------------------------------
# starting values


def _line_fit(t, v):
    """Row-wise least-squares lines; returns slope, intercept, residual SS."""
    tm = t.mean(axis=1, keepdims=True)
    vm = v.mean(axis=1, keepdims=True)
    dt = t - tm
    sxx = np.sum(dt * dt, axis=1)
    slope = np.sum(dt * (v - vm), axis=1) / sxx
    intercept = vm[:, 0] - slope * tm[:, 0]
    resid = v - (intercept[:, None] + slope[:, None] * t)
    return slope, intercept, np.sum(resid * resid, axis=1)


def crude_growth_factors(times, values):
    """Per-individual crude growth factors and a pooled residual variance.

    Returns ``(factors (n, 3), knot, residual_variance)`` for one process
    given its ``(n, J)`` times and values.
    """
    n, n_occ = times.shape
    knot = float(np.median(times))
    pre = times <= knot
    n_pre, n_post = pre.sum(axis=1), (~pre).sum(axis=1)
    if n_pre.min() < 2 or n_post.min() < 2 or np.any(n_pre != n_pre[0]):
        knot = 0.5 * (times.min() + times.max())
        slope = (values[:, -1] - values[:, 0]) / (times[:, -1] - times[:, 0])
        level = values[:, 0] + slope * (knot - times[:, 0])
        resid = values - (level[:, None] + slope[:, None] * (times - knot))
        factors = np.column_stack([slope, level, slope])
        dof = max(n * (n_occ - 2), n)
        return factors, knot, float(np.sum(resid * resid) / dof)
    k = int(n_pre[0])
    s1, c1, ss1 = _line_fit(times[:, :k], values[:, :k])
    s2, c2, ss2 = _line_fit(times[:, k:], values[:, k:])
    nearest = np.argmin(np.abs(times - knot), axis=1)
    rows = np.arange(n)
    t_near = times[rows, nearest]
    v_near = values[rows, nearest]
    seg_slope = np.where(nearest < k, s1, s2)
    level = v_near + seg_slope * (knot - t_near)
    factors = np.column_stack([s1, level, s2])
    dof = max(n * (n_occ - 4), n)
    return factors, knot, float(np.sum(ss1 + ss2) / dof)


def _shrunk_cov(factors):
    cov = np.cov(factors, rowvar=False, bias=True) if len(factors) > 1 else np.zeros((3, 3))
    cov = 0.8 * cov + 0.2 * np.diag(np.diag(cov))
    floor = 1e-6 * max(1.0, np.trace(cov))
    return cov + floor * np.eye(3)


def starting_values(dataset: Dataset, model):
    """Crude data-driven starting point; all structural coefficients start at 0."""
    dataset.check_model(model)
    crude = {}
    for k, label in enumerate(dataset.processes):
        factors, knot, resid_var = crude_growth_factors(dataset.times[:, k, :],
                                                        dataset.values[:, k, :])
        scale = max(1.0, float(np.var(dataset.values[:, k, :])))
        crude[label] = (factors, knot, max(resid_var, 1e-6 * scale))
    zero3, zero33 = np.zeros(3), np.zeros((3, 3))
    if model == "univariate":
        factors, knot, rv = crude[dataset.processes[0]]
        return ParamsUnivariate(factors.mean(axis=0), _shrunk_cov(factors), knot, rv)
    common = {}
    for label in ("m", "y"):
        factors, knot, rv = crude[label]
        common[f"alpha_{label}"] = factors.mean(axis=0)
        common[f"psi_{label}"] = _shrunk_cov(factors)
        common[f"knot_{label}"] = knot
        common[f"theta_{label}"] = rv
    if model == 1:
        x = dataset.x
        phi = float(np.var(x))
        return ParamsModel1(mu_x=float(x.mean()), phi_x=phi if phi > 0 else 1.0,
                            b_xm=zero3, b_xy=zero3, b_my=zero33, theta_my=0.0, **common)
    factors, knot, rv = crude["x"]
    return ParamsModel2(mu_x=factors.mean(axis=0), psi_x=_shrunk_cov(factors), knot_x=knot,
                        theta_x=rv, b_xm=zero33, b_xy=zero33, b_my=zero33, **common)


# --------------------------------------------------------------------------
# numerical derivatives


def numerical_gradient(fun, x, steps):
    grad = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = steps[k]
        grad[k] = (fun(x + e) - fun(x - e)) / (2.0 * steps[k])
    return grad


def numerical_hessian(fun, x, steps, f0=None):
    """Central-difference Hessian using the four-point cross formula."""
    p = x.size
    f0 = fun(x) if f0 is None else f0
    hess = np.empty((p, p))
    plus = np.empty(p)
    minus = np.empty(p)
    for i in range(p):
        e = np.zeros(p)
        e[i] = steps[i]
        plus[i] = fun(x + e)
        minus[i] = fun(x - e)
        hess[i, i] = (plus[i] - 2.0 * f0 + minus[i]) / steps[i] ** 2
    for i in range(p):
        for j in range(i):
            ei = np.zeros(p)
            ej = np.zeros(p)
            ei[i] = steps[i]
            ej[j] = steps[j]
            val = (fun(x + ei + ej) - fun(x + ei - ej) - fun(x - ei + ej)
                   + fun(x - ei - ej)) / (4.0 * steps[i] * steps[j])
            hess[i, j] = hess[j, i] = val
    return hess


def _grad_steps(v):
    return 6e-6 * np.maximum(1.0, np.abs(v))


def _hess_steps(theta):
    return np.maximum(1e-4, 1e-4 * np.abs(theta))


# --------------------------------------------------------------------------
# fitting


@dataclass
class FitOptions:
    max_starts: int = 10
    gtol: float = 1e-6
    max_iter: int = 3000
    seed: int = 0
    slope_jitter: float = 0.2
    knot_jitter: float = 0.5
    hessian_ridge: float = 1e-8
    polish_steps: int = 8


@dataclass
class FitResult:
    model: object
    params: object
    names: list
    estimates: np.ndarray
    se: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    cov: np.ndarray | None
    loglik: float
    status: str
    n_starts: int
    grad_norm: float
    se_available: bool
    message: str = ""
    start_logliks: list = field(default_factory=list)
    start_converged: list = field(default_factory=list)
    effects: list = field(default_factory=list)
    n_obs: int = 0

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def table(self) -> dict:
        return {name: (est, se, lo, hi) for name, est, se, lo, hi in
                zip(self.names, self.estimates, self.se, self.ci_low, self.ci_high)}


class _Objective:
    """Mean negative log-likelihood on the unconstrained space."""

    def __init__(self, dataset: Dataset, space: ParameterSpace):
        self.space = space
        self.dataset = dataset
        self.times, self.values = _as_arrays(dataset)
        self.x = dataset.x
        self.n = dataset.n
        self.evals = 0

    def loglik_natural(self, params) -> float:
        self.evals += 1
        value = _loglik_conditional(params, self.times, self.values, self.x)
        if value is None:
            value = loglik_dense(params, self.dataset)
        return value if np.isfinite(value) else -np.inf

    def __call__(self, v) -> float:
        ll = self.loglik_natural(self.space.untransform(v))
        return -ll / self.n if np.isfinite(ll) else INFEASIBLE_PENALTY

    def gradient(self, v):
        return numerical_gradient(self, v, _grad_steps(v))


def _jitter(params, space: ParameterSpace, rng, options: FitOptions):
    """Perturb slopes and variances multiplicatively and knots additively."""
    lo, hi = 1.0 - options.slope_jitter, 1.0 + options.slope_jitter
    changes = {}

    def scale_cov(mat):
        f = np.sqrt(rng.uniform(lo, hi, size=3))
        return mat * np.outer(f, f)

    for name, kind in params.LAYOUT:
        value = getattr(params, name)
        if kind == _VEC3 and (name.startswith("alpha") or name in ("mu_x", "mean")):
            factor = rng.uniform(lo, hi, size=3)
            factor[1] = 1.0  # level at the knot is not a slope
            changes[name] = value * factor
        elif kind == _COV6:
            changes[name] = scale_cov(value)
        elif kind == _SCALAR and name in space.knot_bounds:
            k_lo, k_hi = space.knot_bounds[name]
            gap = space.knot_gaps[name]
            shifted = value + options.knot_jitter * gap * rng.uniform(-1.0, 1.0)
            margin = 1e-3 * (k_hi - k_lo)
            changes[name] = min(max(shifted, k_lo + margin), k_hi - margin)
        elif kind == _SCALAR and name == "phi_x":
            changes[name] = value * rng.uniform(lo, hi)
    rcov = params.residual_cov()
    f = np.sqrt(rng.uniform(lo, hi, size=rcov.shape[0]))
    rcov = rcov * np.outer(f, f)
    procs = params.PROCESSES
    if isinstance(params, ParamsUnivariate):
        changes["theta"] = rcov[0, 0]
    else:
        for a, p in enumerate(procs):
            changes[f"theta_{p}"] = rcov[a, a]
            for b in range(a + 1, len(procs)):
                changes[f"theta_{p}{procs[b]}"] = rcov[a, b]
    return params.replace(**changes)


def _newton_polish(obj: _Objective, v, gtol, steps):
    """A few damped Newton steps; used when BFGS stalls just above tolerance."""
    f = obj(v)
    g = obj.gradient(v)
    for _ in range(steps):
        if np.max(np.abs(g)) < gtol:
            break
        hess = numerical_hessian(obj, v, 1e-4 * np.maximum(1.0, np.abs(v)), f0=f)
        hess = 0.5 * (hess + hess.T)
        eigval, eigvec = np.linalg.eigh(hess)
        eigval = np.maximum(np.abs(eigval), 1e-8 * max(1.0, np.abs(eigval).max()))
        step = -eigvec @ ((eigvec.T @ g) / eigval)
        t = 1.0
        while t > 1e-6:
            cand = v + t * step
            fc = obj(cand)
            if fc <= f:
                break
            t *= 0.5
        else:
            break
        v, f = cand, fc
        g = obj.gradient(v)
    return v, f, g


def _optimise(obj: _Objective, v0, options: FitOptions):
    res = optimize.minimize(obj, v0, jac=obj.gradient, method="BFGS",
                            options={"gtol": options.gtol, "norm": np.inf,
                                     "maxiter": options.max_iter})
    v = res.x
    g = obj.gradient(v)
    f = obj(v)
    if np.max(np.abs(g)) >= options.gtol and options.polish_steps and f < INFEASIBLE_PENALTY:
        v, f, g = _newton_polish(obj, v, options.gtol, options.polish_steps)
    return v, f, g, res


def observed_information(params, dataset: Dataset, obj: _Objective | None = None):
    """Negative natural-space Hessian of the log-likelihood at ``params``."""
    cls = type(params)
    theta = params.to_vector()
    if obj is None:
        obj = _Objective(dataset, ParameterSpace.from_dataset(dataset, cls.MODEL))

    def ll(vec):
        return obj.loglik_natural(cls.from_vector(vec, validate=False))

    hess = numerical_hessian(ll, theta, _hess_steps(theta))
    return -0.5 * (hess + hess.T)


def _standard_errors(info, ridge):
    if not np.all(np.isfinite(info)):
        return None, "non-finite Hessian"
    try:
        np.linalg.cholesky(info + ridge * np.eye(info.shape[0]))
    except np.linalg.LinAlgError:
        return None, "Hessian not positive definite"
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        return None, "singular Hessian"
    if np.any(np.diag(cov) <= 0) or not np.all(np.isfinite(cov)):
        return None, "information matrix inverse has non-positive variances"
    return 0.5 * (cov + cov.T), ""


def fit(dataset: Dataset, model, options: FitOptions | None = None, start=None) -> FitResult:
    """Maximise the FIML log-likelihood with jittered restarts.

    Starts are tried in sequence until one converges (gradient infinity norm
    of the mean negative log-likelihood below ``gtol`` and a positive definite
    observed information). Standard errors come from the inverse observed
    information in natural space; Wald intervals are estimate +/- 1.96 SE.
    """
    options = options or FitOptions()
    dataset.check_model(model)
    space = ParameterSpace.from_dataset(dataset, model)
    obj = _Objective(dataset, space)
    start = start if start is not None else starting_values(dataset, model)
    rng = np.random.default_rng(options.seed)
    p = space.size

    best = None
    start_logliks, start_converged = [], []
    n_starts = 0
    for s in range(options.max_starts):
        n_starts += 1
        init = start if s == 0 else _jitter(start, space, rng, options)
        try:
            v0 = space.transform(init)
        except ValueError as exc:
            log.debug("start %d rejected: %s", s, exc)
            continue
        v, f, g, res = _optimise(obj, v0, options)
        loglik = -f * dataset.n if f < INFEASIBLE_PENALTY else -np.inf
        gnorm = float(np.max(np.abs(g)))
        start_logliks.append(loglik)
        params = space.untransform(v)
        cov, why = (None, "gradient above tolerance")
        if gnorm < options.gtol and np.isfinite(loglik):
            info = observed_information(params, dataset, obj)
            cov, why = _standard_errors(info, options.hessian_ridge)
        converged = cov is not None
        start_converged.append(converged)
        log.debug("start %d: loglik=%.6f grad=%.2e converged=%s %s", s, loglik, gnorm,
                  converged, why)
        cand = (converged, loglik, params, cov, gnorm, why)
        if best is None or (cand[0], cand[1]) > (best[0], best[1]):
            best = cand
        if converged:
            break

    if best is None:
        raise ValueError("no admissible starting values")
    converged, loglik, params, cov, gnorm, why = best
    message = "" if converged else why
    if converged and dataset.n < p:
        converged, cov = False, None
        message = f"under-identified: {dataset.n} individuals for {p} free parameters"
    est = params.to_vector()
    if cov is not None:
        se = np.sqrt(np.diag(cov))
    else:
        se = np.full(p, np.nan)
    return FitResult(
        model=model, params=params, names=space.names, estimates=est, se=se,
        ci_low=est - 1.96 * se, ci_high=est + 1.96 * se, cov=cov, loglik=float(loglik),
        status="converged" if converged else "failed", n_starts=n_starts,
        grad_norm=gnorm, se_available=cov is not None, message=message,
        start_logliks=start_logliks, start_converged=start_converged, n_obs=dataset.n)
