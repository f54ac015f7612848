"""Data generation and Monte Carlo evaluation.

Population values that are not fixed by the design factors are declared
defaults: growth-factor standard deviations of 1 (slopes) and 5 (level at the
knot), within-process growth-factor correlation 0.3, level-at-knot means of
100, and slope means set by a trajectory-shape preset.  Path coefficients are
given on a standardised scale and converted with the marginal growth-factor
standard deviations.
"""
from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .effects import attach_effects, derived_quantities
from .estimation import FitOptions, fit
from .model_core import (
    MODEL_PROCESSES,
    Dataset,
    MeasurementSchedule,
    ParamsModel1,
    ParamsModel2,
    bilinear_loadings,
    reduced_form_gf_moments,
)

log = logging.getLogger(__name__)

WORKERS_ENV = "BILINEAR_MEDIATION_WORKERS"

SHAPES = {
    "deceleration": (5.0, 2.6),
    "acceleration": (2.6, 5.0),
    "plateau": (5.0, 1.0),
}
R2_SCENARIOS = {"zero": 0.0, "medium": 0.13, "substantial": 0.26}

GF_SD = np.array([1.0, 5.0, 1.0])
GF_CORR = 0.3
LEVEL_MEAN = 100.0


def r2_to_coefficient(target_r2: float, var_predictor: float, var_outcome_factor: float) -> float:
    """Path coefficient giving a predictor the target share of explained variance."""
    if not 0.0 <= target_r2 < 1.0:
        raise ValueError("target_r2 must lie in [0, 1)")
    if var_predictor <= 0 or var_outcome_factor <= 0:
        raise ValueError("variances must be positive")
    return math.sqrt(target_r2 * var_outcome_factor / var_predictor)


@dataclass(frozen=True)
class ConditionSpec:
    """One cell of the simulation design."""

    model: int = 1
    n: int = 500
    J: int = 10
    knots: tuple = (4.5, 4.5)
    theta: float = 1.0
    residual_corr: float = 0.3
    scenario: str = "medium"
    r2_xy: float = 0.13
    immediate: float = 0.3
    delayed: float = 0.1
    xm_immediate: float = 0.3
    xm_delayed: float = 0.1
    xy_immediate: float = 0.3
    xy_delayed: float = 0.1
    shape: str = "deceleration"
    temporal_order: bool = False
    reps: int = 200
    base_seed: int = 0
    jitter: float = 0.25
    max_attempts: int | None = None
    gf_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))
        self.validate()

    def validate(self):
        if self.model not in (1, 2):
            raise ValueError("model must be 1 or 2")
        if len(self.knots) != len(MODEL_PROCESSES[self.model]):
            raise ValueError(f"model {self.model} needs {len(MODEL_PROCESSES[self.model])} knots")
        if any(not 0.0 < k < self.J - 1 for k in self.knots):
            raise ValueError(f"knot means must lie strictly inside (0, {self.J - 1})")
        if self.temporal_order and any(a > b for a, b in zip(self.knots, self.knots[1:])):
            raise ValueError("temporal-order preset needs non-decreasing knots across processes")
        if self.J < 2 or self.n < 1 or self.reps < 1:
            raise ValueError("J >= 2, n >= 1 and reps >= 1 are required")
        if self.theta < 0 or not -1.0 < self.residual_corr < 1.0:
            raise ValueError("theta must be >= 0 and residual_corr inside (-1, 1)")
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {sorted(SHAPES)}")
        self.r2_xm  # raises for unknown scenarios
        if not 0.0 <= self.jitter < 0.5:
            raise ValueError("jitter must lie in [0, 0.5)")

    @property
    def r2_xm(self) -> float:
        if isinstance(self.scenario, str):
            if self.scenario not in R2_SCENARIOS:
                raise ValueError(f"scenario must be one of {sorted(R2_SCENARIOS)} or a number")
            return R2_SCENARIOS[self.scenario]
        return float(self.scenario)

    @property
    def attempt_cap(self) -> int:
        return self.max_attempts if self.max_attempts is not None else 2 * self.reps

    def to_dict(self) -> dict:
        out = asdict(self)
        out["knots"] = list(self.knots)
        return out


def _template_cov() -> np.ndarray:
    corr = np.full((3, 3), GF_CORR)
    np.fill_diagonal(corr, 1.0)
    return corr * np.outer(GF_SD, GF_SD)


def _template_mean(shape: str) -> np.ndarray:
    s1, s2 = SHAPES[shape]
    return np.array([s1, LEVEL_MEAN, s2])


def _path_matrix(immediate: float, delayed: float, sd_source, sd_target) -> np.ndarray:
    """Lower-triangular coefficients from standardised immediate/delayed levels."""
    out = np.zeros((3, 3))
    for r in range(3):
        for c in range(r + 1):
            level = immediate if r == c else delayed
            out[r, c] = level * sd_target[r] / sd_source[c]
    return out


def _residual_part(target_cov, explained_cov, label):
    psi = target_cov - explained_cov
    psi = 0.5 * (psi + psi.T)
    if np.linalg.eigvalsh(psi).min() <= 0:
        raise ValueError(f"design leaves no admissible unexplained covariance for {label}")
    return psi


def population_params(spec: ConditionSpec):
    """Generating parameters for a design cell."""
    mean_gf = _template_mean(spec.shape)
    sigma = _template_cov()
    validate = spec.theta > 0 and spec.gf_scale > 0
    rho = spec.residual_corr
    if spec.model == 1:
        mu_x, phi_x = 0.0, 1.0
        b_xm = np.array([r2_to_coefficient(spec.r2_xm, phi_x, sigma[k, k]) for k in range(3)])
        psi_m = _residual_part(sigma, phi_x * np.outer(b_xm, b_xm), "mediator")
        b_xy = np.array([r2_to_coefficient(spec.r2_xy, phi_x, sigma[k, k]) for k in range(3)])
        b_my = _path_matrix(spec.immediate, spec.delayed, GF_SD, GF_SD)
        # covariance of the predictors (x, eta_m)
        pred_cov = np.zeros((4, 4))
        pred_cov[0, 0] = phi_x
        pred_cov[1:, 0] = pred_cov[0, 1:] = phi_x * b_xm
        pred_cov[1:, 1:] = sigma
        coef = np.column_stack([b_xy, b_my])
        psi_y = _residual_part(sigma, coef @ pred_cov @ coef.T, "outcome")
        alpha_m = mean_gf - b_xm * mu_x
        alpha_y = mean_gf - b_xy * mu_x - b_my @ mean_gf
        kwargs = dict(
            mu_x=mu_x, phi_x=phi_x, knot_m=spec.knots[0], knot_y=spec.knots[1],
            alpha_m=alpha_m, alpha_y=alpha_y, b_xm=b_xm, b_xy=b_xy, b_my=b_my,
            psi_m=spec.gf_scale * psi_m, psi_y=spec.gf_scale * psi_y,
            theta_m=spec.theta, theta_y=spec.theta, theta_my=rho * spec.theta)
        cls = ParamsModel1
    else:
        psi_x = sigma
        b_xm = _path_matrix(spec.xm_immediate, spec.xm_delayed, GF_SD, GF_SD)
        psi_m = _residual_part(sigma, b_xm @ psi_x @ b_xm.T, "mediator")
        b_xy = _path_matrix(spec.xy_immediate, spec.xy_delayed, GF_SD, GF_SD)
        b_my = _path_matrix(spec.immediate, spec.delayed, GF_SD, GF_SD)
        pred_cov = np.zeros((6, 6))
        pred_cov[:3, :3] = psi_x
        pred_cov[3:, :3] = b_xm @ psi_x
        pred_cov[:3, 3:] = pred_cov[3:, :3].T
        pred_cov[3:, 3:] = sigma
        coef = np.hstack([b_xy, b_my])
        psi_y = _residual_part(sigma, coef @ pred_cov @ coef.T, "outcome")
        alpha_m = mean_gf - b_xm @ mean_gf
        alpha_y = mean_gf - b_xy @ mean_gf - b_my @ mean_gf
        kwargs = dict(
            mu_x=mean_gf, psi_x=spec.gf_scale * psi_x, knot_x=spec.knots[0],
            knot_m=spec.knots[1], knot_y=spec.knots[2], alpha_m=alpha_m, alpha_y=alpha_y,
            b_xm=b_xm, b_xy=b_xy, b_my=b_my, psi_m=spec.gf_scale * psi_m,
            psi_y=spec.gf_scale * psi_y, theta_x=spec.theta, theta_m=spec.theta,
            theta_y=spec.theta, theta_xm=rho * spec.theta, theta_xy=rho * spec.theta,
            theta_my=rho * spec.theta)
        cls = ParamsModel2
    if validate:
        return cls(**kwargs)
    # zero-noise designs are not valid estimation targets but can still generate data
    template = cls.from_vector(np.zeros(cls.n_free()), validate=False)
    return template.replace(validate=False, **kwargs)


def _psd_factor(cov):
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))


def generate_times(n: int, J: int, n_processes: int, jitter: float = 0.25, rng=None):
    """Occasions ``t_ij ~ U(j - jitter, j + jitter)`` around waves 0..J-1."""
    if J < 2:
        raise ValueError("need at least two waves")
    if not 0.0 <= jitter < 0.5:
        raise ValueError("jitter must be below half the spacing between waves")
    rng = np.random.default_rng(rng)
    grid = np.arange(J, dtype=float)
    if jitter == 0.0:
        return np.broadcast_to(grid, (n, n_processes, J)).copy()
    return grid + rng.uniform(-jitter, jitter, size=(n, n_processes, J))


def generate_schedule(J: int, jitter_halfwidth: float = 0.25, rng=None,
                      processes=("m", "y")) -> MeasurementSchedule:
    """One individual's schedule; each process is drawn independently."""
    times = generate_times(1, J, len(processes), jitter_halfwidth, rng)[0]
    return MeasurementSchedule({p: times[k] for k, p in enumerate(processes)})


def generate_dataset(truth, n: int, J: int, model=None, rng=None, jitter: float = 0.25) -> Dataset:
    """Simulate a complete panel from generating parameters.

    Growth factors (and the baseline covariate) are drawn jointly from their
    reduced-form moments, then individual occasions, then residuals whose
    same-occasion cross-process covariance follows the residual structure.
    """
    model = truth.MODEL if model is None else model
    if model != truth.MODEL:
        raise ValueError(f"truth is for model {truth.MODEL}, not {model}")
    rng = np.random.default_rng(rng)
    joint = reduced_form_gf_moments(truth)
    draws = joint.mean + rng.standard_normal((n, joint.mean.size)) @ _psd_factor(joint.cov).T
    processes = MODEL_PROCESSES[model]
    if model == 1:
        x, factors = draws[:, 0], draws[:, 1:]
    else:
        x, factors = None, draws
    times = generate_times(n, J, len(processes), jitter, rng)
    rchol = _psd_factor(truth.residual_cov())
    resid = rng.standard_normal((n, J, len(processes))) @ rchol.T
    values = np.empty_like(times)
    for k, label in enumerate(processes):
        lam = bilinear_loadings(times[:, k, :], getattr(truth, f"knot_{label}"))
        values[:, k, :] = np.einsum("nja,na->nj", lam, factors[:, 3 * k:3 * k + 3])
        values[:, k, :] += resid[:, :, k]
    return Dataset(processes, times, values, x=x, truth=truth)


# --------------------------------------------------------------------------
# performance metrics


class Metrics(NamedTuple):
    relative_bias: float
    empirical_se: float
    relative_rmse: float
    coverage: float
    mc_se_bias: float
    bias: float
    rmse: float
    mean_se: float
    relative: bool


def performance_metrics(estimates, ses, cis, truth: float) -> Metrics:
    """Relative bias, empirical SE, relative RMSE and coverage over replications.

    When ``truth`` is zero the relative measures are replaced by absolute bias
    and RMSE, and ``relative`` is False.
    """
    est = np.asarray(estimates, dtype=float)
    cis = np.asarray(cis, dtype=float)
    s = est.size
    if s < 2:
        raise ValueError("need at least two replications")
    err = est - truth
    bias = err.sum() / s
    # centring on the first draw keeps identical estimates at exactly zero spread
    shifted = est - est[0]
    emp_se = math.sqrt(np.sum((shifted - shifted.mean()) ** 2) / (s - 1))
    rmse = math.sqrt(np.sum(err * err) / s)
    covered = (cis[:, 0] <= truth) & (truth <= cis[:, 1])
    coverage = covered.sum() / s
    relative = truth != 0
    rel_bias = bias / truth if relative else bias
    rel_rmse = rmse / truth if relative else rmse
    mc_se = math.sqrt(emp_se ** 2 / s)
    mean_se = float(np.nanmean(ses)) if np.any(np.isfinite(ses)) else float("nan")
    return Metrics(rel_bias, emp_se, rel_rmse, coverage, mc_se, bias, rmse, mean_se, relative)


# --------------------------------------------------------------------------
# condition driver


@dataclass
class ConditionResult:
    spec: ConditionSpec
    names: list
    truth: dict
    estimates: np.ndarray
    ses: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    metrics: dict
    attempts: int
    failures: int
    attempt_index: list = field(default_factory=list)

    @property
    def achieved(self) -> int:
        return self.estimates.shape[0]

    @property
    def partial(self) -> bool:
        return self.achieved < self.spec.reps

    @property
    def convergence_rate(self) -> float:
        return self.achieved / self.attempts if self.attempts else float("nan")


def default_estimator(dataset, model, seed):
    """Fit plus derived effects; the signature used by ``run_condition``."""
    result = fit(dataset, model, FitOptions(seed=seed))
    if result.converged:
        attach_effects(result)
    return result


def _replication_seed(base_seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(base_seed), int(index)])


def run_replication(spec: ConditionSpec, truth, index: int, estimator=None):
    """Simulate and fit one replication; returns the fit (or None on failure)."""
    estimator = estimator or default_estimator
    data_seq, fit_seq = _replication_seed(spec.base_seed, index).spawn(2)
    data = generate_dataset(truth, spec.n, spec.J, spec.model, np.random.default_rng(data_seq),
                            spec.jitter)
    fit_seed = int(fit_seq.generate_state(1)[0])
    try:
        result = estimator(data, spec.model, fit_seed)
    except (ValueError, np.linalg.LinAlgError) as exc:
        log.warning("replication %d raised %s", index, exc)
        return None
    return result if result is not None and result.converged else None


def _replication_record(result):
    quantities = derived_quantities(result)
    return ({k: v[0] for k, v in quantities.items()}, {k: v[1] for k, v in quantities.items()})


def _worker_count(workers):
    if workers is not None:
        return max(1, int(workers))
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def _run_batch(spec, truth, indices, estimator, workers):
    if workers == 1 or len(indices) == 1:
        return [run_replication(spec, truth, i, estimator) for i in indices]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(run_replication, spec, truth, i, estimator) for i in indices]
        return [f.result() for f in futures]


def truth_quantities(truth) -> dict:
    from .effects import truth_derived_quantities

    return truth_derived_quantities(truth)


def run_condition(spec: ConditionSpec, estimator: Callable | None = None,
                  workers: int | None = None, progress: Callable | None = None) -> ConditionResult:
    """Collect ``spec.reps`` convergent replications and score them.

    Replication ``a`` draws from a random stream derived from
    ``(spec.base_seed, a)``; batches are evaluated in index order so the
    result does not depend on the number of workers.
    """
    truth = population_params(spec)
    truth_q = truth_quantities(truth)
    names = list(truth_q)
    workers = _worker_count(workers)
    records = []
    next_index = 0
    failures = 0
    cap = spec.attempt_cap
    while len(records) < spec.reps and next_index < cap:
        need = spec.reps - len(records)
        batch = list(range(next_index, min(next_index + need, cap)))
        next_index = batch[-1] + 1
        for index, result in zip(batch, _run_batch(spec, truth, batch, estimator, workers)):
            if result is None:
                failures += 1
                continue
            records.append((index, *_replication_record(result)))
            if progress is not None:
                progress(len(records), index + 1)
    s = len(records)
    est = np.full((s, len(names)), np.nan)
    se = np.full((s, len(names)), np.nan)
    for row, (_, values, errors) in enumerate(records):
        for col, name in enumerate(names):
            est[row, col] = values.get(name, np.nan)
            se[row, col] = errors.get(name, np.nan)
    lo, hi = est - 1.96 * se, est + 1.96 * se
    metrics = {}
    if s >= 2:
        for col, name in enumerate(names):
            cis = np.column_stack([lo[:, col], hi[:, col]])
            metrics[name] = performance_metrics(est[:, col], se[:, col], cis, truth_q[name])
    return ConditionResult(spec=spec, names=names, truth=truth_q, estimates=est, ses=se,
                           ci_low=lo, ci_high=hi, metrics=metrics, attempts=next_index,
                           failures=failures, attempt_index=[r[0] for r in records])
