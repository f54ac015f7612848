"""Direct, indirect and total effects with delta-method inference.

Effects are sums of products of path coefficients, so their gradients with
respect to the natural parameter vector are written out with the product rule.
Labels use ``1``, ``g`` and ``2`` for the first slope, the level at the knot
and the second slope; for example ``x->m1->yg`` or ``x1->y2 total``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model_core import (
    FACTORS,
    GrowthFactorMoments,
    ParamsModel1,
    ParamsModel2,
    reduced_form_gf_moments,
)

Z95 = 1.96


@dataclass(frozen=True)
class EffectEstimate:
    label: str
    kind: str  # "indirect", "total", "direct" or "mean"
    estimate: float
    se: float = float("nan")
    ci_low: float = float("nan")
    ci_high: float = float("nan")

    def with_se(self, se: float) -> "EffectEstimate":
        return EffectEstimate(self.label, self.kind, self.estimate, se,
                              self.estimate - Z95 * se, self.estimate + Z95 * se)


@dataclass(frozen=True)
class _Path:
    label: str
    kind: str
    terms: tuple  # each term is a tuple of parameter names whose product is summed


def _model_of(params_or_model):
    if params_or_model in (1, 2):
        return params_or_model
    return params_or_model.MODEL


def _m1_catalog():
    f = FACTORS
    indirect, total, direct = [], [], []
    for c in range(3):
        for r in range(c, 3):
            indirect.append(_Path(f"x->m{f[c]}->y{f[r]}", "indirect",
                                  ((f"b_xm_{f[c]}", f"b_my_{f[c]}{f[r]}"),)))
    for r in range(3):
        terms = [(f"b_xy_{f[r]}",)]
        terms += [(f"b_xm_{f[c]}", f"b_my_{f[c]}{f[r]}") for c in range(r + 1)]
        total.append(_Path(f"x->y{f[r]} total", "total", tuple(terms)))
    for r in range(3):
        direct.append(_Path(f"x->m{f[r]}", "direct", ((f"b_xm_{f[r]}",),)))
    for r in range(3):
        direct.append(_Path(f"x->y{f[r]}", "direct", ((f"b_xy_{f[r]}",),)))
    for c in range(3):
        for r in range(c, 3):
            direct.append(_Path(f"m{f[c]}->y{f[r]}", "direct", ((f"b_my_{f[c]}{f[r]}",),)))
    return indirect, total, direct


def _m2_catalog():
    f = FACTORS
    indirect, total, direct = [], [], []
    for c in range(3):
        for a in range(c + 1):
            for r in range(c, 3):
                indirect.append(_Path(f"x{f[a]}->m{f[c]}->y{f[r]}", "indirect",
                                      ((f"b_xm_{f[a]}{f[c]}", f"b_my_{f[c]}{f[r]}"),)))
    for a in range(3):
        for r in range(a, 3):
            terms = [(f"b_xy_{f[a]}{f[r]}",)]
            terms += [(f"b_xm_{f[a]}{f[c]}", f"b_my_{f[c]}{f[r]}") for c in range(a, r + 1)]
            total.append(_Path(f"x{f[a]}->y{f[r]} total", "total", tuple(terms)))
    for src, dst in (("x", "m"), ("x", "y"), ("m", "y")):
        for c in range(3):
            for r in range(c, 3):
                direct.append(_Path(f"{src}{f[c]}->{dst}{f[r]}", "direct",
                                    ((f"b_{src}{dst}_{f[c]}{f[r]}",),)))
    return indirect, total, direct


_CATALOG = {1: _m1_catalog(), 2: _m2_catalog()}
_CLASSES = {1: ParamsModel1, 2: ParamsModel2}


def effect_catalog(model) -> dict:
    """Labels of every effect the model emits, grouped by kind."""
    indirect, total, direct = _CATALOG[_model_of(model)]
    return {"indirect": [p.label for p in indirect], "total": [p.label for p in total],
            "direct": [p.label for p in direct]}


def _evaluate(paths, params):
    names = type(params).names()
    index = {n: k for k, n in enumerate(names)}
    vec = params.to_vector()
    values = np.empty(len(paths))
    jac = np.zeros((len(paths), len(names)))
    for row, path in enumerate(paths):
        total = 0.0
        for term in path.terms:
            cols = [index[n] for n in term]
            factors = vec[cols]
            total += float(np.prod(factors))
            for k, col in enumerate(cols):
                jac[row, col] += float(np.prod(np.delete(factors, k)))
        values[row] = total
    return values, jac


def _effects(params, kind_index):
    paths = _CATALOG[params.MODEL][kind_index]
    values, _ = _evaluate(paths, params)
    return [EffectEstimate(p.label, p.kind, float(v)) for p, v in zip(paths, values)]


def indirect_effects(params, model=None) -> list:
    _check(params, model)
    return _effects(params, 0)


def total_effects(params, model=None) -> list:
    _check(params, model)
    return _effects(params, 1)


def direct_effects(params, model=None) -> list:
    _check(params, model)
    return _effects(params, 2)


def effect_jacobian(params, kinds=("indirect", "total", "direct")):
    """Labels, values and analytic gradients (rows) w.r.t. the natural vector."""
    groups = dict(zip(("indirect", "total", "direct"), _CATALOG[params.MODEL]))
    paths = [p for k in kinds for p in groups[k]]
    values, jac = _evaluate(paths, params)
    return paths, values, jac


def _check(params, model):
    if params.MODEL not in _CATALOG:
        raise ValueError("effects are defined for models 1 and 2 only")
    if model is not None and _model_of(model) != params.MODEL:
        raise ValueError(f"parameters are for model {params.MODEL}, not {model}")


def delta_method_se(estimates, param_cov, jacobians) -> np.ndarray:
    """``sqrt(g' C g)`` for every gradient row; NaN when ``C`` is not PSD."""
    jac = np.atleast_2d(np.asarray(jacobians, dtype=float))
    if param_cov is None:
        return np.full(jac.shape[0], np.nan)
    cov = np.asarray(param_cov, dtype=float)
    if cov.shape != (jac.shape[1], jac.shape[1]) or not np.all(np.isfinite(cov)):
        return np.full(jac.shape[0], np.nan)
    sym = 0.5 * (cov + cov.T)
    eig = np.linalg.eigvalsh(sym)
    if eig.min() < -1e-10 * max(1.0, abs(eig).max()):
        return np.full(jac.shape[0], np.nan)
    var = np.einsum("ki,ij,kj->k", jac, sym, jac)
    return np.sqrt(np.clip(var, 0.0, None))


def sobel_se(a: float, b: float, var_a: float, var_b: float, cov_ab: float = 0.0) -> float:
    """Closed-form first-order SE of ``a*b``."""
    return math.sqrt(b * b * var_a + a * a * var_b + 2.0 * a * b * cov_ab)


def conditional_gf_moments(params, model=None) -> dict:
    """Marginal mean and covariance of the mediator and outcome growth factors."""
    _check(params, model)
    joint = reduced_form_gf_moments(params)
    offset = 1 if params.MODEL == 1 else 3
    out = {}
    for k, label in enumerate(("m", "y")):
        sl = slice(offset + 3 * k, offset + 3 * k + 3)
        out[label] = GrowthFactorMoments(joint.mean[sl], joint.cov[sl, sl])
    return out


def _mean_labels():
    return [f"mean_{p}_{s}" for p in ("m", "y") for s in FACTORS]


def _gf_means(params):
    moments = conditional_gf_moments(params)
    return np.concatenate([moments["m"].mean, moments["y"].mean])


def gf_mean_jacobian(params):
    """Central-difference Jacobian of the marginal growth-factor means."""
    cls = type(params)
    vec = params.to_vector()
    steps = 1e-6 * np.maximum(1.0, np.abs(vec))
    jac = np.zeros((6, vec.size))
    for j, h in enumerate(steps):
        up, dn = vec.copy(), vec.copy()
        up[j] += h
        dn[j] -= h
        jac[:, j] = (_gf_means(cls.from_vector(up, validate=False))
                     - _gf_means(cls.from_vector(dn, validate=False))) / (2 * h)
    return jac


def effect_table(params, param_cov=None) -> list:
    """Every effect plus the marginal growth-factor means, with delta SEs."""
    paths, values, jac = effect_jacobian(params)
    ses = delta_method_se(values, param_cov, jac)
    out = [EffectEstimate(p.label, p.kind, float(v)).with_se(float(s))
           for p, v, s in zip(paths, values, ses)]
    means = _gf_means(params)
    mean_ses = delta_method_se(means, param_cov, gf_mean_jacobian(params))
    out += [EffectEstimate(label, "mean", float(v)).with_se(float(s))
            for label, v, s in zip(_mean_labels(), means, mean_ses)]
    return out


def attach_effects(result):
    """Fill ``result.effects`` from its estimates and parameter covariance."""
    result.effects = effect_table(result.params, result.cov)
    return result


def derived_quantities(result) -> dict:
    """``{name: (estimate, se)}`` over free parameters, effects and means."""
    out = {n: (float(e), float(s)) for n, e, s in zip(result.names, result.estimates, result.se)}
    effects = result.effects or effect_table(result.params, result.cov)
    for eff in effects:
        if eff.kind != "direct":
            out[eff.label] = (eff.estimate, eff.se)
    return out


def truth_derived_quantities(truth) -> dict:
    """Generating values keyed like ``derived_quantities``."""
    out = dict(zip(type(truth).names(), map(float, truth.to_vector())))
    for eff in effect_table(truth):
        if eff.kind != "direct":
            out[eff.label] = eff.estimate
    return out
