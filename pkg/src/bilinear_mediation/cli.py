"""Command-line entry points: ``fit``, ``simulate`` and ``mc``.

Exit status:
    0  success
    2  command-line usage error (argparse)
    3  invalid input data or configuration
    4  model fit did not converge
    5  Monte Carlo run ended with fewer convergent replications than requested

The worker count for ``mc`` is read from the ``BILINEAR_MEDIATION_WORKERS``
environment variable (default 1).
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .effects import attach_effects
from .estimation import FitOptions, fit
from .io import (
    DataValidationError,
    dumps_report,
    load_config,
    read_dataset,
    write_dataset,
    write_report,
    write_table,
)
from .simulation import ConditionSpec, generate_dataset, population_params, run_condition

EXIT_OK = 0
EXIT_INVALID = 3
EXIT_NOT_CONVERGED = 4
EXIT_PARTIAL = 5

METRIC_FIELDS = ("relative_bias", "empirical_se", "relative_rmse", "coverage", "mc_se_bias")

log = logging.getLogger(__name__)


def _fit_options(config, seed):
    opt = config.optimizer
    return FitOptions(max_starts=opt.max_starts, gtol=opt.gtol, max_iter=opt.max_iter, seed=seed)


def _condition_spec(config, condition, reps, base_seed) -> ConditionSpec:
    fields = condition.model_dump()
    return ConditionSpec(model=config.model, reps=reps, base_seed=base_seed, **fields)


def fit_report(result, dataset, seed, data_path=None) -> dict:
    """Report layout: estimates table, then direct/indirect/total effect tables."""
    rows = [{"name": n, "estimate": e, "se": s, "ci_low": lo, "ci_high": hi}
            for n, e, s, lo, hi in zip(result.names, result.estimates, result.se,
                                       result.ci_low, result.ci_high)]
    report = {
        "model": result.model,
        "data": data_path,
        "seed": seed,
        "n": dataset.n,
        "occasions": dataset.n_occasions,
        "status": result.status,
        "message": result.message,
        "loglik": result.loglik,
        "n_starts": result.n_starts,
        "grad_norm": result.grad_norm,
        "se_available": result.se_available,
        "estimates": rows,
    }
    if result.effects:
        groups = {"direct": [], "indirect": [], "total": [], "mean": []}
        for eff in result.effects:
            groups[eff.kind].append({"path": eff.label, "estimate": eff.estimate, "se": eff.se,
                                     "ci_low": eff.ci_low, "ci_high": eff.ci_high})
        report["effects"] = {"direct": groups["direct"], "indirect": groups["indirect"],
                             "total": groups["total"]}
        report["growth_factor_means"] = groups["mean"]
    return report


def _output_path(config, default) -> Path:
    return Path(config.out or default)


def cmd_fit(config) -> int:
    if config.data is None:
        raise DataValidationError("fit needs a dataset: pass --data or set 'data' in the config")
    dataset = read_dataset(config.data)
    out = _output_path(config, "fit_report.json")
    options = _fit_options(config, config.seed)
    if config.univariate:
        report = {"mode": "univariate", "data": config.data, "seed": config.seed, "processes": {}}
        status = EXIT_OK
        for label in dataset.processes:
            result = fit(dataset.process(label), "univariate", options)
            report["processes"][label] = fit_report(result, dataset, config.seed, config.data)
            if not result.converged:
                status = EXIT_NOT_CONVERGED
        write_report(report, out)
        return status
    try:
        dataset.check_model(config.model)
    except ValueError as exc:
        raise DataValidationError(str(exc)) from None
    result = fit(dataset, config.model, options)
    if result.converged:
        attach_effects(result)
    report = fit_report(result, dataset, config.seed, config.data)
    write_report(report, out)
    write_table(report["estimates"], out.with_suffix(".estimates.csv"))
    if result.effects:
        effect_rows = [{"kind": kind, **row} for kind in ("direct", "indirect", "total")
                       for row in report["effects"][kind]]
        write_table(effect_rows, out.with_suffix(".effects.csv"))
    if not result.converged:
        print(f"fit did not converge: {result.message}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def truth_sidecar(truth, spec, seed) -> dict:
    return {"model": spec.model, "seed": seed, "condition": spec.to_dict(),
            "parameters": dict(zip(type(truth).names(), truth.to_vector().tolist()))}


def cmd_simulate(config) -> int:
    try:
        spec = _condition_spec(config, config.condition, 1, config.seed)
        truth = population_params(spec)
    except ValueError as exc:
        raise DataValidationError(str(exc)) from None
    rng = np.random.default_rng(np.random.SeedSequence(config.seed))
    dataset = generate_dataset(truth, spec.n, spec.J, spec.model, rng, spec.jitter)
    out = _output_path(config, "simulated.csv")
    write_dataset(dataset, out)
    write_report(truth_sidecar(truth, spec, config.seed), out.with_suffix(".truth.json"))
    return EXIT_OK


def condition_block(result) -> dict:
    rows = []
    for name in result.names:
        m = result.metrics.get(name)
        row = {"name": name, "truth": result.truth[name]}
        for f in METRIC_FIELDS:
            row[f] = getattr(m, f) if m is not None else float("nan")
        row["relative"] = bool(m.relative) if m is not None else result.truth[name] != 0
        rows.append(row)
    return {
        "condition": result.spec.to_dict(),
        "replications_requested": result.spec.reps,
        "replications_achieved": result.achieved,
        "attempts": result.attempts,
        "failures": result.failures,
        "convergence_rate": result.convergence_rate,
        "partial": result.partial,
        "metrics": rows,
    }


def grid_summary(blocks) -> list:
    """Median and range of each metric across conditions, per quantity."""
    names = []
    for block in blocks:
        for row in block["metrics"]:
            if row["name"] not in names:
                names.append(row["name"])
    out = []
    for name in names:
        entry = {"name": name}
        for f in METRIC_FIELDS[:4]:
            vals = np.array([row[f] for b in blocks for row in b["metrics"] if row["name"] == name],
                            dtype=float)
            vals = vals[np.isfinite(vals)]
            if vals.size:
                entry[f] = {"median": float(np.median(vals)), "min": float(vals.min()),
                            "max": float(vals.max())}
            else:
                entry[f] = None
        out.append(entry)
    return out


def run_mc(config, estimator=None, workers=None) -> tuple:
    """Run every configured condition; returns ``(report, any_partial)``."""
    conditions = config.grid or [config.condition]
    blocks = []
    for k, cond in enumerate(conditions):
        try:
            spec = _condition_spec(config, cond, config.reps, config.seed + k)
        except ValueError as exc:
            raise DataValidationError(f"condition {k}: {exc}") from None
        log.info("condition %d/%d: %s", k + 1, len(conditions), spec)
        blocks.append(condition_block(run_condition(spec, estimator=estimator, workers=workers)))
    report = {"model": config.model, "seed": config.seed, "reps": config.reps,
              "conditions": blocks, "summary": grid_summary(blocks)}
    return report, any(b["partial"] for b in blocks)


def cmd_mc(config, estimator=None) -> int:
    report, partial = run_mc(config, estimator)
    out = _output_path(config, "mc_report.json")
    write_report(report, out)
    flat = [{"condition": k, **row} for k, block in enumerate(report["conditions"])
            for row in block["metrics"]]
    write_table(flat, out.with_suffix(".metrics.csv"))
    if partial:
        print("attempt cap reached before the requested replications converged", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bilinear-mediation",
                                     description="Bilinear-spline longitudinal mediation models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--model", type=int, choices=(1, 2))
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output path")

    p_fit = sub.add_parser("fit", help="fit a model to a wide CSV dataset")
    common(p_fit)
    p_fit.add_argument("--data", help="wide CSV dataset")
    p_fit.add_argument("--univariate", action="store_true", default=None,
                       help="fit each process alone and report its knot")
    p_sim = sub.add_parser("simulate", help="generate a dataset and truth sidecar")
    common(p_sim)
    p_mc = sub.add_parser("mc", help="run a Monte Carlo condition grid")
    common(p_mc)
    p_mc.add_argument("--reps", type=int, help="convergent replications per condition")
    return parser


COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "mc": cmd_mc}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k, None) for k in ("model", "seed", "out", "data",
                                                     "univariate", "reps")}
    try:
        config = load_config(args.config, overrides)
        return COMMANDS[args.command](config)
    except (DataValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


__all__ = ["main", "dumps_report", "run_mc", "fit_report"]
