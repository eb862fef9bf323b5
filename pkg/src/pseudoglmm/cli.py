"""Command-line entry point: ``pseudoglmm {summarize,generate,fit,simulate}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats

from pseudoglmm import bundle_io, glmm, simlab, tabular
from pseudoglmm.errors import ClusterTooSmallError, PseudoglmmError
from pseudoglmm.moments import summarize_cluster
from pseudoglmm.optim import LmOptions
from pseudoglmm.pseudogen import cluster_seed, generate_cluster

log = logging.getLogger("pseudoglmm")


class UsageError(Exception):
    pass


def _dump_json(obj) -> str:
    """JSON with floats at 17 significant digits and non-finite values as null."""
    def render(v, indent):
        pad = " " * indent
        if isinstance(v, dict):
            if not v:
                return "{}"
            items = [f'{pad} {json.dumps(str(k))}: {render(v[k], indent + 1)}' for k in sorted(v)]
            return "{\n" + ",\n".join(items) + "\n" + pad + "}"
        if isinstance(v, (list, tuple)):
            if not v:
                return "[]"
            return "[" + ", ".join(render(x, indent + 1) for x in v) + "]"
        if isinstance(v, (bool, np.bool_)):
            return "true" if v else "false"
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        if isinstance(v, (float, np.floating)):
            return tabular.fmt(v) if math.isfinite(v) else "null"
        if v is None:
            return "null"
        return json.dumps(v)
    return render(obj, 0) + "\n"


def _csv_list(value: str | None):
    if value is None:
        return None
    return [v.strip() for v in value.split(",") if v.strip()]


# summarize ---------------------------------------------------------------

def cmd_summarize(args) -> int:
    categorical = tabular.parse_categorical(args.categorical)
    clusters = tabular.load_clusters(args.input, args.cluster_col, args.response_col,
                                     _csv_list(args.predictors), categorical, args.drop_incomplete)
    if args.standardize in (None, "none"):
        standardize = False
    elif args.standardize == "all":
        standardize = True
    else:
        standardize = _csv_list(args.standardize)
    bundles, skipped = [], []
    for c in clusters:
        try:
            bundles.append(summarize_cluster(c, args.max_order, standardize))
        except ClusterTooSmallError:
            skipped.append(c.cluster_id)
            log.info("skipping cluster %s: fewer than 2 records", c.cluster_id)
    if not bundles:
        raise UsageError("no cluster has at least two records")
    manifest = bundle_io.write_bundle_set(args.out, bundles)
    print(f"wrote {len(bundles)} bundles ({len(bundles[0].spec)} moment targets each) to {manifest.parent}"
          + (f"; skipped {len(skipped)} single-record cluster(s)" if skipped else ""))
    return 0


# generate ----------------------------------------------------------------

def _generate_one(job):
    bundle, seed, opts, order = job
    return generate_cluster(bundle, seed=seed, lm_options=opts, order=order)


def cmd_generate(args) -> int:
    bundle_dir = Path(args.bundles)
    if not bundle_dir.is_dir() or not (any(bundle_dir.glob("*" + bundle_io.BUNDLE_SUFFIX))
                                       or (bundle_dir / bundle_io.MANIFEST).exists()):
        raise UsageError(f"{bundle_dir}: no bundle files found")
    bundle_set = bundle_io.read_bundle_set(bundle_dir)
    order = None
    if args.order:
        names = [nm for nm, _ in bundle_set.variable_signature[1:]]
        wanted = _csv_list(args.order)
        if sorted(wanted) != sorted(names):
            raise UsageError(f"--order must list every predictor exactly once: {names}")
        order = [names.index(nm) for nm in wanted]
    jobs = []
    for b in bundle_set.bundles:
        seed = cluster_seed(args.seed, b.cluster_id)
        opts = LmOptions(max_iterations=args.lm_max_iter, tol_ssd=args.lm_tol_ssd, seed=seed)
        jobs.append((b, seed, opts, order))
    if args.threads > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(_generate_one, jobs))
    else:
        results = [_generate_one(j) for j in jobs]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    datasets = [d for d, _ in results]
    diagnostics = [g for _, g in results]
    tabular.write_pseudo_csv(out / "pseudo.csv", datasets, original_scale=not args.bundle_scale)
    tabular.write_diagnostics_csv(out / "diagnostics.csv", diagnostics)
    worst: dict[int, float] = {}
    for g in diagnostics:
        for k, v in g.worst_by_order().items():
            worst[k] = max(worst.get(k, 0.0), v)
    warnings = [w for d in datasets for w in d.warnings]
    summary = {
        "seed": args.seed,
        "clusters": len(datasets),
        "worst_abs_difference_by_order": {str(k): v for k, v in sorted(worst.items())},
        "worst_abs_difference_by_cluster": {g.cluster_id: g.max_abs_difference() for g in diagnostics},
        "warnings": warnings,
    }
    (out / "generate_summary.json").write_text(_dump_json(summary), encoding="utf-8")
    print("worst |target - achieved| by order: "
          + ", ".join(f"order {k}: {v:.3e}" for k, v in sorted(worst.items())))
    if warnings:
        print(f"{len(warnings)} generation warning(s); see generate_summary.json")
    return 0


# fit ---------------------------------------------------------------------

def _stars(p: float) -> str:
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""


def fit_report(fit, model: str, residuals: np.ndarray, n_clusters: int) -> dict:
    if model == "fixed":
        names, beta, se, ci = fit.names, fit.beta, fit.se, fit.ci()
    else:
        names, beta, se, ci = fit.names, fit.beta, fit.se_beta, fit.ci
    rows = []
    for nm, b, s in zip(names, beta, se):
        z = b / s if s > 0 else float("nan")
        p = float(2 * stats.norm.sf(abs(z))) if np.isfinite(z) else float("nan")
        lo, hi, method = ci[nm]
        rows.append({"term": nm, "estimate": float(b), "se": float(s), "z": float(z), "p_value": p,
                     "stars": _stars(p) if np.isfinite(p) else "", "ci_lower": lo, "ci_upper": hi,
                     "ci_method": method})
    report = {
        "model": model,
        "converged": bool(fit.converged),
        "warning": None if fit.converged else f"model did not converge: {fit.message}",
        "fixed_effects": rows,
        "logLik": float(fit.loglik),
        "AIC": float(fit.aic),
        "BIC": float(fit.bic),
        "N": int(fit.n_obs),
        "n_clusters": int(n_clusters),
        "scaled_residuals": dict(zip(("min", "q1", "median", "q3", "max"), glmm.five_number_summary(residuals))),
    }
    if model == "mixed":
        lo, hi, method = fit.ci[glmm.SIGMA]
        report.update({
            "nAGQ": int(fit.n_quad),
            "sigma_Int": float(fit.sigma_u),
            "sigma_Int_se": float(fit.se_sigma),
            "sigma_Int_ci": {"lower": lo, "upper": hi, "method": method},
            "sigma_at_boundary": bool(fit.boundary),
        })
    return report


def format_fit_table(report: dict) -> str:
    lines = []
    title = "Mixed effects binary logistic regression" if report["model"] == "mixed" else "Binary logistic regression"
    lines.append(title)
    if not report["converged"]:
        lines.append(f"!! WARNING: {report['warning']}")
    width = max(len(r["term"]) for r in report["fixed_effects"]) + 2
    lines.append(f"{'':<{width}}{'Estimate (SE)':<24}{'95% CI':<24}")
    for r in report["fixed_effects"]:
        est = f"{r['estimate']:.4f}{r['stars']} ({r['se']:.4f})"
        ci = f"({r['ci_lower']:.4f}, {r['ci_upper']:.4f})"
        lines.append(f"{r['term']:<{width}}{est:<24}{ci:<24}")
    if report["model"] == "mixed":
        c = report["sigma_Int_ci"]
        lines.append(f"{'sigma_Int':<{width}}{report['sigma_Int']:<24.4f}({c['lower']:.4f}, {c['upper']:.4f})")
        lines.append(f"nAGQ: {report['nAGQ']}")
    lines.append(f"AIC: {report['AIC']:.1f}   BIC: {report['BIC']:.1f}   logLik: {report['logLik']:.1f}")
    lines.append(f"N: {report['N']}   clusters: {report['n_clusters']}")
    r = report["scaled_residuals"]
    lines.append("Scaled residuals (Min 1Q Median 3Q Max): "
                 + " ".join(f"{r[k]:.4f}" for k in ("min", "q1", "median", "q3", "max")))
    lines.append("Signif.: *** p<0.001, ** p<0.01, * p<0.05")
    return "\n".join(lines) + "\n"


def cmd_fit(args) -> int:
    categorical = tabular.parse_categorical(args.categorical)
    clusters = tabular.load_clusters(args.data, args.cluster_col, args.response_col,
                                     _csv_list(args.predictors), categorical, args.drop_incomplete)
    predictor_names = [v.name for v in clusters[0].variables[1:]]
    design = glmm.ClusteredDesign.from_clusters(clusters, predictor_names)
    if args.model == "fixed":
        y, X = design.pooled()
        fit = glmm.fit_logistic(y, X, design.names)
        residuals = glmm.scaled_residuals(fit, (y, X))
    else:
        fit = glmm.fit_glmm(design, n_quad=args.nagq, ci=args.ci)
        residuals = glmm.scaled_residuals(fit, design)
    report = fit_report(fit, args.model, residuals, design.n_clusters)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "fit.json").write_text(_dump_json(report), encoding="utf-8")
    table = format_fit_table(report)
    (out / "fit.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


# simulate ----------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = simlab.load_config(args.config)
    if args.seed_given:
        cfg = simlab.SimConfig.from_mapping({**cfg.to_dict(), "seed": args.seed})
    report = simlab.run_experiment(cfg, workers=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tabular.write_records_csv(out / "report_rows.csv", simlab.report_records(report), simlab.REPORT_COLUMNS)
    aic_rows = [{"replicate": rep, "arm": arm, "aic_sim": a_sim, "aic_pseudo": a_ps, "abs_difference": abs(a_ps - a_sim)}
                for arm in cfg.arms[1:] for rep, a_sim, a_ps in report.aic_pairs(arm)]
    tabular.write_records_csv(out / "aic_pairs.csv", aic_rows,
                              ("replicate", "arm", "aic_sim", "aic_pseudo", "abs_difference"))
    summary = report.summary_dict()
    (out / "summary.json").write_text(_dump_json(summary), encoding="utf-8")
    for arm in cfg.arms:
        cov = ", ".join(f"{p}={summary['arms'][arm]['parameters'][p]['coverage']:.2f}" for p in simlab.PARAMETERS)
        print(f"{arm}: non-converged {summary['arms'][arm]['nonconverged']}/{cfg.replicates}; coverage {cov}")
    return 0


# entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--threads", type=int, default=1, help="worker processes")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = argparse.ArgumentParser(prog="pseudoglmm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def data_args(p):
        p.add_argument("--cluster-col", required=True)
        p.add_argument("--response-col", required=True)
        p.add_argument("--predictors", help="comma-separated predictor columns (default: all others)")
        p.add_argument("--categorical", action="append", default=[],
                       help="column=ref,level2,... (repeatable); the first level is the reference")
        p.add_argument("--drop-incomplete", action="store_true", help="drop rows with empty cells")

    p = sub.add_parser("summarize", parents=[common], help="CSV -> per-cluster moment bundles")
    p.add_argument("--input", required=True)
    data_args(p)
    p.add_argument("--max-order", type=int, default=3, choices=[2, 3, 4])
    p.add_argument("--standardize", default="all",
                   help="'all' numeric predictors, 'none', or a comma-separated list")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("generate", parents=[common], help="bundles -> pseudo-data CSV and diagnostics")
    p.add_argument("--bundles", required=True)
    p.add_argument("--order", help="comma-separated generation order of predictors")
    p.add_argument("--lm-max-iter", type=int, default=None)
    p.add_argument("--lm-tol-ssd", type=float, default=1e-20)
    p.add_argument("--bundle-scale", action="store_true", help="keep standardized columns standardized")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("fit", parents=[common], help="fit a fixed or random-intercept logistic model")
    p.add_argument("--data", required=True)
    data_args(p)
    p.add_argument("--model", choices=["mixed", "fixed"], default="mixed")
    p.add_argument("--nagq", type=int, default=7)
    p.add_argument("--ci", choices=["wald", "profile"], default="wald")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", parents=[common], help="run the simulation study from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    try:
        return args.func(args)
    except (UsageError, tabular.MissingColumnError) as exc:
        parser.error(str(exc))
    except (PseudoglmmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
