"""Simulation study: actual-data fits against pseudo-data fits.

Each replicate draws a clustered dataset from a random-intercept logistic
model with a normal, a Poisson and a three-level categorical predictor,
fits it directly (the ``sim`` arm), then for every requested moment order
summarizes each cluster, regenerates pseudo-data and refits (``ps2``,
``ps3``, ``ps4``).
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from pseudoglmm.errors import ConfigurationError
from pseudoglmm.glmm import SIGMA, fit_glmm
from pseudoglmm.moments import (
    DUMMY, NUMERIC, RESPONSE, ClusterData, VariableMeta, encode_dummies, summarize_cluster,
)
from pseudoglmm.pseudogen import generate_cluster

log = logging.getLogger(__name__)

PARAMETERS = ("beta0", "beta1", "beta2", "beta32", "beta33", "sigma_u")
PREDICTORS = ("x1", "x2", "x32", "x33")


@dataclass(frozen=True)
class Truth:
    beta0: float = -4.16
    beta1: float = 0.32
    beta2: float = -0.24
    beta32: float = 1.20
    beta33: float = 0.74
    sigma_u: float = 1.195

    @property
    def beta(self) -> np.ndarray:
        return np.array([self.beta0, self.beta1, self.beta2, self.beta32, self.beta33])

    def value(self, name: str) -> float:
        return getattr(self, name)


@dataclass(frozen=True)
class SimConfig:
    m: int = 50
    n: int = 60
    replicates: int = 20
    truth: Truth = field(default_factory=Truth)
    normal_mean: float = 0.0
    normal_var: float = 1.0
    poisson_lambda: float = 1.0
    multinomial_p: tuple[float, float, float] = (0.25, 0.55, 0.20)
    moment_orders: tuple[int, ...] = (2, 3, 4)
    n_quad: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.m < 2:
            raise ConfigurationError("need at least two clusters")
        if self.n < 2:
            raise ConfigurationError("clusters need at least two observations")
        if self.replicates < 1:
            raise ConfigurationError("need at least one replicate")
        p = np.asarray(self.multinomial_p, dtype=float)
        if p.shape != (3,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ConfigurationError(f"multinomial probabilities must be three non-negative values summing to 1, got {self.multinomial_p}")
        if not self.normal_var > 0 or not self.poisson_lambda > 0:
            raise ConfigurationError("normal variance and Poisson rate must be positive")
        if not set(self.moment_orders) <= {2, 3, 4} or not self.moment_orders:
            raise ConfigurationError(f"moment orders must be a non-empty subset of {{2, 3, 4}}, got {self.moment_orders}")
        if self.truth.sigma_u < 0:
            raise ConfigurationError("sigma_u must be non-negative")

    @classmethod
    def from_mapping(cls, raw: Mapping) -> "SimConfig":
        raw = dict(raw)
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown configuration keys {sorted(unknown)}")
        if "truth" in raw:
            truth = dict(raw["truth"])
            bad = set(truth) - set(Truth.__dataclass_fields__)
            if bad:
                raise ConfigurationError(f"unknown truth keys {sorted(bad)}")
            raw["truth"] = Truth(**{k: float(v) for k, v in truth.items()})
        for key in ("multinomial_p", "moment_orders"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["multinomial_p"] = list(self.multinomial_p)
        out["moment_orders"] = list(self.moment_orders)
        return out

    @property
    def arms(self) -> tuple[str, ...]:
        return ("sim",) + tuple(f"ps{k}" for k in self.moment_orders)


SIM_VARIABLES = (
    VariableMeta("y", RESPONSE),
    VariableMeta("x1", NUMERIC),
    VariableMeta("x2", NUMERIC),
    VariableMeta("x32", DUMMY, level="2", parent="x3"),
    VariableMeta("x33", DUMMY, level="3", parent="x3"),
)


def _replicate_rng(cfg: SimConfig, replicate: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, replicate, stream]))


def simulate_dataset(cfg: SimConfig, replicate_index: int) -> list[ClusterData]:
    rng = _replicate_rng(cfg, replicate_index, 0)
    t = cfg.truth
    clusters = []
    for i in range(cfg.m):
        x1 = rng.normal(cfg.normal_mean, np.sqrt(cfg.normal_var), cfg.n)
        x2 = rng.poisson(cfg.poisson_lambda, cfg.n).astype(float)
        x3 = encode_dummies(rng.choice(3, size=cfg.n, p=cfg.multinomial_p), [0, 1, 2])
        u = rng.normal(0.0, t.sigma_u) if t.sigma_u > 0 else 0.0
        X = np.column_stack([x1, x2, x3])
        eta = t.beta0 + X @ t.beta[1:] + u
        y = (rng.random(cfg.n) < expit(eta)).astype(float)
        clusters.append(ClusterData(f"c{i + 1:03d}", y, X, SIM_VARIABLES))
    return clusters


@dataclass(frozen=True)
class EstimateRow:
    replicate: int
    arm: str
    parameter: str
    estimate: float
    se: float
    lower: float
    upper: float
    truth: float
    converged: bool
    aic: float

    @property
    def bias(self) -> float:
        return self.estimate - self.truth

    @property
    def covered(self) -> bool:
        return bool(self.lower <= self.truth <= self.upper)


def _fit_rows(replicate: int, arm: str, clusters, cfg: SimConfig) -> list[EstimateRow]:
    fit = fit_glmm(clusters, n_quad=cfg.n_quad, names=PREDICTORS)
    rows = []
    for name, label in zip(fit.names, PARAMETERS[:-1]):
        k = fit.names.index(name)
        lo, hi, _ = fit.ci[name]
        rows.append(EstimateRow(replicate, arm, label, float(fit.beta[k]), float(fit.se_beta[k]), lo, hi,
                                cfg.truth.value(label), fit.converged, fit.aic))
    lo, hi, _ = fit.ci[SIGMA]
    rows.append(EstimateRow(replicate, arm, "sigma_u", fit.sigma_u, fit.se_sigma, lo, hi,
                            cfg.truth.sigma_u, fit.converged, fit.aic))
    return rows


@dataclass(frozen=True)
class PseudoCluster:
    cluster_id: str
    y: np.ndarray
    X: np.ndarray


def pseudo_clusters(clusters: Sequence[ClusterData], order: int, seed: int) -> tuple[list[PseudoCluster], list[str]]:
    """Summarize each cluster (numeric predictors standardized) and regenerate it."""
    out, warnings = [], []
    for i, c in enumerate(clusters):
        bundle = summarize_cluster(c, order, standardize_columns=True)
        data, _ = generate_cluster(bundle, seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
        out.append(PseudoCluster(c.cluster_id, data.y_pi, data.original_scale()))
        warnings.extend(data.warnings)
    return out, warnings


def run_replicate(cfg: SimConfig, replicate: int) -> tuple[list[EstimateRow], int]:
    clusters = simulate_dataset(cfg, replicate)
    rows = _fit_rows(replicate, "sim", clusters, cfg)
    n_warnings = 0
    for order in cfg.moment_orders:
        pseudo, warnings = pseudo_clusters(clusters, order, seed=_derived_seed(cfg, replicate, order))
        n_warnings += len(warnings)
        rows += _fit_rows(replicate, f"ps{order}", pseudo, cfg)
    return rows, n_warnings


def _derived_seed(cfg: SimConfig, replicate: int, order: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, replicate, 100 + order]).generate_state(1)[0])


def _run_one(args):
    cfg, replicate = args
    return run_replicate(cfg, replicate)


def coverage_band(p: float, B: int) -> tuple[float, float]:
    """Acceptance band ``p +/- 2 sqrt(p (1 - p) / B)`` for an observed coverage rate."""
    half = 2.0 * np.sqrt(p * (1 - p) / B)
    return p - half, p + half


@dataclass
class ArmSummary:
    parameter: str
    arm: str
    n_converged: int
    n_nonconverged: int
    mean_bias: float
    mean_abs_bias: float
    mc_se_abs_bias: float
    coverage: float
    band: tuple[float, float]

    @property
    def coverage_ok(self) -> bool:
        return bool(self.band[0] <= self.coverage <= self.band[1])


@dataclass
class ExperimentReport:
    config: SimConfig
    rows: list[EstimateRow]
    generation_warnings: int = 0
    nominal: float = 0.95

    def select(self, arm: str, parameter: str, converged_only: bool = True) -> list[EstimateRow]:
        return [r for r in self.rows if r.arm == arm and r.parameter == parameter and (r.converged or not converged_only)]

    def biases(self, arm: str, parameter: str) -> np.ndarray:
        return np.array([r.bias for r in self.select(arm, parameter)])

    def coverage(self, arm: str, parameter: str) -> float:
        rows = self.select(arm, parameter)
        return float(np.mean([r.covered for r in rows])) if rows else float("nan")

    def nonconverged(self, arm: str) -> int:
        return sum(1 for r in self.rows if r.arm == arm and r.parameter == PARAMETERS[0] and not r.converged)

    def summary(self, arm: str, parameter: str) -> ArmSummary:
        b = self.biases(arm, parameter)
        ab = np.abs(b)
        k = b.size
        return ArmSummary(
            parameter, arm, k, self.nonconverged(arm),
            float(b.mean()) if k else float("nan"),
            float(ab.mean()) if k else float("nan"),
            float(ab.std(ddof=1) / np.sqrt(k)) if k > 1 else float("nan"),
            self.coverage(arm, parameter),
            coverage_band(self.nominal, max(k, 1)),
        )

    def aic_pairs(self, arm: str) -> list[tuple[int, float, float]]:
        """``(replicate, AIC(sim), AIC(arm))`` where both fits converged."""
        sim = {r.replicate: r for r in self.rows if r.arm == "sim" and r.parameter == PARAMETERS[0]}
        out = []
        for r in self.rows:
            if r.arm == arm and r.parameter == PARAMETERS[0]:
                s = sim.get(r.replicate)
                if s is not None and s.converged and r.converged:
                    out.append((r.replicate, s.aic, r.aic))
        return out

    def summary_dict(self) -> dict:
        out = {"config": self.config.to_dict(), "nominal_coverage": self.nominal,
               "generation_warnings": self.generation_warnings, "arms": {}}
        for arm in self.config.arms:
            arm_out = {"nonconverged": self.nonconverged(arm), "parameters": {}}
            for par in PARAMETERS:
                s = self.summary(arm, par)
                arm_out["parameters"][par] = {
                    "n_converged": s.n_converged, "mean_bias": s.mean_bias, "mean_abs_bias": s.mean_abs_bias,
                    "mc_se_abs_bias": s.mc_se_abs_bias, "coverage": s.coverage,
                    "coverage_band": list(s.band), "coverage_within_band": s.coverage_ok,
                }
            if arm != "sim":
                pairs = self.aic_pairs(arm)
                diffs = [abs(ps - sim) for _, sim, ps in pairs]
                arm_out["aic_abs_diff_vs_sim"] = {
                    "n": len(diffs),
                    "median": float(np.median(diffs)) if diffs else None,
                    "share_below_10": float(np.mean(np.array(diffs) < 10)) if diffs else None,
                }
            out["arms"][arm] = arm_out
        return out


def run_experiment(cfg: SimConfig, workers: int = 1) -> ExperimentReport:
    """Run every replicate; results do not depend on ``workers``."""
    jobs = [(cfg, b) for b in range(cfg.replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(job) for job in jobs]
    rows, warnings = [], 0
    for r, w in results:
        rows.extend(r)
        warnings += w
    return ExperimentReport(cfg, rows, warnings)


REPORT_COLUMNS = ("replicate", "arm", "parameter", "estimate", "se", "lower", "upper", "truth",
                  "bias", "covered", "converged", "aic")


def report_records(report: ExperimentReport) -> list[dict]:
    return [
        {"replicate": r.replicate, "arm": r.arm, "parameter": r.parameter, "estimate": r.estimate, "se": r.se,
         "lower": r.lower, "upper": r.upper, "truth": r.truth, "bias": r.bias, "covered": int(r.covered),
         "converged": int(r.converged), "aic": r.aic}
        for r in report.rows
    ]


def load_config(path) -> SimConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: expected a JSON object")
    return SimConfig.from_mapping(raw)
