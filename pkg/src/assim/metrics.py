"""Scoring for multi-realization twin experiments.

Estimation error is measured across realizations at a fixed step: the RMSE of
the posterior parameter mean around the (shared) truth, and of the posterior
state mean around each realization's own reference trajectory. Prediction
error averages the squared Euclidean distance between joint-posterior
predictive samples (drawn one step ahead) and the realized next state.
Credible bands come from Gaussian marginals or raw sample percentiles.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import norm

from assim.gaussians import Gaussian


@dataclass
class RealizationResult:
    """Per-step posterior summaries for one realization.

    Row ``k - 1`` of every array belongs to assimilation step ``k``, matching
    the 1-based indexing of the observation stream. ``pred_samples`` maps a
    step ``k`` to joint-posterior predictive draws for that step (generated
    after assimilating step ``k - 1``).
    """

    theta_means: np.ndarray  # (K, d)
    theta_covs: np.ndarray  # (K, d, d)
    state_means: np.ndarray  # (K, n)
    state_vars: np.ndarray  # (K, n)
    reference: np.ndarray  # (K, n) true states of this realization
    pred_samples: dict = field(default_factory=dict)  # step -> (S, n)

    def __post_init__(self):
        self.theta_means = np.asarray(self.theta_means, float)
        self.theta_covs = np.asarray(self.theta_covs, float)
        self.state_means = np.asarray(self.state_means, float)
        self.state_vars = np.asarray(self.state_vars, float)
        self.reference = np.asarray(self.reference, float)
        k, d = self.theta_means.shape
        n = self.state_means.shape[1]
        if self.theta_covs.shape != (k, d, d):
            raise ValueError("parameter covariance shape mismatch")
        if self.state_means.shape != (k, n) or self.state_vars.shape != (k, n):
            raise ValueError("state summary shape mismatch")
        if self.reference.shape != (k, n):
            raise ValueError(
                f"reference trajectory shape {self.reference.shape} does not "
                f"match {k} steps of dimension {n}")

    @property
    def n_steps(self) -> int:
        return self.theta_means.shape[0]


def _check_results(results: Sequence[RealizationResult], k: int):
    if not results:
        raise ValueError("no realizations to score")
    steps = results[0].n_steps
    if any(r.n_steps != steps for r in results):
        raise ValueError("realizations disagree on step count")
    if not 1 <= k <= steps:
        raise ValueError(f"step {k} outside the recorded range 1..{steps}")


def rmse_theta(results: Sequence[RealizationResult], true_theta, i: int,
               k: int) -> float:
    """Cross-realization RMSE of the parameter posterior mean, component i."""
    if true_theta is None:
        raise ValueError(
            "parameter RMSE needs the true parameter; not available for "
            "misspecified experiments")
    _check_results(results, k)
    truth = float(np.asarray(true_theta, float)[i])
    devs = np.array([r.theta_means[k - 1, i] for r in results]) - truth
    return float(np.sqrt(np.mean(devs * devs)))


def rmse_state(results: Sequence[RealizationResult], i: int, k: int) -> float:
    """Cross-realization RMSE of the state posterior mean, coordinate i,
    each realization scored against its own reference trajectory."""
    _check_results(results, k)
    devs = np.array([r.state_means[k - 1, i] - r.reference[k - 1, i]
                     for r in results])
    return float(np.sqrt(np.mean(devs * devs)))


def rmse_pred(results: Sequence[RealizationResult], k: int) -> float:
    """One-step-ahead prediction RMSE at step k (samples drawn at k-1)."""
    _check_results(results, k)
    per_real = []
    for r in results:
        samples = r.pred_samples.get(k)
        if samples is None:
            raise ValueError(f"no predictive samples stored for step {k}")
        diff = np.asarray(samples, float) - r.reference[k - 1]
        per_real.append(float(np.mean(np.sum(diff * diff, axis=-1))))
    return float(math.sqrt(np.mean(per_real)))


def credible_band(marginal, level: float = 0.95):
    """Per-coordinate central credible interval.

    Gaussian marginals get mean +/- z sigma with z the two-sided normal
    quantile (1.959964 at 95%); sample arrays get empirical percentiles.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    if isinstance(marginal, Gaussian):
        z = float(norm.ppf(0.5 + level / 2.0))
        sd = np.sqrt(np.diag(marginal.cov))
        return marginal.mean - z * sd, marginal.mean + z * sd
    samples = np.asarray(marginal, float)
    lo = np.percentile(samples, 100.0 * (0.5 - level / 2.0), axis=0)
    hi = np.percentile(samples, 100.0 * (0.5 + level / 2.0), axis=0)
    return lo, hi


# ---------------------------------------------------------------------------
# Tabulation
# ---------------------------------------------------------------------------

CSV_COLUMNS = ("metric", "component", "step", "value", "n_realizations")


@dataclass(frozen=True)
class MetricRow:
    metric: str
    component: str
    step: int
    value: float
    n_realizations: int


def summarize(results: Sequence[RealizationResult], steps: Sequence[int],
              true_theta=None) -> list[MetricRow]:
    """All scores at the requested steps, one row per (metric, component).

    Parameter RMSE rows appear only when the truth is supplied; prediction
    rows only at steps where every realization stored samples.
    """
    if not results:
        raise ValueError("no realizations to score")
    rows = []
    n = len(results)
    d = results[0].theta_means.shape[1]
    nx = results[0].state_means.shape[1]
    for k in steps:
        if true_theta is not None:
            for i in range(d):
                rows.append(MetricRow("rmse_theta", f"theta_{i}", k,
                                      rmse_theta(results, true_theta, i, k), n))
        for i in range(nx):
            rows.append(MetricRow("rmse_state", f"x_{i}", k,
                                  rmse_state(results, i, k), n))
        if all(k in r.pred_samples for r in results):
            rows.append(MetricRow("rmse_pred", "all", k,
                                  rmse_pred(results, k), n))
    return rows


def write_metrics_csv(rows: Sequence[MetricRow], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for r in rows:
            writer.writerow([r.metric, r.component, r.step,
                             repr(float(r.value)), r.n_realizations])


def read_metrics_csv(path) -> list[MetricRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"unexpected metrics header in {path}")
        return [MetricRow(r["metric"], r["component"], int(r["step"]),
                          float(r["value"]), int(r["n_realizations"]))
                for r in reader]
