"""Computable upper bound on the joint posterior approximation error.

For fully linear systems, the distance between the true joint posterior
p(X_k, theta | Y_k) and the factorized approximation q_k = rho_k * nu_k is
bounded by a two-part sum: per-step addends C'_j * sqrt(radicand_j) for
j < k plus a final term sqrt(radicand_k / 2), where

    radicand_j = E_{theta ~ nu_j}[Psi_j(theta)]
                 - (r/2) log(2 pi) - (1/2) log c_tilde - epsilon_j,

Psi_j is twice the KL divergence between the trained conditional at step j
and the one-step exact filter map of the step j-1 conditional, epsilon_j is
the certified ELBO value from the variational update, c_tilde is a declared
lower bound on |Gamma(theta)|, and the constants C'_j divide by the running
product of belief-averaged one-step evidences Z_i (i = j+1..k).

Everything is estimated by Monte Carlo over parameter draws; the report
carries the per-step decomposition, standard errors, and clamp flags for
radicands that Monte Carlo noise pushed below zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from assim.errors import ConfigError
from assim.filters import gaussian_update_batch, linear_observe_batch
from assim.gaussians import LOG_2PI, Gaussian, chol_batch
from assim.models import (
    StateSpaceModel,
    batched_matrix,
    obs_cov_rows,
    process_cov_rows,
)
from assim.rng import SeededRng
from assim.stage1 import log_evidence_linear

METRICS = ("tv", "hellinger")


def _require_linear(model: StateSpaceModel):
    if not (model.linear_dynamics and model.linear_observation):
        raise ConfigError(
            f"posterior-error bound requires a fully linear model, got "
            f"{model.name!r}")


def _kalman_map_batch(model: StateSpaceModel, thetas, means, chols, y):
    """Exact one-step filter map applied to per-parameter Gaussians.

    Returns the posterior (means, covs) rows that the step-j conditional is
    supposed to reproduce.
    """
    a = batched_matrix(model.dynamics_matrix, thetas)
    h = batched_matrix(model.obs_matrix, thetas)
    q = process_cov_rows(model, thetas)
    gamma = obs_cov_rows(model, thetas)
    covs = np.einsum("bij,bkj->bik", chols, chols)
    m_pred = np.einsum("bij,bj->bi", a, means)
    c_pred = np.einsum("bij,bjk,blk->bil", a, covs, a) + q
    y_mean, s, u = linear_observe_batch(h, m_pred, c_pred, gamma)
    return gaussian_update_batch(m_pred, c_pred, y_mean, s, u,
                                 np.asarray(y, float))


def _psi_batch(cond_j: Callable, cond_jm1: Callable, thetas: np.ndarray,
               model: StateSpaceModel, y: np.ndarray) -> np.ndarray:
    """Per-row tracking discrepancy of the step-j conditional.

    log|F_c| - log|C_j| - n + tr(F_c^{-1} C_j) + (m_j - F_m)^T F_c^{-1} (m_j - F_m)
    with (F_m, F_c) the exact filter map of the step j-1 conditional.
    """
    m_prev, chol_prev = cond_jm1(thetas)
    f_mean, f_cov = _kalman_map_batch(model, thetas, m_prev, chol_prev, y)
    f_chol = chol_batch(f_cov)
    m_j, chol_j = cond_j(thetas)

    n = m_j.shape[-1]
    w = np.linalg.solve(f_chol, chol_j)
    trace = np.sum(w * w, axis=(-2, -1))
    z = np.linalg.solve(f_chol, (m_j - f_mean)[..., None])[..., 0]
    quad = np.sum(z * z, axis=-1)
    logdet_f = 2.0 * np.sum(
        np.log(np.diagonal(f_chol, axis1=-2, axis2=-1)), axis=-1)
    logdet_j = 2.0 * np.sum(
        np.log(np.diagonal(chol_j, axis1=-2, axis2=-1)), axis=-1)
    return logdet_f - logdet_j - n + trace + quad


def psi_term(cond_j: Callable, cond_jm1: Callable, theta: np.ndarray,
             model: StateSpaceModel, y: np.ndarray) -> float:
    """Tracking discrepancy at one parameter value (twice a Gaussian KL)."""
    _require_linear(model)
    theta = np.atleast_2d(np.asarray(theta, float))
    return float(_psi_batch(cond_j, cond_jm1, theta, model, y)[0])


def _z_stats(nu_prev: Gaussian, cond_prev: Callable, model: StateSpaceModel,
             y: np.ndarray, n_draws: int, rng: SeededRng) -> tuple[float, float]:
    thetas = nu_prev.sample(n_draws, rng)
    means, chols = cond_prev(thetas)
    vals = np.exp(log_evidence_linear(model, thetas, means, chols, y))
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_draws))


def z_factor(nu_prev: Gaussian, cond_prev: Callable, model: StateSpaceModel,
             y: np.ndarray, n_draws: int, rng: SeededRng) -> float:
    """Belief-averaged one-step evidence E_{theta~nu}[N(y; Hm^-, HC^-H^T + Gamma)]."""
    _require_linear(model)
    return _z_stats(nu_prev, cond_prev, model, y, n_draws, rng)[0]


# ---------------------------------------------------------------------------
# Full per-run bound
# ---------------------------------------------------------------------------


@dataclass
class BoundStep:
    """What the bound needs from assimilation step j."""

    nu: Gaussian  # parameter belief after step j
    cond: Callable  # thetas (B, d) -> (means (B, n), chol factors (B, n, n))
    epsilon: float  # certified ELBO value of step j's variational update
    y: np.ndarray  # observation assimilated at step j


@dataclass
class BoundInputs:
    """Everything the bound evaluates, in step order (j = 1..k).

    ``init_cond`` is the step-0 conditional (the prior encoder): step 1's
    discrepancy is measured against the exact filter map applied to it. The
    step-0 belief never enters the formula, so it is not carried.
    """

    model: StateSpaceModel
    init_cond: Callable
    steps: list
    c_tilde: float
    metric: str = "tv"
    n_psi: int = 256
    n_z: int = 512

    def __post_init__(self):
        _require_linear(self.model)
        if not self.steps:
            raise ConfigError("bound needs at least one assimilation step")
        if not self.c_tilde > 0.0:
            raise ConfigError("c_tilde must be a positive lower bound on |Gamma|")
        if self.metric not in METRICS:
            raise ConfigError(f"metric must be one of {METRICS}, got {self.metric!r}")
        for j, step in enumerate(self.steps, start=1):
            if step.epsilon is None or not np.isfinite(step.epsilon):
                raise ConfigError(f"step {j} is missing a finite ELBO value")


@dataclass
class BoundReport:
    """Per-step decomposition of the distance bound."""

    metric: str
    c_tilde: float
    total: float
    addends: np.ndarray  # (k,)
    psi_expectations: np.ndarray  # (k,)
    psi_ses: np.ndarray  # (k,)
    radicands: np.ndarray  # (k,), clamped at zero
    clamped: np.ndarray  # (k,) bool
    epsilons: np.ndarray  # (k,)
    z_factors: np.ndarray  # (k-1,), the factor for steps i = 2..k
    z_ses: np.ndarray  # (k-1,)
    c_primes: np.ndarray  # (k-1,), the constant for addends j = 1..k-1
    n_psi: int = 0
    n_z: int = 0

    def to_dict(self) -> dict:
        per_step = []
        k = len(self.addends)
        for j in range(1, k + 1):
            entry = {
                "step": j,
                "addend": float(self.addends[j - 1]),
                "psi_expectation": float(self.psi_expectations[j - 1]),
                "psi_se": float(self.psi_ses[j - 1]),
                "radicand": float(self.radicands[j - 1]),
                "clamped": bool(self.clamped[j - 1]),
                "epsilon": float(self.epsilons[j - 1]),
                "c_prime": float(self.c_primes[j - 1]) if j < k else None,
                "z_factor": float(self.z_factors[j - 2]) if j >= 2 else None,
                "z_se": float(self.z_ses[j - 2]) if j >= 2 else None,
            }
            per_step.append(entry)
        return {
            "metric": self.metric,
            "c_tilde": self.c_tilde,
            "total": self.total,
            "n_psi": self.n_psi,
            "n_z": self.n_z,
            "steps": per_step,
        }


def theorem2_bound(inputs: BoundInputs, rng: SeededRng) -> BoundReport:
    """Monte Carlo estimate of the posterior-error bound, fully decomposed."""
    model = inputs.model
    steps = inputs.steps
    k = len(steps)
    r = model.obs_dim
    shift = -(r / 2.0) * LOG_2PI - 0.5 * math.log(inputs.c_tilde)

    psi_exp = np.empty(k)
    psi_se = np.empty(k)
    for j in range(1, k + 1):
        step = steps[j - 1]
        cond_prev = inputs.init_cond if j == 1 else steps[j - 2].cond
        thetas = step.nu.sample(inputs.n_psi, rng.substream(j))
        vals = _psi_batch(step.cond, cond_prev, thetas, model, step.y)
        psi_exp[j - 1] = float(vals.mean())
        psi_se[j - 1] = float(vals.std(ddof=1) / math.sqrt(inputs.n_psi))

    epsilons = np.array([float(s.epsilon) for s in steps])
    raw = psi_exp + shift - epsilons
    clamped = raw < 0.0
    radicands = np.maximum(raw, 0.0)

    # belief-averaged evidence of steps i = 2..k, driven by step i-1 outputs
    z_vals = np.empty(k - 1)
    z_ses = np.empty(k - 1)
    for i in range(2, k + 1):
        z_vals[i - 2], z_ses[i - 2] = _z_stats(
            steps[i - 2].nu, steps[i - 2].cond, model, steps[i - 1].y,
            inputs.n_z, rng.substream(1000 + i))
        if not z_vals[i - 2] > 0.0:
            raise ConfigError(
                f"evidence factor for step {i} vanished; the bound constant "
                "is not representable")
    log_z = np.log(z_vals)
    # suffix[j-1] = sum of log Z_i over i = j+1..k
    suffix = np.cumsum(log_z[::-1])[::-1]

    c_primes = np.empty(k - 1)
    for j in range(1, k):
        m = k - j
        if inputs.metric == "tv":
            log_c = (-(r * m / 2.0) * LOG_2PI - (m / 2.0) * math.log(inputs.c_tilde)
                     - 0.5 * math.log(2.0) - suffix[j - 1])
        else:
            log_c = (m * math.log(2.0) - (r * m / 4.0) * LOG_2PI
                     - (m / 4.0) * math.log(inputs.c_tilde)
                     - 0.5 * (math.log(2.0) + suffix[j - 1]))
        c_primes[j - 1] = math.exp(log_c)

    addends = np.empty(k)
    if k > 1:
        addends[:-1] = c_primes * np.sqrt(radicands[:-1])
    addends[-1] = math.sqrt(radicands[-1] / 2.0)

    return BoundReport(
        metric=inputs.metric,
        c_tilde=inputs.c_tilde,
        total=float(np.sum(addends)),
        addends=addends,
        psi_expectations=psi_exp,
        psi_ses=psi_se,
        radicands=radicands,
        clamped=clamped,
        epsilons=epsilons,
        z_factors=z_vals,
        z_ses=z_ses,
        c_primes=c_primes,
        n_psi=inputs.n_psi,
        n_z=inputs.n_z,
    )


def theorem1_bound_skeleton(kl_pairs, constants) -> float:
    """Bare two-term distance formula from externally supplied divergences.

    ``kl_pairs`` rows are (expected conditional KL, parameter KL) per step;
    ``constants`` supplies the k-1 leading coefficients. The final step always
    enters with coefficient 1/sqrt(2).
    """
    pairs = np.atleast_2d(np.asarray(kl_pairs, float))
    if pairs.ndim != 2 or pairs.shape[1] != 2 or pairs.shape[0] < 1:
        raise ValueError("kl_pairs must be (k, 2)")
    if np.any(pairs < 0.0) or not np.all(np.isfinite(pairs)):
        raise ValueError("KL divergences must be finite and nonnegative")
    consts = np.asarray(constants, float)
    if consts.shape != (pairs.shape[0] - 1,):
        raise ValueError(
            f"need {pairs.shape[0] - 1} constants, got shape {consts.shape}")
    if np.any(consts < 0.0):
        raise ValueError("constants must be nonnegative")
    sums = pairs.sum(axis=1)
    head = float(consts @ np.sqrt(sums[:-1])) if pairs.shape[0] > 1 else 0.0
    return head + math.sqrt(sums[-1] / 2.0)
