"""One-step Gaussian filtering backends.

All three backends produce the same object: a Gaussian posterior over the
state after assimilating a single observation, conditioned on a fixed
parameter value. The linear-algebra identity shared by every backend is

    m = m_pred + U S^{-1} (y - y_mean)
    C = C_pred - U S^{-1} U^T

where (m_pred, C_pred) are predictive state moments, y_mean/S are predictive
observation moments and U is the state-observation cross covariance.

Batched variants (leading axis = parameter draw) are the workhorses for the
variational stage and the conditional-regression targets; the public
single-parameter ops wrap batches of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from assim.errors import DegenerateEnsembleError
from assim.gaussians import Gaussian, chol_batch, chol_jittered, psd_sqrt
from assim.models import StateSpaceModel
from assim.rng import SeededRng

# scaled unscented transform constants
UT_ALPHA = 0.5
UT_BETA = 2.0
UT_KAPPA = 0.0


@dataclass
class FilterMoments:
    """Predictive moments entering the Gaussian update."""

    m_pred: np.ndarray
    c_pred: np.ndarray
    y_mean: np.ndarray
    s: np.ndarray
    u: np.ndarray


@dataclass(frozen=True)
class SigmaPointSet:
    points: np.ndarray  # (2n+1, n)
    w_mean: np.ndarray
    w_cov: np.ndarray


def ut_weights(n: int) -> tuple[float, np.ndarray, np.ndarray]:
    lam = UT_ALPHA * UT_ALPHA * (n + UT_KAPPA) - n
    w_mean = np.full(2 * n + 1, 1.0 / (2.0 * (n + lam)))
    w_cov = w_mean.copy()
    w_mean[0] = lam / (n + lam)
    w_cov[0] = w_mean[0] + (1.0 - UT_ALPHA * UT_ALPHA + UT_BETA)
    return lam, w_mean, w_cov


def sigma_points(g: Gaussian) -> SigmaPointSet:
    lam, w_mean, w_cov = ut_weights(g.dim)
    pts = _sigma_points_batch(g.mean[None], g.chol[None], lam)[0]
    return SigmaPointSet(points=pts, w_mean=w_mean, w_cov=w_cov)


def _sigma_points_batch(means: np.ndarray, chols: np.ndarray, lam: float) -> np.ndarray:
    n = means.shape[-1]
    spread = np.sqrt(n + lam) * np.swapaxes(chols, -1, -2)  # rows are scaled columns of L
    center = means[:, None, :]
    return np.concatenate([center, center + spread, center - spread], axis=1)


def _weighted_moments(w_mean, w_cov, values):
    mean = np.einsum("s,bsi->bi", w_mean, values)
    dev = values - mean[:, None, :]
    cov = np.einsum("s,bsi,bsj->bij", w_cov, dev, dev)
    return mean, dev, cov


def ut_predict_batch(model: StateSpaceModel, thetas, means, chols, q):
    """Unscented predictive state moments per parameter draw.

    thetas (B, d); means (B, n); chols (B, n, n); q (B, n, n) process
    covariance. Returns (m_pred (B, n), c_pred (B, n, n)).
    """
    lam, w_mean, w_cov = ut_weights(means.shape[-1])
    pts = _sigma_points_batch(means, chols, lam)
    prop = model.transition(pts, thetas[:, None, :])
    if not np.all(np.isfinite(prop)):
        raise DegenerateEnsembleError("non-finite sigma point after propagation")
    m_pred, _, spread = _weighted_moments(w_mean, w_cov, prop)
    return m_pred, spread + q


def ut_observe_batch(model: StateSpaceModel, thetas, m_pred, c_pred, gamma):
    """Unscented observation moments from fresh sigma points on N(m_pred, c_pred).

    Returns (y_mean (B, r), s (B, r, r), u (B, n, r)).
    """
    lam, w_mean, w_cov = ut_weights(m_pred.shape[-1])
    chols = chol_batch(c_pred)
    pts = _sigma_points_batch(m_pred, chols, lam)
    obs = model.observation(pts, thetas[:, None, :])
    y_mean, dev_y, s = _weighted_moments(w_mean, w_cov, obs)
    dev_x = pts - m_pred[:, None, :]
    u = np.einsum("s,bsi,bsj->bij", w_cov, dev_x, dev_y)
    return y_mean, s + gamma, u


def linear_predict_batch(a, means, covs, q):
    m_pred = np.einsum("bij,bj->bi", a, means)
    c_pred = np.einsum("bij,bjk,blk->bil", a, covs, a) + q
    return m_pred, c_pred


def linear_observe_batch(h, m_pred, c_pred, gamma):
    y_mean = np.einsum("bij,bj->bi", h, m_pred)
    hc = np.einsum("bij,bjk->bik", h, c_pred)
    s = np.einsum("bik,bjk->bij", hc, h) + gamma
    u = np.swapaxes(hc, -1, -2)
    return y_mean, s, u


def gaussian_update_batch(m_pred, c_pred, y_mean, s, u, y):
    """Batched closed-form update; returns posterior (means, covs)."""
    resid = y - y_mean
    g = np.linalg.solve(s, np.swapaxes(u, -1, -2))  # S^{-1} U^T, (B, r, n)
    means = m_pred + np.einsum("brn,br->bn", g, resid)
    covs = c_pred - np.einsum("bnr,brm->bnm", u, g)
    covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    return means, covs


def gaussian_update(moments: FilterMoments, y: np.ndarray) -> Gaussian:
    means, covs = gaussian_update_batch(
        moments.m_pred[None], moments.c_pred[None], moments.y_mean[None],
        moments.s[None], moments.u[None], np.asarray(y, float)[None],
    )
    return Gaussian.from_cov(means[0], covs[0])


def _require_batchable(theta):
    theta = np.asarray(theta, float)
    return theta[None] if theta.ndim == 1 else theta


def kalman_step(model: StateSpaceModel, theta, prev: Gaussian, y) -> Gaussian:
    """Exact conjugate update; model must be linear in the state throughout."""
    return gaussian_update(kalman_moments(model, theta, prev), y)


def kalman_moments(model: StateSpaceModel, theta, prev: Gaussian) -> FilterMoments:
    if not (model.linear_dynamics and model.linear_observation):
        raise ValueError("Kalman backend requires linear dynamics and observation")
    theta = np.asarray(theta, float)
    a = model.dynamics_matrix(theta)[None]
    h = model.obs_matrix(theta)[None]
    q = model.process_cov(theta)[None]
    gamma = model.obs_cov(theta)[None]
    m_pred, c_pred = linear_predict_batch(a, prev.mean[None], prev.cov[None], q)
    y_mean, s, u = linear_observe_batch(h, m_pred, c_pred, gamma)
    return FilterMoments(m_pred[0], c_pred[0], y_mean[0], s[0], u[0])


def unscented_moments(model: StateSpaceModel, theta, prev: Gaussian) -> FilterMoments:
    theta_b = _require_batchable(theta)
    q = model.process_cov(np.asarray(theta, float))[None]
    gamma = model.obs_cov(np.asarray(theta, float))[None]
    m_pred, c_pred = ut_predict_batch(model, theta_b, prev.mean[None], prev.chol[None], q)
    y_mean, s, u = ut_observe_batch(model, theta_b, m_pred, c_pred, gamma)
    return FilterMoments(m_pred[0], c_pred[0], y_mean[0], s[0], u[0])


def unscented_step(model: StateSpaceModel, theta, prev: Gaussian, y) -> Gaussian:
    return gaussian_update(unscented_moments(model, theta, prev), y)


def enkf_step_resampled(model: StateSpaceModel, theta, prev: Gaussian, y,
                        n_members: int, rng: SeededRng,
                        diagnostics: dict | None = None) -> Gaussian:
    """Ensemble update that redraws its members from ``prev`` every call.

    The ensemble is a scratch discretization of the Gaussian conditional: it
    is sampled fresh, propagated once with fresh process noise, updated
    against perturbed observations, and immediately summarized back into a
    Gaussian. Observation statistics include the drawn perturbations; the
    member update uses the perturbed innovation y - eta_j - h(x_j).
    """
    if n_members < 2:
        raise ValueError("ensemble needs at least 2 members")
    theta = np.asarray(theta, float)
    y = np.asarray(y, float)
    if diagnostics is not None and n_members <= model.state_dim:
        diagnostics["small_ensemble"] = True

    members = prev.sample(n_members, rng)
    q_sqrt = psd_sqrt(model.process_cov(theta))
    x_pred = model.transition(members, theta)
    x_pred = x_pred + rng.standard_normal((n_members, q_sqrt.shape[0])) @ q_sqrt.T
    if not np.all(np.isfinite(x_pred)):
        raise DegenerateEnsembleError("non-finite ensemble member after propagation")

    m_pred = x_pred.mean(axis=0)
    dev_x = x_pred - m_pred

    r_sqrt = psd_sqrt(model.obs_cov(theta))
    eta = rng.standard_normal((n_members, r_sqrt.shape[0])) @ r_sqrt.T
    y_pert = y - eta
    h_pred = model.observation(x_pred, theta)
    h_stat = h_pred + eta
    y_mean = h_stat.mean(axis=0)
    dev_y = h_stat - y_mean
    denom = n_members - 1
    s = dev_y.T @ dev_y / denom
    u = dev_x.T @ dev_y / denom

    s_chol, _ = chol_jittered(s)
    w = cho_solve((s_chol, True), (y_pert - h_pred).T).T  # (M, r)
    updated = x_pred + w @ u.T

    post_mean = updated.mean(axis=0)
    dev = updated - post_mean
    post_cov = dev.T @ dev / denom
    return Gaussian.from_cov(post_mean, post_cov)
