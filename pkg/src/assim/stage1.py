"""Online variational update of the parameter belief.

On arrival of observation y_k the parameter factor nu is refreshed by
stochastic ascent of

    E_{theta ~ nu}[log I(theta)] - KL(nu || nu_prev)

where I(theta) is the conditional one-step evidence: the integral of the
observation density against the predictive state conditional. Three evidence
backends cover the filtering families: an exact closed form for fully linear
models, an unscented moment approximation (with a closed form when only the
observation is linear), and a plain Monte Carlo average.

Evidence evaluations are batched over parameter draws; rows whose model
evaluations go non-finite contribute log I = -inf rather than raising, so an
aggressive draw cannot kill an ascent iteration (the degeneracy guard
handles observations that are impossible under essentially every draw).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from assim.errors import FactorizationError, StepFailureError
from assim.filters import (
    _sigma_points_batch,
    _weighted_moments,
    ut_weights,
)
from assim.gaussians import LOG_2PI, Gaussian, chol_jittered, gaussian_kl, psd_sqrt
from assim.models import (
    StateSpaceModel,
    batched_matrix,
    obs_cov_rows,
    process_cov_rows,
    stack_cov,
)
from assim.nets import Adam
from assim.rng import SeededRng

EVIDENCE_BACKENDS = ("linear", "ut", "mc")


# ---------------------------------------------------------------------------
# Variational family
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VariationalGaussian:
    """Full-covariance Gaussian over the parameter.

    The unconstrained vector packs [mean, lower triangle row-major] with the
    factor diagonal passed through log, so ascent can run in a flat
    unconstrained space while the factor diagonal stays positive.
    """

    mean: np.ndarray
    cov_factor: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, float)
        factor = np.asarray(self.cov_factor, float)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov_factor", factor)
        if factor.shape != (mean.size, mean.size):
            raise ValueError("factor shape does not match the mean")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(factor))):
            raise ValueError("non-finite variational parameters")
        if np.any(np.triu(factor, 1) != 0.0):
            raise ValueError("factor must be lower-triangular")
        if np.any(np.diag(factor) <= 0.0):
            raise ValueError("factor diagonal must be positive")

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def cov(self) -> np.ndarray:
        return self.cov_factor @ self.cov_factor.T

    def to_gaussian(self) -> Gaussian:
        return Gaussian(self.mean, self.cov_factor)

    @classmethod
    def from_gaussian(cls, g: Gaussian) -> "VariationalGaussian":
        return cls(g.mean, g.chol)

    def to_unconstrained(self) -> np.ndarray:
        d = self.dim
        rows, cols = np.tril_indices(d)
        packed = self.cov_factor[rows, cols].copy()
        packed[rows == cols] = np.log(np.diag(self.cov_factor))
        return np.concatenate([self.mean, packed])

    @classmethod
    def from_unconstrained(cls, vec: np.ndarray, dim: int) -> "VariationalGaussian":
        vec = np.asarray(vec, float)
        rows, cols = np.tril_indices(dim)
        packed = vec[dim:].copy()
        packed[rows == cols] = np.exp(packed[rows == cols])
        factor = np.zeros((dim, dim))
        factor[rows, cols] = packed
        return cls(vec[:dim], factor)


def grad_to_unconstrained(nu: VariationalGaussian, grad_mean: np.ndarray,
                          grad_factor: np.ndarray) -> np.ndarray:
    """Chain a (mean, factor) gradient through the log-diagonal packing."""
    d = nu.dim
    rows, cols = np.tril_indices(d)
    packed = np.asarray(grad_factor, float)[rows, cols].copy()
    diag = rows == cols
    packed[diag] *= np.diag(nu.cov_factor)
    return np.concatenate([np.asarray(grad_mean, float), packed])


# ---------------------------------------------------------------------------
# Evidence backends (log I(theta), batched over parameter draws)
# ---------------------------------------------------------------------------


def _as_batch(thetas):
    thetas = np.asarray(thetas, float)
    return (thetas[None], True) if thetas.ndim == 1 else (thetas, False)


def _prev_batch(prev_cond, thetas):
    means, chols = prev_cond(thetas)
    return np.asarray(means, float), np.asarray(chols, float)


def _logpdf_rows(y: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """log N(y; means_i, covs_i) per row; bad rows give -inf instead of raising."""
    y = np.asarray(y, float)
    b, r = means.shape
    out = np.full(b, -np.inf)
    ok = np.isfinite(means).all(axis=1) & np.isfinite(covs).all(axis=(1, 2))
    idx = np.flatnonzero(ok)
    if idx.size == 0:
        return out
    try:
        chols = np.linalg.cholesky(covs[idx])
    except np.linalg.LinAlgError:
        chols = np.zeros((idx.size, r, r))
        keep = np.ones(idx.size, bool)
        for j, i in enumerate(idx):
            try:
                chols[j], _ = chol_jittered(covs[i])
            except FactorizationError:
                keep[j] = False
        idx = idx[keep]
        chols = chols[keep]
        if idx.size == 0:
            return out
    resid = y - means[idx]
    z = np.linalg.solve(chols, resid[..., None])[..., 0]
    logdet = np.sum(np.log(np.diagonal(chols, axis1=-2, axis2=-1)), axis=-1)
    out[idx] = -0.5 * r * LOG_2PI - logdet - 0.5 * np.sum(z * z, axis=-1)
    return out


def _logpdf_stack_const_cov(y: np.ndarray, means: np.ndarray,
                            cov: np.ndarray) -> np.ndarray:
    """log N(y; means_{bs}, cov) over a (B, S, r) stack of means with one
    shared covariance; non-finite rows give -inf."""
    y = np.asarray(y, float)
    b, s, r = means.shape
    chol, _ = chol_jittered(cov)
    with np.errstate(all="ignore"):
        resid = (y - means).reshape(-1, r)
        z = solve_triangular(chol, resid.T, lower=True, check_finite=False)
        ll = (-0.5 * r * LOG_2PI - np.sum(np.log(np.diag(chol)))
              - 0.5 * np.sum(z * z, axis=0))
    ll = np.where(np.isfinite(ll), ll, -np.inf)
    return ll.reshape(b, s)


def log_evidence_linear(model: StateSpaceModel, thetas, means, chols, y) -> np.ndarray:
    """Closed-form evidence for a fully linear model.

    I(theta) = N(y; H m_pred, H C_pred H^T + Gamma) with m_pred = A m and
    C_pred = A C A^T + Sigma, everything evaluated at each theta row.
    """
    if not (model.linear_dynamics and model.linear_observation):
        raise ValueError("closed-form evidence requires a fully linear model")
    thetas, single = _as_batch(thetas)
    means = np.atleast_2d(np.asarray(means, float))
    chols = np.asarray(chols, float)
    chols = chols[None] if chols.ndim == 2 else chols
    a = batched_matrix(model.dynamics_matrix, thetas)
    h = batched_matrix(model.obs_matrix, thetas)
    q = process_cov_rows(model, thetas)
    gamma = obs_cov_rows(model, thetas)
    with np.errstate(all="ignore"):
        covs = np.einsum("bij,bkj->bik", chols, chols)
        m_pred = np.einsum("bij,bj->bi", a, means)
        c_pred = np.einsum("bij,bjk,blk->bil", a, covs, a) + q
        y_mean = np.einsum("bij,bj->bi", h, m_pred)
        s = np.einsum("bij,bjk,blk->bil", h, c_pred, h) + gamma
        out = _logpdf_rows(y, y_mean, s)
    return out[0] if single else out


def predictive_moments_ut(model: StateSpaceModel, thetas, means, chols):
    """Unscented predictive state moments (m_pred, c_pred) including Sigma.

    Rows whose sigma points go non-finite stay non-finite; callers treat
    them as impossible draws rather than aborting.
    """
    thetas, single = _as_batch(thetas)
    means = np.atleast_2d(np.asarray(means, float))
    chols = np.asarray(chols, float)
    chols = chols[None] if chols.ndim == 2 else chols
    lam, w_mean, w_cov = ut_weights(means.shape[-1])
    with np.errstate(all="ignore"):
        pts = _sigma_points_batch(means, chols, lam)
        prop = model.transition(pts, thetas[:, None, :])
        prop = np.where(np.isfinite(prop), prop, np.nan)
        m_pred, _, spread = _weighted_moments(w_mean, w_cov, prop)
        c_pred = spread + process_cov_rows(model, thetas)
    if single:
        return m_pred[0], c_pred[0]
    return m_pred, c_pred


def _chol_rows(covs: np.ndarray):
    """Per-row factors plus a mask of rows that actually factorized."""
    b, n, _ = covs.shape
    ok = np.isfinite(covs).all(axis=(1, 2))
    chols = np.zeros((b, n, n))
    idx = np.flatnonzero(ok)
    if idx.size:
        try:
            chols[idx] = np.linalg.cholesky(covs[idx])
        except np.linalg.LinAlgError:
            for i in idx:
                try:
                    chols[i], _ = chol_jittered(covs[i])
                except FactorizationError:
                    ok[i] = False
    return chols, ok


def log_evidence_gaussian(model: StateSpaceModel, thetas, means, chols, y) -> np.ndarray:
    """Evidence through the unscented predictive moments.

    Linear observation uses the closed form N(y; H m_pred, H C_pred H^T +
    Gamma). Otherwise the integral of the observation density against
    N(m_pred, C_pred) is taken by the unscented quadrature in (signed)
    log-sum-exp form; a quadrature whose weighted sum is not positive
    yields -inf.
    """
    thetas, single = _as_batch(thetas)
    means = np.atleast_2d(np.asarray(means, float))
    chols_in = np.asarray(chols, float)
    chols_in = chols_in[None] if chols_in.ndim == 2 else chols_in
    y = np.asarray(y, float)
    m_pred, c_pred = predictive_moments_ut(model, thetas, means, chols_in)
    gamma = obs_cov_rows(model, thetas)

    with np.errstate(all="ignore"):
        if model.linear_observation:
            h = batched_matrix(model.obs_matrix, thetas)
            y_mean = np.einsum("bij,bj->bi", h, m_pred)
            s = np.einsum("bij,bjk,blk->bil", h, c_pred, h) + gamma
            out = _logpdf_rows(y, y_mean, s)
            return out[0] if single else out

        b = thetas.shape[0]
        out = np.full(b, -np.inf)
        pred_chols, ok = _chol_rows(c_pred)
        idx = np.flatnonzero(ok & np.isfinite(m_pred).all(axis=1))
        if idx.size:
            lam, w_mean, _ = ut_weights(means.shape[-1])
            pts = _sigma_points_batch(m_pred[idx], pred_chols[idx], lam)
            obs = model.observation(pts, thetas[idx][:, None, :])
            n_sigma = obs.shape[1]
            if model.theta_dependent_noise:
                flat = _logpdf_rows(
                    y,
                    obs.reshape(-1, obs.shape[-1]),
                    np.repeat(gamma[idx], n_sigma, axis=0),
                ).reshape(idx.size, n_sigma)
            else:
                flat = _logpdf_stack_const_cov(y, obs, gamma[0])
            peak = np.max(flat, axis=1)
            usable = np.isfinite(peak)
            total = np.einsum("s,bs->b", w_mean,
                              np.exp(flat - np.where(usable, peak, 0.0)[:, None]))
            good = usable & (total > 0.0)
            out[idx[good]] = peak[good] + np.log(total[good])
    return out[0] if single else out


def log_evidence_monte_carlo(model: StateSpaceModel, thetas, means, chols, y,
                             n_draws: int, rng: SeededRng | None = None,
                             normals=None) -> np.ndarray:
    """Monte Carlo evidence: draw previous states from the conditional, push
    each through the transition with fresh process noise, and average the
    observation density in log-sum-exp form.

    ``normals`` may supply the pair of standard-normal blocks (state draws,
    process-noise draws) so callers can hold randomness fixed across probe
    evaluations of nearby parameters.
    """
    if n_draws < 1:
        raise ValueError("need at least one draw")
    thetas, single = _as_batch(thetas)
    means = np.atleast_2d(np.asarray(means, float))
    chols_in = np.asarray(chols, float)
    chols_in = chols_in[None] if chols_in.ndim == 2 else chols_in
    y = np.asarray(y, float)
    b, n = means.shape
    if normals is None:
        if rng is None:
            raise ValueError("either rng or normals must be given")
        z_state = rng.substream(0).standard_normal((b, n_draws, n))
        z_noise = rng.substream(1).standard_normal((b, n_draws, n))
    else:
        z_state, z_noise = normals

    with np.errstate(all="ignore"):
        x0 = means[:, None, :] + np.einsum("bij,bsj->bsi", chols_in, z_state)
        if model.theta_dependent_noise:
            q_sqrt = np.stack([psd_sqrt(model.process_cov(t)) for t in thetas])
        else:
            one = psd_sqrt(model.process_cov(thetas[0]))
            q_sqrt = np.broadcast_to(one, (b,) + one.shape)
        x1 = model.transition(x0, thetas[:, None, :])
        x1 = x1 + np.einsum("bij,bsj->bsi", q_sqrt, z_noise)
        h_pred = model.observation(x1, thetas[:, None, :])
        if model.theta_dependent_noise:
            gamma = stack_cov(model.obs_cov, thetas)
            flat = _logpdf_rows(
                y,
                h_pred.reshape(-1, h_pred.shape[-1]),
                np.repeat(gamma, n_draws, axis=0),
            ).reshape(b, n_draws)
        else:
            flat = _logpdf_stack_const_cov(y, h_pred, model.obs_cov(thetas[0]))
        out = logsumexp(flat, axis=1) - np.log(n_draws)
    return out[0] if single else out


def _evidence(model, thetas, means, chols, y, backend, mc_draws, normals):
    if backend == "linear":
        return log_evidence_linear(model, thetas, means, chols, y)
    if backend == "ut":
        return log_evidence_gaussian(model, thetas, means, chols, y)
    if backend == "mc":
        return log_evidence_monte_carlo(model, thetas, means, chols, y,
                                        mc_draws, normals=normals)
    raise ValueError(f"unknown evidence backend {backend!r}")


# ---------------------------------------------------------------------------
# ELBO estimate with pathwise gradients
# ---------------------------------------------------------------------------


@dataclass
class ElboEstimate:
    value: float
    grad_mean: np.ndarray
    grad_factor: np.ndarray
    n_mc: int
    log_i_min: float
    log_i_max: float
    log_i_mean: float
    log_i_std: float
    frac_neg_inf: float
    finite: bool


def _kl_and_grads(nu: VariationalGaussian, nu_prev: VariationalGaussian):
    kl = gaussian_kl(nu.to_gaussian(), nu_prev.to_gaussian())
    lp = nu_prev.cov_factor
    delta = nu.mean - nu_prev.mean
    a = solve_triangular(lp, delta, lower=True)
    g_mean = solve_triangular(lp.T, a, lower=False)
    bmat = solve_triangular(lp, nu.cov_factor, lower=True)
    g_factor = solve_triangular(lp.T, bmat, lower=False)
    d = nu.dim
    g_factor[np.arange(d), np.arange(d)] -= 1.0 / np.diag(nu.cov_factor)
    return kl, g_mean, np.tril(g_factor)


def elbo_estimate(nu: VariationalGaussian, nu_prev: VariationalGaussian,
                  model: StateSpaceModel, prev_cond: Callable, y,
                  backend: str, n_mc: int, rng: SeededRng,
                  fd_step: float = 1e-4, mc_draws: int = 256) -> ElboEstimate:
    """Reparameterized ELBO value and its (mean, factor) gradients.

    theta = mean + L z with z held fixed; the evidence gradient in theta is
    taken by central differences around each draw (the same evidence
    randomness is reused at the probe points), then pushed through the
    reparameterization. The KL term and its gradients are closed-form.
    """
    if n_mc < 1:
        raise ValueError("need at least one parameter draw")
    d = nu.dim
    z = rng.substream(0).standard_normal((n_mc, d))
    theta0 = nu.mean + z @ nu.cov_factor.T
    blocks = [theta0]
    for i in range(d):
        shift = np.zeros(d)
        shift[i] = fd_step
        blocks.extend([theta0 + shift, theta0 - shift])
    big = np.concatenate(blocks, axis=0)
    means, chols = _prev_batch(prev_cond, big)

    normals = None
    if backend == "mc":
        n = means.shape[-1]
        z_state = rng.substream(1).standard_normal((n_mc, mc_draws, n))
        z_noise = rng.substream(2).standard_normal((n_mc, mc_draws, n))
        reps = 2 * d + 1
        normals = (
            np.tile(z_state, (reps, 1, 1)),
            np.tile(z_noise, (reps, 1, 1)),
        )

    lev = _evidence(model, big, means, chols, y, backend, mc_draws, normals)
    lev = lev.reshape(2 * d + 1, n_mc)
    center = lev[0]
    finite_center = np.isfinite(center)
    frac_neg_inf = float(np.mean(center == -np.inf))
    value_ev = float(np.mean(center))

    with np.errstate(invalid="ignore"):
        g = (lev[1::2] - lev[2::2]) / (2.0 * fd_step)  # (d, n_mc)
    usable = finite_center & np.isfinite(g).all(axis=0)
    if np.any(usable):
        gu = g[:, usable]
        zu = z[usable]
        g_mean_ev = gu.mean(axis=1)
        g_factor_ev = np.tril(gu @ zu / usable.sum())
    else:
        g_mean_ev = np.full(d, np.nan)
        g_factor_ev = np.full((d, d), np.nan)

    kl, gkl_mean, gkl_factor = _kl_and_grads(nu, nu_prev)
    value = value_ev - kl
    grad_mean = g_mean_ev - gkl_mean
    grad_factor = g_factor_ev - gkl_factor
    finite = bool(np.isfinite(value)
                  and np.all(np.isfinite(grad_mean))
                  and np.all(np.isfinite(grad_factor)))
    fin = center[finite_center]
    return ElboEstimate(
        value=value,
        grad_mean=grad_mean,
        grad_factor=grad_factor,
        n_mc=n_mc,
        log_i_min=float(fin.min()) if fin.size else -np.inf,
        log_i_max=float(fin.max()) if fin.size else -np.inf,
        log_i_mean=float(fin.mean()) if fin.size else -np.inf,
        log_i_std=float(fin.std()) if fin.size else np.nan,
        frac_neg_inf=frac_neg_inf,
        finite=finite,
    )


# ---------------------------------------------------------------------------
# Ascent
# ---------------------------------------------------------------------------


@dataclass
class Stage1Config:
    steps: int = 200
    lr: float = 1e-2
    n_mc: int = 32
    lr_decay: float = 0.1        # terminal learning-rate multiplier
    fd_step: float = 1e-4
    mc_draws: int = 256          # inner draws for the Monte Carlo backend
    final_n_mc: int = 256        # draws for the terminal objective estimate
    degenerate_frac: float = 0.9


@dataclass
class Stage1Result:
    nu: VariationalGaussian
    elbo_trace: np.ndarray
    terminal_elbo: float
    degenerate: bool = False
    n_skipped: int = 0
    diagnostics: dict = field(default_factory=dict)


def fit_nu(nu_init: VariationalGaussian, model: StateSpaceModel,
           prev_cond: Callable, y, backend: str, config: Stage1Config,
           rng: SeededRng) -> Stage1Result:
    """Warm-started stochastic ascent of the single-observation objective.

    The anchor of the KL term is ``nu_init`` itself (the previous belief).
    If the very first evaluation finds the observation impossible under more
    than the configured fraction of draws, the belief is kept unchanged and
    the result flagged; if every iteration is unusable the step fails.
    """
    nu_prev = nu_init
    d = nu_init.dim
    vec = nu_init.to_unconstrained()
    opt = Adam(vec.size, config.lr)
    trace = np.full(config.steps, np.nan)
    n_skipped = 0
    last_est = None

    for t in range(config.steps):
        nu_t = VariationalGaussian.from_unconstrained(vec, d)
        est = elbo_estimate(nu_t, nu_prev, model, prev_cond, y, backend,
                            config.n_mc, rng.substream(t),
                            fd_step=config.fd_step, mc_draws=config.mc_draws)
        trace[t] = est.value
        last_est = est
        if t == 0 and est.frac_neg_inf > config.degenerate_frac:
            return Stage1Result(
                nu=nu_prev,
                elbo_trace=trace[:1],
                terminal_elbo=est.value,
                degenerate=True,
                diagnostics={"frac_neg_inf": est.frac_neg_inf},
            )
        if not est.finite:
            n_skipped += 1
            continue
        g = grad_to_unconstrained(nu_t, est.grad_mean, est.grad_factor)
        frac_done = t / max(config.steps - 1, 1)
        lr_t = config.lr * (1.0 - (1.0 - config.lr_decay) * frac_done)
        vec = vec + opt.step(-g, lr=lr_t)

    if n_skipped == config.steps:
        raise StepFailureError(
            f"no usable ascent iteration out of {config.steps} "
            f"(last frac_neg_inf={last_est.frac_neg_inf:.2f})")

    nu_final = VariationalGaussian.from_unconstrained(vec, d)
    terminal = elbo_estimate(nu_final, nu_prev, model, prev_cond, y, backend,
                             config.final_n_mc, rng.substream(config.steps),
                             fd_step=config.fd_step, mc_draws=config.mc_draws)
    return Stage1Result(
        nu=nu_final,
        elbo_trace=trace,
        terminal_elbo=terminal.value,
        degenerate=False,
        n_skipped=n_skipped,
        diagnostics={
            "log_i_min": terminal.log_i_min,
            "log_i_max": terminal.log_i_max,
            "log_i_mean": terminal.log_i_mean,
            "log_i_std": terminal.log_i_std,
            "frac_neg_inf": terminal.frac_neg_inf,
        },
    )
