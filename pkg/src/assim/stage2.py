"""Conditional Gaussian regression of the state posterior on the parameter.

After each observation the joint approximation keeps the state conditionally
Gaussian: X_k | theta ~ N(m_k(theta), C_k(theta)). Two small networks carry
that dependence: one regresses the conditional mean, the other a flat encoding
of the lower-triangular covariance factor (softplus-plus-floor diagonal so the
decoded factor is always valid). Training targets are per-parameter-draw
filter posteriors; the loss is either the averaged Gaussian KL against the
targets or a mean/factor least-squares surrogate for large states.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import expit

from assim.errors import AssimError, TargetDropError
from assim.filters import (
    _sigma_points_batch,
    _weighted_moments,
    gaussian_update_batch,
    linear_observe_batch,
    linear_predict_batch,
    ut_weights,
)
from assim.gaussians import Gaussian, chol_jittered, psd_sqrt
from assim.models import (
    StateSpaceModel,
    batched_matrix,
    obs_cov_rows,
    process_cov_rows,
)
from assim.nets import Adam, Mlp
from assim.rng import SeededRng
from assim.stage1 import _chol_rows, predictive_moments_ut

DIAG_FLOOR = 1e-6


def _tril_meta(n: int):
    rows, cols = np.tril_indices(n)
    return rows, cols, rows == cols


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inverse(y):
    y = np.asarray(y, float)
    if np.any(y <= 0):
        raise ValueError("softplus inverse needs positive inputs")
    return np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))


def decode_factor(raw: np.ndarray, n: int) -> np.ndarray:
    """Flat factor encoding (B, n(n+1)/2) -> lower-triangular (B, n, n)."""
    rows, cols, diag = _tril_meta(n)
    vals = np.array(raw, float)
    vals[:, diag] = softplus(vals[:, diag]) + DIAG_FLOOR
    out = np.zeros(raw.shape[:-1] + (n, n))
    out[:, rows, cols] = vals
    return out


def decode_factor_grad(raw: np.ndarray, d_factor: np.ndarray, n: int) -> np.ndarray:
    """Pull a gradient on the decoded factor back to the raw encoding."""
    rows, cols, diag = _tril_meta(n)
    d_raw = np.array(d_factor[:, rows, cols], float)
    d_raw[:, diag] *= expit(raw[:, diag])
    return d_raw


def encode_factor(chol: np.ndarray) -> np.ndarray:
    """Raw encoding whose decode reproduces ``chol`` exactly."""
    n = chol.shape[-1]
    rows, cols, diag = _tril_meta(n)
    vals = np.array(chol[rows, cols], float)
    vals[diag] = softplus_inverse(vals[diag] - DIAG_FLOOR)
    return vals


@dataclass
class ConditionalGaussianState:
    """theta -> N(m(theta), L(theta) L(theta)^T) through two regressors."""

    mean_net: Mlp
    cov_net: Mlp
    state_dim: int
    param_dim: int

    def __call__(self, thetas: np.ndarray):
        """(d,) or (B, d) -> (means, factors) with matching leading shape."""
        thetas = np.asarray(thetas, float)
        single = thetas.ndim == 1
        batch = thetas[None] if single else thetas
        means = self.mean_net(batch)
        factors = decode_factor(self.cov_net(batch), self.state_dim)
        if single:
            return means[0], factors[0]
        return means, factors

    def copy(self) -> "ConditionalGaussianState":
        return ConditionalGaussianState(
            self.mean_net.copy(), self.cov_net.copy(), self.state_dim, self.param_dim
        )

    def get_weights(self) -> np.ndarray:
        return np.concatenate([self.mean_net.get_flat(), self.cov_net.get_flat()])

    def set_weights(self, vec: np.ndarray) -> None:
        split = self.mean_net.n_params
        self.mean_net.set_flat(vec[:split])
        self.cov_net.set_flat(vec[split:])


def eval_conditional(state: ConditionalGaussianState, theta: np.ndarray) -> Gaussian:
    mean, factor = state(np.asarray(theta, float))
    return Gaussian(mean, factor)


def new_conditional(state_dim: int, param_dim: int, width: int = 64,
                    rng: SeededRng | None = None) -> ConditionalGaussianState:
    m = state_dim * (state_dim + 1) // 2
    mean_net = Mlp([param_dim, width, width, state_dim],
                   None if rng is None else rng.substream(0))
    cov_net = Mlp([param_dim, width, width, m],
                  None if rng is None else rng.substream(1))
    return ConditionalGaussianState(mean_net, cov_net, state_dim, param_dim)


def init_conditional_state(prior_state: Gaussian, theta_prior: Gaussian,
                           rng: SeededRng, width: int = 64,
                           pretrain_steps: int = 500,
                           pretrain_lr: float = 1e-3) -> ConditionalGaussianState:
    """Step-0 conditional: the prior, constant in theta.

    Output heads are set so the networks emit the prior exactly, then the
    configured number of pretraining steps run against the constant target
    (gradients vanish at the exact fit, so this also guards regressions in
    the loss plumbing).
    """
    state = new_conditional(prior_state.dim, theta_prior.dim, width, rng)
    state.mean_net.weights[-1][:] = 0.0
    state.mean_net.biases[-1] = prior_state.mean.copy()
    state.cov_net.weights[-1][:] = 0.0
    state.cov_net.biases[-1] = encode_factor(prior_state.chol)

    opt = Adam(state.mean_net.n_params + state.cov_net.n_params, pretrain_lr)
    split = state.mean_net.n_params
    for t in range(pretrain_steps):
        thetas = theta_prior.sample(32, rng.substream(1000 + t))
        m, acts_m = state.mean_net.forward(thetas)
        raw, acts_c = state.cov_net.forward(thetas)
        factor = decode_factor(raw, state.state_dim)
        d_m = 2.0 * (m - prior_state.mean) / m.shape[0]
        d_f = 2.0 * (factor - prior_state.chol) / m.shape[0]
        gw_m, gb_m = state.mean_net.backward(acts_m, d_m)
        gw_c, gb_c = state.cov_net.backward(
            acts_c, decode_factor_grad(raw, d_f, state.state_dim))
        grad = np.concatenate([_flatten_grads(gw_m, gb_m), _flatten_grads(gw_c, gb_c)])
        delta = opt.step(grad)
        state.mean_net.set_flat(state.mean_net.get_flat() + delta[:split])
        state.cov_net.set_flat(state.cov_net.get_flat() + delta[split:])
    return state


# ---------------------------------------------------------------------------
# Training targets
# ---------------------------------------------------------------------------


@dataclass
class TargetBatch:
    """Per-parameter-draw filter posteriors used as regression targets."""

    thetas: np.ndarray  # (N, d)
    means: np.ndarray   # (N, n)
    covs: np.ndarray    # (N, n, n)
    chols: np.ndarray   # (N, n, n)
    dropped: int = 0

    @property
    def size(self) -> int:
        return self.thetas.shape[0]

    @property
    def logdets(self) -> np.ndarray:
        return 2.0 * np.sum(
            np.log(np.diagonal(self.chols, axis1=-2, axis2=-1)), axis=-1)


def _cov_sqrt_rows(fn, thetas, theta_dependent):
    if theta_dependent:
        return np.stack([psd_sqrt(fn(t)) for t in thetas])
    one = psd_sqrt(fn(thetas[0]))
    return np.broadcast_to(one, thetas.shape[:1] + one.shape)


def _ut_update_batch(model, thetas, means, chols, y, gamma):
    """Per-parameter unscented filter update, tolerant of bad rows.

    Rows whose propagation, predictive factorization, or observation mapping
    goes non-finite come back NaN and are dropped by the caller instead of
    aborting the whole batch.
    """
    m_pred, c_pred = predictive_moments_ut(model, thetas, means, chols)
    pred_chols, ok = _chol_rows(c_pred)
    ok &= np.isfinite(m_pred).all(axis=1)
    b, n = m_pred.shape
    post_means = np.full((b, n), np.nan)
    post_covs = np.full((b, n, n), np.nan)
    idx = np.flatnonzero(ok)
    if not idx.size:
        return post_means, post_covs

    lam, w_mean, w_cov = ut_weights(n)
    pts = _sigma_points_batch(m_pred[idx], pred_chols[idx], lam)
    obs = model.observation(pts, thetas[idx][:, None, :])
    obs = np.where(np.isfinite(obs), obs, np.nan)
    y_mean, dev_y, s_spread = _weighted_moments(w_mean, w_cov, obs)
    dev_x = pts - m_pred[idx][:, None, :]
    u = np.einsum("s,bsi,bsj->bij", w_cov, dev_x, dev_y)
    s = s_spread + gamma[idx]
    fin = np.isfinite(y_mean).all(axis=1) & np.isfinite(s).all(axis=(1, 2))
    sub = idx[fin]
    if sub.size:
        pm, pc = gaussian_update_batch(
            m_pred[sub], c_pred[sub], y_mean[fin], s[fin], u[fin], y)
        post_means[sub] = pm
        post_covs[sub] = pc
    return post_means, post_covs


def _enkf_update_batch(model, thetas, means, chols, y, n_members, rng):
    b, n = means.shape
    z0 = rng.standard_normal((b, n_members, n))
    x0 = means[:, None, :] + np.einsum("bij,bsj->bsi", chols, z0)
    q_sqrt = _cov_sqrt_rows(model.process_cov, thetas, model.theta_dependent_noise)
    noise = np.einsum("bij,bsj->bsi", q_sqrt, rng.standard_normal((b, n_members, n)))
    x1 = model.transition(x0, thetas[:, None, :]) + noise
    m_pred = x1.mean(axis=1)
    dev = x1 - m_pred[:, None, :]

    r_sqrt = _cov_sqrt_rows(model.obs_cov, thetas, model.theta_dependent_noise)
    r = r_sqrt.shape[-1]
    eta = np.einsum("bij,bsj->bsi", r_sqrt, rng.standard_normal((b, n_members, r)))
    y_pert = y - eta
    h_pred = model.observation(x1, thetas[:, None, :])
    h_stat = h_pred + eta
    y_mean = h_stat.mean(axis=1)
    dy = h_stat - y_mean[:, None, :]
    denom = n_members - 1
    s = np.einsum("bsi,bsj->bij", dy, dy) / denom
    u = np.einsum("bsi,bsj->bij", dev, dy) / denom

    with np.errstate(all="ignore"):
        try:
            w = np.linalg.solve(s, (y_pert - h_pred).transpose(0, 2, 1))
        except np.linalg.LinAlgError:
            w = np.full((b, r, n_members), np.nan)
            for i in range(b):
                try:
                    w[i] = np.linalg.solve(s[i], (y_pert[i] - h_pred[i]).T)
                except np.linalg.LinAlgError:
                    pass  # stays NaN, dropped downstream
        updated = x1 + np.einsum("brs,bnr->bsn", w, u)
    post_mean = updated.mean(axis=1)
    dev_p = updated - post_mean[:, None, :]
    post_cov = np.einsum("bsi,bsj->bij", dev_p, dev_p) / denom
    return post_mean, post_cov


def build_targets(nu: Gaussian, prev_cond: Callable, model: StateSpaceModel,
                  y: np.ndarray, backend: str, n_samples: int, rng: SeededRng,
                  n_members: int = 256) -> TargetBatch:
    """Draw parameters from ``nu`` and filter each conditional through ``y``.

    Per-sample failures (non-finite moments, unfactorizable covariance) are
    dropped; more than 20% drops aborts the step.
    """
    y = np.asarray(y, float)
    thetas = nu.sample(n_samples, rng.substream(0))
    means, chols = prev_cond(thetas)
    q = process_cov_rows(model, thetas)
    gamma = obs_cov_rows(model, thetas)

    with np.errstate(all="ignore"):
        if backend == "kalman":
            a = batched_matrix(model.dynamics_matrix, thetas)
            h = batched_matrix(model.obs_matrix, thetas)
            covs = np.einsum("bij,bkj->bik", chols, chols)
            m_pred, c_pred = linear_predict_batch(a, means, covs, q)
            y_mean, s, u = linear_observe_batch(h, m_pred, c_pred, gamma)
            post_means, post_covs = gaussian_update_batch(m_pred, c_pred, y_mean, s, u, y)
        elif backend == "ut":
            post_means, post_covs = _ut_update_batch(model, thetas, means, chols, y, gamma)
        elif backend == "enkf":
            post_means, post_covs = _enkf_update_batch(
                model, thetas, means, chols, y, n_members, rng.substream(1))
        else:
            raise ValueError(f"unknown target backend {backend!r}")

    ok = np.isfinite(post_means).all(axis=1) & np.isfinite(post_covs).all(axis=(1, 2))
    target_chols = np.zeros_like(post_covs)
    for i in np.flatnonzero(ok):
        try:
            target_chols[i], _ = chol_jittered(post_covs[i])
        except Exception:
            ok[i] = False
    dropped = int(n_samples - ok.sum())
    if dropped > 0.2 * n_samples:
        raise TargetDropError(
            f"{dropped}/{n_samples} filter targets failed to build")
    return TargetBatch(
        thetas=thetas[ok], means=post_means[ok],
        covs=post_covs[ok], chols=target_chols[ok], dropped=dropped,
    )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _forward(state: ConditionalGaussianState, thetas):
    m, acts_m = state.mean_net.forward(thetas)
    raw, acts_c = state.cov_net.forward(thetas)
    factor = decode_factor(raw, state.state_dim)
    return m, acts_m, raw, acts_c, factor


def _kl_value_grads(m, factor, batch: TargetBatch):
    n = m.shape[1]
    count = batch.size
    delta = m - batch.means
    a = np.linalg.solve(batch.chols, delta[..., None])[..., 0]      # K^-1 delta
    quad = np.sum(a * a, axis=1)
    bmat = np.linalg.solve(batch.chols, factor)                      # K^-1 L
    trace = np.sum(bmat * bmat, axis=(1, 2))
    logdet_c = 2.0 * np.sum(np.log(np.diagonal(factor, axis1=1, axis2=2)), axis=1)
    kl = 0.5 * (batch.logdets - logdet_c - n + trace + quad)
    loss = float(np.mean(kl))

    k_t = batch.chols.transpose(0, 2, 1)
    d_m = np.linalg.solve(k_t, a[..., None])[..., 0] / count         # C*^-1 delta / N
    d_factor = np.linalg.solve(k_t, bmat) / count                    # C*^-1 L / N
    inv_diag = 1.0 / np.diagonal(factor, axis1=1, axis2=2)
    idx = np.arange(n)
    d_factor[:, idx, idx] -= inv_diag / count
    return loss, d_m, d_factor


def _surrogate_value_grads(m, factor, batch: TargetBatch):
    count = batch.size
    delta = m - batch.means
    cov = np.einsum("bij,bkj->bik", factor, factor)
    diff = cov - batch.covs
    mean_mse = float(np.sum(delta * delta) / count)
    cov_frob = float(np.sum(diff * diff) / count)
    d_m = 2.0 * delta / count
    d_factor = 4.0 * np.einsum("bij,bjk->bik", diff, factor) / count
    return mean_mse, cov_frob, d_m, d_factor


def kl_loss(state: ConditionalGaussianState, batch: TargetBatch) -> float:
    """Average Gaussian KL from the regressed conditional to its target."""
    m, _, _, _, factor = _forward(state, batch.thetas)
    loss, _, _ = _kl_value_grads(m, factor, batch)
    return loss


def surrogate_losses(state: ConditionalGaussianState, batch: TargetBatch) -> dict:
    """Mean squared error terms: conditional mean and full covariance."""
    m, _, _, _, factor = _forward(state, batch.thetas)
    mean_mse, cov_frob, _, _ = _surrogate_value_grads(m, factor, batch)
    return {"mean_mse": mean_mse, "cov_frob": cov_frob}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class Stage2Config:
    loss: str = "kl"               # "kl" | "surrogate"
    epochs: int = 300
    lr: float = 1e-2
    lr_decay: float = 0.1          # final lr fraction over the main epochs
    batch_size: int | None = 16    # None = full batch
    warmup_epochs: int = 100       # least-squares epochs before the main loss
    n_targets: int = 64
    n_members: int = 256
    width: int = 64
    pretrain_steps: int = 500
    tol: float | None = None       # optional early stop on the epoch loss


def _flatten_grads(gw, gb):
    return np.concatenate([np.concatenate([w.ravel(), b]) for w, b in zip(gw, gb)])


def _epoch_loss_and_grad(state, thetas_b, batch_b, kind):
    m, acts_m, raw, acts_c, factor = _forward(state, thetas_b)
    if kind == "kl":
        loss, d_m, d_factor = _kl_value_grads(m, factor, batch_b)
    else:
        mean_mse, cov_frob, d_m, d_factor = _surrogate_value_grads(m, factor, batch_b)
        loss = mean_mse + cov_frob
    gw_m, gb_m = state.mean_net.backward(acts_m, d_m)
    d_raw = decode_factor_grad(raw, d_factor, state.state_dim)
    gw_c, gb_c = state.cov_net.backward(acts_c, d_raw)
    grad = np.concatenate([_flatten_grads(gw_m, gb_m), _flatten_grads(gw_c, gb_c)])
    return loss, grad


def _train_once(state, batch, config, lr, rng):
    # The warm-up epochs run the least-squares surrogate: the expected-KL
    # surface has a long saddle around conditionals that are constant in the
    # parameter (exactly how a fresh step-0 state starts), and plain least
    # squares does not.
    trained = state.copy()
    split = trained.mean_net.n_params
    opt = Adam(split + trained.cov_net.n_params, lr)
    n = batch.size
    bs = min(config.batch_size or n, n)
    trace = []
    for epoch in range(config.warmup_epochs + config.epochs):
        kind = "surrogate" if epoch < config.warmup_epochs else config.loss
        if epoch < config.warmup_epochs:
            lr_t = lr
        else:
            # fixed-rate Adam plateaus an order of magnitude above what the
            # nets can reach; decay the rate linearly over the main phase
            frac = (epoch - config.warmup_epochs) / max(config.epochs - 1, 1)
            lr_t = lr * (1.0 - (1.0 - config.lr_decay) * frac)
        order = (rng.substream(epoch).choice(n, size=n, replace=False)
                 if bs < n else np.arange(n))
        epoch_loss = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            sub = TargetBatch(batch.thetas[idx], batch.means[idx],
                              batch.covs[idx], batch.chols[idx])
            with np.errstate(all="ignore"):
                loss, grad = _epoch_loss_and_grad(trained, sub.thetas, sub, kind)
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                return None, trace
            delta = opt.step(grad, lr=lr_t)
            trained.mean_net.set_flat(trained.mean_net.get_flat() + delta[:split])
            trained.cov_net.set_flat(trained.cov_net.get_flat() + delta[split:])
            epoch_loss += loss * len(idx) / n
        trace.append(epoch_loss)
        if (config.tol is not None and epoch >= config.warmup_epochs
                and epoch_loss < config.tol):
            break
    return trained, trace


def fit_conditional(state: ConditionalGaussianState, batch: TargetBatch,
                    config: Stage2Config, rng: SeededRng):
    """Train a copy of ``state`` against ``batch``.

    Starts at the configured learning rate and halves it (restarting from the
    warm-start weights) up to three times if training goes non-finite.
    Returns (trained state, diagnostics dict).
    """
    if batch.size < 1:
        raise TargetDropError("empty target batch")
    for attempt in range(4):
        lr = config.lr * (0.5 ** attempt)
        trained, trace = _train_once(state, batch, config, lr, rng.substream(attempt))
        if trained is not None:
            return trained, {
                "final_loss": trace[-1] if trace else float("nan"),
                "epochs_run": len(trace),
                "lr_used": lr,
                "loss_trace": trace,
                "dropped_targets": batch.dropped,
            }
    raise AssimError("conditional regression diverged after 3 learning-rate halvings")
