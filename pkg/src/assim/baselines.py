"""Joint augmented-state baselines: bootstrap PF, unscented, and ensemble filters.

The comparison methods absorb the unknown parameter into the state vector,
z = (x, theta), and run a single filter on the augmented system

    x_{k+1}     = Phi(x_k; theta_k) + W_k
    theta_{k+1} = theta_k + xi_k,        xi_k ~ N(0, q_theta I),

where the artificial random walk on the parameter block keeps it alive under
repeated conditioning. The particle filter uses a wide walk (1e-4) so
resampling does not freeze the parameter support; the moment filters use a
nominally tiny walk (1e-8) that only guards against covariance collapse.

Each step maps its carrier forward explicitly (ensemble in, ensemble out),
one observation per call, so the harness can drive any of the three the same
way it drives the variational method.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from assim.errors import DegenerateEnsembleError
from assim.filters import unscented_step
from assim.gaussians import LOG_2PI, Gaussian, chol_jittered, logpdf_batch, psd_sqrt
from assim.models import JointPrior, StateSpaceModel, stack_cov
from assim.rng import SeededRng

# parameter random-walk covariance scales (q_theta * I)
PF_THETA_WALK = 1e-4
MOMENT_THETA_WALK = 1e-8

_EMPTY_THETA = np.zeros(0)


@dataclass
class AugmentedModel:
    """State-space view of the stacked (state, parameter) vector.

    Moment filters need fixed noise matrices, so the wrapped model's
    covariances are evaluated once at ``theta_ref`` (every bundled model has
    parameter-independent noise, making the reference point immaterial).
    """

    base: StateSpaceModel
    q_theta: float
    theta_ref: np.ndarray | None = None

    def __post_init__(self):
        if self.q_theta < 0.0:
            raise ValueError("parameter walk variance must be nonnegative")
        if self.theta_ref is None:
            self.theta_ref = np.zeros(self.base.param_dim)
        n, d = self.base.state_dim, self.base.param_dim
        self.dim = n + d

        sigma = np.asarray(self.base.process_cov(self.theta_ref), float)
        q = np.zeros((self.dim, self.dim))
        q[:n, :n] = sigma
        q[n:, n:] = self.q_theta * np.eye(d)
        self.process_cov_matrix = q
        # assembled block-by-block so the state rows stay a factor of Sigma
        # (a factor of the full q may mix the blocks)
        self.state_noise_sqrt = psd_sqrt(sigma)
        self.noise_sqrt = np.zeros((self.dim, self.dim))
        self.noise_sqrt[:n, :n] = self.state_noise_sqrt
        self.noise_sqrt[n:, n:] = np.sqrt(self.q_theta) * np.eye(d)
        self.obs_cov_matrix = np.asarray(self.base.obs_cov(self.theta_ref), float)
        self.obs_noise_sqrt = psd_sqrt(self.obs_cov_matrix)

        self.view = StateSpaceModel(
            name=f"augmented-{self.base.name}",
            state_dim=self.dim,
            obs_dim=self.base.obs_dim,
            param_dim=0,
            transition=lambda z, _theta: self.transition(z),
            observation=lambda z, _theta: self.observation(z),
            process_cov=lambda _theta: self.process_cov_matrix,
            obs_cov=lambda _theta: self.obs_cov_matrix,
        )

    def split(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(z, float)
        n = self.base.state_dim
        return z[..., :n], z[..., n:]

    def transition(self, z: np.ndarray) -> np.ndarray:
        x, th = self.split(z)
        return np.concatenate([np.asarray(self.base.transition(x, th), float), th],
                              axis=-1)

    def observation(self, z: np.ndarray) -> np.ndarray:
        x, th = self.split(z)
        return np.asarray(self.base.observation(x, th), float)

    def split_moments(self, mean: np.ndarray, cov: np.ndarray):
        """(state mean, state cov, parameter mean, parameter cov) blocks."""
        n = self.base.state_dim
        return mean[:n], cov[:n, :n], mean[n:], cov[n:, n:]


def augmented_prior(prior: JointPrior) -> Gaussian:
    """Independent (state, parameter) prior as one block Gaussian."""
    mean = np.concatenate([prior.state.mean, prior.params.mean])
    n, d = prior.state.dim, prior.params.dim
    cov = np.zeros((n + d, n + d))
    cov[:n, :n] = prior.state.cov
    cov[n:, n:] = prior.params.cov
    return Gaussian.from_cov(mean, cov)


def init_members(prior: JointPrior, m: int, rng: SeededRng) -> np.ndarray:
    """m augmented draws from the declared joint prior, shape (m, n + d)."""
    states = prior.state.sample(m, rng.substream(0))
    thetas = prior.params.sample(m, rng.substream(1))
    return np.concatenate([states, thetas], axis=1)


# ---------------------------------------------------------------------------
# Joint bootstrap particle filter
# ---------------------------------------------------------------------------


@dataclass
class ParticleEnsemble:
    """Weighted augmented-state particles."""

    particles: np.ndarray  # (N, n + d)
    weights: np.ndarray  # (N,)

    def __post_init__(self):
        self.particles = np.asarray(self.particles, float)
        self.weights = np.asarray(self.weights, float)
        if self.particles.ndim != 2 or self.weights.shape != (len(self.particles),):
            raise ValueError("particles must be (N, dim) with one weight per row")
        if np.any(self.weights < 0.0):
            raise ValueError("negative particle weight")
        total = float(self.weights.sum())
        if abs(total - 1.0) > 1e-12:
            raise ValueError(f"particle weights sum to {total!r}, not 1")
        self._ess = 1.0 / float(self.weights @ self.weights)

    @property
    def size(self) -> int:
        return len(self.weights)

    @property
    def ess(self) -> float:
        return self._ess

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        """Weighted mean and covariance of the augmented cloud."""
        mean = self.weights @ self.particles
        dev = self.particles - mean
        cov = np.einsum("b,bi,bj->ij", self.weights, dev, dev)
        return mean, cov


def init_particles(prior: JointPrior, n: int, rng: SeededRng) -> ParticleEnsemble:
    """Equal-weight cloud drawn from the joint prior (no extra perturbation)."""
    return ParticleEnsemble(init_members(prior, n, rng), np.full(n, 1.0 / n))


def systematic_resample(weights: np.ndarray, rng: SeededRng) -> np.ndarray:
    """Indices of a systematic (single-uniform, stratified) resample."""
    n = len(weights)
    positions = (rng.uniform() + np.arange(n)) / n
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0  # guard the roundoff tail
    return np.searchsorted(cdf, positions)


def _observation_loglik(model: StateSpaceModel, x: np.ndarray, th: np.ndarray,
                        y: np.ndarray) -> np.ndarray:
    """Per-particle log N(y; h(x_i, th_i), Gamma(th_i)); -inf where h blew up."""
    with np.errstate(all="ignore"):
        h = np.asarray(model.observation(x, th), float)
    out = np.full(len(x), -np.inf)
    ok = np.all(np.isfinite(h), axis=-1)
    if not np.any(ok):
        return out
    if model.theta_dependent_noise:
        out[ok] = logpdf_batch(y, h[ok], stack_cov(model.obs_cov, th[ok]))
    else:
        chol, _ = chol_jittered(np.asarray(model.obs_cov(th[0]), float))
        with np.errstate(over="ignore"):
            z = solve_triangular(chol, (y - h[ok]).T, lower=True,
                                 check_finite=False)
            logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
            out[ok] = -0.5 * (len(y) * LOG_2PI + logdet + np.sum(z * z, axis=0))
    return out


def joint_pf_step(ens: ParticleEnsemble, aug: AugmentedModel, y: np.ndarray,
                  rng: SeededRng,
                  diagnostics: dict | None = None) -> ParticleEnsemble:
    """One bootstrap step: propagate, reweight, resample when ESS < N/2.

    Weights are carried in log space with the peak subtracted before
    exponentiating, so a sharp likelihood degrades into an explicit
    degenerate-collapse error rather than silent NaN weights. Both noise
    blocks are always drawn (even when q_theta = 0) so clamping the walk
    does not reshuffle the state-noise stream.
    """
    y = np.asarray(y, float)
    n_parts = ens.size
    n = aug.base.state_dim
    x, th = aug.split(ens.particles)

    with np.errstate(all="ignore"):
        x_new = np.asarray(aug.base.transition(x, th), float)
    x_new = x_new + rng.standard_normal(x.shape) @ aug.state_noise_sqrt.T
    th_new = th + np.sqrt(aug.q_theta) * rng.standard_normal(th.shape)
    parts = np.concatenate([x_new, th_new], axis=1)

    log_like = _observation_loglik(aug.base, x_new, th_new, y)
    blown = ~np.all(np.isfinite(parts), axis=1)
    log_like[blown] = -np.inf
    with np.errstate(divide="ignore"):
        logw = np.log(ens.weights) + log_like
    peak = float(np.max(logw))
    if not np.isfinite(peak):
        raise DegenerateEnsembleError(
            "all particle weights vanished (likelihood underflow)")
    w = np.exp(logw - peak)
    w = w / w.sum()

    ess = 1.0 / float(w @ w)
    resampled = ess < n_parts / 2.0
    if resampled:
        parts = parts[systematic_resample(w, rng)]
        w = np.full(n_parts, 1.0 / n_parts)
    if diagnostics is not None:
        diagnostics["ess"] = ess
        diagnostics["resampled"] = resampled
        diagnostics["blown_particles"] = int(blown.sum())
        diagnostics["unique_theta"] = int(
            np.unique(parts[:, n:], axis=0).shape[0])
    return ParticleEnsemble(parts, w)


# ---------------------------------------------------------------------------
# Joint unscented Kalman filter
# ---------------------------------------------------------------------------


def joint_ukf_step(prev: Gaussian, aug: AugmentedModel, y: np.ndarray) -> Gaussian:
    """Unscented update of the joint Gaussian on the augmented system."""
    if prev.dim != aug.dim:
        raise ValueError(f"carrier dimension {prev.dim} != augmented {aug.dim}")
    return unscented_step(aug.view, _EMPTY_THETA, prev, y)


# ---------------------------------------------------------------------------
# Joint ensemble Kalman filter (perturbed observations, persistent members)
# ---------------------------------------------------------------------------


def joint_enkf_step(members: np.ndarray, aug: AugmentedModel, y: np.ndarray,
                    rng: SeededRng) -> np.ndarray:
    """Perturbed-observation ensemble update; members persist across steps.

    Unlike the redraw-every-step ensemble used for conditional filter
    targets, the member cloud here is the running representation of the
    joint posterior: no resampling, no Gaussian summarization. The gain uses
    the sampled innovation spread plus the exact observation covariance, and
    each member assimilates its own perturbed copy of the observation.
    """
    members = np.asarray(members, float)
    m = len(members)
    if m < 2:
        raise ValueError("ensemble needs at least 2 members")
    y = np.asarray(y, float)

    z = rng.standard_normal(members.shape)
    pred = aug.transition(members) + z @ aug.noise_sqrt.T
    if not np.all(np.isfinite(pred)):
        raise DegenerateEnsembleError("non-finite ensemble member after propagation")

    h_pred = aug.observation(pred)
    eta = rng.standard_normal((m, aug.base.obs_dim)) @ aug.obs_noise_sqrt.T
    dev_x = pred - pred.mean(axis=0)
    dev_y = h_pred - h_pred.mean(axis=0)
    denom = m - 1
    s = dev_y.T @ dev_y / denom + aug.obs_cov_matrix
    u = dev_x.T @ dev_y / denom
    s_chol, _ = chol_jittered(s)
    gain_t = cho_solve((s_chol, True), u.T)  # S^{-1} U^T, (r, n + d)
    return pred + (y + eta - h_pred) @ gain_t
