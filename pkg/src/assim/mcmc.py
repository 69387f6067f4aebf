"""Delayed-rejection adaptive Metropolis sampling of exact joint posteriors.

For linear models the joint density p(x_k, theta | y_1..y_k) factorizes as
p(theta) * prod_i p(y_i | theta, y_1..y_{i-1}) * p(x_k | theta, y_1..y_k),
every factor of which the parameter-conditioned Kalman recursion evaluates in
closed form. A DRAM chain over the (x_k, theta) vector then provides the
reference moments that cheaper approximations are judged against.

The sampler is standard DRAM: Gaussian random-walk proposals whose covariance
adapts to the scaled empirical chain covariance after a warm-up threshold,
plus one delayed-rejection tier with the proposal shrunk by a fixed factor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_triangular

from assim.errors import ConfigError, FactorizationError, StuckChainError
from assim.gaussians import chol_jittered
from assim.models import JointPrior, StateSpaceModel
from assim.rng import SeededRng

AM_EPS = 1e-10  # ridge added to the adapted proposal covariance
STUCK_PROPOSAL_LIMIT = 10_000

# chain length used by the experiment harness: long enough for stable
# reference moments at desk scale, far short of a publication-grade run
DESK_DRAW_COUNT = 200_000


def log_target_joint(model: StateSpaceModel, prior: JointPrior, ys,
                     point: np.ndarray) -> float:
    """Exact joint log posterior density at ``point`` = (x_k, theta).

    ``ys`` holds the observations y_1..y_k in order; an empty list scores the
    prior itself. The value is exact up to the constant p(y_1..y_k). The
    recursion runs on raw arrays with the parameter-dependent system matrices
    built once: the sampler calls this in a tight loop.
    """
    point = np.asarray(point, float)
    if point.shape != (model.state_dim + model.param_dim,):
        raise ValueError(
            f"point has shape {point.shape}, expected "
            f"({model.state_dim + model.param_dim},)")
    if not (model.linear_dynamics and model.linear_observation):
        raise ValueError("exact joint target requires a fully linear model")
    x = point[:model.state_dim]
    theta = point[model.state_dim:]
    total = float(prior.params.logpdf(theta))
    if not ys:
        return total + float(prior.state.logpdf(x))

    a = np.asarray(model.dynamics_matrix(theta), float)
    h = np.asarray(model.obs_matrix(theta), float)
    q = np.asarray(model.process_cov(theta), float)
    gamma = np.asarray(model.obs_cov(theta), float)
    if model.state_dim == 2 and model.obs_dim == 1:
        return total + _recursion_2d_scalar_obs(a, h, q, gamma,
                                                prior.state.mean,
                                                prior.state.cov, ys, x)
    return total + _recursion_general(a, h, q, gamma, prior.state.mean,
                                      prior.state.cov, ys, x)


def _recursion_general(a, h, q, gamma, m0, c0, ys, x) -> float:
    r = h.shape[0]
    m = m0.copy()
    c = c0
    total = 0.0
    for y in ys:
        m = a @ m
        c = a @ c @ a.T + q
        y_mean = h @ m
        hc = h @ c
        s = hc @ h.T + gamma
        resid = np.asarray(y, float) - y_mean
        s_chol = np.linalg.cholesky(s)
        z = solve_triangular(s_chol, resid, lower=True, check_finite=False)
        total += -0.5 * (r * math.log(2.0 * math.pi) + float(z @ z)) \
            - float(np.sum(np.log(np.diag(s_chol))))
        gain = np.linalg.solve(s, hc).T
        m = m + gain @ resid
        c = c - gain @ hc
        c = 0.5 * (c + c.T)
    c_chol = np.linalg.cholesky(c)
    zx = solve_triangular(c_chol, x - m, lower=True, check_finite=False)
    return total - 0.5 * (m.size * math.log(2.0 * math.pi) + float(zx @ zx)) \
        - float(np.sum(np.log(np.diag(c_chol))))


def _recursion_2d_scalar_obs(a, h, q, gamma, m0, c0, ys, x) -> float:
    """Same recursion unrolled to scalar arithmetic for the 2-state,
    1-observation layout the reference chains hammer."""
    a11, a12, a21, a22 = a[0, 0], a[0, 1], a[1, 0], a[1, 1]
    h1, h2 = h[0, 0], h[0, 1]
    q11, q12, q22 = q[0, 0], q[0, 1], q[1, 1]
    g11 = gamma[0, 0]
    m1, m2 = float(m0[0]), float(m0[1])
    c11, c12, c22 = c0[0, 0], c0[0, 1], c0[1, 1]
    log_2pi = math.log(2.0 * math.pi)
    total = 0.0
    for y in ys:
        pm1 = a11 * m1 + a12 * m2
        pm2 = a21 * m1 + a22 * m2
        t11 = a11 * c11 + a12 * c12
        t12 = a11 * c12 + a12 * c22
        t21 = a21 * c11 + a22 * c12
        t22 = a21 * c12 + a22 * c22
        pc11 = t11 * a11 + t12 * a12 + q11
        pc12 = t11 * a21 + t12 * a22 + q12
        pc22 = t21 * a21 + t22 * a22 + q22
        hc1 = h1 * pc11 + h2 * pc12
        hc2 = h1 * pc12 + h2 * pc22
        s = h1 * hc1 + h2 * hc2 + g11
        if not s > 0.0:
            raise FactorizationError("innovation variance is not positive")
        e = float(y[0]) - (h1 * pm1 + h2 * pm2)
        total += -0.5 * (log_2pi + math.log(s) + e * e / s)
        k1, k2 = hc1 / s, hc2 / s
        m1, m2 = pm1 + k1 * e, pm2 + k2 * e
        c11 = pc11 - k1 * hc1
        c12 = pc12 - k1 * hc2
        c22 = pc22 - k2 * hc2
    det = c11 * c22 - c12 * c12
    if not det > 0.0:
        raise FactorizationError("filter covariance lost positive-definiteness")
    d1, d2 = float(x[0]) - m1, float(x[1]) - m2
    quad = (d1 * d1 * c22 - 2.0 * d1 * d2 * c12 + d2 * d2 * c11) / det
    return total - 0.5 * (2.0 * log_2pi + math.log(det) + quad)


@dataclass
class DramConfig:
    n_samples: int
    init: np.ndarray
    init_proposal_cov: np.ndarray
    adaptation_threshold: int = 100
    dr_tiers: int = 2
    second_tier_scale: float = 0.5
    burn_in_fraction: float = 0.5
    thinning: int = 2
    record_triples: int = 0  # tier-2 proposal triples to keep for auditing

    def __post_init__(self):
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")
        if self.dr_tiers != 2:
            raise ConfigError("only the two-tier sampler is implemented")
        if not 0.0 < self.second_tier_scale < 1.0:
            raise ConfigError("second-tier scale must lie in (0, 1)")
        if not 0.0 <= self.burn_in_fraction < 1.0:
            raise ConfigError("burn-in fraction must lie in [0, 1)")
        if self.thinning < 1:
            raise ConfigError("thinning must be at least 1")
        if self.adaptation_threshold < 1:
            raise ConfigError("adaptation threshold must be positive")
        self.init = np.atleast_1d(np.asarray(self.init, float))
        self.init_proposal_cov = np.asarray(self.init_proposal_cov, float)
        d = self.init.size
        if self.init_proposal_cov.shape != (d, d):
            raise ConfigError("initial proposal covariance shape mismatch")


def oracle_config_for(prior: JointPrior, n_samples: int = DESK_DRAW_COUNT,
                      record_triples: int = 0) -> DramConfig:
    """Chain setup used for reference runs: start at the prior mean with a
    conservative tenth-of-the-prior proposal covariance."""
    init = np.concatenate([prior.state.mean, prior.params.mean])
    nx, d = prior.state.dim, prior.params.dim
    cov = np.zeros((nx + d, nx + d))
    cov[:nx, :nx] = prior.state.cov
    cov[nx:, nx:] = prior.params.cov
    return DramConfig(n_samples=n_samples, init=init,
                      init_proposal_cov=0.1 * cov,
                      record_triples=record_triples)


def _log_one_minus_alpha1(lp_from: float, lp_to: float) -> float:
    """log(1 - min(1, pi(to)/pi(from))), -inf when the move is uphill."""
    diff = lp_to - lp_from
    if diff >= 0.0:
        return -math.inf
    return math.log1p(-math.exp(diff))


def dr_second_stage_log_alpha(lp_x: float, lp_y1: float, lp_y2: float,
                              x: np.ndarray, y1: np.ndarray, y2: np.ndarray,
                              prop_chol: np.ndarray) -> float:
    """Log acceptance probability of the tier-2 candidate y2 after y1 was
    rejected from x, for a symmetric tier-1 proposal with factor ``prop_chol``.

    log min{1, [pi(y2) q(y2->y1) (1-a1(y2,y1))] / [pi(x) q(x->y1) (1-a1(x,y1))]}
    """
    if lp_y2 == -math.inf:
        return -math.inf
    log_num_reject = _log_one_minus_alpha1(lp_y2, lp_y1)
    log_den_reject = _log_one_minus_alpha1(lp_x, lp_y1)
    if log_num_reject == -math.inf:
        return -math.inf
    z_num = solve_triangular(prop_chol, y1 - y2, lower=True,
                             check_finite=False)
    z_den = solve_triangular(prop_chol, y1 - x, lower=True,
                             check_finite=False)
    log_q_ratio = -0.5 * (z_num @ z_num - z_den @ z_den)
    return min(0.0, (lp_y2 + log_q_ratio + log_num_reject)
               - (lp_x + log_den_reject))


def _log_uniform(rng: SeededRng) -> float:
    u = rng.uniform()
    return math.log(u) if u > 0.0 else -math.inf


@dataclass
class ChainResult:
    samples: np.ndarray  # (kept, d) post burn-in, thinned
    stats: dict
    triples: list = field(default_factory=list)


def dram_sample(log_target, config: DramConfig, rng: SeededRng) -> ChainResult:
    """Run one DRAM chain; returns kept samples plus acceptance statistics."""
    x = config.init.copy()
    d = x.size
    lx = float(log_target(x))
    if not np.isfinite(lx):
        raise ConfigError("chain must start at a point of positive density")
    prop_chol, _ = chol_jittered(config.init_proposal_cov)
    gamma = config.second_tier_scale
    sd = 2.38 ** 2 / d

    # running chain moments drive the adapted proposal
    run_mean = x.copy()
    run_m2 = np.zeros((d, d))
    chain = np.empty((config.n_samples, d))
    n_accept = n_accept_t1 = n_tier2 = n_accept_t2 = 0
    rejected_streak = 0
    triples = []

    for it in range(config.n_samples):
        y1 = x + prop_chol @ rng.standard_normal(d)
        ly1 = float(log_target(y1))
        moved = False
        if _log_uniform(rng) < min(0.0, ly1 - lx):
            x, lx = y1, ly1
            n_accept += 1
            n_accept_t1 += 1
            moved = True
        else:
            n_tier2 += 1
            y2 = x + gamma * (prop_chol @ rng.standard_normal(d))
            ly2 = float(log_target(y2))
            log_a2 = dr_second_stage_log_alpha(lx, ly1, ly2, x, y1, y2,
                                               prop_chol)
            if len(triples) < config.record_triples:
                triples.append({"x": x.copy(), "y1": y1, "y2": y2,
                                "lp_x": lx, "lp_y1": ly1, "lp_y2": ly2,
                                "prop_chol": prop_chol.copy(),
                                "log_alpha2": log_a2})
            if _log_uniform(rng) < log_a2:
                x, lx = y2, ly2
                n_accept += 1
                n_accept_t2 += 1
                moved = True
        if moved:
            rejected_streak = 0
        else:
            rejected_streak += 2  # both tiers proposed and were refused
            if rejected_streak >= STUCK_PROPOSAL_LIMIT:
                raise StuckChainError(
                    f"no acceptance in the last {rejected_streak} proposals")
        chain[it] = x

        count = it + 2  # init point plus every recorded state
        delta = x - run_mean
        run_mean += delta / count
        run_m2 += np.outer(delta, x - run_mean)
        if it + 1 >= config.adaptation_threshold:
            prop_cov = sd * (run_m2 / (count - 1)) + AM_EPS * np.eye(d)
            prop_chol = np.linalg.cholesky(prop_cov)

    burn = int(config.n_samples * config.burn_in_fraction)
    kept = chain[burn::config.thinning]
    stats = {
        "n_samples": config.n_samples,
        "n_kept": int(kept.shape[0]),
        "burn_in": burn,
        "thinning": config.thinning,
        "acceptance_rate": n_accept / config.n_samples,
        "tier1_acceptance_rate": n_accept_t1 / config.n_samples,
        "tier2_acceptance_rate": (n_accept_t2 / n_tier2) if n_tier2 else 0.0,
        "second_tier_scale": gamma,
        "adaptation_threshold": config.adaptation_threshold,
        "mean": kept.mean(axis=0).tolist(),
        "sd": kept.std(axis=0, ddof=1).tolist(),
    }
    return ChainResult(samples=kept, stats=stats, triples=triples)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_chain(result: ChainResult, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples = np.ascontiguousarray(result.samples, dtype=np.float64)
    samples.tofile(out_dir / "samples.bin")
    stats = dict(result.stats)
    stats["shape"] = list(samples.shape)
    with open(out_dir / "stats.json", "w") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_chain(out_dir) -> ChainResult:
    out_dir = Path(out_dir)
    with open(out_dir / "stats.json") as fh:
        stats = json.load(fh)
    shape = tuple(stats["shape"])
    samples = np.fromfile(out_dir / "samples.bin", dtype=np.float64)
    return ChainResult(samples=samples.reshape(shape), stats=stats)
