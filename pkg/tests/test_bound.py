import dataclasses
import json
import math

import numpy as np
import pytest

from assim.bound import (
    BoundInputs,
    BoundStep,
    psi_term,
    theorem1_bound_skeleton,
    theorem2_bound,
    z_factor,
    _z_stats,
)
from assim.errors import ConfigError
from assim.filters import kalman_step
from assim.gaussians import LOG_2PI, Gaussian, gaussian_kl
from assim.grids import DensityGrid, hellinger_distance_grid, tv_distance_grid
from assim.models import (
    JointPrior,
    StateSpaceModel,
    TruthSpec,
    generate_twin_data,
    pendulum_model,
)
from assim.orchestrator import RunConfig, fbovi_step, init_posterior
from assim.rng import SeededRng
from assim.stage1 import Stage1Config, log_evidence_linear
from assim.stage2 import Stage2Config, eval_conditional, new_conditional

SIGMA2 = 0.04
GAMMA2 = 0.04


def scalar_growth_model(sigma2=SIGMA2, gamma2=GAMMA2):
    """x' = theta * x + w, y = x + v, everything scalar."""

    def a_mat(theta):
        theta = np.asarray(theta, float)
        return theta[..., :1][..., None]

    h_fixed = np.eye(1)
    return StateSpaceModel(
        name="scalar-growth",
        state_dim=1,
        obs_dim=1,
        param_dim=1,
        transition=lambda x, th: np.asarray(x, float) * np.asarray(th, float),
        observation=lambda x, th: np.asarray(x, float),
        process_cov=lambda th: sigma2 * np.eye(1),
        obs_cov=lambda th: gamma2 * np.eye(1),
        linear_dynamics=True,
        linear_observation=True,
        dynamics_matrix=a_mat,
        obs_matrix=lambda th: h_fixed,
    )


def constant_cond(g: Gaussian):
    """Conditional that ignores the parameter."""

    def cond(thetas):
        b = np.atleast_2d(np.asarray(thetas, float)).shape[0]
        return (np.broadcast_to(g.mean, (b, g.dim)).copy(),
                np.broadcast_to(g.chol, (b, g.dim, g.dim)).copy())

    return cond


def tracked_cond(model, prev_cond, y, scale=1.0):
    """Exact per-parameter filter map of ``prev_cond`` (rebuilt with the
    single-parameter reference filter, not the batched bound internals);
    ``scale`` widens the factor to manufacture a known discrepancy."""

    def cond(thetas):
        thetas = np.atleast_2d(np.asarray(thetas, float))
        means_p, chols_p = prev_cond(thetas)
        means, chols = [], []
        for t, m, ch in zip(thetas, means_p, chols_p):
            g = kalman_step(model, t, Gaussian(m, ch), y)
            means.append(g.mean)
            chols.append(scale * g.chol)
        return np.array(means), np.array(chols)

    return cond


# ---------------------------------------------------------------------------
# Per-parameter tracking discrepancy
# ---------------------------------------------------------------------------


def test_psi_zero_when_conditional_tracks_exactly():
    model = pendulum_model("dynamics-only")
    prev = constant_cond(Gaussian.from_cov(np.array([0.4, 0.6]),
                                           0.25 * np.eye(2)))
    y = np.array([0.35])
    cond = tracked_cond(model, prev, y)
    for theta in ([0.9, -0.8], [0.5, 0.1], [1.1, -1.3]):
        val = psi_term(cond, prev, np.array(theta), model, y)
        assert abs(val) < 1e-9


def test_psi_scalar_doubled_covariance_analytic():
    # right mean, doubled covariance: log|F| - log|2F| - 1 + 2 = 1 - log 2
    model = scalar_growth_model()
    prev = constant_cond(Gaussian.from_cov(np.array([1.0]), np.array([[0.3]])))
    y = np.array([0.8])
    cond = tracked_cond(model, prev, y, scale=math.sqrt(2.0))
    val = psi_term(cond, prev, np.array([0.7]), model, y)
    assert val == pytest.approx(1.0 - math.log(2.0), abs=1e-12)
    assert val == pytest.approx(0.3069, abs=1e-4)


def test_psi_is_twice_the_gaussian_divergence():
    # untrained random networks against the exact filter map, checked with
    # the closed-form Gaussian divergence computed through a separate path
    model = pendulum_model("dynamics-only")
    prev = new_conditional(2, 2, width=16, rng=SeededRng(3, 1))
    cur = new_conditional(2, 2, width=16, rng=SeededRng(4, 2))
    y = np.array([0.6])
    rng = SeededRng(5, 3)
    for _ in range(5):
        theta = rng.standard_normal(2)
        val = psi_term(cur, prev, theta, model, y)
        g_prev = eval_conditional(prev, theta)
        exact = kalman_step(model, theta, g_prev, y)
        g_cur = eval_conditional(cur, theta)
        assert val == pytest.approx(2.0 * gaussian_kl(g_cur, exact), abs=1e-10)


def test_psi_rejects_nonlinear_models():
    model = dataclasses.replace(scalar_growth_model(), linear_dynamics=False)
    prev = constant_cond(Gaussian.from_cov(np.zeros(1), np.eye(1)))
    with pytest.raises(ConfigError):
        psi_term(prev, prev, np.array([0.5]), model, np.zeros(1))


# ---------------------------------------------------------------------------
# Belief-averaged one-step evidence
# ---------------------------------------------------------------------------


def test_z_factor_constant_integrand():
    # A = 0 pins the predictive at N(0, Sigma); with Sigma = Gamma = 1/2 the
    # innovation variance is 1 and y = 0 sits at the peak, so every draw
    # contributes exactly (2 pi)^{-1/2}
    model = dataclasses.replace(
        scalar_growth_model(sigma2=0.5, gamma2=0.5),
        transition=lambda x, th: np.zeros_like(np.asarray(x, float)),
        dynamics_matrix=lambda th: np.zeros(
            np.asarray(th, float).shape[:-1] + (1, 1)),
    )
    nu = Gaussian.from_cov(np.array([0.5]), np.array([[0.09]]))
    cond = constant_cond(Gaussian.from_cov(np.array([2.0]), np.array([[3.0]])))
    val = z_factor(nu, cond, model, np.zeros(1), 64, SeededRng(9, 0))
    assert val == pytest.approx((2.0 * math.pi) ** -0.5, abs=1e-14)


def test_z_factor_matches_two_dim_quadrature():
    model = pendulum_model("dynamics-only")
    nu = Gaussian.from_cov(np.array([0.95, -0.80]), 0.0025 * np.eye(2))
    cond = constant_cond(Gaussian.from_cov(np.array([0.4, 0.6]),
                                           0.09 * np.eye(2)))
    y = np.array([0.45])

    axes = tuple(nu.mean[i] + np.linspace(-0.35, 0.35, 281) for i in range(2))

    def integrand(points):
        flat = points.reshape(-1, 2)
        means, chols = cond(flat)
        log_ev = log_evidence_linear(model, flat, means, chols, y)
        return np.exp(nu.logpdf(flat) + log_ev).reshape(points.shape[:-1])

    quad = DensityGrid.from_function(axes, integrand).integral()
    mc, se = _z_stats(nu, cond, model, y, 4096, SeededRng(21, 4))
    assert abs(mc - quad) < 3.0 * se


def test_z_factor_deterministic():
    model = scalar_growth_model()
    nu = Gaussian.from_cov(np.array([0.5]), np.array([[0.04]]))
    cond = constant_cond(Gaussian.from_cov(np.array([1.0]), np.array([[0.2]])))
    y = np.array([0.7])
    a = z_factor(nu, cond, model, y, 256, SeededRng(13, 2))
    b = z_factor(nu, cond, model, y, 256, SeededRng(13, 2))
    assert a == b


# ---------------------------------------------------------------------------
# Full bound
# ---------------------------------------------------------------------------


def scalar_steps(k, epsilon=-1.0, scale=1.0):
    """k hand-built steps whose conditionals are exact filter maps."""
    model = scalar_growth_model()
    rng = SeededRng(17, 5)
    cond0 = constant_cond(Gaussian.from_cov(np.array([1.0]), np.array([[0.25]])))
    steps, prev = [], cond0
    for j in range(1, k + 1):
        y = np.array([0.9 ** j + 0.05 * rng.standard_normal()])
        cond = tracked_cond(model, prev, y, scale=scale)
        nu = Gaussian.from_cov(np.array([0.6]), np.array([[0.01]]))
        steps.append(BoundStep(nu=nu, cond=cond, epsilon=epsilon, y=y))
        prev = cond
    return model, cond0, steps


def test_bound_single_step_closed_form():
    # exact tracking makes the discrepancy vanish, so the one-step bound is
    # sqrt((−eps − log(2 pi)/2 − log(c_tilde)/2) / 2) exactly
    model, cond0, steps = scalar_steps(1, epsilon=-5.0)
    c_tilde = GAMMA2
    report = theorem2_bound(
        BoundInputs(model, cond0, steps, c_tilde=c_tilde, n_psi=64, n_z=64),
        SeededRng(1, 1))
    expected = math.sqrt((5.0 - 0.5 * LOG_2PI - 0.5 * math.log(c_tilde)) / 2.0)
    assert report.total == pytest.approx(expected, abs=1e-6)
    assert report.addends.shape == (1,)
    assert report.total == report.addends[0]
    assert report.z_factors.shape == (0,)
    assert report.c_primes.shape == (0,)
    assert not report.clamped.any()


def test_bound_radicand_clamps_to_zero():
    # an overstated evidence certificate drives the radicand negative; the
    # estimator clamps it, flags the step, and keeps the total finite
    model, cond0, steps = scalar_steps(3, epsilon=50.0)
    report = theorem2_bound(
        BoundInputs(model, cond0, steps, c_tilde=GAMMA2, n_psi=32, n_z=32),
        SeededRng(2, 2))
    assert report.clamped.all()
    assert np.all(report.radicands == 0.0)
    assert report.total == 0.0


def test_bound_constants_shrink_when_c_tilde_doubles():
    model, cond0, steps = scalar_steps(4)
    for metric in ("tv", "hellinger"):
        rep1 = theorem2_bound(
            BoundInputs(model, cond0, steps, c_tilde=GAMMA2, metric=metric,
                        n_psi=32, n_z=64), SeededRng(3, 3))
        rep2 = theorem2_bound(
            BoundInputs(model, cond0, steps, c_tilde=2.0 * GAMMA2,
                        metric=metric, n_psi=32, n_z=64), SeededRng(3, 3))
        assert np.all(rep2.c_primes < rep1.c_primes)


def test_bound_deterministic_and_serializable():
    model, cond0, steps = scalar_steps(3, scale=1.2)
    inputs = BoundInputs(model, cond0, steps, c_tilde=GAMMA2, n_psi=48, n_z=48)
    rep1 = theorem2_bound(inputs, SeededRng(6, 7))
    rep2 = theorem2_bound(inputs, SeededRng(6, 7))
    assert np.array_equal(rep1.addends, rep2.addends)
    assert np.array_equal(rep1.psi_expectations, rep2.psi_expectations)
    assert np.array_equal(rep1.z_factors, rep2.z_factors)
    assert rep1.total == rep2.total

    assert rep1.total == pytest.approx(float(np.sum(rep1.addends)), abs=0.0)
    assert np.all(rep1.addends >= 0.0)
    payload = json.loads(json.dumps(rep1.to_dict()))
    assert len(payload["steps"]) == 3
    assert payload["steps"][0]["z_factor"] is None
    assert payload["steps"][-1]["c_prime"] is None
    assert payload["total"] == rep1.total


def test_bound_input_validation():
    model, cond0, steps = scalar_steps(2)
    with pytest.raises(ConfigError):
        BoundInputs(model, cond0, steps, c_tilde=0.0)
    with pytest.raises(ConfigError):
        BoundInputs(model, cond0, steps, c_tilde=GAMMA2, metric="l2")
    with pytest.raises(ConfigError):
        BoundInputs(model, cond0, [], c_tilde=GAMMA2)
    bad = [dataclasses.replace(steps[0], epsilon=float("nan")), steps[1]]
    with pytest.raises(ConfigError):
        BoundInputs(model, cond0, bad, c_tilde=GAMMA2)
    nonlinear = dataclasses.replace(model, linear_observation=False)
    with pytest.raises(ConfigError):
        BoundInputs(nonlinear, cond0, steps, c_tilde=GAMMA2)


# ---------------------------------------------------------------------------
# Dominance over brute-force distances (primary validity check)
# ---------------------------------------------------------------------------


def scalar_joint_posterior_grid(x_axis, th_axis, state_prior, param_prior,
                                ys, k):
    """True joint filtering density on a grid, by per-parameter scalar
    filtering recursions written out in plain arithmetic."""
    th = th_axis
    m = np.full_like(th, float(state_prior.mean[0]))
    c = np.full_like(th, float(state_prior.cov[0, 0]))
    loglik = np.zeros_like(th)
    for j in range(k):
        y = float(ys[j][0])
        m_pred = th * m
        c_pred = th * th * c + SIGMA2
        s = c_pred + GAMMA2
        loglik += -0.5 * (np.log(2.0 * np.pi * s) + (y - m_pred) ** 2 / s)
        gain = c_pred / s
        m = m_pred + gain * (y - m_pred)
        c = (1.0 - gain) * c_pred
    mu, var = float(param_prior.mean[0]), float(param_prior.cov[0, 0])
    log_prior = -0.5 * (np.log(2.0 * np.pi * var) + (th - mu) ** 2 / var)
    log_vals = (-0.5 * (np.log(2.0 * np.pi * c)[None, :]
                        + (x_axis[:, None] - m[None, :]) ** 2 / c[None, :])
                + (loglik + log_prior)[None, :])
    vals = np.exp(log_vals - log_vals.max())
    return DensityGrid((x_axis, th_axis), vals).normalized()


def factorized_grid(x_axis, th_axis, nu, cond):
    means, chols = cond(th_axis[:, None])
    m, c = means[:, 0], chols[:, 0, 0] ** 2
    log_nu = nu.logpdf(th_axis[:, None])
    log_vals = (-0.5 * (np.log(2.0 * np.pi * c)[None, :]
                        + (x_axis[:, None] - m[None, :]) ** 2 / c[None, :])
                + log_nu[None, :])
    vals = np.exp(log_vals - log_vals.max())
    return DensityGrid((x_axis, th_axis), vals).normalized()


def test_bound_dominates_grid_distances():
    model = scalar_growth_model()
    prior = JointPrior(
        state=Gaussian.from_cov(np.array([1.0]), np.array([[0.25]])),
        params=Gaussian.from_cov(np.array([0.5]), np.array([[0.04]])),
    )
    truth = TruthSpec(theta=np.array([0.7]), init_state=np.array([1.2]))
    stream = generate_twin_data(model, truth, 5, SeededRng(31))

    config = RunConfig(
        backend="kalman",
        stage1=Stage1Config(steps=60, lr=0.05, n_mc=16, final_n_mc=128,
                            mc_draws=128),
        stage2=Stage2Config(epochs=300, warmup_epochs=60, lr=1e-2,
                            batch_size=16, n_targets=64, width=32,
                            pretrain_steps=200),
        seed=3,
    )
    root = SeededRng(config.seed)
    post = init_posterior(prior, config, root.substream(0))
    init_cond = post.cond

    steps = []
    for k in range(1, 6):
        y = stream.observation(k)
        post = fbovi_step(post, y, model, config, root.substream(k))
        steps.append(BoundStep(nu=post.nu.to_gaussian(), cond=post.cond,
                               epsilon=post.diagnostics["epsilon"], y=y))

    x_axis = np.linspace(-1.5, 3.0, 361)
    th_axis = np.linspace(-0.4, 1.4, 361)
    ys = [s.y for s in steps]
    bound_rng = SeededRng(11, 0)

    for k in range(1, 6):
        p_grid = scalar_joint_posterior_grid(
            x_axis, th_axis, prior.state, prior.params, ys, k)
        q_grid = factorized_grid(x_axis, th_axis, steps[k - 1].nu,
                                 steps[k - 1].cond)
        tv = tv_distance_grid(p_grid, q_grid)
        hell = hellinger_distance_grid(p_grid, q_grid)

        rep_tv = theorem2_bound(
            BoundInputs(model, init_cond, steps[:k], c_tilde=GAMMA2,
                        metric="tv", n_psi=512, n_z=1024), bound_rng)
        rep_h = theorem2_bound(
            BoundInputs(model, init_cond, steps[:k], c_tilde=GAMMA2,
                        metric="hellinger", n_psi=512, n_z=1024), bound_rng)

        assert rep_tv.total >= tv, (k, rep_tv.total, tv)
        assert rep_h.total >= hell, (k, rep_h.total, hell)
        assert tv > 0.0 and hell > 0.0


# ---------------------------------------------------------------------------
# Bare two-term formula
# ---------------------------------------------------------------------------


def test_skeleton_zero_divergences_give_zero():
    assert theorem1_bound_skeleton(np.zeros((4, 2)), np.ones(3)) == 0.0


def test_skeleton_single_step():
    a, b = 0.3, 0.2
    assert theorem1_bound_skeleton([[a, b]], []) == pytest.approx(
        math.sqrt((a + b) / 2.0), abs=1e-15)


def test_skeleton_rejects_bad_inputs():
    with pytest.raises(ValueError):
        theorem1_bound_skeleton([[0.1, -0.2], [0.0, 0.0]], [1.0])
    with pytest.raises(ValueError):
        theorem1_bound_skeleton([[0.1, 0.2], [0.0, 0.0]], [1.0, 2.0])
    with pytest.raises(ValueError):
        theorem1_bound_skeleton([[0.1, float("inf")]], [])


def test_skeleton_monotone_in_divergences():
    rng = SeededRng(41, 6)
    pairs = np.abs(rng.standard_normal((5, 2)))
    consts = np.abs(rng.standard_normal(4))
    base = theorem1_bound_skeleton(pairs, consts)
    for _ in range(10):
        bumped = pairs.copy()
        i = int(rng.uniform() * 5) % 5
        j = int(rng.uniform() * 2) % 2
        bumped[i, j] += abs(rng.standard_normal()) + 0.01
        assert theorem1_bound_skeleton(bumped, consts) >= base
