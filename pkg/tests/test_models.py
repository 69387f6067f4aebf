"""Model builders and twin-data generation against hand-coded oracles."""

import numpy as np
import pytest

from assim.errors import ModelBlowupError
from assim.models import (
    CONVDIFF_OBS_IDX,
    PENDULUM_MATRIX,
    ObservationStream,
    TruthSpec,
    convdiff_initial_state,
    convection_diffusion_model,
    dumps_stream,
    generate_twin_data,
    load_stream,
    lorenz96_drift,
    lorenz96_initial_state,
    lorenz96_model,
    pendulum_model,
    rk4_step,
    save_stream,
)
from assim.rng import SeededRng


class TestPendulum:
    def test_dynamics_only_matrix_at_truth(self):
        model = pendulum_model("dynamics-only")
        a = model.dynamics_matrix(np.array([0.9594, -0.8056]))
        assert np.array_equal(a, PENDULUM_MATRIX)

    def test_transition_is_matrix_multiply(self):
        model = pendulum_model("dynamics-only")
        theta = np.array([0.3, -0.2])
        x = np.array([1.5, -0.7])
        assert np.allclose(model.transition(x, theta), model.dynamics_matrix(theta) @ x)

    def test_dynobs_observation_matches_matrix(self):
        model = pendulum_model("dynamics-and-observation")
        theta = np.array([0.1, 1.3])
        x = np.array([0.4, -2.0])
        assert np.allclose(model.observation(x, theta), model.obs_matrix(theta) @ x)
        # dynamics matrix at the generating parameter reproduces the reference
        a = model.dynamics_matrix(np.array([PENDULUM_MATRIX[0, 1], 1.0]))
        assert np.array_equal(a, PENDULUM_MATRIX)

    def test_batched_theta(self):
        model = pendulum_model("dynamics-only")
        thetas = np.array([[0.9, -0.8], [0.5, 0.1], [0.0, 0.0]])
        xs = np.array([[1.0, 2.0], [0.5, -0.5], [3.0, 1.0]])
        out = model.transition(xs, thetas)
        for i in range(3):
            assert np.allclose(out[i], model.dynamics_matrix(thetas[i]) @ xs[i])


class TestLorenz96:
    def test_uniform_fixed_point(self):
        # constant state F / beta kills the advection term and balances damping
        x = (8.0 / 0.9) * np.ones(10)
        d = lorenz96_drift(x, alpha=1.1, beta=0.9, forcing=8.0)
        assert np.allclose(d, 0.0, atol=1e-12)

    def test_cyclic_equivariance(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(10)
        d = lorenz96_drift(x, 1.1, 0.9, 8.0)
        d_shift = lorenz96_drift(np.roll(x, 3), 1.1, 0.9, 8.0)
        assert np.allclose(np.roll(d, 3), d_shift, atol=1e-14)

    def test_minimum_dimension(self):
        with pytest.raises(ValueError):
            lorenz96_drift(np.ones(3), 1.0, 1.0, 8.0)

    def test_rk4_order(self):
        theta = np.array([1.1, 0.9])
        f = lambda z: lorenz96_drift(z, theta[0], theta[1], 8.0)

        def integrate(dt, n, x0):
            x = x0
            for _ in range(n):
                x = rk4_step(f, x, dt)
            return x

        x0 = lorenz96_initial_state()
        ref = integrate(0.04 / 64, 64, x0)
        e1 = np.linalg.norm(integrate(0.04, 1, x0) - ref)
        e2 = np.linalg.norm(integrate(0.02, 2, x0) - ref)
        order = np.log2(e1 / e2)
        assert order >= 3.7

    def test_zero_drift_gives_identity_map(self):
        model = lorenz96_model("rk4", sigma2=0.5, forcing=0.0)
        x = np.linspace(-1, 1, 10)
        assert np.allclose(model.transition(x, np.zeros(2)), x, atol=1e-15)
        model_e = lorenz96_model("euler", sigma2=2.0, forcing=0.0)
        assert np.allclose(model_e.transition(x, np.zeros(2)), x, atol=1e-15)

    def test_observation_selects_odd_states(self):
        model = lorenz96_model("rk4", 0.5)
        x = np.arange(10.0)
        assert np.array_equal(model.observation(x, np.zeros(2)), x[[0, 2, 4, 6, 8]])
        assert np.array_equal(model.obs_matrix(np.zeros(2)) @ x, x[[0, 2, 4, 6, 8]])


def convdiff_step_oracle(u, alpha, nu, scheme):
    # direct nodewise stencil, 1-based description mapped to 0-based arrays
    h, dt = 0.02, 0.001
    out = np.empty(51)
    for i in range(50):
        im1, ip1 = (i - 1) % 50, (i + 1) % 50
        if scheme == "central":
            ux = (u[ip1] - u[im1]) / (2 * h)
        elif alpha * u[i] >= 0:
            ux = (u[i] - u[im1]) / h
        else:
            ux = (u[ip1] - u[i]) / h
        uxx = (u[ip1] - 2 * u[i] + u[im1]) / h**2
        out[i] = u[i] + dt * (-alpha * u[i] * ux + nu * uxx)
    out[50] = out[0]
    return out


class TestConvectionDiffusion:
    def test_matches_nodewise_oracle(self):
        rng = np.random.default_rng(5)
        u = 10.0 + rng.standard_normal(51)
        u[50] = u[0]
        theta = np.array([1.0, 0.01])
        for scheme in ("upwind", "central"):
            model = convection_diffusion_model(scheme)
            assert np.allclose(
                model.transition(u, theta), convdiff_step_oracle(u, 1.0, 0.01, scheme),
                atol=1e-14,
            )

    def test_upwind_switches_with_speed_sign(self):
        u = 10.0 + np.sin(2 * np.pi * np.linspace(0, 1, 51))
        model = convection_diffusion_model("upwind")
        theta_neg = np.array([-1.0, 0.01])
        assert np.allclose(
            model.transition(u, theta_neg), convdiff_step_oracle(u, -1.0, 0.01, "upwind"),
            atol=1e-14,
        )

    def test_periodic_copy_and_constant_field(self):
        model = convection_diffusion_model("central")
        u0 = convdiff_initial_state()
        out = model.transition(u0, np.array([1.0, 0.01]))
        assert out[50] == out[0]
        const = 7.0 * np.ones(51)
        assert np.allclose(model.transition(const, np.array([1.0, 0.01])), const)

    def test_schemes_differ_on_generic_field(self):
        u = convdiff_initial_state()
        theta = np.array([1.0, 0.01])
        up = convection_diffusion_model("upwind").transition(u, theta)
        ce = convection_diffusion_model("central").transition(u, theta)
        assert not np.allclose(up, ce)

    def test_observed_nodes(self):
        expected = np.sort(np.concatenate([3 * np.arange(17), 3 * np.arange(17) + 1]))
        assert CONVDIFF_OBS_IDX.size == 34
        assert np.array_equal(CONVDIFF_OBS_IDX, expected)
        model = convection_diffusion_model("upwind")
        u = np.arange(51.0)
        assert np.array_equal(model.observation(u, np.zeros(2)), u[expected])


class TestTwinData:
    def _truth(self, model):
        return TruthSpec(
            theta=np.array([0.9594, -0.8056]),
            init_state=np.array([0.5, 0.5]),
        )

    def test_deterministic_given_seed(self):
        model = pendulum_model("dynamics-only")
        a = generate_twin_data(model, self._truth(model), 20, SeededRng(11))
        b = generate_twin_data(model, self._truth(model), 20, SeededRng(11))
        assert dumps_stream(a) == dumps_stream(b)
        c = generate_twin_data(model, self._truth(model), 20, SeededRng(12))
        assert dumps_stream(a) != dumps_stream(c)

    def test_zero_obs_noise_reproduces_reference(self):
        model = pendulum_model("dynamics-only")
        truth = TruthSpec(
            theta=np.array([0.9594, -0.8056]),
            init_state=np.array([0.5, 0.5]),
            obs_cov=np.zeros((1, 1)),
        )
        stream = generate_twin_data(model, truth, 10, SeededRng(3))
        assert np.array_equal(stream.observations[:, 0], stream.reference_states[:, 0])

    def test_burn_in_shifts_window(self):
        model = lorenz96_model("rk4", 0.5)
        truth = TruthSpec(
            theta=np.array([1.1, 0.9]),
            init_state=lorenz96_initial_state(),
            process_cov=np.zeros((10, 10)),
            obs_cov=np.zeros((5, 5)),
        )
        full = generate_twin_data(model, truth, 8, SeededRng(0), burn_in=0)
        late = generate_twin_data(model, truth, 3, SeededRng(0), burn_in=5)
        assert np.allclose(late.reference_states, full.reference_states[5:8])

    def test_blowup_names_step(self):
        model = pendulum_model("dynamics-only")
        truth = TruthSpec(
            theta=np.zeros(2),
            init_state=np.array([1.0, 0.0]),
            transition=lambda x, theta: x * 1e200,
            process_cov=np.zeros((2, 2)),
        )
        with pytest.raises(ModelBlowupError) as err, np.errstate(over="ignore"):
            generate_twin_data(model, truth, 5, SeededRng(0))
        assert err.value.step == 2


class TestStreamFormat:
    def _stream(self):
        model = pendulum_model("dynamics-only")
        return generate_twin_data(model, TestTwinData()._truth(model), 7, SeededRng(9))

    def test_round_trip_bit_exact(self, tmp_path):
        stream = self._stream()
        path = tmp_path / "stream.json"
        save_stream(stream, path)
        back = load_stream(path)
        assert np.array_equal(back.observations, stream.observations)
        assert np.array_equal(back.reference_states, stream.reference_states)
        assert np.array_equal(back.true_params, stream.true_params)
        assert back.model_name == stream.model_name and back.seed == stream.seed
        # idempotent re-serialization
        path2 = tmp_path / "again.json"
        save_stream(back, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_access_counting(self):
        stream = self._stream()
        assert np.all(stream.access_counts == 0)
        y = stream.observation(3)
        assert np.array_equal(y, stream.observations[2])
        assert stream.access_counts[2] == 1 and stream.access_counts.sum() == 1
        stream.observation(3)
        assert stream.access_counts[2] == 2
        stream.reset_access()
        assert stream.access_counts.sum() == 0
        with pytest.raises(IndexError):
            stream.observation(0)
        with pytest.raises(IndexError):
            stream.observation(8)

    def test_header_consistency_check(self, tmp_path):
        stream = self._stream()
        path = tmp_path / "s.json"
        save_stream(stream, path)
        text = path.read_text().replace('"n_steps":7', '"n_steps":6')
        bad = tmp_path / "bad.json"
        bad.write_text(text)
        with pytest.raises(ValueError):
            load_stream(bad)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ObservationStream(
                model_name="x", seed=0,
                observations=np.zeros((3, 1)),
                reference_states=np.zeros((4, 2)),
                true_params=np.zeros(2),
            )
