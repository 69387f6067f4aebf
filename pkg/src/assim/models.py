"""Discrete-time stochastic state-space models and twin-data generation.

A model is the learner's view of a system:

    X_{k+1} = Phi(X_k; theta) + W_k,   W_k ~ N(0, Sigma(theta))
    Y_k     = h(X_k; theta) + V_k,     V_k ~ N(0, Gamma(theta))

Array convention: ``transition`` and ``observation`` act on the last axis, so
``x`` may be a single state ``(n,)`` or any batch ``(..., n)``; ``theta`` is a
single parameter ``(d,)`` or an array broadcastable against ``x[..., 0]``.
Covariance builders take a single ``theta`` and return dense matrices.

Twin data is produced by a separate truth description so the generating
system (scheme, noise levels, observation operator) can differ from the
learner's model, which is the whole point of a twin experiment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from assim.errors import ModelBlowupError
from assim.gaussians import Gaussian, psd_sqrt
from assim.rng import SeededRng


@dataclass
class StateSpaceModel:
    name: str
    state_dim: int
    obs_dim: int
    param_dim: int
    transition: Callable
    observation: Callable
    process_cov: Callable
    obs_cov: Callable
    linear_dynamics: bool = False
    linear_observation: bool = False
    dynamics_matrix: Callable | None = None
    obs_matrix: Callable | None = None
    # whether process_cov / obs_cov actually vary with theta; constant noise
    # lets batched code factor each covariance once
    theta_dependent_noise: bool = False


@dataclass(frozen=True)
class JointPrior:
    """Independent priors over the initial state and the parameter."""

    state: Gaussian
    params: Gaussian


def stack_cov(fn: Callable, thetas: np.ndarray) -> np.ndarray:
    """Evaluate a covariance builder over a batch of parameters, (B, m, m)."""
    return np.stack([fn(t) for t in np.atleast_2d(np.asarray(thetas, float))])


def process_cov_rows(model: "StateSpaceModel", thetas: np.ndarray) -> np.ndarray:
    """Per-row process covariance, broadcast when it does not vary with theta."""
    thetas = np.atleast_2d(np.asarray(thetas, float))
    if model.theta_dependent_noise:
        return stack_cov(model.process_cov, thetas)
    one = np.asarray(model.process_cov(thetas[0]), float)
    return np.broadcast_to(one, thetas.shape[:1] + one.shape)


def obs_cov_rows(model: "StateSpaceModel", thetas: np.ndarray) -> np.ndarray:
    """Per-row observation covariance, broadcast when constant in theta."""
    thetas = np.atleast_2d(np.asarray(thetas, float))
    if model.theta_dependent_noise:
        return stack_cov(model.obs_cov, thetas)
    one = np.asarray(model.obs_cov(thetas[0]), float)
    return np.broadcast_to(one, thetas.shape[:1] + one.shape)


def batched_matrix(fn: Callable, thetas: np.ndarray) -> np.ndarray:
    """Evaluate a system-matrix builder at (B, d) parameters -> (B, r, c).

    Builders whose matrix is parameter-free return a single 2-D array; it is
    broadcast across the batch.
    """
    mat = np.asarray(fn(thetas), float)
    if mat.ndim == 2:
        mat = np.broadcast_to(mat, thetas.shape[:1] + mat.shape)
    return mat


# ---------------------------------------------------------------------------
# Pendulum (linearized, discrete matrix recursion)
# ---------------------------------------------------------------------------

# Reference one-step matrix for the damped-free pendulum linearization
# (continuous constants g = 9.8, l = 1.2, dt = 0.1 discretized once; the
# printed entries are authoritative and are not re-derived here).
PENDULUM_MATRIX = np.array([[0.9594, 0.0986], [-0.8056, 0.9594]])
PENDULUM_TRUE_STATE0 = np.array([0.5, 0.5])


def _matmul_theta(a_of_theta):
    def transition(x, theta):
        return np.einsum("...ij,...j->...i", a_of_theta(theta), np.asarray(x, float))

    return transition


def pendulum_model(variant: str) -> StateSpaceModel:
    """Two-dimensional linear pendulum recursion with unknown entries.

    ``dynamics-only``: theta = (a11, a21) fills A(theta) =
    [[t1, 0.0986], [t2, t1]]; scalar observation of the first coordinate.

    ``dynamics-and-observation``: theta = (a12, h11) with A(theta) =
    [[0.9594, t1], [-0.8056, 0.9594]] and H(theta) = [[t2, 0], [0, 1]];
    both coordinates observed.
    """
    if variant == "dynamics-only":

        def a_mat(theta):
            theta = np.asarray(theta, float)
            a = np.zeros(theta.shape[:-1] + (2, 2))
            a[..., 0, 0] = theta[..., 0]
            a[..., 0, 1] = PENDULUM_MATRIX[0, 1]
            a[..., 1, 0] = theta[..., 1]
            a[..., 1, 1] = theta[..., 0]
            return a

        h_fixed = np.array([[1.0, 0.0]])
        return StateSpaceModel(
            name="pendulum-dyn",
            state_dim=2,
            obs_dim=1,
            param_dim=2,
            transition=_matmul_theta(a_mat),
            observation=lambda x, theta: np.asarray(x, float)[..., :1],
            process_cov=lambda theta: 0.01 * np.eye(2),
            obs_cov=lambda theta: np.array([[0.01]]),
            linear_dynamics=True,
            linear_observation=True,
            dynamics_matrix=a_mat,
            obs_matrix=lambda theta: h_fixed,
        )

    if variant == "dynamics-and-observation":

        def a_mat(theta):
            theta = np.asarray(theta, float)
            a = np.zeros(theta.shape[:-1] + (2, 2))
            a[..., 0, 0] = PENDULUM_MATRIX[0, 0]
            a[..., 0, 1] = theta[..., 0]
            a[..., 1, 0] = PENDULUM_MATRIX[1, 0]
            a[..., 1, 1] = PENDULUM_MATRIX[1, 1]
            return a

        def h_mat(theta):
            theta = np.asarray(theta, float)
            h = np.zeros(theta.shape[:-1] + (2, 2))
            h[..., 0, 0] = theta[..., 1]
            h[..., 1, 1] = 1.0
            return h

        def observe(x, theta):
            x = np.asarray(x, float)
            theta = np.asarray(theta, float)
            return np.stack([theta[..., 1] * x[..., 0], x[..., 1]], axis=-1)

        return StateSpaceModel(
            name="pendulum-dynobs",
            state_dim=2,
            obs_dim=2,
            param_dim=2,
            transition=_matmul_theta(a_mat),
            observation=observe,
            process_cov=lambda theta: 0.01 * np.eye(2),
            obs_cov=lambda theta: 0.01 * np.eye(2),
            linear_dynamics=True,
            linear_observation=True,
            dynamics_matrix=a_mat,
            obs_matrix=h_mat,
        )

    raise ValueError(f"unknown pendulum variant {variant!r}")


# ---------------------------------------------------------------------------
# Cyclic Lorenz-96 with scaled advection/damping
# ---------------------------------------------------------------------------

LORENZ_DIM = 10
LORENZ_DT = 0.01
LORENZ_SUBSTEPS = 5
LORENZ_OBS_IDX = np.arange(0, LORENZ_DIM, 2)  # states x1, x3, x5, x7, x9


def lorenz96_drift(x, alpha, beta, forcing):
    """dx_i/dt = alpha x_{i-1} (x_{i+1} - x_{i-2}) - beta x_i + F, cyclic."""
    x = np.asarray(x, float)
    if x.shape[-1] < 4:
        raise ValueError("cyclic advection needs at least 4 state variables")
    xm1 = np.roll(x, 1, axis=-1)
    xm2 = np.roll(x, 2, axis=-1)
    xp1 = np.roll(x, -1, axis=-1)
    return alpha * xm1 * (xp1 - xm2) - beta * x + forcing


def rk4_step(f, x, dt):
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def euler_step(f, x, dt):
    return x + dt * f(x)


def lorenz96_model(integrator: str, sigma2: float,
                   forcing: float = 8.0) -> StateSpaceModel:
    """Ten-variable cyclic Lorenz-96; theta = (alpha, beta), forcing known.

    One model step advances 5 integrator substeps of dt = 0.01 (the
    observation cadence of the twin setup). Observation picks the odd
    states (1-based x1, x3, x5, x7, x9) with unit noise.
    """
    if integrator not in ("rk4", "euler"):
        raise ValueError(f"unknown integrator {integrator!r}")
    stepper = rk4_step if integrator == "rk4" else euler_step

    def transition(x, theta):
        x = np.asarray(x, float)
        theta = np.asarray(theta, float)
        alpha = theta[..., 0:1]
        beta = theta[..., 1:2]
        f = lambda z: lorenz96_drift(z, alpha, beta, forcing)
        for _ in range(LORENZ_SUBSTEPS):
            x = stepper(f, x, LORENZ_DT)
        return x

    h_mat = np.zeros((LORENZ_OBS_IDX.size, LORENZ_DIM))
    h_mat[np.arange(LORENZ_OBS_IDX.size), LORENZ_OBS_IDX] = 1.0

    return StateSpaceModel(
        name=f"lorenz96-{integrator}",
        state_dim=LORENZ_DIM,
        obs_dim=LORENZ_OBS_IDX.size,
        param_dim=2,
        transition=transition,
        observation=lambda x, theta: np.asarray(x, float)[..., LORENZ_OBS_IDX],
        process_cov=lambda theta: float(sigma2) * np.eye(LORENZ_DIM),
        obs_cov=lambda theta: np.eye(LORENZ_OBS_IDX.size),
        linear_observation=True,
        obs_matrix=lambda theta: h_mat,
    )


def lorenz96_initial_state(dim: int = LORENZ_DIM) -> np.ndarray:
    i = np.arange(1, dim + 1)
    return np.cos(2.0 * np.pi * i / dim)


# ---------------------------------------------------------------------------
# Viscous convection-diffusion on a periodic interval
# ---------------------------------------------------------------------------

CONVDIFF_POINTS = 51  # node 51 duplicates node 1 (periodic)
CONVDIFF_H = 0.02
CONVDIFF_DT = 0.001
# observed 1-based nodes 3n+1 and 3n+2 for n = 0..16
CONVDIFF_OBS_IDX = np.sort(
    np.concatenate([3 * np.arange(17), 3 * np.arange(17) + 1])
)


def convection_diffusion_model(scheme: str) -> StateSpaceModel:
    """u_t + alpha u u_x = nu u_xx, forward Euler on 51 periodic nodes.

    theta = (alpha, nu). The last node mirrors the first: stencils run on
    the 50 unique nodes and the copy is restored after every step. The
    convection derivative uses either a sign-of-speed ``upwind`` stencil or
    a ``central`` difference.
    """
    if scheme not in ("upwind", "central"):
        raise ValueError(f"unknown scheme {scheme!r}")
    h, dt = CONVDIFF_H, CONVDIFF_DT

    def transition(u, theta):
        u = np.asarray(u, float)
        theta = np.asarray(theta, float)
        alpha = theta[..., 0:1]
        nu = theta[..., 1:2]
        v = u[..., : CONVDIFF_POINTS - 1]
        left = np.roll(v, 1, axis=-1)
        right = np.roll(v, -1, axis=-1)
        if scheme == "central":
            ux = (right - left) / (2.0 * h)
        else:
            back = (v - left) / h
            fwd = (right - v) / h
            ux = np.where(alpha * v >= 0.0, back, fwd)
        uxx = (right - 2.0 * v + left) / (h * h)
        v_new = v + dt * (-alpha * v * ux + nu * uxx)
        return np.concatenate([v_new, v_new[..., :1]], axis=-1)

    h_mat = np.zeros((CONVDIFF_OBS_IDX.size, CONVDIFF_POINTS))
    h_mat[np.arange(CONVDIFF_OBS_IDX.size), CONVDIFF_OBS_IDX] = 1.0

    return StateSpaceModel(
        name=f"convdiff-{scheme}",
        state_dim=CONVDIFF_POINTS,
        obs_dim=CONVDIFF_OBS_IDX.size,
        param_dim=2,
        transition=transition,
        observation=lambda u, theta: np.asarray(u, float)[..., CONVDIFF_OBS_IDX],
        process_cov=lambda theta: 0.01 * np.eye(CONVDIFF_POINTS),
        obs_cov=lambda theta: np.eye(CONVDIFF_OBS_IDX.size),
        linear_observation=True,
        obs_matrix=lambda theta: h_mat,
    )


def convdiff_initial_state() -> np.ndarray:
    x = np.linspace(0.0, 1.0, CONVDIFF_POINTS)
    return np.sin(2.0 * np.pi * x) + 0.5 * np.cos(4.0 * np.pi * x) + 10.0


# ---------------------------------------------------------------------------
# Twin-data generation
# ---------------------------------------------------------------------------


@dataclass
class TruthSpec:
    """Generating system for a twin experiment.

    Fields left as None default to the learner's model evaluated at
    ``theta``; covariance overrides may be singular (including exactly
    zero) since the truth only needs a PSD square root to draw noise.
    """

    theta: np.ndarray
    init_state: np.ndarray
    transition: Callable | None = None
    observation: Callable | None = None
    process_cov: np.ndarray | None = None
    obs_cov: np.ndarray | None = None


@dataclass
class ObservationStream:
    """Observations plus the hidden truth that produced them.

    ``observation(k)`` (k = 1..n_steps) is the single sanctioned way for an
    estimator to read y_k; it counts accesses so online discipline (each
    observation consumed exactly once per run) is checkable.
    """

    model_name: str
    seed: int
    observations: np.ndarray
    reference_states: np.ndarray
    true_params: np.ndarray
    access_counts: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.observations = np.atleast_2d(np.asarray(self.observations, float))
        self.reference_states = np.atleast_2d(np.asarray(self.reference_states, float))
        self.true_params = np.atleast_1d(np.asarray(self.true_params, float))
        if self.observations.shape[0] != self.reference_states.shape[0]:
            raise ValueError("observations and reference states disagree on length")
        if self.access_counts is None:
            self.access_counts = np.zeros(self.observations.shape[0], dtype=int)

    @property
    def n_steps(self) -> int:
        return self.observations.shape[0]

    def observation(self, k: int) -> np.ndarray:
        if not 1 <= k <= self.n_steps:
            raise IndexError(f"step {k} outside 1..{self.n_steps}")
        self.access_counts[k - 1] += 1
        return self.observations[k - 1]

    def reference_state(self, k: int) -> np.ndarray:
        if not 1 <= k <= self.n_steps:
            raise IndexError(f"step {k} outside 1..{self.n_steps}")
        return self.reference_states[k - 1]

    def reset_access(self):
        self.access_counts[:] = 0


def generate_twin_data(model: StateSpaceModel, truth: TruthSpec, steps: int,
                       rng: SeededRng, burn_in: int = 0) -> ObservationStream:
    """Simulate the truth for ``burn_in + steps`` transitions, observing the
    last ``steps`` of them. Raises ``ModelBlowupError`` naming the first
    non-finite step."""
    theta = np.asarray(truth.theta, float)
    phi = truth.transition if truth.transition is not None else model.transition
    h = truth.observation if truth.observation is not None else model.observation
    q = truth.process_cov if truth.process_cov is not None else model.process_cov(theta)
    r = truth.obs_cov if truth.obs_cov is not None else model.obs_cov(theta)
    q_sqrt = psd_sqrt(np.asarray(q, float))
    r_sqrt = psd_sqrt(np.asarray(r, float))

    x = np.asarray(truth.init_state, float).copy()
    obs = np.empty((steps, r_sqrt.shape[0]))
    refs = np.empty((steps, x.size))
    for step in range(1, burn_in + steps + 1):
        x = phi(x, theta) + q_sqrt @ rng.standard_normal(q_sqrt.shape[0])
        if not np.all(np.isfinite(x)):
            raise ModelBlowupError(step)
        if step > burn_in:
            i = step - burn_in - 1
            refs[i] = x
            obs[i] = h(x, theta) + r_sqrt @ rng.standard_normal(r_sqrt.shape[0])
    return ObservationStream(
        model_name=model.name,
        seed=rng.seed,
        observations=obs,
        reference_states=refs,
        true_params=theta,
    )


# ---------------------------------------------------------------------------
# Stream file format (floats written with 17 significant digits)
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    if not np.isfinite(v):
        raise ValueError("stream files only hold finite values")
    return format(float(v), ".17g")


def _fmt_matrix(a: np.ndarray) -> str:
    rows = (",".join(_fmt(v) for v in row) for row in np.atleast_2d(a))
    return "[" + ",".join("[" + r + "]" for r in rows) + "]"


def dumps_stream(stream: ObservationStream) -> str:
    header = (
        f'"model":{json.dumps(stream.model_name)},'
        f'"seed":{int(stream.seed)},'
        f'"state_dim":{stream.reference_states.shape[1]},'
        f'"obs_dim":{stream.observations.shape[1]},'
        f'"param_dim":{stream.true_params.size},'
        f'"n_steps":{stream.n_steps}'
    )
    params = "[" + ",".join(_fmt(v) for v in stream.true_params) + "]"
    return (
        "{" + header
        + f',"true_params":{params}'
        + f',"observations":{_fmt_matrix(stream.observations)}'
        + f',"reference_states":{_fmt_matrix(stream.reference_states)}'
        + "}\n"
    )


def save_stream(stream: ObservationStream, path) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write(dumps_stream(stream))


def load_stream(path) -> ObservationStream:
    with open(path, "r", encoding="ascii") as fh:
        raw = json.load(fh)
    stream = ObservationStream(
        model_name=raw["model"],
        seed=int(raw["seed"]),
        observations=np.asarray(raw["observations"], float),
        reference_states=np.asarray(raw["reference_states"], float),
        true_params=np.asarray(raw["true_params"], float),
    )
    expect = (raw["n_steps"], raw["obs_dim"])
    if stream.observations.shape != expect:
        raise ValueError(f"observation block shape {stream.observations.shape} != header {expect}")
    if stream.reference_states.shape != (raw["n_steps"], raw["state_dim"]):
        raise ValueError("reference block does not match header")
    return stream
