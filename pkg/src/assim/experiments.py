"""Bundled twin-experiment definitions and run configuration.

Five case studies ship with the command-line harness:

    pendulum-dyn      linearized pendulum, two unknown dynamics entries
    pendulum-dynobs   same plant, one dynamics entry and one observation
                      entry unknown, both states observed
    lorenz-correct    10-state chaotic ring, RK4 learning model matching the
                      generator, parameters (alpha, beta) unknown
    lorenz-misspec    same data, forward-Euler learning model with inflated
                      process noise (structural model error, no true theta)
    convdiff          51-node nonlinear transport PDE, central-difference
                      learning model against an upwind generator (no true
                      theta), ensemble filtering backend

Each experiment pins the generating system, the learning model, the joint
prior, default horizons, realization counts and per-method settings, so a
short JSON file can name an experiment and inherit the full published
setup. ``ExperimentConfig.from_file`` resolves such a file against the
registry and validates it; everything downstream consumes only the resolved
config.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from assim.errors import ConfigError
from assim.gaussians import Gaussian
from assim.models import (
    PENDULUM_TRUE_STATE0,
    JointPrior,
    ObservationStream,
    StateSpaceModel,
    TruthSpec,
    convection_diffusion_model,
    convdiff_initial_state,
    generate_twin_data,
    lorenz96_initial_state,
    lorenz96_model,
    pendulum_model,
)
from assim.orchestrator import RunConfig
from assim.rng import SeededRng
from assim.stage1 import Stage1Config
from assim.stage2 import Stage2Config

METHODS = ("fbovi", "jpf", "jukf", "jenkf")

# Stream id for per-realization prior draws, kept away from the data stream
# (keyed (seed, 0)) so the transport experiment's random prior mean never
# aliases the observation noise.
PRIOR_STREAM = 101

PENDULUM_DYN_TRUTH = np.array([0.9594, -0.8056])
PENDULUM_DYNOBS_TRUTH = np.array([0.0986, 1.0])
LORENZ_TRUTH = np.array([1.1, 0.9])
CONVDIFF_TRUTH = np.array([1.0, 0.01])

# 3000 generator substeps at the every-5 observation cadence
LORENZ_BURN_IN = 600


@dataclass(frozen=True)
class Experiment:
    """One bundled case study.

    ``build_prior`` takes the realization's data seed because the transport
    experiment draws its state-prior mean fresh per realization; the other
    experiments ignore the argument. ``build_run_config`` takes the run
    seed for the variational method.
    """

    id: str
    steps: int
    realizations: int
    data_seed: int
    methods: tuple[str, ...]
    build_model: Callable[[], StateSpaceModel]
    build_truth: Callable[[], TruthSpec]
    build_prior: Callable[[int], JointPrior]
    build_run_config: Callable[[int], RunConfig]
    burn_in: int = 0
    misspecified: bool = False  # True: no true parameter to score against
    jpf_particles: int = 10_000
    jenkf_members: int = 1024

    def generate(self, seed: int, steps: int | None = None) -> ObservationStream:
        """Twin data for one realization keyed by its seed."""
        return generate_twin_data(
            self.build_model(), self.build_truth(),
            self.steps if steps is None else int(steps),
            SeededRng(seed), burn_in=self.burn_in)

    def true_theta(self) -> np.ndarray | None:
        """Generating parameter vector, or None when the learning model's
        form differs from the generator (no truth to recover)."""
        if self.misspecified:
            return None
        return self.build_truth().theta


def _pendulum_prior(theta_mean: np.ndarray) -> Callable[[int], JointPrior]:
    def build(_seed: int) -> JointPrior:
        return JointPrior(
            state=Gaussian.from_cov(np.array([3.0, 4.5]), 4.0 * np.eye(2)),
            params=Gaussian.from_cov(theta_mean.copy(), np.eye(2)),
        )

    return build


def _pendulum_run_config(experiment_id: str) -> Callable[[int], RunConfig]:
    def build(seed: int) -> RunConfig:
        return RunConfig(model_id=experiment_id, backend="kalman",
                         stage1=Stage1Config(),
                         stage2=Stage2Config(epochs=600), seed=seed)

    return build


def _pendulum_dyn() -> Experiment:
    return Experiment(
        id="pendulum-dyn", steps=50, realizations=50, data_seed=7,
        methods=("fbovi", "jpf", "jukf"),
        build_model=lambda: pendulum_model("dynamics-only"),
        build_truth=lambda: TruthSpec(theta=PENDULUM_DYN_TRUTH.copy(),
                                      init_state=PENDULUM_TRUE_STATE0.copy()),
        build_prior=_pendulum_prior(np.zeros(2)),
        build_run_config=_pendulum_run_config("pendulum-dyn"),
    )


def _pendulum_dynobs() -> Experiment:
    # At the generating theta the observation matrix is the identity, so the
    # learner's own model doubles as the generator.
    return Experiment(
        id="pendulum-dynobs", steps=100, realizations=1, data_seed=5,
        methods=("fbovi", "jpf", "jukf"),
        build_model=lambda: pendulum_model("dynamics-and-observation"),
        build_truth=lambda: TruthSpec(theta=PENDULUM_DYNOBS_TRUTH.copy(),
                                      init_state=PENDULUM_TRUE_STATE0.copy()),
        build_prior=_pendulum_prior(np.array([1.0, 0.0])),
        build_run_config=_pendulum_run_config("pendulum-dynobs"),
    )


def _lorenz_truth() -> TruthSpec:
    # The generator integrates the exact drift with RK4 and carries no
    # process noise; stochasticity enters through measurement noise only.
    reference = lorenz96_model("rk4", 0.5)
    return TruthSpec(
        theta=LORENZ_TRUTH.copy(),
        init_state=lorenz96_initial_state(),
        transition=reference.transition,
        process_cov=np.zeros((reference.state_dim, reference.state_dim)),
    )


def _lorenz_prior(_seed: int) -> JointPrior:
    # The post-burn-in state is unknown to the learner; a broad zero-mean
    # prior mirrors the inaccurate-prior setup of the pendulum studies.
    return JointPrior(
        state=Gaussian.from_cov(np.zeros(10), 4.0 * np.eye(10)),
        params=Gaussian.from_cov(np.zeros(2), np.eye(2)),
    )


def _lorenz_run_config(experiment_id: str) -> Callable[[int], RunConfig]:
    def build(seed: int) -> RunConfig:
        return RunConfig(model_id=experiment_id, backend="ut",
                         stage1=Stage1Config(), stage2=Stage2Config(),
                         seed=seed)

    return build


def _lorenz_correct() -> Experiment:
    return Experiment(
        id="lorenz-correct", steps=150, realizations=1, data_seed=11,
        methods=("fbovi", "jukf"),
        build_model=lambda: lorenz96_model("rk4", 0.5),
        build_truth=_lorenz_truth,
        build_prior=_lorenz_prior,
        build_run_config=_lorenz_run_config("lorenz-correct"),
        burn_in=LORENZ_BURN_IN,
    )


def _lorenz_misspec() -> Experiment:
    # Same generator and seeds as the correct-model study; only the learning
    # model changes (Euler integrator, inflated process noise).
    return Experiment(
        id="lorenz-misspec", steps=150, realizations=1, data_seed=11,
        methods=("fbovi", "jukf"),
        build_model=lambda: lorenz96_model("euler", 2.0),
        build_truth=_lorenz_truth,
        build_prior=_lorenz_prior,
        build_run_config=_lorenz_run_config("lorenz-misspec"),
        burn_in=LORENZ_BURN_IN,
        misspecified=True,
    )


def _convdiff_truth() -> TruthSpec:
    reference = convection_diffusion_model("upwind")
    return TruthSpec(
        theta=CONVDIFF_TRUTH.copy(),
        init_state=convdiff_initial_state(),
        transition=reference.transition,
        process_cov=np.zeros((reference.state_dim, reference.state_dim)),
    )


def _convdiff_prior(seed: int) -> JointPrior:
    # The state-prior mean is itself random per realization:
    # mu0 ~ N(10 * ones, 9 I).
    rng = SeededRng(seed, PRIOR_STREAM)
    mu0 = 10.0 + 3.0 * rng.standard_normal(51)
    return JointPrior(
        state=Gaussian.from_cov(mu0, 4.0 * np.eye(51)),
        params=Gaussian.from_cov(np.array([0.0, 1.0]), 4.0 * np.eye(2)),
    )


def _convdiff_run_config(seed: int) -> RunConfig:
    return RunConfig(model_id="convdiff", backend="enkf",
                     stage1=Stage1Config(mc_draws=128),
                     stage2=Stage2Config(loss="surrogate"),
                     seed=seed)


def _convdiff() -> Experiment:
    return Experiment(
        id="convdiff", steps=50, realizations=1, data_seed=3,
        methods=("fbovi", "jenkf"),
        build_model=lambda: convection_diffusion_model("central"),
        build_truth=_convdiff_truth,
        build_prior=_convdiff_prior,
        build_run_config=_convdiff_run_config,
        misspecified=True,
    )


_BUILDERS = {
    "pendulum-dyn": _pendulum_dyn,
    "pendulum-dynobs": _pendulum_dynobs,
    "lorenz-correct": _lorenz_correct,
    "lorenz-misspec": _lorenz_misspec,
    "convdiff": _convdiff,
}

EXPERIMENT_IDS = tuple(_BUILDERS)


def get_experiment(experiment_id: str) -> Experiment:
    try:
        builder = _BUILDERS[experiment_id]
    except KeyError:
        raise ConfigError(
            f"unknown experiment {experiment_id!r}; known ids: "
            + ", ".join(EXPERIMENT_IDS)) from None
    return builder()


# ---------------------------------------------------------------------------
# JSON run configuration
# ---------------------------------------------------------------------------

_METHOD_OPTION_KEYS = {
    "fbovi": {"seed", "backend", "stage1", "stage2", "checkpoint_every",
              "summary_samples", "evidence_samples"},
    "jpf": {"seed", "particles"},
    "jukf": {"seed"},
    "jenkf": {"seed", "members"},
}
_TOP_KEYS = {"experiment", "realizations", "steps", "seed", "seeds",
             "methods", "out", "workers", "oracle", "bound"}
_ORACLE_KEYS = {"steps", "draws", "seed", "realization"}
_BOUND_KEYS = {"horizon", "metric", "c_tilde", "n_psi", "n_z", "seed",
               "realization"}

ORACLE_DEFAULT_STEPS = (5, 25, 50)
ORACLE_DEFAULT_DRAWS = 200_000


def _require_keys(mapping: dict, allowed: set, what: str) -> None:
    unknown = set(mapping) - allowed
    if unknown:
        raise ConfigError(
            f"unknown {what} option(s): " + ", ".join(sorted(unknown)))


def _as_positive_int(value, what: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or value < 1:
        raise ConfigError(f"{what} must be a positive integer, got {value!r}")
    return value


@dataclass
class ExperimentConfig:
    """Fully-resolved harness configuration for one experiment directory."""

    experiment: Experiment
    realizations: int
    steps: int
    data_seeds: tuple[int, ...]
    methods: dict  # method name -> option mapping (defaults filled in)
    out_dir: Path
    workers: int
    oracle: dict
    bound: dict

    @classmethod
    def from_file(cls, path, out_override=None, seed_override=None,
                  workers_override=None) -> "ExperimentConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text())
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {path} is not valid JSON: {err}") from err
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
        _require_keys(raw, _TOP_KEYS, "config")
        if "experiment" not in raw:
            raise ConfigError("config must name an experiment")
        exp = get_experiment(raw["experiment"])

        realizations = _as_positive_int(
            raw.get("realizations", exp.realizations), "realizations")
        steps = _as_positive_int(raw.get("steps", exp.steps), "steps")

        if "seeds" in raw and ("seed" in raw or seed_override is not None):
            raise ConfigError("give either an explicit seed list or a base "
                              "seed, not both")
        if "seeds" in raw:
            seeds = raw["seeds"]
            if (not isinstance(seeds, list)
                    or len(seeds) != realizations
                    or not all(isinstance(s, int) and not isinstance(s, bool)
                               for s in seeds)):
                raise ConfigError(
                    "seeds must be an integer list with one entry per "
                    "realization")
            if len(set(seeds)) != len(seeds):
                raise ConfigError("realization seeds must be unique")
            data_seeds = tuple(int(s) for s in seeds)
        else:
            base = raw.get("seed", exp.data_seed)
            if seed_override is not None:
                base = seed_override
            if not isinstance(base, int) or isinstance(base, bool):
                raise ConfigError(f"seed must be an integer, got {base!r}")
            data_seeds = tuple(int(base) + j for j in range(realizations))

        methods = cls._resolve_methods(raw.get("methods"), exp)

        out = out_override if out_override is not None else raw.get("out")
        if out is None:
            raise ConfigError("no output directory: set \"out\" in the "
                              "config or pass --out")

        workers = raw.get("workers", 1)
        if workers_override is not None:
            workers = workers_override
        workers = _as_positive_int(workers, "workers")

        oracle = dict(raw.get("oracle") or {})
        _require_keys(oracle, _ORACLE_KEYS, "oracle")
        oracle.setdefault("steps", list(ORACLE_DEFAULT_STEPS))
        oracle.setdefault("draws", ORACLE_DEFAULT_DRAWS)
        oracle.setdefault("seed", 0)
        oracle.setdefault("realization", 0)
        if (not isinstance(oracle["steps"], list)
                or not all(isinstance(k, int) and not isinstance(k, bool)
                           and k >= 0 for k in oracle["steps"])):
            raise ConfigError("oracle steps must be a list of step indices")

        bound = dict(raw.get("bound") or {})
        _require_keys(bound, _BOUND_KEYS, "bound")
        bound.setdefault("horizon", 5)
        bound.setdefault("metric", "tv")
        bound.setdefault("c_tilde", None)
        bound.setdefault("n_psi", 256)
        bound.setdefault("n_z", 512)
        bound.setdefault("seed", 0)
        bound.setdefault("realization", 0)
        _as_positive_int(bound["horizon"], "bound horizon")

        return cls(experiment=exp, realizations=realizations, steps=steps,
                   data_seeds=data_seeds, methods=methods,
                   out_dir=Path(out), workers=workers, oracle=oracle,
                   bound=bound)

    @staticmethod
    def _resolve_methods(spec, exp: Experiment) -> dict:
        if spec is None:
            spec = {name: {} for name in exp.methods}
        elif isinstance(spec, list):
            spec = {name: {} for name in spec}
        if not isinstance(spec, dict) or not spec:
            raise ConfigError("methods must be a non-empty list or mapping")
        resolved = {}
        for name, options in spec.items():
            if name not in METHODS:
                raise ConfigError(f"unknown method {name!r}; known: "
                                  + ", ".join(METHODS))
            if options is None:
                options = {}
            if not isinstance(options, dict):
                raise ConfigError(f"options for {name} must be a mapping")
            _require_keys(options, _METHOD_OPTION_KEYS[name], name)
            merged = {"seed": 0}
            if name == "jpf":
                merged["particles"] = exp.jpf_particles
            if name == "jenkf":
                merged["members"] = exp.jenkf_members
            merged.update(options)
            resolved[name] = merged
        return resolved

    def echo(self) -> dict:
        """Deterministic provenance record of the resolved configuration."""
        return {
            "experiment": self.experiment.id,
            "realizations": self.realizations,
            "steps": self.steps,
            "burn_in": self.experiment.burn_in,
            "data_seeds": list(self.data_seeds),
            "methods": {name: dict(sorted(opts.items()))
                        for name, opts in sorted(self.methods.items())},
            "workers": self.workers,
            "oracle": dict(sorted(self.oracle.items())),
            "bound": dict(sorted(self.bound.items())),
            "misspecified": self.experiment.misspecified,
        }


def fbovi_run_config(config: ExperimentConfig, realization: int) -> RunConfig:
    """The variational method's run configuration for one realization,
    with any JSON overrides applied on top of the experiment defaults."""
    options = config.methods.get("fbovi", {"seed": 0})
    run = config.experiment.build_run_config(
        int(options.get("seed", 0)) + realization)
    if "backend" in options:
        run.backend = str(options["backend"])
    for name in ("checkpoint_every", "summary_samples", "evidence_samples"):
        if name in options:
            setattr(run, name, _as_positive_int(options[name], name))
    for stage_name in ("stage1", "stage2"):
        overrides = options.get(stage_name)
        if not overrides:
            continue
        if not isinstance(overrides, dict):
            raise ConfigError(f"{stage_name} overrides must be a mapping")
        stage = getattr(run, stage_name)
        for key, val in overrides.items():
            if not hasattr(stage, key):
                raise ConfigError(
                    f"{stage_name} has no setting {key!r}")
            setattr(stage, key, val)
    return run
