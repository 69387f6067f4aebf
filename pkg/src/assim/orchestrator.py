"""Recursive two-stage joint-estimation loop with journaled run records.

Per observation the loop first updates the parameter belief (stage 1:
variational Gaussian ascent on the one-step evidence under the previous
conditional), then retrains the parameter-conditioned state law on
per-parameter filter targets (stage 2), carrying the pair
(parameter belief, conditional state law) forward. The loop is strictly
online: each observation is read exactly once, and every stochastic routine
draws from substreams keyed by (seed, step), so a run can be checkpointed
and resumed with bit-identical results.

A run record is a directory:

    config.json         echo of the run configuration and backend choice
    steps.jsonl         one JSON record per step; step 0 echoes the prior,
                        later records carry the parameter belief, evidence
                        diagnostics, losses, and sampled state /
                        one-step-prediction summaries (all deterministic
                        given the seed)
    timings.csv         per-step wall-clock seconds (kept out of
                        steps.jsonl so record bytes stay reproducible)
    checkpoints/
      state_0007.json   resumable loop state: belief moments + net shapes
      state_0007.bin    net weights as float64 little-endian, mean net then
                        covariance net, each flattened layer-major with
                        row-major weight matrices followed by the bias
    summary.json        terminal belief and bookkeeping, derived from the
                        journal so interrupted-and-resumed runs match
    error.json          present only when a step failed; names the step
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from assim.errors import AssimError, ConfigError
from assim.models import JointPrior, ObservationStream, StateSpaceModel
from assim.nets import Mlp
from assim.rng import SeededRng
from assim.stage1 import (
    Stage1Config,
    VariationalGaussian,
    fit_nu,
    log_evidence_gaussian,
    log_evidence_linear,
    log_evidence_monte_carlo,
)
from assim.stage2 import (
    ConditionalGaussianState,
    Stage2Config,
    _cov_sqrt_rows,
    build_targets,
    fit_conditional,
    init_conditional_state,
    kl_loss,
)

FILTER_BACKENDS = ("kalman", "ut", "enkf")

# evidence estimator paired with each filter backend
EVIDENCE_FOR = {"kalman": "linear", "ut": "ut", "enkf": "mc"}

# largest state dimension the unscented backend is auto-selected for
UT_MAX_DIM = 12


@dataclass
class RunConfig:
    """Everything a run needs besides the model object and the data."""

    model_id: str = ""
    backend: str = "auto"  # kalman | ut | enkf | auto
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    seed: int = 0
    checkpoint_every: int = 1  # steps between checkpoints (0 = final only)
    summary_samples: int = 2048  # joint draws behind per-step summaries
    evidence_samples: int = 512  # parameter draws behind the evidence mean


@dataclass
class ApproxJointPosterior:
    """Joint belief after ``step`` observations.

    ``nu`` is the Gaussian parameter belief and ``cond`` the
    parameter-conditioned Gaussian state law; together they factorize the
    joint posterior approximation at the same step index.
    """

    nu: VariationalGaussian
    cond: ConditionalGaussianState
    step: int
    diagnostics: dict = field(default_factory=dict)


def select_backend(model: StateSpaceModel, requested: str = "auto") -> str:
    """Resolve the filter backend, validating compatibility with the model."""
    if requested == "auto":
        if model.linear_dynamics and model.linear_observation:
            return "kalman"
        return "ut" if model.state_dim <= UT_MAX_DIM else "enkf"
    if requested not in FILTER_BACKENDS:
        raise ConfigError(f"unknown filter backend {requested!r}")
    if requested == "kalman" and not (
            model.linear_dynamics and model.linear_observation):
        raise ConfigError(
            "kalman backend needs linear dynamics and a linear observation")
    return requested


def init_posterior(prior: JointPrior, config: RunConfig,
                   rng: SeededRng) -> ApproxJointPosterior:
    """Step-0 belief: the parameter prior plus a conditional pinned to the
    state prior (constant in the parameter)."""
    nu = VariationalGaussian.from_gaussian(prior.params)
    cond = init_conditional_state(
        prior.state, prior.params, rng,
        width=config.stage2.width,
        pretrain_steps=config.stage2.pretrain_steps)
    return ApproxJointPosterior(nu=nu, cond=cond, step=0, diagnostics={})


def fbovi_step(prev: ApproxJointPosterior, y: np.ndarray,
               model: StateSpaceModel, config: RunConfig,
               rng: SeededRng) -> ApproxJointPosterior:
    """Assimilate one observation: parameter ascent, then conditional refit.

    Stage errors propagate with the step index prepended to the message.
    """
    k = prev.step + 1
    backend = select_backend(model, config.backend)
    t0 = time.perf_counter()
    try:
        s1 = fit_nu(prev.nu, model, prev.cond, y, EVIDENCE_FOR[backend],
                    config.stage1, rng.substream(1))
        batch = build_targets(s1.nu.to_gaussian(), prev.cond, model, y,
                              backend, config.stage2.n_targets,
                              rng.substream(2),
                              n_members=config.stage2.n_members)
        trained, info = fit_conditional(prev.cond, batch, config.stage2,
                                        rng.substream(3))
    except AssimError as err:
        err.args = (f"step {k}: {err}",)
        raise
    diag = {
        "backend": backend,
        "wall_time": time.perf_counter() - t0,
        "epsilon": float(s1.terminal_elbo),
        "elbo_first": float(s1.elbo_trace[0]),
        "degenerate": bool(s1.degenerate),
        "skipped_iterations": int(s1.n_skipped),
        "frac_neg_inf": float(s1.diagnostics.get("frac_neg_inf", 0.0)),
        "stage2_loss": float(info["final_loss"]),
        "stage2_kl": float(kl_loss(trained, batch)),
        "stage2_epochs": int(info["epochs_run"]),
        "dropped_targets": int(info["dropped_targets"]),
        "n_targets_used": int(batch.size),
    }
    return ApproxJointPosterior(nu=s1.nu, cond=trained, step=k,
                                diagnostics=diag)


def sample_joint(post: ApproxJointPosterior, n: int, rng: SeededRng):
    """n joint draws: parameters from the belief, then states from the
    conditional. Returns (states (n, state_dim), params (n, param_dim))."""
    thetas = post.nu.to_gaussian().sample(n, rng.substream(0))
    means, chols = post.cond(thetas)
    z = rng.substream(1).standard_normal((n, post.cond.state_dim))
    states = means + np.einsum("bij,bj->bi", chols, z)
    return states, thetas


def predict_next(post: ApproxJointPosterior, model: StateSpaceModel, n: int,
                 rng: SeededRng):
    """Push joint draws one step through the dynamics with fresh process
    noise. Returns (predicted states, count of draws that went non-finite)."""
    states, thetas = sample_joint(post, n, rng.substream(0))
    with np.errstate(all="ignore"):
        prop = model.transition(states, thetas)
        q_sqrt = _cov_sqrt_rows(model.process_cov, thetas,
                                model.theta_dependent_noise)
        z = rng.substream(1).standard_normal(states.shape)
        pred = prop + np.einsum("bij,bj->bi", q_sqrt, z)
    keep = np.isfinite(pred).all(axis=1)
    return pred[keep], int(n - keep.sum())


def _log_evidence_mean(post: ApproxJointPosterior, model: StateSpaceModel,
                       y: np.ndarray, backend: str, n: int, rng: SeededRng,
                       mc_draws: int):
    """Log of the belief-averaged one-step evidence, with a delta-method SE.

    This is the normalizing factor of the parameter update: the mean over
    current parameter draws of each draw's evidence for the incoming
    observation. Divergence reports integrate it across steps, so it is
    journaled while the quantities it needs are still alive.
    """
    thetas = post.nu.to_gaussian().sample(n, rng.substream(0))
    means, chols = post.cond(thetas)
    kind = EVIDENCE_FOR[backend]
    if kind == "linear":
        lev = log_evidence_linear(model, thetas, means, chols, y)
    elif kind == "ut":
        lev = log_evidence_gaussian(model, thetas, means, chols, y)
    else:
        lev = log_evidence_monte_carlo(model, thetas, means, chols, y,
                                       mc_draws, rng=rng.substream(1))
    peak = float(np.max(lev))
    if not np.isfinite(peak):
        return float("-inf"), float("nan")
    w = np.exp(lev - peak)
    zbar = float(w.mean())
    # relative SE of the mean is, to first order, the SE of its log
    se = float(w.std() / (zbar * np.sqrt(n)))
    return peak + float(np.log(zbar)), se


# ---------------------------------------------------------------------------
# Run records
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n")


def _moment_summary(samples: np.ndarray, dim: int) -> dict:
    """Mean / variance / central 95% band per coordinate; NaN when empty."""
    if samples.shape[0] == 0:
        nan_row = [float("nan")] * dim
        return {"mean": nan_row, "var": list(nan_row),
                "lo": list(nan_row), "hi": list(nan_row)}
    return {
        "mean": samples.mean(axis=0).tolist(),
        "var": samples.var(axis=0).tolist(),
        "lo": np.percentile(samples, 2.5, axis=0).tolist(),
        "hi": np.percentile(samples, 97.5, axis=0).tolist(),
    }


def _record(step, post, log_z, log_z_se, pred_sum, pred_diverged, state_sum):
    d = post.diagnostics
    return {
        "step": step,
        "theta_mean": post.nu.mean.tolist(),
        "theta_cov": post.nu.cov.tolist(),
        "epsilon": d.get("epsilon"),
        "elbo_first": d.get("elbo_first"),
        "log_z": log_z,
        "log_z_se": log_z_se,
        "degenerate": d.get("degenerate", False),
        "skipped_iterations": d.get("skipped_iterations", 0),
        "frac_neg_inf": d.get("frac_neg_inf"),
        "stage2_loss": d.get("stage2_loss"),
        "stage2_kl": d.get("stage2_kl"),
        "dropped_targets": d.get("dropped_targets", 0),
        "pred_mean": pred_sum["mean"] if pred_sum else None,
        "pred_var": pred_sum["var"] if pred_sum else None,
        "pred_lo": pred_sum["lo"] if pred_sum else None,
        "pred_hi": pred_sum["hi"] if pred_sum else None,
        "pred_diverged": pred_diverged,
        "state_mean": state_sum["mean"],
        "state_var": state_sum["var"],
        "state_lo": state_sum["lo"],
        "state_hi": state_sum["hi"],
    }


def save_checkpoint(post: ApproxJointPosterior, directory) -> Path:
    """Write resumable loop state: belief + net shapes in JSON, weights in a
    sidecar .bin (float64 little-endian, mean net first)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = f"state_{post.step:04d}"
    flat_mean = post.cond.mean_net.get_flat()
    flat_cov = post.cond.cov_net.get_flat()
    (directory / f"{name}.bin").write_bytes(
        np.concatenate([flat_mean, flat_cov]).astype("<f8").tobytes())
    meta = {
        "step": post.step,
        "nu_mean": post.nu.mean.tolist(),
        "nu_factor": post.nu.cov_factor.tolist(),
        "state_dim": post.cond.state_dim,
        "param_dim": post.cond.param_dim,
        "mean_widths": list(post.cond.mean_net.widths),
        "cov_widths": list(post.cond.cov_net.widths),
        "n_mean_params": int(flat_mean.size),
        "weights": f"{name}.bin",
    }
    _write_json(directory / f"{name}.json", meta)
    return directory / f"{name}.json"


def load_checkpoint(path) -> ApproxJointPosterior:
    """Rebuild the loop state written by save_checkpoint."""
    path = Path(path)
    meta = json.loads(path.read_text())
    raw = np.frombuffer((path.parent / meta["weights"]).read_bytes(),
                        dtype="<f8")
    mean_net = Mlp(meta["mean_widths"])
    cov_net = Mlp(meta["cov_widths"])
    split = meta["n_mean_params"]
    mean_net.set_flat(raw[:split].copy())
    cov_net.set_flat(raw[split:].copy())
    cond = ConditionalGaussianState(mean_net, cov_net, meta["state_dim"],
                                    meta["param_dim"])
    nu = VariationalGaussian(np.array(meta["nu_mean"], float),
                             np.array(meta["nu_factor"], float))
    return ApproxJointPosterior(nu=nu, cond=cond, step=int(meta["step"]),
                                diagnostics={})


def _latest_checkpoint(ck_dir: Path) -> Path:
    metas = sorted(ck_dir.glob("state_*.json"))
    if not metas:
        raise ConfigError(f"no checkpoint to resume from in {ck_dir}")
    return metas[-1]


def _truncate_journal(path: Path, step: int) -> list[dict]:
    """Drop journal lines past ``step`` (redone after a resume); returns the
    kept records."""
    if not path.exists():
        return []
    kept = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        if rec["step"] <= step:
            kept.append(rec)
    path.write_text("".join(
        json.dumps(r) + "\n" for r in kept))
    return kept


def _truncate_timings(path: Path, step: int) -> None:
    if not path.exists():
        path.write_text("step,stage_seconds,total_seconds\n")
        return
    lines = path.read_text().splitlines()
    kept = [lines[0]] + [
        ln for ln in lines[1:] if ln and int(ln.split(",")[0]) <= step]
    path.write_text("".join(ln + "\n" for ln in kept))


def run_stream(model: StateSpaceModel, prior: JointPrior,
               stream: ObservationStream, config: RunConfig, out_dir,
               stop_after: int | None = None, resume: bool = False) -> dict:
    """Fold the two-stage step over an observation stream, journaling to
    ``out_dir`` as described in the module docstring.

    ``stop_after`` ends the run early after that step (checkpointing it);
    ``resume=True`` picks up from the newest checkpoint in the directory and
    reproduces exactly the records an uninterrupted run would have written.
    Returns the summary dict.
    """
    out = Path(out_dir)
    ck_dir = out / "checkpoints"
    steps_path = out / "steps.jsonl"
    timings_path = out / "timings.csv"
    root = SeededRng(config.seed)
    backend = select_backend(model, config.backend)

    if resume:
        post = load_checkpoint(_latest_checkpoint(ck_dir))
        _truncate_journal(steps_path, post.step)
        _truncate_timings(timings_path, post.step)
    else:
        out.mkdir(parents=True, exist_ok=True)
        ck_dir.mkdir(exist_ok=True)
        for stale in ck_dir.glob("state_*"):
            stale.unlink()
        for name in ("steps.jsonl", "timings.csv", "summary.json",
                     "error.json"):
            (out / name).unlink(missing_ok=True)
        _write_json(out / "config.json", {
            "model": model.name,
            "model_id": config.model_id or model.name,
            "backend": backend,
            "n_steps": int(stream.n_steps),
            "config": asdict(config),
        })
        timings_path.write_text("step,stage_seconds,total_seconds\n")
        post = init_posterior(prior, config, root.substream(0))
        states, _ = sample_joint(post, config.summary_samples,
                                 root.substream(0).substream(9))
        rec0 = _record(0, post, None, None, None, 0,
                       _moment_summary(states, model.state_dim))
        with steps_path.open("a") as fh:
            fh.write(json.dumps(rec0) + "\n")
        save_checkpoint(post, ck_dir)

    last = stream.n_steps if stop_after is None else min(
        stream.n_steps, int(stop_after))
    for k in range(post.step + 1, last + 1):
        srng = root.substream(k)
        t_all = time.perf_counter()
        pred, n_div = predict_next(post, model, config.summary_samples,
                                   srng.substream(4))
        pred_sum = _moment_summary(pred, model.state_dim)
        y = stream.observation(k)
        log_z, log_z_se = _log_evidence_mean(
            post, model, y, backend, config.evidence_samples,
            srng.substream(5), config.stage1.mc_draws)
        try:
            post = fbovi_step(post, y, model, config, srng)
        except AssimError as err:
            save_checkpoint(post, ck_dir)
            _write_json(out / "error.json", {
                "step": k, "error": type(err).__name__, "message": str(err)})
            raise
        states, _ = sample_joint(post, config.summary_samples,
                                 srng.substream(6))
        state_sum = _moment_summary(states, model.state_dim)
        with steps_path.open("a") as fh:
            fh.write(json.dumps(_record(
                k, post, log_z, log_z_se, pred_sum, n_div, state_sum)) + "\n")
        with timings_path.open("a") as fh:
            fh.write(f"{k},{post.diagnostics['wall_time']:.6f},"
                     f"{time.perf_counter() - t_all:.6f}\n")
        if k == last or (config.checkpoint_every
                         and k % config.checkpoint_every == 0):
            save_checkpoint(post, ck_dir)

    records = [json.loads(ln) for ln in steps_path.read_text().splitlines()]
    summary = {
        "model": model.name,
        "backend": backend,
        "seed": config.seed,
        "steps_run": post.step,
        "n_steps": int(stream.n_steps),
        "completed": post.step == stream.n_steps,
        "theta_mean": post.nu.mean.tolist(),
        "theta_cov": post.nu.cov.tolist(),
        "degenerate_steps": [r["step"] for r in records if r["degenerate"]],
        "total_dropped_targets": int(sum(
            r["dropped_targets"] for r in records)),
    }
    _write_json(out / "summary.json", summary)
    return summary


def read_records(out_dir) -> list[dict]:
    """Load the per-step journal of a run directory."""
    path = Path(out_dir) / "steps.jsonl"
    return [json.loads(ln) for ln in path.read_text().splitlines()]
