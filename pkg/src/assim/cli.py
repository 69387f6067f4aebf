"""Command-line harness for the bundled twin experiments.

One JSON config file names an experiment (and optional overrides); five
subcommands drive the full study against one output directory:

    generate   synthesize per-realization observation streams
    run        execute the configured estimation methods on those streams
    metrics    aggregate run journals into RMSE / prediction-error tables
    bound      evaluate the posterior-error bound along a recorded run
    oracle     draw reference posterior samples with the MCMC sampler

Layout under the output directory:

    config-echo.json                 resolved configuration (every command)
    log.txt                          timestamped progress log (append-only)
    data/realization_NNN.json        observation streams + manifest.json
    runs/<method>/realization_NNN/   per-run journal: config.json,
                                     steps.jsonl, summary.json, error.json
                                     on failure (the variational method also
                                     writes checkpoints/ and timings.csv)
    metrics-<method>.csv             aggregated scores per method
    metrics-flags.json               incomplete/collapsed runs, when any
    bound-report.json                posterior-error bound decomposition
    oracle/k_NNNN/                   samples.bin + stats.json per step

Every artifact except log.txt and timings.csv (wall-clock sidecars) is a
pure function of the config, so rerunning a command rewrites byte-identical
files. Filter collapse is recorded as data -- an error.json plus a summary
flagged incomplete -- not a crash; the exit code is 0 unless every job
failed (3) or the configuration itself is unusable (2).
"""

from __future__ import annotations

import argparse
import datetime
import json
import shutil
import sys
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from pathlib import Path

import numpy as np
from scipy.stats import norm

from assim.baselines import (
    MOMENT_THETA_WALK,
    PF_THETA_WALK,
    AugmentedModel,
    augmented_prior,
    init_members,
    init_particles,
    joint_enkf_step,
    joint_pf_step,
    joint_ukf_step,
)
from assim.bound import BoundInputs, BoundStep, theorem2_bound
from assim.errors import AssimError, ConfigError, StuckChainError
from assim.experiments import ExperimentConfig, fbovi_run_config
from assim.mcmc import ChainResult, dram_sample, log_target_joint, \
    oracle_config_for, save_chain
from assim.metrics import RealizationResult, summarize, write_metrics_csv
from assim.models import load_stream, save_stream
from assim.orchestrator import load_checkpoint, read_records, run_stream
from assim.rng import SeededRng

# Distinct stream ids so each consumer's draws are independent of the data
# stream (id 0) and the prior stream used by the experiment registry.
_METHOD_STREAM = {"jpf": 11, "jukf": 12, "jenkf": 13}
_ORACLE_STREAM = 21
_BOUND_STREAM = 22

# Sample count for Gaussian-carrier predictive clouds (matches the
# variational runner's default summary size).
_SUMMARY_SAMPLES = 2048

# A particle run whose parameter support ever shrinks to this few distinct
# values is flagged degenerate even if the weights never fully underflow:
# resampling can no longer repopulate the parameter marginal.
PF_SUPPORT_FLOOR = 10

_Z95 = float(norm.ppf(0.975))
_PCTS = (2.5, 97.5)


# ---------------------------------------------------------------------------
# Small shared utilities
# ---------------------------------------------------------------------------


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


class _Log:
    """Append-only timestamped log; the one artifact reruns may differ in."""

    def __init__(self, out_dir: Path):
        self.path = Path(out_dir) / "log.txt"
        self.lock = threading.Lock()

    def __call__(self, message: str) -> None:
        stamp = datetime.datetime.now(datetime.timezone.utc).strftime(
            "%Y-%m-%dT%H:%M:%SZ")
        with self.lock:
            with self.path.open("a") as fh:
                fh.write(f"{stamp} {message}\n")
        print(message)


def _data_path(config: ExperimentConfig, j: int) -> Path:
    return config.out_dir / "data" / f"realization_{j:03d}.json"


def _run_dir(config: ExperimentConfig, method: str, j: int) -> Path:
    return config.out_dir / "runs" / method / f"realization_{j:03d}"


def _load_realization(config: ExperimentConfig, j: int):
    path = _data_path(config, j)
    if not path.exists():
        raise ConfigError(
            f"no generated data for realization {j} ({path}); "
            "run 'assim generate' first")
    stream = load_stream(path)
    if stream.n_steps != config.steps:
        raise ConfigError(
            f"realization {j} holds {stream.n_steps} steps but the config "
            f"asks for {config.steps}; rerun 'assim generate'")
    return stream


def _require_linear(config: ExperimentConfig, purpose: str):
    model = config.experiment.build_model()
    if not (model.linear_dynamics and model.linear_observation):
        raise ConfigError(
            f"{purpose} needs linear dynamics and a linear observation; "
            f"experiment {config.experiment.id!r} (model {model.name!r}) "
            "is nonlinear")
    return model


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(config: ExperimentConfig, method, log: _Log) -> int:
    exp = config.experiment
    data_dir = config.out_dir / "data"
    data_dir.mkdir(parents=True, exist_ok=True)
    for j, seed in enumerate(config.data_seeds):
        stream = exp.generate(seed, config.steps)
        save_stream(stream, _data_path(config, j))
        log(f"generate: realization {j} (seed {seed}): "
            f"{stream.n_steps} observations")
    for stale in sorted(data_dir.glob("realization_*.json")):
        if int(stale.stem.split("_")[1]) >= config.realizations:
            stale.unlink()
    truth = exp.true_theta()
    _write_json(data_dir / "manifest.json", {
        "experiment": exp.id,
        "model": exp.build_model().name,
        "steps": config.steps,
        "burn_in": exp.burn_in,
        "realizations": config.realizations,
        "seeds": list(config.data_seeds),
        "true_params": None if truth is None else truth.tolist(),
        "misspecified": exp.misspecified,
    })
    log(f"generate: wrote {config.realizations} realization(s) to {data_dir}")
    return 0


# ---------------------------------------------------------------------------
# run: sample-cloud / Gaussian summaries shared by the baseline methods
# ---------------------------------------------------------------------------


def _weighted_quantiles(values: np.ndarray, weights: np.ndarray,
                        pcts) -> np.ndarray:
    """Per-coordinate weighted percentiles of a cloud, shape (len(pcts), n)."""
    qs = np.asarray(pcts, float) / 100.0
    out = np.empty((len(qs), values.shape[1]))
    for i in range(values.shape[1]):
        order = np.argsort(values[:, i], kind="stable")
        v = values[order, i]
        c = np.cumsum(weights[order])
        c /= c[-1]
        idx = np.clip(np.searchsorted(c, qs, side="left"), 0, len(v) - 1)
        out[:, i] = v[idx]
    return out


def _cloud_summary(values: np.ndarray, weights: np.ndarray | None = None):
    """mean / var / percentile band of a (possibly weighted) sample cloud."""
    if len(values) == 0:
        nan = [float("nan")]
        return {"mean": nan, "var": nan, "lo": nan, "hi": nan}
    if weights is None:
        mean = values.mean(axis=0)
        var = values.var(axis=0)
        lo, hi = np.percentile(values, _PCTS, axis=0)
    else:
        mean = weights @ values
        var = weights @ (values - mean) ** 2
        lo, hi = _weighted_quantiles(values, weights, _PCTS)
    return {"mean": mean.tolist(), "var": var.tolist(),
            "lo": lo.tolist(), "hi": hi.tolist()}


def _gaussian_summary(mean: np.ndarray, cov: np.ndarray):
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return {"mean": mean.tolist(), "var": np.diag(cov).tolist(),
            "lo": (mean - _Z95 * sd).tolist(),
            "hi": (mean + _Z95 * sd).tolist()}


def _propagate_states(aug: AugmentedModel, x: np.ndarray, th: np.ndarray,
                      rng: SeededRng):
    """One forecast of a state cloud under its own parameters; returns the
    finite rows and the count that blew up."""
    with np.errstate(all="ignore"):
        prop = np.asarray(aug.base.transition(x, th), float)
    prop = prop + rng.standard_normal(prop.shape) @ aug.state_noise_sqrt.T
    keep = np.isfinite(prop).all(axis=1)
    return prop, keep


def _record_line(fh, step: int, theta_mean, theta_cov, state, pred,
                 pred_diverged: int, extras: dict | None = None) -> None:
    rec = {
        "step": step,
        "theta_mean": theta_mean,
        "theta_cov": theta_cov,
        "state_mean": state["mean"], "state_var": state["var"],
        "state_lo": state["lo"], "state_hi": state["hi"],
        "pred_mean": None if pred is None else pred["mean"],
        "pred_var": None if pred is None else pred["var"],
        "pred_lo": None if pred is None else pred["lo"],
        "pred_hi": None if pred is None else pred["hi"],
        "pred_diverged": pred_diverged,
    }
    if extras:
        rec.update(extras)
    fh.write(json.dumps(rec) + "\n")


def _baseline_run(method: str, model, prior, stream, options: dict,
                  out_dir: Path, realization: int, log: _Log) -> dict:
    """Run one joint-filter baseline over a stream, journaling like the
    variational runner: steps.jsonl records, summary.json, error.json on
    collapse. Collapse ends the run but is a recorded outcome, not a crash.
    """
    seed = int(options["seed"]) + realization
    root = SeededRng(seed, _METHOD_STREAM[method])
    walk = PF_THETA_WALK if method == "jpf" else MOMENT_THETA_WALK
    aug = AugmentedModel(model, q_theta=walk, theta_ref=prior.params.mean)
    n = model.state_dim
    n_steps = stream.n_steps
    label = f"run {method}/realization {realization}"

    out_dir.mkdir(parents=True, exist_ok=True)
    for name in ("steps.jsonl", "summary.json", "error.json"):
        (out_dir / name).unlink(missing_ok=True)
    _write_json(out_dir / "config.json", {
        "model": model.name, "method": method, "n_steps": n_steps,
        "options": dict(sorted(options.items())),
    })

    ens = members = carrier = None
    if method == "jpf":
        ens = init_particles(prior, int(options["particles"]),
                             root.substream(0))
    elif method == "jenkf":
        members = init_members(prior, int(options["members"]),
                               root.substream(0))
    else:
        carrier = augmented_prior(prior)

    def moments():
        if method == "jpf":
            mean, cov = ens.moments()
        elif method == "jenkf":
            mean = members.mean(axis=0)
            dev = members - mean
            cov = dev.T @ dev / len(members)
        else:
            mean, cov = carrier.mean, carrier.cov
        return aug.split_moments(mean, cov)

    def state_summary():
        if method == "jpf":
            return _cloud_summary(ens.particles[:, :n], ens.weights)
        if method == "jenkf":
            return _cloud_summary(members[:, :n])
        xm, xc, _, _ = aug.split_moments(carrier.mean, carrier.cov)
        return _gaussian_summary(xm, xc)

    summary = {
        "model": model.name, "method": method, "seed": seed,
        "n_steps": n_steps, "completed": False, "steps_run": 0,
    }
    if method == "jpf":
        n_particles = ens.size
        pf_track = {"min_ess": float(n_particles),
                    "min_unique_theta": n_particles, "n_resampled": 0}

    fh = (out_dir / "steps.jsonl").open("a")
    with fh:
        _, _, tm, tc = moments()
        _record_line(fh, 0, tm.tolist(), tc.tolist(), state_summary(),
                     None, 0)
        for k in range(1, n_steps + 1):
            srng = root.substream(k)
            # forecast summary before the observation is touched
            if method == "jpf":
                x, th = aug.split(ens.particles)
                prop, keep = _propagate_states(aug, x, th, srng.substream(4))
                w = ens.weights[keep]
                pred = _cloud_summary(prop[keep],
                                      w / w.sum() if w.sum() > 0 else None)
            elif method == "jenkf":
                x, th = aug.split(members)
                prop, keep = _propagate_states(aug, x, th, srng.substream(4))
                pred = _cloud_summary(prop[keep])
            else:
                prng = srng.substream(4)
                z = carrier.sample(_SUMMARY_SAMPLES, prng)
                x, th = aug.split(z)
                prop, keep = _propagate_states(aug, x, th, prng)
                pred = _cloud_summary(prop[keep])
            diverged = int((~keep).sum())

            y = stream.observation(k)
            extras = None
            try:
                if method == "jpf":
                    diag = {}
                    ens = joint_pf_step(ens, aug, y, srng.substream(1), diag)
                    pf_track["min_ess"] = min(pf_track["min_ess"],
                                              float(diag["ess"]))
                    pf_track["min_unique_theta"] = min(
                        pf_track["min_unique_theta"], diag["unique_theta"])
                    pf_track["n_resampled"] += int(diag["resampled"])
                    extras = {"ess": float(diag["ess"]),
                              "resampled": bool(diag["resampled"]),
                              "blown_particles": diag["blown_particles"],
                              "unique_theta": diag["unique_theta"]}
                elif method == "jenkf":
                    members = joint_enkf_step(members, aug, y,
                                              srng.substream(1))
                else:
                    carrier = joint_ukf_step(carrier, aug, y)
            except AssimError as err:
                _write_json(out_dir / "error.json", {
                    "step": k, "error": type(err).__name__,
                    "message": str(err)})
                summary["collapsed_at"] = k
                summary["error"] = str(err)
                if method == "jpf":
                    summary.update(pf_track, degenerate=True)
                _write_json(out_dir / "summary.json", summary)
                log(f"{label}: collapsed at step {k}: {err}")
                return summary

            _, _, tm, tc = moments()
            _record_line(fh, k, tm.tolist(), tc.tolist(), state_summary(),
                         pred, diverged, extras)
            summary["steps_run"] = k

    summary["completed"] = True
    _, _, tm, tc = moments()
    summary["theta_mean"] = tm.tolist()
    summary["theta_cov"] = tc.tolist()
    note = ""
    if method == "jpf":
        summary.update(pf_track)
        summary["degenerate"] = (
            pf_track["min_unique_theta"] <= PF_SUPPORT_FLOOR)
        if summary["degenerate"]:
            note = (f" [degenerate: parameter support fell to "
                    f"{pf_track['min_unique_theta']} distinct values]")
    _write_json(out_dir / "summary.json", summary)
    log(f"{label}: completed {n_steps} steps, theta_mean="
        f"{np.array2string(tm, precision=4)}{note}")
    return summary


def _run_one(config: ExperimentConfig, method: str, j: int,
             log: _Log) -> bool:
    """One (method, realization) job; returns True unless it failed with no
    usable journal."""
    exp = config.experiment
    stream = _load_realization(config, j)
    prior = exp.build_prior(config.data_seeds[j])
    model = exp.build_model()
    out_dir = _run_dir(config, method, j)
    if method == "fbovi":
        run_cfg = fbovi_run_config(config, j)
        try:
            summary = run_stream(model, prior, stream, run_cfg, out_dir,
                                 stop_after=config.steps)
        except ConfigError:
            raise
        except AssimError as err:
            log(f"run fbovi/realization {j}: stopped: {err}")
            return False
        log(f"run fbovi/realization {j}: completed {summary['steps_run']} "
            f"steps, theta_mean="
            f"{np.array2string(np.asarray(summary['theta_mean']), precision=4)}")
        return True
    summary = _baseline_run(method, model, prior, stream,
                            config.methods[method], out_dir, j, log)
    return summary["steps_run"] > 0 or summary["completed"]


def cmd_run(config: ExperimentConfig, method, log: _Log) -> int:
    methods = [method] if method else list(config.methods)
    for j in range(config.realizations):
        _load_realization(config, j)  # fail fast before any work
    for m in methods:
        shutil.rmtree(config.out_dir / "runs" / m, ignore_errors=True)
    jobs = [(m, j) for m in methods for j in range(config.realizations)]
    log(f"run: {len(jobs)} job(s) on {config.workers} worker(s)")
    ok = 0
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        futures = {pool.submit(_run_one, config, m, j, log): (m, j)
                   for m, j in jobs}
        for fut in as_completed(futures):
            ok += bool(fut.result())
    if ok == 0:
        raise AssimError("every run job failed before recording any step")
    log(f"run: {ok}/{len(jobs)} job(s) produced usable journals")
    return 0


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _pred_cloud(record: dict) -> np.ndarray | None:
    """Two-point cloud matching a record's predictive mean and variance.

    The journals store forecast moments, not raw draws; the pair
    (mean + sd, mean - sd) reproduces those moments exactly, and the
    prediction score depends on the draws only through them.
    """
    mean, var = record.get("pred_mean"), record.get("pred_var")
    if mean is None or var is None:
        return None
    mean = np.asarray(mean, float)
    sd = np.sqrt(np.clip(np.asarray(var, float), 0.0, None))
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(sd))):
        return None
    return np.stack([mean + sd, mean - sd])


def _realization_result(records: list, stream,
                        n_steps: int) -> RealizationResult:
    recs = records[1:n_steps + 1]
    for i, rec in enumerate(recs, start=1):
        if rec["step"] != i:
            raise ValueError(f"journal out of order at line {i}")
    pred = {}
    for rec in recs:
        cloud = _pred_cloud(rec)
        if cloud is not None:
            pred[int(rec["step"])] = cloud
    return RealizationResult(
        theta_means=np.array([r["theta_mean"] for r in recs]),
        theta_covs=np.array([r["theta_cov"] for r in recs]),
        state_means=np.array([r["state_mean"] for r in recs]),
        state_vars=np.array([r["state_var"] for r in recs]),
        reference=stream.reference_states[:n_steps],
        pred_samples=pred,
    )


def _collect_method(config: ExperimentConfig, m: str):
    """Load every complete realization of a method, flagging the rest."""
    if not (config.out_dir / "runs" / m).exists():
        raise ConfigError(
            f"no run records for method {m!r} under {config.out_dir}; "
            "run 'assim run' first")
    results, flags = [], []

    def flag(j, reason):
        flags.append({"realization": j, "reason": reason})

    for j in range(config.realizations):
        run_dir = _run_dir(config, m, j)
        err_path = run_dir / "error.json"
        if not (run_dir / "steps.jsonl").exists():
            if err_path.exists():
                err = json.loads(err_path.read_text())
                flag(j, f"failed at step {err['step']}: {err['message']}")
            else:
                flag(j, "no run journal")
            continue
        records = read_records(run_dir)
        summary_path = run_dir / "summary.json"
        completed = (summary_path.exists()
                     and json.loads(summary_path.read_text())["completed"])
        if not completed or len(records) != config.steps + 1:
            if err_path.exists():
                err = json.loads(err_path.read_text())
                flag(j, f"collapsed at step {err['step']}: {err['message']}")
            else:
                flag(j, f"incomplete: {max(len(records) - 1, 0)} of "
                        f"{config.steps} steps recorded")
            continue
        stream = _load_realization(config, j)
        results.append(_realization_result(records, stream, config.steps))
    return results, flags


def cmd_metrics(config: ExperimentConfig, method, log: _Log) -> int:
    methods = [method] if method else list(config.methods)
    true_theta = config.experiment.true_theta()
    all_flags = {}
    for m in methods:
        results, flags = _collect_method(config, m)
        if flags:
            all_flags[m] = flags
            for f in flags:
                log(f"metrics: {m}/realization {f['realization']}: "
                    f"{f['reason']}")
        csv_path = config.out_dir / f"metrics-{m}.csv"
        if not results:
            csv_path.unlink(missing_ok=True)
            log(f"metrics: {m}: no complete realizations, nothing to "
                "aggregate")
            continue
        rows = summarize(results, range(1, config.steps + 1),
                         true_theta=true_theta)
        write_metrics_csv(rows, csv_path)
        log(f"metrics: {m}: {len(results)} realization(s), {len(rows)} rows "
            f"-> {csv_path.name}")
    flags_path = config.out_dir / "metrics-flags.json"
    if all_flags:
        _write_json(flags_path, all_flags)
        log(f"metrics: flagged incomplete runs recorded in {flags_path.name}")
    else:
        flags_path.unlink(missing_ok=True)
    return 0


# ---------------------------------------------------------------------------
# bound
# ---------------------------------------------------------------------------


def cmd_bound(config: ExperimentConfig, method, log: _Log) -> int:
    model = _require_linear(config, "the posterior-error bound")
    opts = config.bound
    j = int(opts["realization"])
    if not 0 <= j < config.realizations:
        raise ConfigError(f"bound realization {j} outside "
                          f"0..{config.realizations - 1}")
    horizon = int(opts["horizon"])
    if horizon > config.steps:
        raise ConfigError(f"bound horizon {horizon} exceeds the configured "
                          f"{config.steps} steps")
    run_dir = _run_dir(config, "fbovi", j)
    if not (run_dir / "steps.jsonl").exists():
        raise ConfigError(
            f"the bound scores the variational run, but {run_dir} has no "
            "journal; run 'assim run --method fbovi' first")
    records = read_records(run_dir)
    if len(records) <= horizon:
        raise ConfigError(
            f"run journal holds {len(records) - 1} steps, bound horizon is "
            f"{horizon}")

    posts = []
    for k in range(horizon + 1):
        path = run_dir / "checkpoints" / f"state_{k:04d}.json"
        if not path.exists():
            raise ConfigError(
                f"missing checkpoint for step {k} ({path}); rerun with "
                "checkpoint_every = 1 so every step is recoverable")
        posts.append(load_checkpoint(path))

    stream = _load_realization(config, j)
    steps = []
    for k in range(1, horizon + 1):
        epsilon = records[k].get("epsilon")
        if epsilon is None:
            raise ConfigError(
                f"step {k} has no recorded evidence lower bound; the bound "
                "needs the variational run's per-step objective values")
        steps.append(BoundStep(nu=posts[k].nu.to_gaussian(),
                               cond=posts[k].cond,
                               epsilon=float(epsilon),
                               y=stream.observations[k - 1]))

    prior = config.experiment.build_prior(config.data_seeds[j])
    if opts["c_tilde"] is not None:
        c_tilde = float(opts["c_tilde"])
        source = "config"
    else:
        c_tilde = float(np.linalg.det(model.obs_cov(prior.params.mean)))
        source = "det(observation covariance)"

    inputs = BoundInputs(model=model, init_cond=posts[0].cond, steps=steps,
                         c_tilde=c_tilde, metric=str(opts["metric"]),
                         n_psi=int(opts["n_psi"]), n_z=int(opts["n_z"]))
    report = theorem2_bound(inputs, SeededRng(int(opts["seed"]),
                                              _BOUND_STREAM))
    payload = {"experiment": config.experiment.id, "realization": j,
               "horizon": horizon, "c_tilde_source": source}
    payload.update(report.to_dict())
    _write_json(config.out_dir / "bound-report.json", payload)
    clamped = sum(1 for s in payload["steps"] if s["clamped"])
    log(f"bound: {report.metric} total {report.total:.6g} over "
        f"{horizon} step(s), {clamped} clamped radicand(s) "
        f"-> bound-report.json")
    return 0


# ---------------------------------------------------------------------------
# oracle
# ---------------------------------------------------------------------------


def cmd_oracle(config: ExperimentConfig, method, log: _Log) -> int:
    model = _require_linear(config, "the reference sampler's exact target")
    opts = config.oracle
    j = int(opts["realization"])
    if not 0 <= j < config.realizations:
        raise ConfigError(f"oracle realization {j} outside "
                          f"0..{config.realizations - 1}")
    ks = sorted(set(int(k) for k in opts["steps"]))
    bad = [k for k in ks if k > config.steps]
    if bad:
        raise ConfigError(f"oracle step(s) {bad} exceed the configured "
                          f"{config.steps} steps")
    draws = int(opts["draws"])
    if draws < 8:
        raise ConfigError(f"oracle draws must be at least 8, got {draws}")
    prior = config.experiment.build_prior(config.data_seeds[j])
    stream = _load_realization(config, j) if any(k > 0 for k in ks) else None

    stuck = []
    for k in ks:
        k_dir = config.out_dir / "oracle" / f"k_{k:04d}"
        k_dir.mkdir(parents=True, exist_ok=True)
        for name in ("samples.bin", "stats.json", "error.json"):
            (k_dir / name).unlink(missing_ok=True)
        rng = SeededRng(int(opts["seed"]), _ORACLE_STREAM).substream(k)
        if k == 0:
            # No data assimilated: the exact posterior is the prior itself,
            # so sample it directly (same kept count as a thinned chain).
            kept = draws // 4
            samples = np.concatenate(
                [prior.state.sample(kept, rng.substream(0)),
                 prior.params.sample(kept, rng.substream(1))], axis=1)
            result = ChainResult(samples=samples, stats={
                "kind": "prior-sample", "step": 0, "n_samples": draws,
                "n_kept": kept, "mean": samples.mean(axis=0).tolist(),
                "sd": samples.std(axis=0).tolist()})
            save_chain(result, k_dir)
            log(f"oracle k=0: {kept} prior samples")
            continue
        ys = stream.observations[:k]
        try:
            result = dram_sample(
                lambda pt: log_target_joint(model, prior, ys, pt),
                oracle_config_for(prior, n_samples=draws), rng)
        except StuckChainError as err:
            _write_json(k_dir / "error.json", {
                "step": k, "error": "StuckChainError", "message": str(err)})
            log(f"oracle k={k}: stuck chain: {err}")
            stuck.append(k)
            continue
        result.stats["kind"] = "dram-chain"
        result.stats["step"] = k
        save_chain(result, k_dir)
        log(f"oracle k={k}: kept {result.stats['n_kept']} of {draws} draws, "
            f"acceptance {result.stats['acceptance_rate']:.3f}")
    if stuck:
        print(f"oracle: chain(s) at step(s) {stuck} stalled; see error.json "
              "in the affected directories", file=sys.stderr)
        return 3
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

_COMMANDS = {
    "generate": cmd_generate,
    "run": cmd_run,
    "metrics": cmd_metrics,
    "bound": cmd_bound,
    "oracle": cmd_oracle,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="assim",
        description="Twin-experiment harness: generate data, run estimation "
                    "methods, score them, and audit the variational run.")
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True,
                        help="JSON file naming an experiment plus overrides")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the base data seed")
    parser.add_argument("--out", default=None,
                        help="override the output directory")
    parser.add_argument("--method", default=None,
                        help="restrict run/metrics to one configured method")
    parser.add_argument("--workers", type=int, default=None,
                        help="worker threads for run jobs")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = ExperimentConfig.from_file(
            args.config, out_override=args.out, seed_override=args.seed,
            workers_override=args.workers)
        if args.method is not None and args.method not in config.methods:
            raise ConfigError(
                f"--method {args.method!r} is not configured; configured: "
                + ", ".join(sorted(config.methods)))
        config.out_dir.mkdir(parents=True, exist_ok=True)
        echo = {"command": args.command}
        echo.update(config.echo())
        _write_json(config.out_dir / "config-echo.json", echo)
        log = _Log(config.out_dir)
        log(f"{args.command}: experiment {config.experiment.id!r}, "
            f"{config.realizations} realization(s), {config.steps} steps")
        return _COMMANDS[args.command](config, args.method, log)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 2
    except AssimError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
