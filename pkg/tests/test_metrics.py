import math

import numpy as np
import pytest

from assim.gaussians import Gaussian
from assim.metrics import (
    MetricRow,
    RealizationResult,
    credible_band,
    read_metrics_csv,
    rmse_pred,
    rmse_state,
    rmse_theta,
    summarize,
    write_metrics_csv,
)
from assim.rng import SeededRng


def make_result(rng, steps=4, d=2, n=3, pred_steps=(), pred_size=8,
                theta_offset=0.0, state_offset=0.0, pred_offset=None):
    reference = rng.standard_normal((steps, n))
    theta_means = rng.standard_normal((steps, d)) * 0 + theta_offset
    state_means = reference + state_offset
    preds = {}
    for k in pred_steps:
        center = reference[k - 1] if pred_offset is None else (
            reference[k - 1] + pred_offset)
        preds[k] = np.tile(center, (pred_size, 1))
    return RealizationResult(
        theta_means=theta_means,
        theta_covs=np.tile(np.eye(d), (steps, 1, 1)),
        state_means=state_means,
        state_vars=np.ones((steps, n)),
        reference=reference,
        pred_samples=preds,
    )


# ---------------------------------------------------------------------------
# Estimation RMSE
# ---------------------------------------------------------------------------


def test_rmse_theta_zero_on_perfect_estimates():
    rng = SeededRng(1)
    truth = np.array([0.4, -0.7])
    results = [make_result(rng, theta_offset=0.0) for _ in range(5)]
    for r in results:
        r.theta_means[:] = truth
    assert rmse_theta(results, truth, 0, 3) == 0.0
    assert rmse_theta(results, truth, 1, 1) == 0.0


def test_rmse_theta_single_realization_offset():
    rng = SeededRng(2)
    truth = np.array([0.4, -0.7])
    result = make_result(rng)
    result.theta_means[:] = truth
    result.theta_means[2, 0] += 0.1
    assert rmse_theta([result], truth, 0, 3) == pytest.approx(0.1, abs=1e-15)
    assert rmse_theta([result], truth, 1, 3) == 0.0


def test_rmse_theta_matches_loop_oracle():
    rng = SeededRng(3)
    truth = np.array([0.4, -0.7])
    results = [make_result(rng) for _ in range(50)]
    for r in results:
        r.theta_means[:] = truth + 0.3 * rng.standard_normal((4, 2))
    for i, k in ((0, 1), (1, 4)):
        acc = 0.0
        for r in results:
            acc += (r.theta_means[k - 1, i] - truth[i]) ** 2
        expected = math.sqrt(acc / 50)
        assert rmse_theta(results, truth, i, k) == pytest.approx(
            expected, abs=1e-12)


def test_rmse_theta_requires_truth():
    results = [make_result(SeededRng(4))]
    with pytest.raises(ValueError):
        rmse_theta(results, None, 0, 1)


def test_rmse_state_trivial_and_loop_oracle():
    rng = SeededRng(5)
    perfect = [make_result(rng, state_offset=0.0) for _ in range(4)]
    assert rmse_state(perfect, 1, 2) == 0.0

    shifted = [make_result(rng, state_offset=0.0) for _ in range(1)]
    shifted[0].state_means[1, 2] += 0.25
    assert rmse_state(shifted, 2, 2) == pytest.approx(0.25, abs=1e-15)

    noisy = [make_result(rng) for _ in range(50)]
    for r in noisy:
        r.state_means[:] = r.reference + 0.2 * rng.standard_normal((4, 3))
    acc = 0.0
    for r in noisy:
        acc += (r.state_means[2, 0] - r.reference[2, 0]) ** 2
    assert rmse_state(noisy, 0, 3) == pytest.approx(
        math.sqrt(acc / 50), abs=1e-12)


def test_step_range_is_validated():
    results = [make_result(SeededRng(6))]
    with pytest.raises(ValueError):
        rmse_state(results, 0, 0)
    with pytest.raises(ValueError):
        rmse_state(results, 0, 5)
    with pytest.raises(ValueError):
        rmse_state([], 0, 1)


# ---------------------------------------------------------------------------
# Prediction RMSE
# ---------------------------------------------------------------------------


def test_rmse_pred_point_mass_cases():
    rng = SeededRng(7)
    exact = [make_result(rng, pred_steps=(2, 3)) for _ in range(3)]
    assert rmse_pred(exact, 2) == 0.0

    offset = np.array([0.0, -0.35, 0.0])
    off = [make_result(rng, pred_steps=(2,), pred_offset=offset)
           for _ in range(3)]
    assert rmse_pred(off, 2) == pytest.approx(0.35, abs=1e-15)


def test_rmse_pred_gaussian_cloud_matches_analytic_value():
    # predictive N(truth, sigma^2 I_n): expected squared distance n sigma^2
    rng = SeededRng(8)
    n, sigma, n_samples = 3, 0.4, 2000
    results = []
    for _ in range(10):
        r = make_result(rng, n=n)
        r.pred_samples[2] = (r.reference[1]
                             + sigma * rng.standard_normal((n_samples, n)))
        results.append(r)
    est = rmse_pred(results, 2)
    expected = math.sqrt(n * sigma ** 2)
    # squared norms are sigma^2 chi^2_n draws; delta method on the sqrt
    var_mean_sq = (sigma ** 4) * 2 * n / (n_samples * len(results))
    se = math.sqrt(var_mean_sq) / (2 * expected)
    assert abs(est - expected) < 3 * se


def test_rmse_pred_missing_samples():
    results = [make_result(SeededRng(9), pred_steps=(2,))]
    with pytest.raises(ValueError):
        rmse_pred(results, 3)


# ---------------------------------------------------------------------------
# Credible bands
# ---------------------------------------------------------------------------


def test_credible_band_standard_normal():
    lo, hi = credible_band(Gaussian(np.zeros(1), np.eye(1)))
    assert lo[0] == pytest.approx(-1.959964, abs=1e-4)
    assert hi[0] == pytest.approx(1.959964, abs=1e-4)


def test_credible_band_constant_samples():
    lo, hi = credible_band(np.full((100, 2), 1.3))
    assert np.all(lo == 1.3) and np.all(hi == 1.3)


def test_credible_band_percentiles_match_normal_quantiles():
    samples = SeededRng(10).standard_normal(100_000)
    lo, hi = credible_band(samples)
    assert abs(lo + 1.96) < 0.02
    assert abs(hi - 1.96) < 0.02


def test_credible_band_coverage_calibration():
    # exactly-Gaussian posterior: the 95% band must cover the truth at its
    # nominal rate
    rng = SeededRng(11)
    band_lo, band_hi = credible_band(Gaussian(np.zeros(1), np.eye(1)))
    truths = rng.standard_normal(1000)
    covered = np.mean((truths >= band_lo[0]) & (truths <= band_hi[0]))
    assert 0.93 <= covered <= 0.97


def test_credible_band_rejects_bad_level():
    with pytest.raises(ValueError):
        credible_band(np.zeros(10), level=1.0)


# ---------------------------------------------------------------------------
# Aggregation properties and CSV round trip
# ---------------------------------------------------------------------------


def test_scores_are_permutation_invariant_and_nonnegative():
    rng = SeededRng(12)
    truth = np.array([0.4, -0.7])
    results = []
    for _ in range(8):
        r = make_result(rng, pred_steps=(2,))
        r.theta_means[:] = truth + 0.1 * rng.standard_normal((4, 2))
        r.state_means[:] = r.reference + 0.1 * rng.standard_normal((4, 3))
        r.pred_samples[2] = r.reference[1] + 0.1 * rng.standard_normal((20, 3))
        results.append(r)
    shuffled = [results[i] for i in (5, 2, 7, 0, 3, 6, 1, 4)]
    for i in range(2):
        a = rmse_theta(results, truth, i, 2)
        assert a == rmse_theta(shuffled, truth, i, 2)
        assert a > 0.0
    for i in range(3):
        a = rmse_state(results, i, 2)
        assert a == rmse_state(shuffled, i, 2)
        assert a > 0.0
    assert rmse_pred(results, 2) == rmse_pred(shuffled, 2) > 0.0


def test_summarize_and_csv_round_trip(tmp_path):
    rng = SeededRng(13)
    truth = np.array([0.4, -0.7])
    results = [make_result(rng, pred_steps=(2,)) for _ in range(3)]
    rows = summarize(results, steps=(1, 2), true_theta=truth)
    metrics = {(r.metric, r.component, r.step) for r in rows}
    assert ("rmse_theta", "theta_0", 1) in metrics
    assert ("rmse_state", "x_2", 2) in metrics
    assert ("rmse_pred", "all", 2) in metrics
    assert ("rmse_pred", "all", 1) not in metrics  # no samples at step 1
    assert all(r.n_realizations == 3 for r in rows)

    path = tmp_path / "metrics.csv"
    write_metrics_csv(rows, path)
    header = path.read_text().splitlines()[0]
    assert header == "metric,component,step,value,n_realizations"
    assert read_metrics_csv(path) == rows

    without_truth = summarize(results, steps=(1,))
    assert all(r.metric != "rmse_theta" for r in without_truth)


def test_realization_result_validates_shapes():
    with pytest.raises(ValueError):
        RealizationResult(
            theta_means=np.zeros((4, 2)),
            theta_covs=np.zeros((4, 2, 2)),
            state_means=np.zeros((4, 3)),
            state_vars=np.zeros((4, 3)),
            reference=np.zeros((3, 3)),
        )
