import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from disagg.aggregate import RegionGaussian
from disagg.evaluation import (
    MetricsReport,
    evaluate,
    format_table,
    gaussian_fit_baseline,
    mean_log_prob,
    normal_cdf,
    p_within,
    point_metrics,
    size_estimation_baseline,
    uniform_disaggregation_report,
)
from disagg.exceptions import ConfigurationError, DomainError
from disagg.predictor import Checkpoint, PredictorConfig, init_params
from disagg.train import TrainConfig


def test_normal_cdf_values():
    assert normal_cdf(1.0) == pytest.approx(0.8413447460685429, abs=1e-15)
    assert normal_cdf(0.0) == 0.5
    assert 2 * normal_cdf(1.0) - 1 == pytest.approx(0.6826894921370859, abs=1e-15)


def test_normal_cdf_deep_tail():
    # the difference form keeps tiny probabilities instead of rounding to zero
    assert normal_cdf(-9.0) - normal_cdf(-11.0) == pytest.approx(1.13e-19, rel=0.01)


def test_point_metrics():
    mae, mape = point_metrics([100.0, 200.0], [110.0, 150.0])
    assert mae == 30.0
    assert mape == pytest.approx(17.5)
    with pytest.raises(DomainError):
        point_metrics([0.0], [1.0])


def test_p_within_one_sigma():
    rg = RegionGaussian(np.array([5.0]), np.array([4.0]))
    assert p_within(np.array([5.0]), rg, 2.0) == pytest.approx(0.6826894921370859, abs=1e-12)


def test_mean_log_prob_reference():
    rg = RegionGaussian(np.array([0.0]), np.array([1e8]))
    assert mean_log_prob(np.array([0.0]), rg) == pytest.approx(-10.129278905180855, rel=1e-14)


def test_mean_log_prob_matches_scipy(rng):
    y = rng.normal(size=10) * 1e4
    mu = rng.normal(size=10) * 1e4
    var = rng.uniform(1e6, 1e9, size=10)
    assert mean_log_prob(y, RegionGaussian(mu, var)) == pytest.approx(norm.logpdf(y, mu, np.sqrt(var)).mean(), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 1e3), st.integers(0, 2**31))
def test_scale_laws(c, seed):
    rng = np.random.default_rng(seed)
    y = rng.uniform(1, 100, size=6)
    rg = RegionGaussian(rng.uniform(1, 100, size=6), rng.uniform(1, 50, size=6))
    big = rg.scaled(c)
    mae, mape = point_metrics(y, rg.mu_star)
    mae_c, mape_c = point_metrics(c * y, big.mu_star)
    assert mae_c == pytest.approx(c * mae, rel=1e-9)
    assert mape_c == pytest.approx(mape, rel=1e-9)
    assert p_within(c * y, big, c * 3.0) == pytest.approx(p_within(y, rg, 3.0), rel=1e-9, abs=1e-15)
    assert mean_log_prob(c * y, big) == pytest.approx(mean_log_prob(y, rg) - math.log(c), rel=1e-9, abs=1e-9)
    assert np.mean(big.sigma_star) == pytest.approx(c * np.mean(rg.sigma_star), rel=1e-9)


def test_gaussian_fit_independent():
    train = np.array([100.0, 300.0, 200.0, 400.0])
    test = np.array([250.0, 50.0])
    mu, var, report = gaussian_fit_baseline(train, test)
    assert mu == 250.0
    assert var == 12500.0  # population variance
    assert report.mae == pytest.approx((0 + 200) / 2)
    assert report.mape == pytest.approx((0 + 400) / 2)
    assert report.avg_sigma == pytest.approx(math.sqrt(12500.0))


def test_gaussian_fit_variance_floor():
    mu, var, _ = gaussian_fit_baseline([5.0, 5.0])
    assert var == 1e-6


def test_size_estimation_independent(small_scenes):
    train, test = small_scenes[:4], small_scenes[4:]
    report = size_estimation_baseline(train, test)
    total = 0.0
    pixels = 0
    for s in train:
        for k in range(1, s.region_count + 1):
            total += float(s.labels[k - 1])
            pixels += int((s.mask == k).sum())
    rho = total / pixels
    errs, rel = [], []
    for s in test:
        for k in range(1, s.region_count + 1):
            pred = rho * (s.mask == k).sum()
            errs.append(abs(s.labels[k - 1] - pred))
            rel.append(abs(s.labels[k - 1] - pred) / s.labels[k - 1])
    assert report.extra["rho"] == pytest.approx(rho, rel=1e-14)
    assert report.mae == pytest.approx(np.mean(errs), rel=1e-12)
    assert report.mape == pytest.approx(100 * np.mean(rel), rel=1e-12)
    assert report.p_within is None


def test_uniform_disaggregation_exact_at_parcels(small_scenes):
    report = uniform_disaggregation_report(small_scenes)
    assert report.mae < 1e-9
    assert report.pixel_mae > 0


def tiny_checkpoint(method):
    head = {"deterministic": "deterministic", "poisson": "poisson"}.get(method, "gaussian")
    params = init_params(PredictorConfig(widths=(4, 8, 4), head=head)).astype(np.float32)
    return Checkpoint(params, method=method, label_scale=100.0, train_config=TrainConfig(method=method).to_dict())


def test_deterministic_report_has_na(small_scenes):
    report = evaluate(tiny_checkpoint("deterministic"), small_scenes)
    assert report.p_within is None and report.avg_sigma is None and report.mean_log_prob is None
    row = format_table([report]).splitlines()[2]
    assert row.count("NA") == 4
    assert report.pixel_mae is not None


def test_gaussian_report_fields(small_scenes):
    report = evaluate(tiny_checkpoint("analytical"), small_scenes)
    assert set(report.p_within) == {1e4, 1e5}
    assert report.avg_sigma > 0
    assert report.extra["label_scale"] == 100.0
    pixel = evaluate(tiny_checkpoint("analytical"), small_scenes, sigma_level="pixel")
    assert pixel.avg_sigma < report.avg_sigma


def test_method_head_mismatch(small_scenes):
    ck = tiny_checkpoint("deterministic")
    ck.method = "analytical"
    with pytest.raises(ConfigurationError):
        evaluate(ck, small_scenes)


def test_report_json_non_finite():
    report = MetricsReport(method="x", mae=float("nan"), mape=1.0, n_regions=1)
    data = json.loads(report.to_json())
    assert data["mae"] is None and data["p_within"] is None


def test_table_header():
    report = MetricsReport(method="M", mae=63311.0, mape=27.14, n_regions=3,
                           p_within={1e4: 0.145, 1e5: 0.8438}, avg_sigma=3547.0, mean_log_prob=-317.7)
    lines = format_table([report]).splitlines()
    assert lines[0].split()[:3] == ["Method", "MAE", "MAPE"]
    assert "$63,311" in lines[2] and "27.14%" in lines[2] and "14.50%" in lines[2] and "-317.70" in lines[2]
