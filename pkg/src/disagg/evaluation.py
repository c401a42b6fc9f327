"""Parcel-level metrics, non-trained baselines and checkpoint evaluation.

All reported quantities are in raw currency units; models trained on
scaled labels are unscaled before scoring.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erfc

from .aggregate import RegionGaussian, aggregate_gaussian, aggregate_poisson, aggregate_sum, build_incidence
from .exceptions import ConfigurationError, DomainError
from .objective import gaussian_nll_terms, poisson_nll
from .predictor import METHOD_HEADS, VAR_FLOOR, apply_head, forward

DEFAULT_THRESHOLDS = (1e4, 1e5)


def normal_cdf(x):
    """Standard normal CDF, ``0.5 * erfc(-x / sqrt(2))``."""
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / math.sqrt(2.0))


def point_metrics(labels, mu_star):
    """``(MAE, MAPE in percent)``; labels must be nonzero."""
    y = np.asarray(labels, dtype=np.float64)
    pred = np.asarray(mu_star, dtype=np.float64)
    if np.any(y == 0):
        raise DomainError("MAPE is undefined for zero-valued labels")
    err = np.abs(y - pred)
    return float(err.mean()), float(100.0 * np.mean(err / np.abs(y)))


def _check_var(rg):
    if not np.all(np.asarray(rg.var_star) > 0):
        raise DomainError("aggregated variance must be strictly positive")


def p_within(labels, rg, t):
    """Mean predicted probability that the value lies within ``+-t`` of the label."""
    _check_var(rg)
    if not t > 0:
        raise DomainError("threshold must be positive")
    y = np.asarray(labels, dtype=np.float64)
    sigma = np.sqrt(rg.var_star)
    hi = normal_cdf((y + t - rg.mu_star) / sigma)
    lo = normal_cdf((y - t - rg.mu_star) / sigma)
    return float(np.mean(hi - lo))


def mean_log_prob(labels, rg):
    """Mean log density of each label under its region's Gaussian."""
    _check_var(rg)
    per, _, _ = gaussian_nll_terms(labels, rg.mu_star, rg.var_star)
    return float(-per.mean())


@dataclass
class MetricsReport:
    """One row of the results table; ``None`` marks a not-applicable cell."""

    method: str
    mae: float
    mape: float
    n_regions: int
    p_within: dict | None = None
    avg_sigma: float | None = None
    mean_log_prob: float | None = None
    pixel_mae: float | None = None
    pixel_corr: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self):
        def clean(v):
            if isinstance(v, float) and not math.isfinite(v):
                return None
            return v

        return {
            "method": self.method,
            "mae": clean(self.mae),
            "mape": clean(self.mape),
            "p_within": None if self.p_within is None else {repr(float(t)): clean(p) for t, p in self.p_within.items()},
            "avg_sigma": clean(self.avg_sigma),
            "mean_log_prob": clean(self.mean_log_prob),
            "n_regions": self.n_regions,
            "pixel_mae": clean(self.pixel_mae),
            "pixel_corr": clean(self.pixel_corr),
            **({"extra": self.extra} if self.extra else {}),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _fmt_money(v):
    return "NA" if v is None else f"${v:,.0f}"


def _fmt_pct(v):
    return "NA" if v is None else f"{v:.2f}%"


def format_table(reports, thresholds=DEFAULT_THRESHOLDS):
    """Aligned text table with one row per report."""
    head = ["Method", "MAE", "MAPE"] + [f"P±({t:.0e})" for t in thresholds] + ["Average σ̂", "Log Prob (avg)"]
    rows = [head]
    for r in reports:
        probs = [
            "NA" if r.p_within is None or t not in r.p_within else _fmt_pct(100.0 * r.p_within[t])
            for t in thresholds
        ]
        lp = "NA" if r.mean_log_prob is None else f"{r.mean_log_prob:.2f}"
        rows.append([r.method, _fmt_money(r.mae), _fmt_pct(r.mape)] + probs + [_fmt_money(r.avg_sigma), lp])
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def gaussian_report(method, labels, rg, thresholds=DEFAULT_THRESHOLDS, **extra_fields):
    labels = np.asarray(labels, dtype=np.float64)
    mae, mape = point_metrics(labels, rg.mu_star)
    return MetricsReport(
        method=method,
        mae=mae,
        mape=mape,
        n_regions=int(labels.size),
        p_within={float(t): p_within(labels, rg, t) for t in thresholds},
        avg_sigma=float(np.mean(rg.sigma_star)),
        mean_log_prob=mean_log_prob(labels, rg),
        **extra_fields,
    )


def gaussian_fit_baseline(train_labels, test_labels=None, thresholds=DEFAULT_THRESHOLDS):
    """Maximum-likelihood Gaussian over training labels, used for every region.

    Returns ``(mu_hat, var_hat, report)``; ``report`` is ``None`` without
    test labels.  The variance is floored at ``VAR_FLOOR``.
    """
    y = np.asarray(train_labels, dtype=np.float64)
    if y.size < 2:
        raise DomainError("Gaussian fit needs at least two training labels")
    mu_hat = float(y.mean())
    var_hat = max(float(np.mean((y - mu_hat) ** 2)), VAR_FLOOR)
    report = None
    if test_labels is not None:
        t = np.asarray(test_labels, dtype=np.float64)
        rg = RegionGaussian(np.full(t.shape, mu_hat), np.full(t.shape, var_hat))
        report = gaussian_report("Gaussian Fit", t, rg, thresholds)
    return mu_hat, var_hat, report


def _pixel_stats(pairs):
    """Pooled pixel MAE and Pearson r over ``(prediction, oracle)`` arrays."""
    if not pairs:
        return None, None
    pred = np.concatenate([p for p, _ in pairs])
    truth = np.concatenate([o for _, o in pairs])
    mae = float(np.mean(np.abs(pred - truth)))
    if pred.std() == 0 or truth.std() == 0:
        corr = 1.0 if np.array_equal(pred, truth) else float("nan")
    else:
        corr = float(np.corrcoef(pred, truth)[0, 1])
    return mae, corr


def size_estimation_baseline(train_samples, test_samples):
    """Predict ``rho * |r_i|`` with ``rho`` the mean training value per pixel."""
    if not train_samples:
        raise DomainError("size estimation needs training samples")
    total = math.fsum(float(v) for s in train_samples for v in s.labels)
    area = sum(int(s.region_sizes().sum()) for s in train_samples)
    rho = total / area
    labels, preds, pixels = [], [], []
    for s in test_samples:
        labels.append(s.labels)
        preds.append(rho * s.region_sizes())
        if s.oracle is not None:
            covered = s.mask > 0
            pixels.append((np.full(int(covered.sum()), rho), s.oracle[covered]))
    y = np.concatenate(labels)
    mae, mape = point_metrics(y, np.concatenate(preds))
    pixel_mae, pixel_corr = _pixel_stats(pixels)
    return MetricsReport(
        method="Size Estimation", mae=mae, mape=mape, n_regions=int(y.size),
        pixel_mae=pixel_mae, pixel_corr=pixel_corr, extra={"rho": rho},
    )


def uniform_disaggregation_report(samples):
    """Spread each test label evenly over its region and score against the oracle.

    Parcel metrics are exact by construction; the pixel metrics show what a
    uniform-value assumption costs at pixel level.
    """
    labels, preds, pixels = [], [], []
    for s in samples:
        per_pixel = s.labels / s.region_sizes()
        value_map = np.concatenate([[0.0], per_pixel])[s.mask]
        labels.append(s.labels)
        preds.append(aggregate_sum(build_incidence(s.mask), value_map))
        if s.oracle is not None:
            covered = s.mask > 0
            pixels.append((value_map[covered], s.oracle[covered]))
    y = np.concatenate(labels)
    mae, mape = point_metrics(y, np.concatenate(preds))
    pixel_mae, pixel_corr = _pixel_stats(pixels)
    return MetricsReport(
        method="Uniform Disaggregation", mae=mae, mape=mape, n_regions=int(y.size),
        pixel_mae=pixel_mae, pixel_corr=pixel_corr,
    )


def predict_maps(checkpoint, chip):
    """Per-pixel maps in raw units: ``(mean, variance)``; variance is ``None``
    for the deterministic head and equals the rate for the Poisson head."""
    raw_mu, raw_s, _ = forward(checkpoint.params, chip)
    first, second = apply_head(raw_mu, raw_s, checkpoint.head)
    scale = checkpoint.label_scale
    if checkpoint.head == "gaussian":
        return first * scale, second * scale**2
    if checkpoint.head == "poisson":
        return first * scale, first * scale
    return first * scale, None


METHOD_NAMES = {
    "analytical": "Analytical",
    "sampling": "Sampling",
    "deterministic": "Deterministic",
    "uniform": "Uniform Value",
    "poisson": "Poisson",
}


def evaluate(checkpoint, samples, thresholds=DEFAULT_THRESHOLDS, sigma_level="region", method_name=None):
    """Score a checkpoint on ``samples`` at parcel level (and pixel level when
    oracle maps are present).

    ``sigma_level`` selects whether the average predicted standard deviation
    is taken over regions (``"region"``) or over labelled pixels (``"pixel"``).
    """
    expected = METHOD_HEADS.get(checkpoint.method)
    if expected is None or expected != checkpoint.head:
        raise ConfigurationError(
            f"checkpoint method {checkpoint.method!r} does not match its head {checkpoint.head!r}"
        )
    if sigma_level not in ("region", "pixel"):
        raise ConfigurationError("sigma_level must be 'region' or 'pixel'")
    labels, mus, variances, pixel_sigmas, pixels = [], [], [], [], []
    for s in samples:
        inc = build_incidence(s.mask)
        mu_map, var_map = predict_maps(checkpoint, s.chip)
        labels.append(s.labels)
        if checkpoint.head == "gaussian":
            rg = aggregate_gaussian(inc, mu_map, var_map)
            mus.append(rg.mu_star)
            variances.append(rg.var_star)
            pixel_sigmas.append(np.sqrt(var_map[s.mask > 0]))
        elif checkpoint.head == "poisson":
            lam = aggregate_poisson(inc, mu_map)
            mus.append(lam)
            variances.append(lam)
        else:
            mus.append(aggregate_sum(inc, mu_map))
        if s.oracle is not None:
            covered = s.mask > 0
            pixels.append((mu_map[covered], s.oracle[covered]))
    y = np.concatenate(labels)
    mu = np.concatenate(mus)
    pixel_mae, pixel_corr = _pixel_stats(pixels)
    name = method_name or METHOD_NAMES[checkpoint.method]
    if checkpoint.head == "gaussian":
        rg = RegionGaussian(mu, np.concatenate(variances))
        report = gaussian_report(
            name, y, rg, thresholds, pixel_mae=pixel_mae, pixel_corr=pixel_corr,
            extra={"label_scale": checkpoint.label_scale},
        )
        if sigma_level == "pixel":
            report.avg_sigma = float(np.mean(np.concatenate(pixel_sigmas)))
        return report
    mae, mape = point_metrics(y, mu)
    report = MetricsReport(
        method=name, mae=mae, mape=mape, n_regions=int(y.size), pixel_mae=pixel_mae, pixel_corr=pixel_corr,
        extra={"label_scale": checkpoint.label_scale},
    )
    if checkpoint.head == "poisson":
        report.avg_sigma = float(np.mean(np.sqrt(mu)))
        report.mean_log_prob = float(-poisson_nll(y, mu).per_region_loss.mean())
    return report
