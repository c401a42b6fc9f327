"""Losses over aggregated regions and their exact pixel-map gradients.

Every loss is a sum over regions (never a mean).  Region-level derivatives
are scattered back to pixel maps through the transpose of the aggregation
layer.
"""

import math
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .aggregate import aggregate_sum, aggregate_sum_backward
from .exceptions import DomainError, ShapeError

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)


@dataclass(eq=False)
class LossResult:
    """Scalar loss with gradients w.r.t. the pixel maps that produced it.

    ``d_mu_map`` is the gradient for the first map (mean, value or rate);
    ``d_var_map`` for the variance map, or ``None`` when there is none.
    """

    loss: float
    d_mu_map: np.ndarray
    d_var_map: np.ndarray | None
    per_region_loss: np.ndarray
    d_region: np.ndarray | None = None
    d_region_var: np.ndarray | None = None


def _labels(labels, n):
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    return y


def gaussian_nll_terms(labels, mu_star, var_star):
    """Per-region NLL of ``labels`` under ``N(mu_star, var_star)`` and its partials."""
    y = np.asarray(labels, dtype=np.float64)
    mu = np.asarray(mu_star, dtype=np.float64)
    var = np.asarray(var_star, dtype=np.float64)
    if not np.all(var > 0):
        raise DomainError("aggregated variance must be strictly positive")
    resid = y - mu
    per = HALF_LOG_2PI + 0.5 * np.log(var) + resid**2 / (2.0 * var)
    d_mu = -resid / var
    d_var = 0.5 * (1.0 / var - resid**2 / var**2)
    return per, d_mu, d_var


def gaussian_nll(labels, rg, inc):
    """Sum over regions of ``-log N(y_i; mu*_i, var*_i)``."""
    y = _labels(labels, inc.n_regions)
    per, d_mu, d_var = gaussian_nll_terms(y, rg.mu_star, rg.var_star)
    return LossResult(
        loss=float(per.sum()),
        d_mu_map=aggregate_sum_backward(inc, d_mu),
        d_var_map=aggregate_sum_backward(inc, d_var),
        per_region_loss=per,
        d_region=d_mu,
        d_region_var=d_var,
    )


def mse_loss(labels, region_preds, inc):
    """Sum of squared region errors, ``sum_i (y_i - yhat_i)^2``."""
    y = _labels(labels, inc.n_regions)
    pred = np.asarray(region_preds, dtype=np.float64)
    if pred.shape != y.shape:
        raise ShapeError(f"expected {y.shape[0]} predictions, got shape {pred.shape}")
    resid = y - pred
    per = resid**2
    d = -2.0 * resid
    return LossResult(
        loss=float(per.sum()),
        d_mu_map=aggregate_sum_backward(inc, d),
        d_var_map=None,
        per_region_loss=per,
        d_region=d,
    )


def check_counts(labels):
    y = np.asarray(labels, dtype=np.float64)
    if np.any(y < 0) or np.any(y != np.floor(y)) or not np.all(np.isfinite(y)):
        raise DomainError("Poisson labels must be nonnegative integers")
    return y


def poisson_nll(count_labels, lambda_star, inc=None):
    """Sum over regions of ``lambda - y log(lambda) + log(y!)``.

    With ``inc`` the rate gradient is also scattered to a pixel map.
    """
    y = check_counts(count_labels)
    lam = np.asarray(lambda_star, dtype=np.float64)
    if lam.shape != y.shape:
        raise ShapeError(f"expected {y.shape[0]} rates, got shape {lam.shape}")
    if not np.all(lam > 0):
        raise DomainError("aggregated Poisson rate must be strictly positive")
    per = lam - y * np.log(lam) + gammaln(y + 1.0)
    d = 1.0 - y / lam
    d_map = aggregate_sum_backward(inc, d) if inc is not None else None
    return LossResult(loss=float(per.sum()), d_mu_map=d_map, d_var_map=None, per_region_loss=per, d_region=d)


def gaussian_entropy(var_map, mask=None):
    """Total differential entropy of independent per-pixel Gaussians.

    Only pixels where ``mask`` is true contribute; returns ``(H, dH/dvar)``.
    """
    var = np.asarray(var_map, dtype=np.float64)
    if mask is None:
        mask = np.ones(var.shape, dtype=bool)
    if not np.all(var[mask] > 0):
        raise DomainError("variance must be strictly positive")
    safe = np.where(mask, var, 1.0)
    ent = np.where(mask, HALF_LOG_2PIE + 0.5 * np.log(safe), 0.0)
    grad = np.where(mask, 0.5 / safe, 0.0)
    return float(ent.sum()), grad


def pixel_noise(shape, seed, sample_id=""):
    """Standard normal noise keyed on ``(seed, sample_id)``; pixel order is row-major."""
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(str(sample_id).encode())])
    return np.random.default_rng(key).standard_normal(shape)


def sampling_objective(labels, mu_map, var_map, inc, lambda_reg, seed=0, noise=None, sample_id=""):
    """Reparameterized-sample MSE minus ``lambda_reg`` times pixel entropy.

    Draws ``v = mu + sigma * eps`` per pixel, aggregates ``v`` over regions
    and scores it with squared error.  ``noise`` overrides the seeded draw.
    Entropy counts only pixels that belong to a region.
    """
    mu = np.asarray(mu_map, dtype=np.float64)
    var = np.asarray(var_map, dtype=np.float64)
    covered = inc.covered()
    if not np.all(var[covered] > 0):
        raise DomainError("variance must be strictly positive")
    eps = pixel_noise(var.shape, seed, sample_id) if noise is None else np.asarray(noise, dtype=np.float64)
    sigma = np.sqrt(np.where(covered, var, 1.0))
    sampled = mu + sigma * eps
    fit = mse_loss(labels, aggregate_sum(inc, sampled), inc)
    ent, d_ent = gaussian_entropy(var, covered)
    g = fit.d_mu_map
    d_var = np.where(covered, g * eps / (2.0 * sigma), 0.0) - lambda_reg * d_ent
    return LossResult(
        loss=fit.loss - lambda_reg * ent,
        d_mu_map=g,
        d_var_map=d_var,
        per_region_loss=fit.per_region_loss,
        d_region=fit.d_region,
    )


def pixel_gaussian_nll(targets, mu_map, var_map, mask):
    """Per-pixel Gaussian NLL summed over ``mask`` (uniform-value baseline)."""
    t = np.asarray(targets, dtype=np.float64)[mask]
    per, d_mu, d_var = gaussian_nll_terms(t, np.asarray(mu_map)[mask], np.asarray(var_map)[mask])
    dm = np.zeros(mask.shape)
    dv = np.zeros(mask.shape)
    dm[mask] = d_mu
    dv[mask] = d_var
    return LossResult(loss=float(per.sum()), d_mu_map=dm, d_var_map=dv, per_region_loss=per)


def pixel_mse(targets, value_map, mask):
    t = np.asarray(targets, dtype=np.float64)
    resid = np.where(mask, t - value_map, 0.0)
    per = resid[mask] ** 2
    return LossResult(loss=float(per.sum()), d_mu_map=-2.0 * resid, d_var_map=None, per_region_loss=per)
