"""scikit-learn style estimators over lists of :class:`~disagg.scene.Sample`.

``X`` is always a sequence of samples; region labels travel inside the
samples, so ``y`` is accepted for API compatibility and ignored.
"""

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .aggregate import RegionGaussian, aggregate_gaussian, aggregate_sum, build_incidence
from .evaluation import DEFAULT_THRESHOLDS, evaluate, gaussian_fit_baseline, predict_maps
from .exceptions import ConfigurationError
from .predictor import Checkpoint
from .scene import DatasetSplit, split_dataset
from .train import MergeConfig, TrainConfig, train
from .validation import check_chip


def check_samples(X, *, min_samples=1):
    """Validate a sequence of samples and return it as a list."""
    samples = list(X)
    if len(samples) < min_samples:
        raise ConfigurationError(f"expected at least {min_samples} samples, got {len(samples)}")
    for s in samples:
        if not hasattr(s, "validate"):
            raise ConfigurationError(f"expected Sample objects, got {type(s).__name__}")
        s.validate()
    return samples


class DisaggregationRegressor(BaseEstimator):
    """Per-pixel value model trained from region sums.

    ``method`` picks the objective: ``"analytical"`` (aggregated Gaussian
    NLL), ``"sampling"``, ``"deterministic"``, ``"uniform"`` or
    ``"poisson"``.  After :meth:`fit`, ``checkpoint_`` holds the selected
    parameters and ``log_`` the per-epoch history.
    """

    def __init__(
        self,
        method="analytical",
        epochs=300,
        learning_rate=1e-3,
        batch_size=8,
        label_scale=1000.0,
        lambda_reg=10.0,
        widths=(16, 32, 16),
        downsample_levels=1,
        merge=False,
        merge_per_epoch=True,
        density_cap=1000.0,
        augment_flips=False,
        uniform_loss="nll",
        val_frac=0.1,
        seed=0,
    ):
        self.method = method
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.label_scale = label_scale
        self.lambda_reg = lambda_reg
        self.widths = widths
        self.downsample_levels = downsample_levels
        self.merge = merge
        self.merge_per_epoch = merge_per_epoch
        self.density_cap = density_cap
        self.augment_flips = augment_flips
        self.uniform_loss = uniform_loss
        self.val_frac = val_frac
        self.seed = seed

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            method=self.method,
            label_scale=self.label_scale,
            lambda_reg=self.lambda_reg,
            uniform_loss=self.uniform_loss,
            merge=MergeConfig(enabled=self.merge, per_epoch=self.merge_per_epoch, density_cap=self.density_cap),
            augment_flips=self.augment_flips,
            predictor={"widths": list(self.widths), "downsample_levels": self.downsample_levels},
            val_frac=self.val_frac,
            test_frac=0.0,
            seed=self.seed,
        )

    def fit(self, X, y=None, X_val=None):
        """Train on ``X``; validate on ``X_val`` or on a ``val_frac`` hold-out of ``X``."""
        cfg = self._train_config()
        samples = check_samples(X)
        if X_val is None:
            split = split_dataset(samples, self.val_frac, 0.0, seed=self.seed)
            pool = samples
        else:
            val = check_samples(X_val)
            split = DatasetSplit(train=[s.id for s in samples], validation=[s.id for s in val])
            pool = samples + val
        self.checkpoint_, self.log_ = train(cfg, split, pool)
        self.n_features_in_ = samples[0].chip.shape[2]
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint):
        """Rebuild a fitted estimator around a saved checkpoint."""
        if not isinstance(checkpoint, Checkpoint):
            checkpoint = Checkpoint.load(checkpoint)
        cfg = TrainConfig.from_dict(checkpoint.train_config) if checkpoint.train_config else None
        est = cls(method=checkpoint.method, label_scale=checkpoint.label_scale)
        if cfg is not None:
            est.set_params(
                epochs=cfg.epochs, learning_rate=cfg.learning_rate, batch_size=cfg.batch_size,
                lambda_reg=cfg.lambda_reg, seed=cfg.seed, uniform_loss=cfg.uniform_loss,
                widths=tuple(checkpoint.params.config.widths),
                downsample_levels=checkpoint.params.config.downsample_levels,
            )
        est.checkpoint_ = checkpoint
        est.n_features_in_ = checkpoint.params.config.channels_in
        return est

    def predict_maps(self, chip):
        """Per-pixel ``(mean, variance)`` maps in label units for one chip."""
        check_is_fitted(self, "checkpoint_")
        return predict_maps(self.checkpoint_, check_chip(chip))

    def transform(self, X):
        """Mean value map of every sample."""
        return [self.predict_maps(s.chip)[0] for s in check_samples(X)]

    def predict(self, X):
        """Predicted value of every region, one array per sample."""
        out = []
        for s in check_samples(X):
            mu_map, _ = self.predict_maps(s.chip)
            out.append(aggregate_sum(build_incidence(s.mask), mu_map))
        return out

    def predict_distribution(self, X):
        """Aggregated :class:`RegionGaussian` per sample (Gaussian heads only)."""
        check_is_fitted(self, "checkpoint_")
        if self.checkpoint_.head != "gaussian":
            raise ConfigurationError(f"method {self.checkpoint_.method!r} has no Gaussian output")
        out = []
        for s in check_samples(X):
            mu_map, var_map = self.predict_maps(s.chip)
            out.append(aggregate_gaussian(build_incidence(s.mask), mu_map, var_map))
        return out

    def evaluate(self, X, thresholds=DEFAULT_THRESHOLDS):
        check_is_fitted(self, "checkpoint_")
        return evaluate(self.checkpoint_, check_samples(X), thresholds)

    def score(self, X, y=None):
        """Negative parcel-level MAE (higher is better)."""
        return -self.evaluate(X).mae


class GaussianFitBaseline(BaseEstimator):
    """Every region is predicted as the ML Gaussian of the training labels."""

    def fit(self, X, y=None):
        labels = np.concatenate([s.labels for s in check_samples(X)])
        self.mu_, self.var_, _ = gaussian_fit_baseline(labels)
        return self

    def predict(self, X):
        check_is_fitted(self, "mu_")
        return [np.full(s.region_count, self.mu_) for s in check_samples(X)]

    def predict_distribution(self, X):
        check_is_fitted(self, "mu_")
        return [
            RegionGaussian(np.full(s.region_count, self.mu_), np.full(s.region_count, self.var_))
            for s in check_samples(X)
        ]


class SizeEstimationBaseline(BaseEstimator):
    """Constant value per pixel, the training mean ``rho``."""

    def fit(self, X, y=None):
        samples = check_samples(X)
        self.rho_ = float(sum(s.labels.sum() for s in samples) / sum(s.region_sizes().sum() for s in samples))
        return self

    def transform(self, X):
        check_is_fitted(self, "rho_")
        return [np.where(s.mask > 0, self.rho_, 0.0) for s in check_samples(X)]

    def predict(self, X):
        check_is_fitted(self, "rho_")
        return [self.rho_ * s.region_sizes() for s in check_samples(X)]


class UniformDisaggregator(TransformerMixin, BaseEstimator):
    """Spread each region's label evenly over its pixels (needs the labels)."""

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        out = []
        for s in check_samples(X):
            per_pixel = s.labels / s.region_sizes()
            out.append(np.concatenate([[0.0], per_pixel])[s.mask])
        return out
