"""Per-pixel probabilistic value maps learned from region-level sums."""

from .aggregate import (
    RegionGaussian,
    RegionIncidence,
    aggregate_gaussian,
    aggregate_poisson,
    aggregate_sum,
    aggregate_sum_backward,
    build_incidence,
)
from .estimator import (
    DisaggregationRegressor,
    GaussianFitBaseline,
    SizeEstimationBaseline,
    UniformDisaggregator,
)
from .evaluation import MetricsReport, evaluate
from .predictor import Checkpoint, PredictorConfig
from .scene import Sample, SceneConfig, generate_dataset, generate_scene
from .train import TrainConfig, train

__version__ = "0.1.0"
