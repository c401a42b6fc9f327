"""Training loop: Adam updates, method dispatch, validation-based selection."""

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .aggregate import aggregate_gaussian, aggregate_poisson, aggregate_sum, build_incidence
from .exceptions import ConfigurationError, ContractError, NumericalError
from .objective import (
    check_counts,
    gaussian_nll,
    mse_loss,
    pixel_gaussian_nll,
    pixel_mse,
    poisson_nll,
    sampling_objective,
)
from .predictor import (
    METHOD_HEADS,
    Checkpoint,
    PredictorConfig,
    apply_head,
    backward,
    forward,
    head_backward,
    init_params,
)
from .scene import flip_augment, merge_regions
from .exceptions import DomainError

logger = logging.getLogger(__name__)

METHODS = tuple(METHOD_HEADS)


@dataclass
class MergeConfig:
    enabled: bool = False
    per_epoch: bool = True
    density_cap: float | None = 1000.0


@dataclass
class TrainConfig:
    """Every knob of a training run; serializes to the run-config JSON.

    ``lambda_reg`` is the entropy weight in scaled label units; the default
    of 10 corresponds to 1e7 on raw labels at ``label_scale = 1000``.
    """

    epochs: int = 300
    learning_rate: float = 1e-3
    batch_size: int = 8
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    method: str = "analytical"
    label_scale: float = 1000.0
    lambda_reg: float = 10.0
    uniform_loss: str = "nll"
    grad_clip: float = 1e3
    merge: MergeConfig = field(default_factory=MergeConfig)
    augment_flips: bool = False
    normalization: str = "unit"
    predictor: dict = field(default_factory=lambda: {"widths": [16, 32, 16], "downsample_levels": 1})
    val_frac: float = 0.1
    test_frac: float = 0.1
    drop_zero_value: bool = True
    max_density: float | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.merge, dict):
            self.merge = MergeConfig(**self.merge)
        self.betas = tuple(self.betas)
        self.validate()

    def validate(self):
        if not isinstance(self.epochs, (int, np.integer)) or self.epochs < 0:
            raise ConfigurationError(f"epochs must be a nonnegative integer, got {self.epochs!r}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate!r}")
        if not isinstance(self.batch_size, (int, np.integer)) or self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be a positive integer, got {self.batch_size!r}")
        if self.method not in METHODS:
            raise ConfigurationError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.label_scale > 0:
            raise ConfigurationError(f"label_scale must be positive, got {self.label_scale!r}")
        if self.uniform_loss not in ("nll", "mse"):
            raise ConfigurationError("uniform_loss must be 'nll' or 'mse'")
        if self.normalization != "unit":
            raise ConfigurationError("normalization must be 'unit' (scaling to [0, 1])")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigurationError(f"betas must be two values in [0, 1), got {self.betas!r}")
        if self.lambda_reg < 0:
            raise ConfigurationError("lambda_reg must be >= 0")
        return self

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in names:
                raise ConfigurationError(f"unknown train config field '{key}'")
        data = dict(data)
        if isinstance(data.get("merge"), dict):
            merge_names = {f.name for f in dataclasses.fields(MergeConfig)}
            for key in data["merge"]:
                if key not in merge_names:
                    raise ConfigurationError(f"unknown train config field 'merge.{key}'")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from exc

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @property
    def effective_label_scale(self):
        return 1.0 if self.method == "poisson" else float(self.label_scale)

    def predictor_config(self, channels_in):
        extra = dict(self.predictor)
        for key in ("head", "seed", "channels_in"):
            extra.pop(key, None)
        try:
            return PredictorConfig(
                channels_in=channels_in, seed=self.seed, head=METHOD_HEADS[self.method], **extra
            )
        except TypeError as exc:
            raise ConfigurationError(f"invalid predictor field: {exc}") from exc


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)``.

    ``params`` and ``grads`` are :class:`Parameters` (or plain dicts) with
    matching names and shapes.  Inputs are not modified.
    """
    p_arrays = getattr(params, "arrays", params)
    g_arrays = getattr(grads, "arrays", grads)
    if p_arrays.keys() != g_arrays.keys():
        raise ContractError("gradient names do not match parameter names")
    b1, b2 = betas
    t = state.step + 1
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in p_arrays.items():
        g = np.asarray(g_arrays[name], dtype=np.float64)
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name, np.zeros(p.shape))
        v = state.v.get(name, np.zeros(p.shape))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[name] = m
        new_v[name] = v
    state = AdamState(new_m, new_v, t)
    if hasattr(params, "arrays"):
        return dataclasses.replace(params, arrays=new_p), state
    return new_p, state


def uniform_label_targets(sample):
    """Spread each region's label evenly over its pixels; background is 0."""
    per_pixel = sample.labels / sample.region_sizes()
    return np.concatenate([[0.0], per_pixel])[sample.mask]


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, epoch, train_loss, val_mae):
        self.rows.append((int(epoch), float(train_loss), float(val_mae)))

    @property
    def val_mae(self):
        return [r[2] for r in self.rows]

    @property
    def train_loss(self):
        return [r[1] for r in self.rows]

    def to_csv(self):
        lines = ["epoch,train_loss,val_mae"]
        lines += [f"{e},{repr(l)},{repr(v)}" for e, l, v in self.rows]
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv())


@dataclass(eq=False)
class _Prepared:
    sample: object
    inc: object
    labels: np.ndarray
    covered: np.ndarray
    targets: np.ndarray | None


def _prepare(sample, scale, method):
    targets = uniform_label_targets(sample) / scale if method == "uniform" else None
    return _Prepared(
        sample=sample,
        inc=build_incidence(sample.mask),
        labels=sample.labels / scale,
        covered=sample.mask > 0,
        targets=targets,
    )


def _seed(*parts):
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def sample_loss(cfg, prep, raw_mu, raw_s, noise_seed=0):
    """Loss of one sample and gradients w.r.t. its raw output maps."""
    head = METHOD_HEADS[cfg.method]
    first, second = apply_head(raw_mu, raw_s, head)
    method = cfg.method
    if method == "analytical":
        res = gaussian_nll(prep.labels, aggregate_gaussian(prep.inc, first, second), prep.inc)
    elif method == "sampling":
        res = sampling_objective(
            prep.labels, first, second, prep.inc, cfg.lambda_reg, seed=noise_seed, sample_id=prep.sample.id
        )
    elif method == "deterministic":
        res = mse_loss(prep.labels, aggregate_sum(prep.inc, first), prep.inc)
    elif method == "uniform":
        if cfg.uniform_loss == "nll":
            res = pixel_gaussian_nll(prep.targets, first, second, prep.covered)
        else:
            res = pixel_mse(prep.targets, first, prep.covered)
    else:
        res = poisson_nll(prep.labels, aggregate_poisson(prep.inc, first), prep.inc)
    d_second = res.d_var_map if res.d_var_map is not None else np.zeros(np.shape(raw_s))
    d_mu, d_s = head_backward(raw_mu, raw_s, res.d_mu_map, d_second, head)
    return res.loss, d_mu, d_s


def _batches(items, size):
    for start in range(0, len(items), size):
        yield items[start:start + size]


def _groups_by_shape(batch):
    groups = {}
    for prep in batch:
        groups.setdefault(prep.sample.chip.shape, []).append(prep)
    return list(groups.values())


def _clip(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.arrays.values()))
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        grads.arrays = {k: g * factor for k, g in grads.arrays.items()}
    return norm


def batch_step(cfg, params, batch, noise_seed=0):
    """Summed loss and parameter gradients over a batch of prepared samples."""
    total = 0.0
    grads = None
    for group in _groups_by_shape(batch):
        chips = np.stack([p.sample.chip for p in group])
        raw_mu, raw_s, cache = forward(params, chips)
        d_mu = np.zeros_like(raw_mu)
        d_s = np.zeros_like(raw_s)
        for k, prep in enumerate(group):
            loss, d_mu[k], d_s[k] = sample_loss(cfg, prep, raw_mu[k], raw_s[k], noise_seed)
            total += loss
        g = backward(params, cache, d_mu, d_s)
        if grads is None:
            grads = g
        else:
            grads.arrays = {k: grads.arrays[k] + g.arrays[k] for k in grads.arrays}
    return total, grads


def region_means(params, head, preps, batch_size=16):
    """Aggregated mean prediction per region for every prepared sample (scaled units)."""
    out = []
    for chunk in _batches(preps, batch_size):
        for group in _groups_by_shape(chunk):
            raw_mu, raw_s, _ = forward(params, np.stack([p.sample.chip for p in group]))
            for k, prep in enumerate(group):
                first, _ = apply_head(raw_mu[k], raw_s[k], head)
                out.append(aggregate_sum(prep.inc, first))
    return out


def validation_mae(params, head, preps, scale):
    if not preps:
        return float("nan")
    preds = region_means(params, head, preps)
    err = np.concatenate([np.abs(p - q.labels) for p, q in zip(preds, preps)])
    return float(err.mean() * scale)


def train(cfg, split, samples, progress=None):
    """Fit a predictor and return ``(best checkpoint, log)``.

    The checkpoint with the lowest validation MAE (raw currency) is kept;
    candidates are the float32-rounded parameters after each epoch, so the
    returned checkpoint reproduces its recorded metric exactly.
    """
    cfg.validate()
    by_id = {s.id: s for s in samples}
    train_set = [by_id[i] for i in split.train]
    val_set = [by_id[i] for i in split.validation]
    if not train_set or not val_set:
        raise ConfigurationError("training needs non-empty train and validation splits")
    if cfg.method == "poisson":
        try:
            for s in train_set + val_set:
                check_counts(s.labels)
        except DomainError as exc:
            raise ConfigurationError(f"poisson method requires count labels: {exc}") from exc
    scale = cfg.effective_label_scale
    channels = {s.chip.shape[2] for s in train_set + val_set}
    if len(channels) != 1:
        raise ConfigurationError("all chips must have the same number of channels")
    pcfg = cfg.predictor_config(channels.pop())
    head = pcfg.head
    params = init_params(pcfg)
    state = AdamState()

    if cfg.merge.enabled:
        val_set = [merge_regions(s, _seed(cfg.seed, 0xFA1, i), cfg.merge.density_cap) for i, s in enumerate(val_set)]
        if not cfg.merge.per_epoch:
            train_set = [
                merge_regions(s, _seed(cfg.seed, 0x3E6, i), cfg.merge.density_cap) for i, s in enumerate(train_set)
            ]
    val_preps = [_prepare(s, scale, cfg.method) for s in val_set]
    static_preps = None
    if not (cfg.merge.enabled and cfg.merge.per_epoch) and not cfg.augment_flips:
        static_preps = [_prepare(s, scale, cfg.method) for s in train_set]

    log = TrainLog()

    def snapshot(p):
        return p.astype(np.float32)

    best = snapshot(params)
    best_epoch = 0
    best_mae = validation_mae(best, head, val_preps, scale) if cfg.epochs == 0 else math.inf

    for epoch in range(1, cfg.epochs + 1):
        if static_preps is not None:
            preps = static_preps
        else:
            epoch_set = []
            for i, s in enumerate(train_set):
                if cfg.merge.enabled and cfg.merge.per_epoch:
                    s = merge_regions(s, _seed(cfg.seed, epoch, i, 1), cfg.merge.density_cap)
                if cfg.augment_flips:
                    s = flip_augment(s, _seed(cfg.seed, epoch, i, 2))
                epoch_set.append(s)
            preps = [_prepare(s, scale, cfg.method) for s in epoch_set]
        order = np.random.default_rng(_seed(cfg.seed, epoch)).permutation(len(preps))
        preps = [preps[i] for i in order]
        epoch_loss = 0.0
        for b, batch in enumerate(_batches(preps, cfg.batch_size)):
            loss, grads = batch_step(cfg, params, batch, noise_seed=_seed(cfg.seed, epoch, b, 3))
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.arrays.values()):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            _clip(grads, cfg.grad_clip)
            params, state = adam_step(params, grads, state, cfg.learning_rate, cfg.betas, cfg.eps)
            epoch_loss += loss
        candidate = snapshot(params)
        val_mae = validation_mae(candidate, head, val_preps, scale)
        log.append(epoch, epoch_loss / len(preps), val_mae)
        if progress is not None:
            progress(epoch, epoch_loss / len(preps), val_mae)
        if val_mae < best_mae:
            best, best_mae, best_epoch = candidate, val_mae, epoch

    ckpt = Checkpoint(
        params=best,
        method=cfg.method,
        label_scale=scale,
        epoch=best_epoch,
        validation_metric=best_mae if math.isfinite(best_mae) else None,
        train_config=cfg.to_dict(),
    )
    return ckpt, log
