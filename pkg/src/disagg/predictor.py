"""Small encoder-decoder with an exact hand-derived backward pass.

Layout for ``downsample_levels = L`` and ``widths = [e_0 .. e_{L-1}, m,
d_{L-1} .. d_0]``::

    x -> [conv3x3 + ReLU -> skip_l -> avgpool2] * L
      -> conv3x3 + ReLU
      -> [upsample2 -> conv3x3 + ReLU -> + skip_l] * L
      -> conv1x1 -> (raw_mu, raw_s)

Convolutions use zero padding so every output map has the input's spatial
resolution.  Chips are channels-last, ``(H, W, C)``.
"""

import dataclasses
import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, ContractError, LoadError, ShapeError

HEADS = ("gaussian", "deterministic", "poisson")
METHOD_HEADS = {
    "analytical": "gaussian",
    "sampling": "gaussian",
    "uniform": "gaussian",
    "deterministic": "deterministic",
    "poisson": "poisson",
}
VAR_FLOOR = 1e-6
SOFTPLUS_SWITCH = 30.0
VAR_BIAS_INIT = math.log(math.e - 1.0)


@dataclass
class PredictorConfig:
    channels_in: int = 3
    widths: tuple = (16, 32, 16)
    downsample_levels: int = 1
    out_channels: int = 2
    seed: int = 0
    head: str = "gaussian"

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.validate()

    def validate(self):
        L = self.downsample_levels
        if L < 0:
            raise ConfigurationError("downsample_levels must be >= 0")
        if not self.widths or min(self.widths) < 1:
            raise ConfigurationError("widths must be a non-empty list of positive integers")
        if len(self.widths) != 2 * L + 1:
            raise ConfigurationError(
                f"widths needs 2*downsample_levels+1 = {2 * L + 1} entries, got {len(self.widths)}"
            )
        for level in range(L):
            if self.widths[level] != self.widths[-1 - level]:
                raise ConfigurationError(
                    f"decoder width {self.widths[-1 - level]} must equal encoder width "
                    f"{self.widths[level]} at level {level} (additive skip)"
                )
        if self.out_channels != 2:
            raise ConfigurationError("out_channels must be 2")
        if self.head not in HEADS:
            raise ConfigurationError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.channels_in < 1:
            raise ConfigurationError("channels_in must be positive")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in names:
                raise ConfigurationError(f"unknown predictor config field '{key}'")
        return cls(**data)

    def layer_shapes(self):
        """Ordered ``(name, shape)`` of every parameter block."""
        L = self.downsample_levels
        w = self.widths
        shapes = []
        cin = self.channels_in
        for level in range(L):
            shapes += [(f"enc{level}.w", (w[level], cin, 3, 3)), (f"enc{level}.b", (w[level],))]
            cin = w[level]
        shapes += [("mid.w", (w[L], cin, 3, 3)), ("mid.b", (w[L],))]
        cin = w[L]
        for level in reversed(range(L)):
            cout = w[2 * L - level]
            shapes += [(f"dec{level}.w", (cout, cin, 3, 3)), (f"dec{level}.b", (cout,))]
            cin = cout
        shapes += [("head.w", (self.out_channels, cin, 1, 1)), ("head.b", (self.out_channels,))]
        return shapes


@dataclass(eq=False)
class Parameters:
    """Named parameter arrays in declaration order."""

    config: PredictorConfig
    arrays: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    @property
    def count(self):
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self):
        return Parameters(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype):
        return Parameters(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def flat(self):
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def zeros_like(self):
        return Parameters(self.config, {k: np.zeros_like(v, dtype=np.float64) for k, v in self.arrays.items()})


def init_params(cfg):
    """Seeded He-style uniform kernels, zero biases, variance bias at softplus^-1(1)."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    arrays = {}
    for name, shape in cfg.layer_shapes():
        if name.endswith(".w"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = math.sqrt(2.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    arrays["head.b"][1] = VAR_BIAS_INIT
    return Parameters(cfg, arrays)


def _kernel_matrix(w):
    # (Cout, Cin, 3, 3) -> (Cout, 9 * Cin), feature order (kh, kw, Cin) to match the patches.
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _conv3(x, w, b):
    c, n, h, wd = x.shape
    xp = np.zeros((c, n, h + 2, wd + 2))
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((9, c, n, h, wd))
    for k in range(9):
        i, j = divmod(k, 3)
        cols[k] = xp[:, :, i:i + h, j:j + wd]
    cols = cols.reshape(9 * c, n * h * wd)
    out = _kernel_matrix(w) @ cols + b[:, None]
    return out.reshape(-1, n, h, wd), cols


def _conv3_backward(dout, cols, x_shape, w, need_dx=True):
    c, n, h, wd = x_shape
    d = dout.reshape(w.shape[0], -1)
    dw = (d @ cols.T).reshape(w.shape[0], 3, 3, c).transpose(0, 3, 1, 2)
    db = d.sum(axis=1)
    if not need_dx:
        return None, dw, db
    dcols = (_kernel_matrix(w).T @ d).reshape(9, c, n, h, wd)
    dxp = np.zeros((c, n, h + 2, wd + 2))
    for k in range(9):
        i, j = divmod(k, 3)
        dxp[:, :, i:i + h, j:j + wd] += dcols[k]
    return dxp[:, :, 1:-1, 1:-1], dw, db


def _pool(x):
    c, n, h, w = x.shape
    return x.reshape(c, n, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def _pool_backward(g):
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25


def _upsample(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _upsample_backward(g):
    c, n, h, w = g.shape
    return g.reshape(c, n, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def _as_batch(params, chip):
    x = np.asarray(chip, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ShapeError(f"chip must be HxWxC or NxHxWxC, got shape {x.shape}")
    cfg = params.config
    if x.shape[3] != cfg.channels_in:
        raise ShapeError(f"chip has {x.shape[3]} channels, predictor expects {cfg.channels_in}")
    step = 2 ** cfg.downsample_levels
    if x.shape[1] % step or x.shape[2] % step:
        raise ShapeError(f"chip sides {x.shape[1:3]} must be divisible by {step}")
    return x, single


def forward(params, chip):
    """Raw two-channel output at input resolution.

    Accepts one chip ``(H, W, C)`` or a batch ``(N, H, W, C)``; returns
    ``(raw_mu, raw_s, cache)`` with maps shaped ``(H, W)`` or ``(N, H, W)``.
    """
    x, single = _as_batch(params, chip)
    # Internally channel-major, (C, N, H, W), so shifted patch copies are contiguous rows.
    x = np.ascontiguousarray(x.transpose(3, 0, 1, 2))
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.arrays.items()}
    L = params.config.downsample_levels
    layers = {}
    skips = []
    a = x
    for level in range(L):
        z, cols = _conv3(a, p[f"enc{level}.w"], p[f"enc{level}.b"])
        layers[f"enc{level}"] = (cols, a.shape, z > 0)
        a = np.maximum(z, 0.0)
        skips.append(a)
        a = _pool(a)
    z, cols = _conv3(a, p["mid.w"], p["mid.b"])
    layers["mid"] = (cols, a.shape, z > 0)
    a = np.maximum(z, 0.0)
    for level in reversed(range(L)):
        u = _upsample(a)
        z, cols = _conv3(u, p[f"dec{level}.w"], p[f"dec{level}.b"])
        layers[f"dec{level}"] = (cols, u.shape, z > 0)
        a = np.maximum(z, 0.0) + skips[level]
    c, n, h, w = a.shape
    out = p["head.w"].reshape(2, -1) @ a.reshape(c, -1) + p["head.b"][:, None]
    out = out.reshape(2, n, h, w)
    cache = {
        "arrays": list(params.arrays.values()),
        "layers": layers,
        "features": a,
        "single": single,
        "out_shape": (n, h, w),
    }
    raw_mu, raw_s = out[0], out[1]
    if single:
        raw_mu, raw_s = raw_mu[0], raw_s[0]
    return raw_mu, raw_s, cache


def backward(params, cache, d_raw_mu, d_raw_s):
    """Gradient of ``sum(d_raw_mu * raw_mu + d_raw_s * raw_s)`` for every parameter."""
    current = list(params.arrays.values())
    if len(current) != len(cache["arrays"]) or any(a is not b for a, b in zip(current, cache["arrays"])):
        raise ContractError("forward cache does not belong to these parameters")
    d_mu = np.asarray(d_raw_mu, dtype=np.float64)
    d_s = np.asarray(d_raw_s, dtype=np.float64)
    if cache["single"]:
        d_mu, d_s = d_mu[None], d_s[None]
    if d_mu.shape != cache["out_shape"] or d_s.shape != cache["out_shape"]:
        raise ContractError(
            f"upstream gradient shape {d_mu.shape[-2:]} does not match forward output"
        )
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.arrays.items()}
    L = params.config.downsample_levels
    layers = cache["layers"]
    grads = {}

    feats = cache["features"]
    c = feats.shape[0]
    d2 = np.stack([d_mu, d_s]).reshape(2, -1)
    grads["head.w"] = (d2 @ feats.reshape(c, -1).T).reshape(p["head.w"].shape)
    grads["head.b"] = d2.sum(axis=1)
    da = (p["head.w"].reshape(2, -1).T @ d2).reshape(feats.shape)

    dskips = [None] * L
    for level in range(L):
        dskips[level] = da
        cols, in_shape, active = layers[f"dec{level}"]
        du, grads[f"dec{level}.w"], grads[f"dec{level}.b"] = _conv3_backward(
            da * active, cols, in_shape, p[f"dec{level}.w"]
        )
        da = _upsample_backward(du)

    cols, in_shape, active = layers["mid"]
    da, grads["mid.w"], grads["mid.b"] = _conv3_backward(
        da * active, cols, in_shape, p["mid.w"], need_dx=L > 0
    )
    for level in reversed(range(L)):
        da = _pool_backward(da) + dskips[level]
        cols, in_shape, active = layers[f"enc{level}"]
        da, grads[f"enc{level}.w"], grads[f"enc{level}.b"] = _conv3_backward(
            da * active, cols, in_shape, p[f"enc{level}.w"], need_dx=level > 0
        )
    return Parameters(params.config, {name: grads[name] for name in params.arrays})


def softplus(x):
    """``log(1 + exp(x))`` without overflow: ``x + log1p(exp(-x))`` above 30."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    big = x > SOFTPLUS_SWITCH
    out[big] = x[big] + np.log1p(np.exp(-x[big]))
    small = ~big
    out[small] = np.log1p(np.exp(x[small]))
    return out


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def positive_head(raw):
    """``max(softplus(raw), VAR_FLOOR)``; strictly positive for finite input."""
    return np.maximum(softplus(raw), VAR_FLOOR)


def positive_head_grad(raw):
    return np.where(softplus(raw) > VAR_FLOOR, sigmoid(raw), 0.0)


def apply_head(raw_mu, raw_s, head_kind):
    """Map raw outputs to distribution parameters.

    gaussian: ``(mu, var)``; poisson: ``(rate, None)``; deterministic:
    ``(value, None)``.
    """
    if head_kind == "gaussian":
        return np.asarray(raw_mu, dtype=np.float64), positive_head(raw_s)
    if head_kind == "poisson":
        return positive_head(raw_mu), None
    if head_kind == "deterministic":
        return np.asarray(raw_mu, dtype=np.float64), None
    raise ConfigurationError(f"unknown head {head_kind!r}")


def head_backward(raw_mu, raw_s, d_first, d_second, head_kind):
    """Chain upstream map gradients through :func:`apply_head`."""
    zeros = np.zeros(np.shape(raw_mu))
    if head_kind == "gaussian":
        return np.asarray(d_first, dtype=np.float64), d_second * positive_head_grad(raw_s)
    if head_kind == "poisson":
        return d_first * positive_head_grad(raw_mu), zeros
    if head_kind == "deterministic":
        return np.asarray(d_first, dtype=np.float64), zeros
    raise ConfigurationError(f"unknown head {head_kind!r}")


# -- checkpoints -------------------------------------------------------------

MAGIC = b"DSGCKPT\x00"
CHECKPOINT_VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    """Trained parameters plus everything needed to use them.

    ``params`` hold float32 arrays so that a save/load cycle is exact.
    """

    params: Parameters
    method: str
    label_scale: float = 1000.0
    epoch: int = 0
    validation_metric: float | None = None
    train_config: dict = field(default_factory=dict)

    @property
    def head(self):
        return self.params.config.head

    def header(self):
        metric = self.validation_metric
        if metric is not None and not math.isfinite(metric):
            metric = None
        return {
            "format": "disagg-checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": self.params.config.to_dict(),
            "method": self.method,
            "label_scale": self.label_scale,
            "epoch": self.epoch,
            "validation_metric": metric,
            "train_config": self.train_config,
            "blocks": [{"name": k, "shape": list(v.shape)} for k, v in self.params.arrays.items()],
        }

    def to_bytes(self):
        header = json.dumps(self.header(), sort_keys=True).encode("utf-8")
        parts = [MAGIC, struct.pack("<IQ", CHECKPOINT_VERSION, len(header)), header]
        for arr in self.params.arrays.values():
            parts.append(np.asarray(arr).astype("<f4").tobytes(order="C"))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob):
        if blob[:8] != MAGIC:
            raise LoadError("not a checkpoint file (bad magic)")
        version, hlen = struct.unpack("<IQ", blob[8:20])
        if version != CHECKPOINT_VERSION:
            raise LoadError(f"unsupported checkpoint version {version}")
        header = json.loads(blob[20:20 + hlen].decode("utf-8"))
        cfg = PredictorConfig.from_dict(header["config"])
        offset = 20 + hlen
        arrays = {}
        expected = dict(cfg.layer_shapes())
        for block in header["blocks"]:
            shape = tuple(block["shape"])
            if expected.get(block["name"]) != shape:
                raise LoadError(f"block {block['name']} has unexpected shape {shape}")
            nbytes = 4 * int(np.prod(shape))
            if offset + nbytes > len(blob):
                raise LoadError(f"checkpoint truncated in block {block['name']}")
            arrays[block["name"]] = (
                np.frombuffer(blob[offset:offset + nbytes], dtype="<f4").astype(np.float32).reshape(shape)
            )
            offset += nbytes
        if offset != len(blob):
            raise LoadError("checkpoint has trailing or missing bytes")
        return cls(
            params=Parameters(cfg, arrays),
            method=header["method"],
            label_scale=float(header["label_scale"]),
            epoch=int(header["epoch"]),
            validation_metric=header["validation_metric"],
            train_config=header["train_config"],
        )

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())
