"""Dataset model, synthetic scene generator, and sample-level transforms.

A :class:`Sample` is one chip together with a region-index mask and the
per-region value labels.  Synthetic samples also carry the per-pixel oracle
value map that generated their labels, which makes pixel-level evaluation
possible.
"""

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, DomainError
from .validation import check_chip, check_fraction, check_labels, check_mask

ORACLE_RTOL = 1e-6


@dataclass(eq=False)
class Sample:
    """One training/evaluation unit.

    Attributes
    ----------
    id : str
    chip : ndarray, shape (H, W, C)
        Intensities in ``[0, 1]``.
    mask : ndarray of int64, shape (H, W)
        Region indices, ``0`` is background and ``k`` in ``1..n`` is region k.
    labels : ndarray, shape (n,)
        Value of each region; ``labels[k - 1]`` belongs to mask index ``k``.
    oracle : ndarray, shape (H, W), optional
        Ground-truth per-pixel values (synthetic scenes only).
    gsd_meters : float
    """

    id: str
    chip: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    oracle: np.ndarray | None = None
    gsd_meters: float = 1.0

    @property
    def shape(self):
        return self.mask.shape

    @property
    def region_count(self):
        return int(self.labels.shape[0])

    def region_sizes(self):
        """Pixel count of every region, ordered like ``labels``."""
        return np.bincount(self.mask.ravel(), minlength=self.region_count + 1)[1:]

    def validate(self):
        """Check every invariant and return ``self``; raises on violation."""
        chip = check_chip(self.chip)
        mask, n = check_mask(self.mask, chip.shape[:2])
        check_labels(self.labels, n)
        if self.oracle is not None:
            oracle = np.asarray(self.oracle)
            if oracle.shape != mask.shape:
                raise DomainError(f"oracle shape {oracle.shape} does not match mask {mask.shape}")
            sums = np.bincount(mask.ravel(), weights=oracle.ravel(), minlength=n + 1)[1:]
            bad = np.abs(self.labels - sums) > ORACLE_RTOL * np.maximum(1.0, self.labels)
            if np.any(bad):
                k = int(np.flatnonzero(bad)[0]) + 1
                raise DomainError(f"region {k} label disagrees with its oracle sum")
        return self

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def identical(self, other):
        """Bitwise equality of every field."""
        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            self.id == other.id
            and self.gsd_meters == other.gsd_meters
            and same(self.chip, other.chip)
            and same(self.mask, other.mask)
            and same(self.labels, other.labels)
            and same(self.oracle, other.oracle)
        )


@dataclass
class SceneConfig:
    """Parameters of the synthetic parcel scene generator.

    Value ranges are per pixel, in currency units.  ``building_size_range``
    bounds the side length (pixels) of the rectangular building drawn inside
    a parcel.  With ``counts`` the oracle is rounded to integers so the
    labels are counts.
    """

    height: int = 64
    width: int = 64
    parcel_grid: tuple = (2, 4)
    building_prob: float = 0.8
    land_value_range: tuple = (5.0, 20.0)
    building_value_range: tuple = (100.0, 300.0)
    building_size_range: tuple = (4, 14)
    noise_sigma: float = 0.05
    counts: bool = False
    seed: int = 42

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in names:
                raise ConfigurationError(f"unknown scene config field '{key}'")
        cfg = cls(**data)
        cfg.parcel_grid = tuple(cfg.parcel_grid)
        cfg.land_value_range = tuple(cfg.land_value_range)
        cfg.building_value_range = tuple(cfg.building_value_range)
        cfg.building_size_range = tuple(cfg.building_size_range)
        return cfg.validate()

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    def validate(self):
        for name in ("height", "width"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 8:
                raise ConfigurationError(f"{name} must be an integer >= 8, got {value!r}")
        if len(self.parcel_grid) != 2 or min(self.parcel_grid) < 1:
            raise ConfigurationError(f"parcel_grid must be two positive integers, got {self.parcel_grid!r}")
        rows, cols = self.parcel_grid
        if self.height % rows or self.width % cols:
            raise ConfigurationError(
                f"parcel_grid {rows}x{cols} does not divide scene {self.height}x{self.width}"
            )
        if not 0.0 <= self.building_prob <= 1.0:
            raise ConfigurationError(f"building_prob must lie in [0, 1], got {self.building_prob}")
        for name in ("land_value_range", "building_value_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigurationError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        lo, hi = self.building_size_range
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"building_size_range must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if not self.noise_sigma >= 0:
            raise ConfigurationError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        return self


def _unit(value, lo, hi):
    return (value - lo) / (hi - lo) if hi > lo else 0.5


def grid_mask(height, width, rows, cols):
    """Row-major parcel partition; parcel k occupies grid cell k - 1."""
    ph, pw = height // rows, width // cols
    yy, xx = np.mgrid[0:height, 0:width]
    return (yy // ph) * cols + xx // pw + 1


def generate_scene(cfg, sample_id="scene"):
    """Render one synthetic parcel scene with its oracle value map.

    Every parcel gets a constant land value; with probability
    ``building_prob`` a rectangle inside it is replaced by a building value.
    Channels: 0 = building mask, 1 = normalized land value (0 on buildings),
    2 = normalized building value (0 on land), plus clipped Gaussian noise,
    quantized to 8 bits.  The oracle is linear in the noise-free channels.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.height, cfg.width
    rows, cols = cfg.parcel_grid
    ph, pw = h // rows, w // cols
    mask = grid_mask(h, w, rows, cols)

    oracle = np.zeros((h, w))
    building = np.zeros((h, w), dtype=bool)
    land_unit = np.zeros((h, w))
    bld_unit = np.zeros((h, w))
    s_lo, s_hi = cfg.building_size_range
    for k in range(rows * cols):
        y0, x0 = (k // cols) * ph, (k % cols) * pw
        land = rng.uniform(*cfg.land_value_range)
        if cfg.counts:
            land = float(np.round(land))
        oracle[y0:y0 + ph, x0:x0 + pw] = land
        land_unit[y0:y0 + ph, x0:x0 + pw] = _unit(land, *cfg.land_value_range)
        if rng.random() < cfg.building_prob:
            bh = min(int(rng.integers(s_lo, s_hi + 1)), ph)
            bw = min(int(rng.integers(s_lo, s_hi + 1)), pw)
            by = y0 + int(rng.integers(0, ph - bh + 1))
            bx = x0 + int(rng.integers(0, pw - bw + 1))
            value = rng.uniform(*cfg.building_value_range)
            if cfg.counts:
                value = float(np.round(value))
            oracle[by:by + bh, bx:bx + bw] = value
            building[by:by + bh, bx:bx + bw] = True
            bld_unit[by:by + bh, bx:bx + bw] = _unit(value, *cfg.building_value_range)
    land_unit[building] = 0.0

    # Oracle must survive the float32 on-disk format unchanged.
    oracle = oracle.astype(np.float32).astype(np.float64)
    chip = np.stack([building.astype(np.float64), land_unit, bld_unit], axis=-1)
    if cfg.noise_sigma > 0:
        chip = chip + rng.normal(0.0, cfg.noise_sigma, size=chip.shape)
    chip = np.round(np.clip(chip, 0.0, 1.0) * 255.0) / 255.0

    labels = np.bincount(mask.ravel(), weights=oracle.ravel())[1:]
    return Sample(id=sample_id, chip=chip, mask=mask.astype(np.int64), labels=labels, oracle=oracle)


def generate_dataset(cfg, count, prefix="scene"):
    """``count`` scenes with per-scene seeds spawned from ``cfg.seed``."""
    samples = []
    for i in range(count):
        seed = int(np.random.SeedSequence([cfg.seed, i]).generate_state(1, np.uint64)[0])
        scene_cfg = dataclasses.replace(cfg, seed=seed)
        samples.append(generate_scene(scene_cfg, sample_id=f"{prefix}_{i:04d}"))
    return samples


def _regroup(sample, group):
    """Relabel regions through ``group`` (old index -> group key, 0 = drop).

    Groups are renumbered compactly in order of their first pixel in raster
    order; a group's label is the sum of its members' labels, accumulated in
    increasing old-index order.
    """
    keys = group[sample.mask]
    flat = keys.ravel()
    nz = np.flatnonzero(flat)
    uniq, first = np.unique(flat[nz], return_index=True)
    ordered = uniq[np.argsort(first, kind="stable")]
    new_id = np.zeros(group.max() + 1, dtype=np.int64)
    new_id[ordered] = np.arange(1, ordered.size + 1)
    labels = np.zeros(ordered.size)
    for old in range(1, group.size):
        if group[old]:
            labels[new_id[group[old]] - 1] += sample.labels[old - 1]
    return sample.replace(mask=new_id[keys], labels=labels)


def filter_dataset(samples, drop_zero_value=True, max_density=None):
    """Drop zero-valued and over-dense regions; drop samples left empty.

    ``max_density`` is in currency per pixel.  Idempotent.
    """
    out = []
    for s in samples:
        keep = np.ones(s.region_count, dtype=bool)
        if drop_zero_value:
            keep &= s.labels != 0
        if max_density is not None:
            keep &= s.labels / s.region_sizes() <= max_density
        if not keep.any():
            continue
        group = np.concatenate([[0], np.where(keep, np.arange(1, s.region_count + 1), 0)])
        out.append(_regroup(s, group))
    return out


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    validation: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def select(self, samples, part):
        ids = set(getattr(self, part))
        return [s for s in samples if s.id in ids]


def split_dataset(samples, val_frac=0.1, test_frac=0.1, seed=0):
    """Seeded shuffle, then contiguous validation / test / train blocks.

    Validation and test sizes are ``floor(frac * N)``; train takes the rest.
    """
    val_frac = check_fraction(val_frac, "val_frac")
    test_frac = check_fraction(test_frac, "test_frac")
    if val_frac + test_frac >= 1.0:
        raise ConfigurationError("val_frac + test_frac must be < 1")
    ids = [s if isinstance(s, str) else s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ConfigurationError("sample ids must be unique")
    n = len(ids)
    n_val = math.floor(val_frac * n + 1e-9)
    n_test = math.floor(test_frac * n + 1e-9)
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    return DatasetSplit(
        train=shuffled[n_val + n_test:],
        validation=shuffled[:n_val],
        test=shuffled[n_val:n_val + n_test],
    )


def adjacent_pairs(mask):
    """Set of ``(a, b)``, ``a < b``, for regions with 8-adjacent pixels."""
    pairs = set()
    shifts = [
        (mask[:, :-1], mask[:, 1:]),
        (mask[:-1, :], mask[1:, :]),
        (mask[:-1, :-1], mask[1:, 1:]),
        (mask[:-1, 1:], mask[1:, :-1]),
    ]
    for a, b in shifts:
        hit = (a != b) & (a > 0) & (b > 0)
        if hit.any():
            lo = np.minimum(a[hit], b[hit])
            hi = np.maximum(a[hit], b[hit])
            pairs.update(zip(lo.tolist(), hi.tolist()))
    return pairs


def merge_regions(sample, seed, density_cap=None):
    """One pass of random pairwise merging of neighboring regions.

    Regions are visited in a seeded random order.  Each region not yet merged
    is paired with a random unmerged neighbor, restricted to candidates whose
    combined value per pixel stays within ``density_cap``.  The oracle map is
    left untouched.
    """
    n = sample.region_count
    if n < 2:
        return sample
    neighbors = {k: [] for k in range(1, n + 1)}
    for a, b in sorted(adjacent_pairs(sample.mask)):
        neighbors[a].append(b)
        neighbors[b].append(a)
    sizes = sample.region_sizes()
    labels = sample.labels
    rng = np.random.default_rng(seed)
    merged = np.zeros(n + 1, dtype=bool)
    group = np.arange(n + 1)
    changed = False
    for r in (rng.permutation(n) + 1).tolist():
        if merged[r]:
            continue
        cands = []
        for q in neighbors[r]:
            if merged[q]:
                continue
            value = labels[r - 1] + labels[q - 1]
            if density_cap is not None and value / (sizes[r - 1] + sizes[q - 1]) > density_cap:
                continue
            cands.append(q)
        if not cands:
            continue
        q = cands[int(rng.integers(len(cands)))]
        merged[r] = merged[q] = True
        group[max(r, q)] = min(r, q)
        changed = True
    if not changed:
        return sample
    return _regroup(sample, group)


def flip_sample(sample, horizontal=False, vertical=False):
    """Flip chip, mask and oracle together; labels are unaffected."""
    def flip(a):
        if a is None:
            return None
        if horizontal:
            a = a[:, ::-1]
        if vertical:
            a = a[::-1, :]
        return np.ascontiguousarray(a)

    if not (horizontal or vertical):
        return sample
    return sample.replace(chip=flip(sample.chip), mask=flip(sample.mask), oracle=flip(sample.oracle))


def flip_augment(sample, seed):
    """Independent seeded coin flips for a horizontal and a vertical flip."""
    rng = np.random.default_rng(seed)
    horizontal = bool(rng.random() < 0.5)
    vertical = bool(rng.random() < 0.5)
    return flip_sample(sample, horizontal=horizontal, vertical=vertical)
