"""Input validation helpers in the spirit of ``sklearn.utils.validation``.

Each ``check_*`` function returns a normalized copy-free view where possible
and raises a package exception describing the first violated invariant.
"""

import numpy as np

from .exceptions import ConfigurationError, DomainError, ShapeError

MIN_CHIP_SIDE = 8


def check_chip(chip, *, min_side=MIN_CHIP_SIDE):
    """Validate an ``H x W x C`` chip of unit-normalized intensities.

    A 2-D array is promoted to a single channel.
    """
    chip = np.asarray(chip, dtype=np.float64)
    if chip.ndim == 2:
        chip = chip[:, :, None]
    if chip.ndim != 3:
        raise ShapeError(f"chip must be HxWxC, got shape {chip.shape}")
    h, w, _ = chip.shape
    if h < min_side or w < min_side:
        raise ShapeError(f"chip must be at least {min_side}x{min_side}, got {h}x{w}")
    if not np.all(np.isfinite(chip)):
        raise DomainError("chip contains non-finite intensities")
    if chip.min() < 0.0 or chip.max() > 1.0:
        raise DomainError("chip intensities must lie in [0, 1]")
    return chip


def check_mask(mask, shape=None):
    """Validate a region-index mask (0 = background, regions 1..n, none empty).

    Returns ``(mask, n_regions)`` with ``mask`` as an int64 array.
    """
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {mask.shape}")
    if shape is not None and mask.shape != tuple(shape):
        raise ShapeError(f"mask shape {mask.shape} does not match chip shape {tuple(shape)}")
    if not np.issubdtype(mask.dtype, np.integer):
        if not np.all(np.mod(mask, 1) == 0):
            raise DomainError("mask must hold integer region indices")
    mask = mask.astype(np.int64)
    if mask.size and mask.min() < 0:
        raise DomainError("mask indices must be nonnegative")
    n = int(mask.max()) if mask.size else 0
    counts = np.bincount(mask.ravel(), minlength=n + 1)
    empty = np.flatnonzero(counts[1:] == 0)
    if empty.size:
        raise DomainError(f"region {int(empty[0]) + 1} has no pixels")
    return mask, n


def check_labels(labels, n_regions=None, *, positive=False):
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim != 1:
        raise ShapeError(f"labels must be 1-D, got shape {labels.shape}")
    if n_regions is not None and labels.shape[0] != n_regions:
        raise ShapeError(
            f"label count mismatch: {labels.shape[0]} labels for {n_regions} regions"
        )
    if not np.all(np.isfinite(labels)):
        raise DomainError("labels must be finite")
    if positive and np.any(labels <= 0):
        raise DomainError("labels must be strictly positive")
    if np.any(labels < 0):
        raise DomainError("labels must be nonnegative")
    return labels


def check_pixel_map(values, shape, name="pixel map"):
    values = np.asarray(values, dtype=np.float64)
    if values.size != int(np.prod(shape)):
        raise ShapeError(f"{name} has {values.size} entries, expected {int(np.prod(shape))}")
    return values.reshape(shape)


def check_fraction(value, name):
    value = float(value)
    if not 0.0 <= value < 1.0:
        raise ConfigurationError(f"{name} must lie in [0, 1), got {value}")
    return value


def check_positive(value, name, *, integer=False):
    if integer:
        if int(value) != value or value < 1:
            raise ConfigurationError(f"{name} must be a positive integer, got {value}")
        return int(value)
    value = float(value)
    if not value > 0 or not np.isfinite(value):
        raise ConfigurationError(f"{name} must be positive, got {value}")
    return value
