"""Region aggregation layer.

The layer is the linear map ``M`` (regions x pixels) that sums per-pixel
quantities over each region.  It is stored in compressed sparse rows so its
memory grows with the number of labelled pixels, not with ``n * H * W``.
Its transpose scatters region gradients back to pixels.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .exceptions import DomainError, ShapeError
from .validation import check_mask


@dataclass(frozen=True, eq=False)
class RegionIncidence:
    """CSR storage of region membership weights.

    Row ``i`` (region ``i + 1`` in the mask) owns entries
    ``indptr[i]:indptr[i + 1]`` of ``indices`` (flat pixel index, row-major)
    and ``weights``.
    """

    shape: tuple
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray

    @property
    def n_regions(self):
        return self.indptr.shape[0] - 1

    @property
    def n_pixels(self):
        return self.shape[0] * self.shape[1]

    @property
    def nnz(self):
        return self.indices.shape[0]

    @property
    def rows(self):
        return np.repeat(np.arange(self.n_regions), np.diff(self.indptr))

    def sizes(self):
        """Total membership weight per region (pixel count for binary masks)."""
        return np.add.reduceat(self.weights, self.indptr[:-1])

    def covered(self):
        """Boolean ``H x W`` map of pixels referenced by any region."""
        out = np.zeros(self.n_pixels, dtype=bool)
        out[self.indices] = True
        return out.reshape(self.shape)

    def to_dense(self):
        dense = np.zeros((self.n_regions, self.n_pixels))
        dense[self.rows, self.indices] = self.weights
        return dense

    def dump_csv(self, path):
        """Debug dump as ``region_id,pixel_index,weight`` (region_id 1-based)."""
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["region_id", "pixel_index", "weight"])
            for r, p, w in zip(self.rows + 1, self.indices, self.weights):
                writer.writerow([int(r), int(p), repr(float(w))])


def build_incidence(mask):
    """Binary incidence of a region-index mask; row order follows labels."""
    mask, n = check_mask(mask)
    if n == 0:
        raise DomainError("mask contains no regions")
    flat = mask.ravel()
    labelled = np.flatnonzero(flat)
    order = np.argsort(flat[labelled], kind="stable")
    indices = labelled[order]
    counts = np.bincount(flat[indices], minlength=n + 1)[1:]
    indptr = np.concatenate([[0], np.cumsum(counts)])
    return RegionIncidence(
        shape=mask.shape,
        indptr=indptr,
        indices=indices,
        weights=np.ones(indices.shape[0]),
    )


def incidence_from_weights(weight_maps):
    """Incidence with fractional weights, one ``H x W`` map per region.

    Zero entries are omitted; every weight must lie in ``(0, 1]`` and every
    region must own at least one pixel.  Regions may overlap.
    """
    weight_maps = np.asarray(weight_maps, dtype=np.float64)
    if weight_maps.ndim != 3:
        raise ShapeError("weight maps must have shape (n_regions, H, W)")
    n, h, w = weight_maps.shape
    flat = weight_maps.reshape(n, -1)
    if np.any(flat < 0) or np.any(flat > 1):
        raise DomainError("membership weights must lie in (0, 1]")
    rows, cols = np.nonzero(flat)
    counts = np.bincount(rows, minlength=n)
    if np.any(counts == 0):
        raise DomainError(f"region {int(np.flatnonzero(counts == 0)[0]) + 1} has no pixels")
    return RegionIncidence(
        shape=(h, w),
        indptr=np.concatenate([[0], np.cumsum(counts)]),
        indices=cols,
        weights=flat[rows, cols],
    )


def _flat(inc, values, name):
    values = np.asarray(values, dtype=np.float64)
    if values.size != inc.n_pixels:
        raise ShapeError(f"{name} has {values.size} entries, incidence expects {inc.n_pixels}")
    return values.ravel()


def aggregate_sum(inc, pixel_map):
    """Weighted per-region sums ``out[i] = sum_j w_i(p_j) * pixel_map[p_j]``."""
    x = _flat(inc, pixel_map, "pixel map")
    return np.add.reduceat(inc.weights * x[inc.indices], inc.indptr[:-1])


def aggregate_sum_backward(inc, region_grads):
    """Transpose product: scatter region gradients to an ``H x W`` map."""
    g = np.asarray(region_grads, dtype=np.float64)
    if g.shape != (inc.n_regions,):
        raise ShapeError(f"expected {inc.n_regions} region gradients, got shape {g.shape}")
    contrib = inc.weights * np.repeat(g, np.diff(inc.indptr))
    return np.bincount(inc.indices, weights=contrib, minlength=inc.n_pixels).reshape(inc.shape)


@dataclass(frozen=True, eq=False)
class RegionGaussian:
    """Per-region aggregated Gaussian ``N(mu_star, var_star)``."""

    mu_star: np.ndarray
    var_star: np.ndarray

    @property
    def sigma_star(self):
        return np.sqrt(self.var_star)

    def scaled(self, factor):
        """Distribution of ``factor * Y`` (used to undo label scaling)."""
        return RegionGaussian(self.mu_star * factor, self.var_star * factor**2)


def _require_positive(inc, values, name):
    referenced = values[inc.indices]
    if not np.all(referenced > 0):
        raise DomainError(f"{name} must be strictly positive on every region pixel")


def aggregate_gaussian(inc, mu_map, var_map):
    """Sum of independent per-pixel Gaussians over each region."""
    var = _flat(inc, var_map, "variance map")
    _require_positive(inc, var, "variance")
    return RegionGaussian(aggregate_sum(inc, mu_map), aggregate_sum(inc, var))


def aggregate_poisson(inc, lambda_map):
    """Sum of independent per-pixel Poisson rates over each region."""
    lam = _flat(inc, lambda_map, "rate map")
    _require_positive(inc, lam, "rate")
    return aggregate_sum(inc, lam)
