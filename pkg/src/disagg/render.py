"""Heatmap rendering of value / uncertainty maps to 8-bit RGB."""

import dataclasses
from dataclasses import dataclass

import matplotlib
import numpy as np
from PIL import Image

from .exceptions import ConfigurationError

OUTLINE_RGB = (255, 255, 255)


@dataclass
class RenderSpec:
    """``vmin``/``vmax`` of ``None`` mean the 2nd / 98th percentile."""

    ramp: str = "viridis"
    vmin: float | None = None
    vmax: float | None = None
    overlay_regions: bool = False

    def __post_init__(self):
        if self.vmin is not None and self.vmax is not None and not self.vmin < self.vmax:
            raise ConfigurationError(f"vmin ({self.vmin}) must be below vmax ({self.vmax})")
        if self.ramp not in matplotlib.colormaps:
            raise ConfigurationError(f"unknown color ramp {self.ramp!r}")

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in names:
                raise ConfigurationError(f"unknown render spec field '{key}'")
        return cls(**data)


def region_boundaries(mask):
    """Pixels of a region that touch a different index to the right or below."""
    edge = np.zeros(mask.shape, dtype=bool)
    right = mask[:, :-1] != mask[:, 1:]
    down = mask[:-1, :] != mask[1:, :]
    edge[:, :-1] |= right
    edge[:-1, :] |= down
    return edge & (mask > 0)


def colorize(values, spec=None, mask=None):
    """Map a 2-D array to an ``H x W x 3`` uint8 image. Input is not modified."""
    spec = spec or RenderSpec()
    values = np.asarray(values, dtype=np.float64)
    finite = values[np.isfinite(values)]
    lo, hi = spec.vmin, spec.vmax
    if lo is None:
        lo = float(np.percentile(finite, 2)) if finite.size else 0.0
    if hi is None:
        hi = float(np.percentile(finite, 98)) if finite.size else 1.0
    if hi > lo:
        unit = np.clip((values - lo) / (hi - lo), 0.0, 1.0)
    else:
        unit = np.zeros_like(values)
    unit = np.nan_to_num(unit, nan=0.0)
    rgba = matplotlib.colormaps[spec.ramp](unit)
    rgb = np.round(rgba[..., :3] * 255.0).astype(np.uint8)
    if spec.overlay_regions and mask is not None:
        rgb[region_boundaries(np.asarray(mask))] = OUTLINE_RGB
    return rgb


def save_png(path, rgb):
    Image.fromarray(rgb).save(path, format="PNG")
