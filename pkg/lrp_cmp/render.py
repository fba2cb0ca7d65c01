"""Signed heatmaps to red/white/blue images: positive relevance red, negative blue, zero white."""

import logging
from pathlib import Path

import numpy as np
from PIL import Image
from pydantic import ConfigDict, field_validator

from lrp_cmp.base import FrozenModel
from lrp_cmp.errors import DimensionMismatch, IoFailure
from lrp_cmp.typing import Array, Tensor, freeze

LOGGER = logging.getLogger(__name__)


class Heatmap2D(FrozenModel):
    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    values: Tensor

    @field_validator("values")
    @classmethod
    def check_rank(cls, values: Array) -> Array:
        if values.ndim != 2 or values.size == 0:
            raise DimensionMismatch(f"Heatmap must be a non-empty (H, W) array, got shape {values.shape}")
        return values

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def colorize(heatmap: Heatmap2D, *, clip_percentile: float | None = None) -> Array:
    """Map a heatmap to a (3, H, W) RGB array in [0, 1].

    Values are divided by the maximum absolute value (or by the given percentile of absolute values, clipping
    whatever lies beyond), then +1 is saturated red, 0 white and -1 saturated blue.
    """
    magnitude = np.abs(heatmap.values)
    scale = float(magnitude.max()) if clip_percentile is None else float(np.percentile(magnitude, clip_percentile))
    if scale == 0:
        return freeze(np.ones((3, *heatmap.shape)), copy=False)
    v = np.clip(heatmap.values / scale, -1.0, 1.0)
    fade = 1.0 - np.abs(v)
    red = np.where(v >= 0, 1.0, fade)
    blue = np.where(v >= 0, fade, 1.0)
    return freeze(np.stack([red, fade, blue]), copy=False)


def to_grayscale_rgb(image: Array) -> Array:
    """(C, H, W) input image with C in {1, 3} as an RGB array."""
    if image.shape[0] == 1:
        return np.repeat(image, 3, axis=0)
    return image


def montage(image: Array, heatmap: Heatmap2D, *, gap: int = 2, clip_percentile: float | None = None) -> Array:
    """Input image and its colorized heatmap side by side, separated by a white gap."""
    rgb = to_grayscale_rgb(np.asarray(image, dtype=np.float64))
    if rgb.shape[1:] != heatmap.shape:
        raise DimensionMismatch(f"Image {rgb.shape[1:]} and heatmap {heatmap.shape} differ in size")
    spacer = np.ones((3, heatmap.shape[0], gap))
    return freeze(np.concatenate([rgb, spacer, colorize(heatmap, clip_percentile=clip_percentile)], axis=2))


def quantize(rgb: Array) -> np.ndarray:
    """(C, H, W) values in [0, 1] as (H, W, C) bytes; out-of-range values are clamped with a warning."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.min() < 0 or rgb.max() > 1:
        LOGGER.warning("Clamping image values outside [0, 1] (range %g..%g)", rgb.min(), rgb.max())
        rgb = np.clip(rgb, 0.0, 1.0)
    return np.ascontiguousarray(np.rint(rgb * 255.0).astype(np.uint8).transpose(1, 2, 0))


def write_image(rgb: Array, path: Path | str) -> Path:
    """Write a (1|3, H, W) array in [0, 1] as an 8-bit PNG."""
    path = Path(path)
    pixels = quantize(rgb)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels[:, :, 0] if pixels.shape[2] == 1 else pixels).save(path, format="PNG")
    except OSError as error:
        raise IoFailure(f"Cannot write {path}: {error}") from error
    return path
