"""Object versus context occlusion.

For an (image, class) pair the pixels inside the union of the class's boxes (object run) or outside it (context
run) are replaced by a mean image, and the change of the class logit is recorded. A model that predicts from the
object loses more logit when the object is hidden than when the context is.
"""

import logging
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Self

import numpy as np
from pydantic import Field, NonNegativeInt, PositiveInt, computed_field, model_validator

from lrp_cmp.base import FrozenModel, Row
from lrp_cmp.data import PreparedSample
from lrp_cmp.errors import DimensionMismatch
from lrp_cmp.metrics import N_BINS, bin_index, relative_size, union_mask, write_rows
from lrp_cmp.model import Model, forward, logit
from lrp_cmp.typing import Array, freeze

LOGGER = logging.getLogger(__name__)


class OcclusionResult(Row):
    """Logit changes for one (image, class) pair; ``S_in`` and ``S_tot`` are the pixel counts of box union and image."""

    image_id: str
    class_label: str = Field(alias="class")
    S_in: PositiveInt
    S_tot: PositiveInt
    delta_f_object: float
    delta_f_context: float

    @model_validator(mode="after")
    def check_sizes(self) -> Self:
        if self.S_in > self.S_tot:
            raise DimensionMismatch(f"Box union of {self.S_in} pixels exceeds the {self.S_tot} pixels of the image")
        return self

    @computed_field
    @property
    def relative_box_size(self) -> float:
        return self.S_in / self.S_tot

    @classmethod
    def columns(cls) -> list[str]:
        return ["image_id", "class", "relative_box_size", "delta_f_object", "delta_f_context"]


class OcclusionBin(Row):
    """Mean and population standard deviation of the logit change within one relative size interval."""

    bin_low: float
    bin_high: float
    mean_obj: float | None
    std_obj: float | None
    mean_ctx: float | None
    std_ctx: float | None
    count: NonNegativeInt


class OcclusionReport(FrozenModel):
    results: list[OcclusionResult]
    bins: list[OcclusionBin] = Field(min_length=N_BINS, max_length=N_BINS)


def occlude(image: Array, mask: np.ndarray, fill: Array) -> Array:
    """Replace the pixels where ``mask`` is set by ``fill``; ``mask`` is (H, W) or has the image's shape."""
    image, fill, mask = np.asarray(image, np.float64), np.asarray(fill, np.float64), np.asarray(mask, bool)
    if fill.shape != image.shape:
        raise DimensionMismatch(f"Fill {fill.shape} does not match image {image.shape}")
    if mask.shape not in (image.shape, image.shape[-2:]):
        raise DimensionMismatch(f"Mask {mask.shape} does not match image {image.shape}")
    return freeze(np.where(mask, fill, image), copy=False)


def delta_f(model: Model, x: Array, x_occluded: Array, class_index: int) -> float:
    """Change of one logit caused by the occlusion, ``f(x_occluded) - f(x)``."""
    return logit(forward(model, x_occluded), class_index) - logit(forward(model, x), class_index)


def occlusion_item(model: Model, sample: PreparedSample, class_label: str, mean_image: Array) -> OcclusionResult:
    class_index = model.class_index(class_label)
    boxes = [box for box in sample.boxes if box.class_label == class_label]
    size = sample.pixels.shape[1:]
    mask = union_mask(boxes, size)
    s_in, s_tot = relative_size(boxes, size)
    base = logit(forward(model, sample.pixels), class_index)
    object_logit = logit(forward(model, occlude(sample.pixels, mask, mean_image)), class_index)
    context_logit = logit(forward(model, occlude(sample.pixels, ~mask, mean_image)), class_index)
    return OcclusionResult(
        image_id=sample.image_id,
        class_label=class_label,
        S_in=s_in,
        S_tot=s_tot,
        delta_f_object=object_logit - base,
        delta_f_context=context_logit - base,
    )


def _moments(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    std = float(np.std(values)) if len(values) > 1 else 0.0
    return float(np.mean(values)), std


def occlusion_curve(results: Sequence[OcclusionResult]) -> list[OcclusionBin]:
    by_bin: list[list[OcclusionResult]] = [[] for _ in range(N_BINS)]
    for result in results:
        by_bin[bin_index(result.S_in, result.S_tot) - 1].append(result)
    bins = []
    for index, members in enumerate(by_bin):
        mean_obj, std_obj = _moments([m.delta_f_object for m in members])
        mean_ctx, std_ctx = _moments([m.delta_f_context for m in members])
        bins.append(
            OcclusionBin(
                bin_low=index / N_BINS,
                bin_high=(index + 1) / N_BINS,
                mean_obj=mean_obj,
                std_obj=std_obj,
                mean_ctx=mean_ctx,
                std_ctx=std_ctx,
                count=len(members),
            )
        )
    return bins


def work_items(model: Model, samples: Iterable[PreparedSample]) -> list[tuple[PreparedSample, str]]:
    """Every (sample, ground-truth class) pair the model can score, sorted by image id and class."""
    items = []
    for sample in samples:
        for label in sample.classes:
            if label not in model.class_labels:
                LOGGER.warning("Skipping class %r of %s: unknown to the model", label, sample.image_id)
                continue
            items.append((sample, label))
    return sorted(items, key=lambda item: (item[0].image_id, item[1]))


def occlusion_experiment(model: Model, samples: Sequence[PreparedSample], mean_image: Array) -> OcclusionReport:
    results = [occlusion_item(model, sample, label, mean_image) for sample, label in work_items(model, samples)]
    return OcclusionReport(results=results, bins=occlusion_curve(results))


def write_results(results: Iterable[OcclusionResult], path: Path | str) -> Path:
    return write_rows(Path(path), OcclusionResult.columns(), results)


def write_curve(bins: Iterable[OcclusionBin], path: Path | str) -> Path:
    return write_rows(Path(path), OcclusionBin.columns(), bins)
