"""Localization of positive relevance inside ground-truth boxes.

For one (image, class) pair with box union ``B``::

    mu   = R_in / R_tot                      (0 when R_tot == 0)
    mu_w = mu * S_tot / S_in

where ``R_in`` and ``R_tot`` sum the positive part of the heatmap inside ``B`` and over the whole image and
``S_in``, ``S_tot`` are the pixel counts of ``B`` and of the image.
"""

import csv
import logging
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Self

import numpy as np
from pydantic import Field, NonNegativeFloat, NonNegativeInt, PositiveInt, model_validator

from lrp_cmp.base import FrozenModel, Row
from lrp_cmp.errors import DegenerateBox, DimensionMismatch, EmptyInput, IoFailure, MissingFile, NoBoxForClass
from lrp_cmp.numerics import positive_part
from lrp_cmp.render import Heatmap2D

LOGGER = logging.getLogger(__name__)

N_BINS = 100

type ImageSize = tuple[int, int]


class BoundingBox(FrozenModel):
    """Pixel box, inclusive min and exclusive max."""

    x_min: NonNegativeInt
    y_min: NonNegativeInt
    x_max: NonNegativeInt
    y_max: NonNegativeInt
    class_label: str

    @model_validator(mode="after")
    def check_extent(self) -> Self:
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise DegenerateBox(
                f"Box {self.class_label!r} ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max}) has no area"
            )
        return self

    @property
    def area(self) -> int:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def clip(self, size: ImageSize) -> "BoundingBox | None":
        """The part of the box inside an image of ``size = (H, W)``, or None if nothing is left."""
        height, width = size
        x_min, y_min = min(self.x_min, width), min(self.y_min, height)
        x_max, y_max = min(self.x_max, width), min(self.y_max, height)
        if x_min >= x_max or y_min >= y_max:
            return None
        return BoundingBox(x_min=x_min, y_min=y_min, x_max=x_max, y_max=y_max, class_label=self.class_label)


def union_mask(boxes: Iterable[BoundingBox], size: ImageSize) -> np.ndarray:
    mask = np.zeros(size, dtype=bool)
    for box in boxes:
        mask[box.y_min : box.y_max, box.x_min : box.x_max] = True
    return mask


def relative_size(boxes: Sequence[BoundingBox], size: ImageSize) -> tuple[int, int]:
    """``(S_in, S_tot)``: pixels covered by the union of ``boxes`` and pixels of the image."""
    return int(union_mask(boxes, size).sum()), size[0] * size[1]


class LocalizationScore(Row):
    image_id: str
    class_label: str = Field(alias="class")
    S_in: PositiveInt
    S_tot: PositiveInt
    R_in: NonNegativeFloat
    R_tot: NonNegativeFloat
    mu: NonNegativeFloat
    mu_w: NonNegativeFloat

    @property
    def relative_size(self) -> float:
        return self.S_in / self.S_tot


class CurveBin(Row):
    bin_low: float
    bin_high: float
    mean_mu: float | None
    count: NonNegativeInt


class AggregateReport(FrozenModel):
    mean_mu_w: float
    mean_mu: float
    mean_mu_le_025: float | None
    mean_mu_le_05: float | None
    bins: list[CurveBin] = Field(min_length=N_BINS, max_length=N_BINS)
    n_scores: PositiveInt


def _boxes_for_class(annotation: Sequence[BoundingBox], target_class: str, size: ImageSize) -> list[BoundingBox]:
    boxes = [box for box in annotation if box.class_label == target_class]
    if not boxes:
        raise NoBoxForClass(f"No box of class {target_class!r} in annotation")
    clipped = [box.clip(size) for box in boxes]
    if any(box is None for box in clipped):
        raise DimensionMismatch(f"A box of class {target_class!r} lies outside the {size[0]}x{size[1]} heatmap")
    return [box for box in clipped if box is not None]


def localization_score(
    heatmap: Heatmap2D,
    annotation: Sequence[BoundingBox],
    target_class: str,
    image_id: str,
    *,
    image_size: ImageSize | None = None,
) -> LocalizationScore:
    """Score how much positive relevance falls inside the union of the ``target_class`` boxes.

    ``image_size``, when given, is the (H, W) the annotation refers to and must equal the heatmap's.
    """
    if image_size is not None and tuple(image_size) != heatmap.shape:
        raise DimensionMismatch(f"Heatmap {heatmap.shape} does not match annotated image size {tuple(image_size)}")
    boxes = _boxes_for_class(annotation, target_class, heatmap.shape)
    mask = union_mask(boxes, heatmap.shape)
    positive = positive_part(heatmap.values)
    r_in = float(positive[mask].sum())
    # R_tot == R_in exactly when nothing lies outside the union
    r_tot = r_in + float(positive[~mask].sum())
    s_in, s_tot = int(mask.sum()), mask.size
    if r_tot > 0:
        mu = r_in / r_tot
        # one rounding step, so a uniform map scores mu_w == 1.0 exactly
        mu_w = (r_in * s_tot) / (r_tot * s_in)
    else:
        mu = mu_w = 0.0
    return LocalizationScore(
        image_id=image_id, class_label=target_class, S_in=s_in, S_tot=s_tot, R_in=r_in, R_tot=r_tot, mu=mu, mu_w=mu_w
    )


def bin_index(s_in: int, s_tot: int) -> int:
    """``ceil(100 * s_in / s_tot)`` clamped to ``1..100``; intervals are right-closed."""
    return min(max(-(-N_BINS * s_in // s_tot), 1), N_BINS)


def _mean(values: Sequence[float]) -> float | None:
    return float(np.mean(values)) if values else None


def aggregate(scores: Sequence[LocalizationScore]) -> AggregateReport:
    if not scores:
        raise EmptyInput("Cannot aggregate an empty list of scores")
    by_bin: list[list[float]] = [[] for _ in range(N_BINS)]
    for score in scores:
        by_bin[bin_index(score.S_in, score.S_tot) - 1].append(score.mu)
    bins = [
        CurveBin(bin_low=index / N_BINS, bin_high=(index + 1) / N_BINS, mean_mu=_mean(values), count=len(values))
        for index, values in enumerate(by_bin)
    ]
    return AggregateReport(
        mean_mu_w=float(np.mean([score.mu_w for score in scores])),
        mean_mu=float(np.mean([score.mu for score in scores])),
        mean_mu_le_025=_mean([score.mu for score in scores if 4 * score.S_in <= score.S_tot]),
        mean_mu_le_05=_mean([score.mu for score in scores if 2 * score.S_in <= score.S_tot]),
        bins=bins,
        n_scores=len(scores),
    )


def baseline_scores(
    annotations: Iterable[tuple[str, ImageSize, Sequence[BoundingBox]]],
    classes_per_image: Mapping[str, Sequence[str]] | None = None,
) -> list[LocalizationScore]:
    """Scores of a uniform positive attribution for every (image, class) pair of the annotations."""
    scores = []
    for image_id, size, boxes in annotations:
        if classes_per_image is not None and image_id in classes_per_image:
            classes = classes_per_image[image_id]
        else:
            classes = sorted({box.class_label for box in boxes})
        uniform = Heatmap2D(values=np.ones(size))
        scores.extend(localization_score(uniform, boxes, label, image_id) for label in classes)
    return scores


def baseline_report(
    annotations: Iterable[tuple[str, ImageSize, Sequence[BoundingBox]]],
    classes_per_image: Mapping[str, Sequence[str]] | None = None,
) -> AggregateReport:
    return aggregate(baseline_scores(annotations, classes_per_image))


def _format(value: float | int | str | None) -> str:
    if value is None:
        return ""
    return repr(value) if isinstance(value, float) else str(value)


def write_rows(path: Path, columns: list[str], rows: Iterable[Mapping]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(columns)
            for row in rows:
                writer.writerow([_format(row[column]) for column in columns])
    except OSError as error:
        raise IoFailure(f"Cannot write {path}: {error}") from error
    return path


def write_scores(scores: Iterable[LocalizationScore], path: Path | str) -> Path:
    return write_rows(Path(path), LocalizationScore.columns(), scores)


def read_scores(path: Path | str) -> list[LocalizationScore]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"Score file not found: {path}")
    with path.open(newline="") as handle:
        return [LocalizationScore.model_validate(row) for row in csv.DictReader(handle)]


SUMMARY_COLUMNS = ["analyzer", "mean_mu_w", "mean_mu_le_025", "mean_mu_le_05", "mean_mu", "n_scores"]


def write_summary(reports: Sequence[tuple[str, AggregateReport]], path: Path | str) -> Path:
    """One row per analyzer with the mean scores."""
    rows = [{"analyzer": name, **report.model_dump(exclude={"bins"})} for name, report in reports]
    return write_rows(Path(path), SUMMARY_COLUMNS, rows)


def write_curve(report: AggregateReport, path: Path | str) -> Path:
    """Mean mu per relative box size interval."""
    return write_rows(Path(path), CurveBin.columns(), report.bins)
