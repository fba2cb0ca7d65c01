"""Dataset-level pipelines behind the ``evaluate`` and ``occlusion`` commands.

Work items are (image, ground-truth class) pairs, scored on a bounded thread pool against the shared, read-only
model. Results are sorted by (image id, class) before anything is written, so outputs do not depend on the
scheduling. A failing item is logged and counted; the remaining items still run.
"""

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import NonNegativeInt, PositiveInt, ValidationError

from lrp_cmp.base import Document, FrozenModel
from lrp_cmp.composite import ANALYZERS, CompositeConfig, load_config
from lrp_cmp.data import Dataset, PreparedSample, ShortestSideCenterCrop, StretchResize, dataset_mean, read_image
from lrp_cmp.errors import DimensionMismatch, EmptyInput, LrpError, MalformedDocument, StaleResults
from lrp_cmp.lrp import attribute, pool_channels
from lrp_cmp.metrics import (
    LocalizationScore,
    aggregate,
    baseline_scores,
    localization_score,
    read_scores,
    write_curve,
    write_scores,
    write_summary,
)
from lrp_cmp.model import Model
from lrp_cmp.occlusion import OcclusionResult, occlusion_curve, occlusion_item, work_items, write_results
from lrp_cmp.occlusion import write_curve as write_occlusion_curve
from lrp_cmp.render import Heatmap2D
from lrp_cmp.typing import Array
from lrp_cmp.utils import canonical_json, sha256_hex

LOGGER = logging.getLogger(__name__)

BASELINE = "baseline"
SCORES_FILE = "scores.csv"
PROVENANCE_FILE = "scores.json"
SUMMARY_FILE = "summary.csv"
CURVE_FILE = "curve.csv"
OCCLUSION_FILE = "occlusion.csv"
OCCLUSION_CURVE_FILE = "occlusion_curve.csv"

type PreprocessName = Literal["stretch", "crop"]


class Analyzer(FrozenModel):
    """A named composite config; ``config`` is None for the uniform baseline attribution."""

    name: str
    config: CompositeConfig | None


class Outcome(FrozenModel):
    """What a pipeline run produced."""

    completed: int
    failed: int
    outputs: list[Path]


def resolve_analyzer(name_or_path: str) -> Analyzer:
    """A built-in analyzer name, ``baseline``, or the path of a composite config file."""
    if name_or_path == BASELINE:
        return Analyzer(name=BASELINE, config=None)
    if name_or_path in ANALYZERS:
        return Analyzer(name=name_or_path, config=ANALYZERS[name_or_path])
    path = Path(name_or_path)
    return Analyzer(name=path.stem, config=load_config(path))


def preprocess_mode(name: PreprocessName, model: Model) -> StretchResize | ShortestSideCenterCrop:
    target = (model.input_shape[1], model.input_shape[2])
    if name == "crop":
        return ShortestSideCenterCrop(target=target)
    return StretchResize(target=target)


def run_items[T, R](items: Sequence[T], work: Callable[[T], R], jobs: int, describe: Callable[[T], str]) -> list[R]:
    """Run ``work`` over ``items`` on ``jobs`` threads; failures are logged and left out."""

    def guarded(item: T) -> R | None:
        try:
            return work(item)
        except (LrpError, ValueError, OSError) as error:
            LOGGER.warning("Failed %s: %s: %s", describe(item), type(error).__name__, error)
            return None

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        results = list(pool.map(guarded, items))
    return [result for result in results if result is not None]


def prepare_samples(
    dataset: Dataset, mode: StretchResize | ShortestSideCenterCrop, jobs: int
) -> tuple[list[PreparedSample], int]:
    """Decode and preprocess every image; returns the samples and the number of images that failed."""
    samples = run_items(dataset.entries, lambda entry: entry.prepare(mode), jobs, lambda entry: entry.image_id)
    return samples, len(dataset.entries) - len(samples)


def score_item(
    model: Model, analyzer: Analyzer, sample: PreparedSample, class_label: str, *, positive_first: bool = False
) -> LocalizationScore:
    if analyzer.config is None:
        heatmap = Heatmap2D(values=np.ones(sample.pixels.shape[1:]))
    else:
        attribution = attribute(model, sample.pixels, model.class_index(class_label), analyzer.config)
        heatmap = pool_channels(attribution, positive_first=positive_first)
    return localization_score(heatmap, sample.boxes, class_label, sample.image_id)


def _score_key(score: LocalizationScore) -> tuple[str, str]:
    return score.image_id, score.class_label


class ScoreProvenance(Document):
    """What the rows of a scores file were computed with; stored next to it as ``scores.json``."""

    analyzer: str
    analyzer_digest: str
    parameters_checksum: NonNegativeInt
    preprocess: PreprocessName
    positive_first: bool


def analyzer_digest(analyzer: Analyzer) -> str:
    config = None if analyzer.config is None else analyzer.config.model_dump(mode="json")
    return sha256_hex(canonical_json({"config": config}))


def read_previous_scores(out_dir: Path, provenance: ScoreProvenance) -> list[LocalizationScore]:
    """Scores of an earlier run into ``out_dir``; refuses scores that another setup produced."""
    scores_path, provenance_path = out_dir / SCORES_FILE, out_dir / PROVENANCE_FILE
    if not scores_path.is_file():
        return []
    if not provenance_path.is_file():
        raise StaleResults(f"{scores_path} has no {PROVENANCE_FILE}; cannot tell which analyzer wrote it")
    try:
        recorded = ScoreProvenance.model_validate_json(provenance_path.read_text())
    except ValidationError as error:
        raise MalformedDocument(f"{provenance_path}: {error}") from error
    differing = [name for name in ScoreProvenance.model_fields if getattr(recorded, name) != getattr(provenance, name)]
    if differing:
        raise StaleResults(
            f"{scores_path} was written with another {', '.join(differing)}"
            f" ({recorded.analyzer}, {recorded.preprocess}); use a fresh output directory"
        )
    return read_scores(scores_path)


def evaluate(
    model: Model,
    dataset: Dataset,
    analyzer: Analyzer,
    out_dir: Path,
    *,
    preprocess: PreprocessName = "stretch",
    jobs: PositiveInt = 1,
    positive_first: bool = False,
) -> Outcome:
    """Score every (image, ground-truth class) pair and write scores, summary and curve CSVs.

    Pairs already present in an existing ``scores.csv`` under ``out_dir`` are not scored again, provided the
    ``scores.json`` beside it names the same model, analyzer, preprocessing and pooling order.
    """
    provenance = ScoreProvenance(
        analyzer=analyzer.name,
        analyzer_digest=analyzer_digest(analyzer),
        parameters_checksum=model.parameters_checksum,
        preprocess=preprocess,
        positive_first=positive_first,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    scores_path = out_dir / SCORES_FILE
    previous = read_previous_scores(out_dir, provenance)
    done = {_score_key(score) for score in previous}
    if previous:
        LOGGER.info("Resuming: %d pairs already scored in %s", len(done), scores_path)

    samples, failed = prepare_samples(dataset, preprocess_mode(preprocess, model), jobs)
    items = [(sample, label) for sample, label in work_items(model, samples) if (sample.image_id, label) not in done]
    LOGGER.info("Scoring %d pairs with %s", len(items), analyzer.name)
    new_scores = run_items(
        items,
        lambda item: score_item(model, analyzer, *item, positive_first=positive_first),
        jobs,
        lambda item: f"{item[0].image_id}/{item[1]}",
    )
    failed += len(items) - len(new_scores)

    scores = sorted([*previous, *new_scores], key=_score_key)
    if not scores:
        if failed:
            LOGGER.error("Every image or (image, class) pair failed; nothing written")
            return Outcome(completed=0, failed=failed, outputs=[])
        raise EmptyInput("No (image, class) pair to score: no ground-truth class is known to the model")
    report = aggregate(scores)
    scored_classes: dict[str, list[str]] = {}
    for image_id, label in map(_score_key, scores):
        scored_classes.setdefault(image_id, []).append(label)
    baseline_input = [(s.image_id, s.pixels.shape[1:], s.boxes) for s in samples if s.image_id in scored_classes]
    baseline = aggregate(baseline_scores(baseline_input, scored_classes))
    (out_dir / PROVENANCE_FILE).write_text(provenance.model_dump_json(indent=2))
    outputs = [
        write_scores(scores, scores_path),
        write_summary([(analyzer.name, report), (BASELINE, baseline)], out_dir / SUMMARY_FILE),
        write_curve(report, out_dir / CURVE_FILE),
    ]
    return Outcome(completed=len(new_scores), failed=failed, outputs=outputs)


def mean_image(samples: Sequence[PreparedSample], mean_image_path: Path | None = None) -> Array:
    """The fill for occlusion: an explicit image, or the per-pixel mean of the preprocessed samples."""
    if mean_image_path is None:
        return dataset_mean([sample.pixels for sample in samples])
    pixels = read_image(mean_image_path).pixels
    if samples and pixels.shape != samples[0].pixels.shape:
        raise DimensionMismatch(f"Mean image {pixels.shape} does not match samples {samples[0].pixels.shape}")
    return pixels


def occlusion(
    model: Model,
    dataset: Dataset,
    out_dir: Path,
    *,
    preprocess: PreprocessName = "stretch",
    jobs: PositiveInt = 1,
    mean_image_path: Path | None = None,
) -> Outcome:
    """Object and context occlusion for every (image, ground-truth class) pair; writes results and curve CSVs."""
    samples, failed = prepare_samples(dataset, preprocess_mode(preprocess, model), jobs)
    if not samples:
        LOGGER.error("No image of the dataset could be prepared; nothing written")
        return Outcome(completed=0, failed=failed, outputs=[])
    fill = mean_image(samples, mean_image_path)
    items = work_items(model, samples)
    results: list[OcclusionResult] = run_items(
        items,
        lambda item: occlusion_item(model, item[0], item[1], fill),
        jobs,
        lambda item: f"{item[0].image_id}/{item[1]}",
    )
    failed += len(items) - len(results)
    if not results:
        if failed:
            LOGGER.error("Every (image, class) pair failed; nothing written")
            return Outcome(completed=0, failed=failed, outputs=[])
        raise EmptyInput("No (image, class) pair to occlude: no ground-truth class is known to the model")
    results.sort(key=lambda result: (result.image_id, result.class_label))
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = [
        write_results(results, out_dir / OCCLUSION_FILE),
        write_occlusion_curve(occlusion_curve(results), out_dir / OCCLUSION_CURVE_FILE),
    ]
    return Outcome(completed=len(results), failed=failed, outputs=outputs)
