"""Small box-annotated dataset of textured squares on smoothed noise, written in the on-disk dataset layout."""

import logging
from pathlib import Path
from typing import Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import PositiveInt

from lrp_cmp.base import FrozenModel
from lrp_cmp.data import BoxEntry, BoxesDocument, DatasetManifest
from lrp_cmp.errors import IoFailure
from lrp_cmp.metrics import BoundingBox
from lrp_cmp.render import write_image
from lrp_cmp.typing import Array

LOGGER = logging.getLogger(__name__)

CLASSES = ("stripes", "checker", "dots", "ring")
CLASS_COLORS = {
    "stripes": (0.9, 0.2, 0.2),
    "checker": (0.2, 0.85, 0.2),
    "dots": (0.2, 0.3, 0.95),
    "ring": (0.95, 0.85, 0.1),
}
PLACEMENT_ATTEMPTS = 20


class SyntheticDataset(FrozenModel):
    n_images: PositiveInt = 2000
    size: PositiveInt = 32
    min_side: PositiveInt = 8
    max_side: PositiveInt = 14
    max_objects: PositiveInt = 2
    channels: Literal[1, 3] = 3
    seed: int = 0


def smoothed_noise(rng: np.random.Generator, channels: int, size: int) -> Array:
    """Uniform noise averaged over 3x3 neighbourhoods, in [0.2, 0.6]."""
    noise = rng.random((channels, size + 2, size + 2))
    return 0.2 + 0.4 * sliding_window_view(noise, (3, 3), axis=(1, 2)).mean(axis=(-2, -1))


def texture(label: str, side: int) -> np.ndarray:
    """Binary (side, side) pattern of one class."""
    yy, xx = np.mgrid[:side, :side]
    match label:
        case "stripes":
            pattern = (yy // 2) % 2 == 0
        case "checker":
            pattern = (yy // 2 + xx // 2) % 2 == 0
        case "dots":
            pattern = (yy % 3 == 1) & (xx % 3 == 1)
        case "ring":
            pattern = np.minimum.reduce([yy, xx, side - 1 - yy, side - 1 - xx]) < 2
        case _:
            raise ValueError(f"Unknown texture {label!r}")
    return pattern


def _overlaps(box: BoundingBox, other: BoundingBox) -> bool:
    return not (
        box.x_max <= other.x_min or other.x_max <= box.x_min or box.y_max <= other.y_min or other.y_max <= box.y_min
    )


def _place(rng: np.random.Generator, size: int, side: int, label: str, taken: list[BoundingBox]) -> BoundingBox | None:
    for _ in range(PLACEMENT_ATTEMPTS):
        x, y = (int(v) for v in rng.integers(0, size - side + 1, size=2))
        box = BoundingBox(x_min=x, y_min=y, x_max=x + side, y_max=y + side, class_label=label)
        if not any(_overlaps(box, other) for other in taken):
            return box
    return None


def generate_sample(rng: np.random.Generator, config: SyntheticDataset) -> tuple[Array, list[BoundingBox]]:
    pixels = smoothed_noise(rng, config.channels, config.size)
    boxes: list[BoundingBox] = []
    for _ in range(int(rng.integers(1, config.max_objects + 1))):
        label = CLASSES[int(rng.integers(len(CLASSES)))]
        side = int(rng.integers(config.min_side, config.max_side + 1))
        box = _place(rng, config.size, side, label, boxes)
        if box is None:
            continue
        color = np.asarray(CLASS_COLORS[label][: config.channels] if config.channels == 3 else [0.9])
        pattern = texture(label, side)
        patch = np.where(pattern, color[:, None, None], 0.05)
        pixels[:, box.y_min : box.y_max, box.x_min : box.x_max] = patch
        boxes.append(box)
    return pixels, boxes


def generate_dataset(out_dir: Path | str, config: SyntheticDataset | None = None) -> Path:
    """Write images, boxes-json annotations and ``dataset.json`` under ``out_dir``; returns the manifest path."""
    config = config or SyntheticDataset()
    out_dir = Path(out_dir)
    rng = np.random.default_rng(config.seed)
    images_dir, annotations_dir = out_dir / "images", out_dir / "annotations"
    try:
        annotations_dir.mkdir(parents=True, exist_ok=True)
        for index in range(config.n_images):
            image_id = f"img{index:05d}"
            pixels, boxes = generate_sample(rng, config)
            write_image(pixels, images_dir / f"{image_id}.png")
            document = BoxesDocument(
                image_id=image_id,
                boxes=[
                    BoxEntry(label=b.class_label, x_min=b.x_min, y_min=b.y_min, x_max=b.x_max, y_max=b.y_max)
                    for b in boxes
                ],
                size=(config.size, config.size),
            )
            (annotations_dir / f"{image_id}.json").write_text(document.model_dump_json(indent=2))
        manifest = DatasetManifest(
            images_dir=Path("images"),
            annotations_dir=Path("annotations"),
            annotation_format="boxes-json",
            classes=list(CLASSES),
        )
        manifest_path = out_dir / "dataset.json"
        manifest_path.write_text(manifest.model_dump_json(indent=2))
    except OSError as error:
        raise IoFailure(f"Cannot write dataset to {out_dir}: {error}") from error
    LOGGER.info("Wrote %d synthetic images to %s", config.n_images, out_dir)
    return manifest_path
