"""Dataset ingestion: images, box annotations, preprocessing geometry and the dataset mean.

Boxes use 0-based pixel coordinates with exclusive maxima everywhere past the parsers.
"""

import logging
import math
import xml.etree.ElementTree as ET
from collections.abc import Sequence
from functools import cached_property
from pathlib import Path
from typing import Annotated, Literal, Self

import numpy as np
from PIL import Image, UnidentifiedImageError
from pydantic import ConfigDict, Field, NonNegativeInt, PositiveInt, ValidationError, model_validator

from lrp_cmp.base import Document, FrozenModel
from lrp_cmp.errors import (
    DegenerateBox,
    DimensionMismatch,
    EmptyInput,
    MalformedDocument,
    MissingField,
    MissingFile,
    TargetLargerThanImage,
)
from lrp_cmp.metrics import BoundingBox, ImageSize
from lrp_cmp.typing import Array, Tensor, freeze

LOGGER = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".ppm")
SUPPORTED_FORMATS = {"PNG", "PPM"}


class ImageSample(FrozenModel):
    """Decoded image, channels first, values in [0, 1]."""

    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    image_id: str
    pixels: Tensor

    @model_validator(mode="after")
    def check_pixels(self) -> Self:
        if self.pixels.ndim != 3 or self.pixels.shape[0] not in (1, 3):
            raise DimensionMismatch(f"Image {self.image_id} must be (1|3, H, W), got {self.pixels.shape}")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise DimensionMismatch(f"Image {self.image_id} has values outside [0, 1]")
        return self

    @property
    def original_dims(self) -> ImageSize:
        return self.pixels.shape[1], self.pixels.shape[2]


class Annotation(FrozenModel):
    image_id: str
    boxes: list[BoundingBox]
    size: tuple[PositiveInt, PositiveInt] | None = None

    @property
    def classes(self) -> list[str]:
        return sorted({box.class_label for box in self.boxes})


class PreparedSample(FrozenModel):
    """Image and boxes as the network sees them."""

    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    image_id: str
    pixels: Tensor
    boxes: list[BoundingBox]

    @property
    def classes(self) -> list[str]:
        return sorted({box.class_label for box in self.boxes})


def read_image(path: Path | str) -> ImageSample:
    """Decode a PNG or binary PPM file; grayscale stays one channel, everything else becomes RGB."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"Image not found: {path}")
    try:
        with Image.open(path) as image:
            if image.format not in SUPPORTED_FORMATS:
                raise MalformedDocument(f"{path}: unsupported image format {image.format}")
            match image.mode:
                case "L" | "1":
                    pixels = np.asarray(image.convert("L"), dtype=np.float64)[None] / 255.0
                case "I;16" | "I;16B" | "I":
                    pixels = np.asarray(image, dtype=np.float64)[None] / 65535.0
                case _:
                    pixels = np.asarray(image.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    except (UnidentifiedImageError, OSError) as error:
        raise MalformedDocument(f"{path}: cannot decode image: {error}") from error
    return ImageSample(image_id=path.stem, pixels=np.clip(pixels, 0.0, 1.0))


def _find(element: ET.Element, tag: str, where: str) -> ET.Element:
    found = element.find(tag)
    if found is None:
        raise MissingField(f"Annotation has no <{tag}> in {where}")
    return found


def _text(element: ET.Element, tag: str, where: str) -> str:
    text = _find(element, tag, where).text
    if text is None or not text.strip():
        raise MissingField(f"Annotation has an empty <{tag}> in {where}")
    return text.strip()


def _coordinate(element: ET.Element, tag: str) -> int:
    text = _text(element, tag, "bndbox")
    try:
        return int(round(float(text)))
    except ValueError:
        raise MalformedDocument(f"Coordinate <{tag}> is not a number: {text!r}") from None


def parse_voc_annotation(document: str) -> Annotation:
    """Parse a VOC XML annotation; 1-based inclusive coordinates become 0-based with exclusive maxima."""
    try:
        root = ET.fromstring(document)
    except ET.ParseError as error:
        raise MalformedDocument(f"Annotation is not well-formed XML: {error}") from error
    if root.tag != "annotation":
        raise MalformedDocument(f"Expected <annotation> root, got <{root.tag}>")
    image_id = Path(_text(root, "filename", "annotation")).stem
    size = None
    if (size_element := root.find("size")) is not None:
        size = (int(_text(size_element, "height", "size")), int(_text(size_element, "width", "size")))
    boxes = []
    for obj in root.findall("object"):
        label = _text(obj, "name", "object")
        bndbox = _find(obj, "bndbox", f"object {label!r}")
        x_min, y_min, x_max, y_max = (_coordinate(bndbox, name) for name in ("xmin", "ymin", "xmax", "ymax"))
        if x_min >= x_max or y_min >= y_max:
            raise DegenerateBox(f"Object {label!r} has bndbox ({x_min}, {y_min}, {x_max}, {y_max}) with min >= max")
        boxes.append(
            BoundingBox(x_min=max(x_min - 1, 0), y_min=max(y_min - 1, 0), x_max=x_max, y_max=y_max, class_label=label)
        )
    return Annotation(image_id=image_id, boxes=boxes, size=size)


class BoxEntry(Document):
    label: str
    x_min: NonNegativeInt
    y_min: NonNegativeInt
    x_max: NonNegativeInt
    y_max: NonNegativeInt


class BoxesDocument(Document):
    image_id: str
    boxes: list[BoxEntry]
    size: tuple[PositiveInt, PositiveInt] | None = None


def parse_boxes_json(document: str) -> Annotation:
    try:
        parsed = BoxesDocument.model_validate_json(document)
    except ValidationError as error:
        if any(e["type"] == "missing" for e in error.errors()):
            raise MissingField(str(error)) from error
        raise MalformedDocument(str(error)) from error
    boxes = [
        BoundingBox(x_min=b.x_min, y_min=b.y_min, x_max=b.x_max, y_max=b.y_max, class_label=b.label)
        for b in parsed.boxes
    ]
    return Annotation(image_id=parsed.image_id, boxes=boxes, size=parsed.size)


def read_annotation(path: Path | str, annotation_format: Literal["voc-xml", "boxes-json"]) -> Annotation:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"Annotation not found: {path}")
    parse = parse_voc_annotation if annotation_format == "voc-xml" else parse_boxes_json
    try:
        return parse(path.read_text())
    except MalformedDocument as error:
        raise type(error)(f"{path}: {error}") from error


class StretchResize(FrozenModel):
    """Scale height and width independently to the target."""

    mode: Literal["stretch"] = "stretch"
    target: tuple[PositiveInt, PositiveInt]


class ShortestSideCenterCrop(FrozenModel):
    """Scale uniformly until the image covers the target, then cut the excess of the longer side evenly."""

    mode: Literal["crop"] = "crop"
    target: tuple[PositiveInt, PositiveInt]
    allow_upscale: bool = True


PreprocessMode = Annotated[StretchResize | ShortestSideCenterCrop, Field(discriminator="mode")]


def _sample_grid(size_in: int, size_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres
    source = (np.arange(size_out) + 0.5) * (size_in / size_out) - 0.5
    source = np.clip(source, 0.0, size_in - 1)
    low = np.floor(source).astype(np.intp)
    high = np.minimum(low + 1, size_in - 1)
    return low, high, source - low


def bilinear_resize(pixels: Array, size: ImageSize) -> Array:
    """Resize (C, H, W) to (C, *size); a constant image stays exactly constant."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.shape[1:] == tuple(size):
        return freeze(pixels)
    y0, y1, wy = _sample_grid(pixels.shape[1], size[0])
    x0, x1, wx = _sample_grid(pixels.shape[2], size[1])
    rows_low, rows_high = pixels[:, y0], pixels[:, y1]
    top = rows_low[:, :, x0] + wx * (rows_low[:, :, x1] - rows_low[:, :, x0])
    bottom = rows_high[:, :, x0] + wx * (rows_high[:, :, x1] - rows_high[:, :, x0])
    return freeze(top + wy[:, None] * (bottom - top), copy=False)


def _round(value: float) -> int:
    return math.floor(value + 0.5)


class Geometry(FrozenModel):
    """Scale factors, the intermediate resized size and the crop offset of one preprocessing step."""

    scale_y: float
    scale_x: float
    resized: tuple[PositiveInt, PositiveInt]
    offset: tuple[NonNegativeInt, NonNegativeInt]
    target: tuple[PositiveInt, PositiveInt]


def geometry(size: ImageSize, mode: StretchResize | ShortestSideCenterCrop) -> Geometry:
    (height, width), (target_h, target_w) = size, mode.target
    match mode:
        case StretchResize():
            scale_y, scale_x = target_h / height, target_w / width
            return Geometry(scale_y=scale_y, scale_x=scale_x, resized=mode.target, offset=(0, 0), target=mode.target)
        case ShortestSideCenterCrop():
            scale = max(target_h / height, target_w / width)
            if scale > 1 and not mode.allow_upscale:
                raise TargetLargerThanImage(f"Image {height}x{width} is smaller than target {target_h}x{target_w}")
            resized = (max(_round(height * scale), target_h), max(_round(width * scale), target_w))
            offset = ((resized[0] - target_h) // 2, (resized[1] - target_w) // 2)
            return Geometry(scale_y=scale, scale_x=scale, resized=resized, offset=offset, target=mode.target)


def transform_pixels(pixels: Array, mode: StretchResize | ShortestSideCenterCrop) -> Array:
    geo = geometry(pixels.shape[1:], mode)
    resized = bilinear_resize(pixels, geo.resized)
    (top, left), (height, width) = geo.offset, geo.target
    return freeze(resized[:, top : top + height, left : left + width])


def transform_box(box: BoundingBox, geo: Geometry) -> BoundingBox | None:
    """Scale, shift and clip a box into the target frame; None if its clipped area is 0."""
    (top, left), (height, width) = geo.offset, geo.target
    x_min = min(max(_round(box.x_min * geo.scale_x) - left, 0), width)
    x_max = min(max(_round(box.x_max * geo.scale_x) - left, 0), width)
    y_min = min(max(_round(box.y_min * geo.scale_y) - top, 0), height)
    y_max = min(max(_round(box.y_max * geo.scale_y) - top, 0), height)
    if x_min >= x_max or y_min >= y_max:
        return None
    return BoundingBox(x_min=x_min, y_min=y_min, x_max=x_max, y_max=y_max, class_label=box.class_label)


def preprocess(
    sample: ImageSample, annotation: Annotation, mode: StretchResize | ShortestSideCenterCrop
) -> tuple[Array, Annotation]:
    if annotation.size is not None and tuple(annotation.size) != sample.original_dims:
        raise DimensionMismatch(
            f"Annotation of {annotation.image_id} is for {annotation.size}, image is {sample.original_dims}"
        )
    geo = geometry(sample.original_dims, mode)
    boxes = []
    for box in annotation.boxes:
        transformed = transform_box(box, geo)
        if transformed is None:
            LOGGER.warning("Dropping box %s of %s: nothing left after preprocessing", box.class_label, sample.image_id)
            continue
        boxes.append(transformed)
    return transform_pixels(sample.pixels, mode), Annotation(image_id=annotation.image_id, boxes=boxes, size=geo.target)


def dataset_mean(
    samples: Sequence[ImageSample | Array], mode: StretchResize | ShortestSideCenterCrop | None = None
) -> Array:
    """Per-pixel, per-channel mean, of the images as given or after the preprocessing ``mode``."""
    if not samples:
        raise EmptyInput("Cannot average an empty set of images")
    images = [sample.pixels if isinstance(sample, ImageSample) else np.asarray(sample) for sample in samples]
    if mode is not None:
        images = [transform_pixels(image, mode) for image in images]
    shapes = {image.shape for image in images}
    if len(shapes) > 1:
        raise DimensionMismatch(f"Images differ in shape: {sorted(shapes)}")
    return freeze(np.mean(np.stack(images), axis=0), copy=False)


class DatasetManifest(Document):
    images_dir: Path
    annotations_dir: Path
    annotation_format: Literal["voc-xml", "boxes-json"]
    classes: list[str] = []


class DatasetEntry(FrozenModel):
    image_id: str
    image_path: Path
    annotation: Annotation

    def prepare(self, mode: StretchResize | ShortestSideCenterCrop) -> PreparedSample:
        pixels, annotation = preprocess(read_image(self.image_path), self.annotation, mode)
        return PreparedSample(image_id=self.image_id, pixels=pixels, boxes=annotation.boxes)


class Dataset(FrozenModel):
    root: Path
    manifest: DatasetManifest
    entries: list[DatasetEntry]

    @cached_property
    def classes(self) -> list[str]:
        return sorted({label for entry in self.entries for label in entry.annotation.classes})


def _annotation_suffix(annotation_format: str) -> str:
    return ".xml" if annotation_format == "voc-xml" else ".json"


def _image_path(images_dir: Path, image_id: str) -> Path:
    for suffix in IMAGE_SUFFIXES:
        candidate = images_dir / f"{image_id}{suffix}"
        if candidate.is_file():
            return candidate
    return images_dir / f"{image_id}{IMAGE_SUFFIXES[0]}"


def _keep_known(annotation: Annotation, classes: list[str]) -> Annotation:
    if not classes:
        return annotation
    unknown = sorted({box.class_label for box in annotation.boxes} - set(classes))
    if unknown:
        LOGGER.warning("Ignoring boxes of %s with classes outside the dataset: %s", annotation.image_id, unknown)
    boxes = [box for box in annotation.boxes if box.class_label in classes]
    return annotation.model_copy(update={"boxes": boxes})


def load_dataset(manifest_path: Path | str) -> Dataset:
    """Read the dataset manifest and every annotation; images are decoded lazily, entries sorted by image id."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise MissingFile(f"Dataset manifest not found: {manifest_path}")
    try:
        manifest = DatasetManifest.model_validate_json(manifest_path.read_text())
    except ValidationError as error:
        raise MalformedDocument(f"{manifest_path}: {error}") from error
    root = manifest_path.parent
    images_dir, annotations_dir = root / manifest.images_dir, root / manifest.annotations_dir
    if not annotations_dir.is_dir():
        raise MissingFile(f"Annotation directory not found: {annotations_dir}")
    entries = []
    for path in sorted(annotations_dir.glob(f"*{_annotation_suffix(manifest.annotation_format)}")):
        annotation = _keep_known(read_annotation(path, manifest.annotation_format), manifest.classes)
        if not annotation.boxes:
            LOGGER.warning("Skipping %s: no boxes", annotation.image_id)
            continue
        image_path = _image_path(images_dir, annotation.image_id)
        entries.append(DatasetEntry(image_id=annotation.image_id, image_path=image_path, annotation=annotation))
    if not entries:
        raise EmptyInput(f"Dataset {manifest_path} has no annotated images")
    entries.sort(key=lambda entry: entry.image_id)
    LOGGER.debug("Loaded dataset %s with %d images", manifest_path, len(entries))
    return Dataset(root=root, manifest=manifest, entries=entries)