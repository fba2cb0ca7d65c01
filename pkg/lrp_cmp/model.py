"""Feedforward network container, forward pass with activation recording, input gradient and the on-disk format.

The on-disk format is a JSON manifest next to a blob of little-endian float64 values::

    {
        "input_shape": [1, 8, 8],
        "class_labels": ["a", "b"],
        "weights_blob": "weights.bin",
        "checksum": 1234567890,
        "layers": [{"type": "conv2d", "in_channels": 1, "out_channels": 2, "kernel_size": [3, 3],
                    "weight_offset": 0, "bias_offset": 18}, {"type": "relu"}, ...]
    }

Offsets count elements, not bytes. Dense weights are stored ``[out][in]``, conv kernels ``[outC][inC][kH][kW]``.
"""

import json
import logging
import zlib
from functools import cached_property
from pathlib import Path
from typing import Annotated, Literal, Self

import numpy as np
from pydantic import ConfigDict, Field, NonNegativeInt, PositiveInt, ValidationError, model_validator

from lrp_cmp.base import Document, FrozenModel
from lrp_cmp.errors import (
    ChecksumMismatch,
    IndexOutOfRange,
    MalformedDocument,
    MissingFile,
    NonFiniteWeight,
    ShapeMismatch,
    UnknownLayerType,
)
from lrp_cmp.layers import AvgPool2D, Conv2D, Dense, Flatten, Layer, MaxPool2D, ReLU, Shape
from lrp_cmp.typing import Array, Tensor, freeze

LOGGER = logging.getLogger(__name__)

BLOB_DTYPE = np.dtype("<f8")

type Pair = tuple[PositiveInt, PositiveInt]


class DenseEntry(Document):
    type: Literal["dense"]
    in_features: PositiveInt
    out_features: PositiveInt
    weight_offset: NonNegativeInt
    bias_offset: NonNegativeInt | None = None


class Conv2DEntry(Document):
    type: Literal["conv2d"]
    in_channels: PositiveInt
    out_channels: PositiveInt
    kernel_size: Pair
    stride: Pair = (1, 1)
    padding: tuple[NonNegativeInt, NonNegativeInt, NonNegativeInt, NonNegativeInt] = (0, 0, 0, 0)
    weight_offset: NonNegativeInt
    bias_offset: NonNegativeInt | None = None


class PoolEntry(Document):
    type: Literal["maxpool2d", "avgpool2d"]
    window: Pair
    stride: Pair | None = None


class ActivationEntry(Document):
    type: Literal["relu", "flatten"]


LayerEntry = Annotated[DenseEntry | Conv2DEntry | PoolEntry | ActivationEntry, Field(discriminator="type")]


class ModelManifest(Document):
    input_shape: tuple[PositiveInt, PositiveInt, PositiveInt]
    class_labels: list[str] = Field(min_length=1)
    weights_blob: str
    checksum: NonNegativeInt
    layers: list[LayerEntry] = Field(min_length=1)


class Model(FrozenModel):
    """An immutable, shape-validated stack of layers ending in a logit vector."""

    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    input_shape: tuple[PositiveInt, PositiveInt, PositiveInt]
    layers: list[Layer] = Field(min_length=1)
    class_labels: list[str] = Field(min_length=1)

    @model_validator(mode="after")
    def check_shape_chain(self) -> Self:
        shapes = self.layer_shapes
        if len(shapes[-1]) != 1 or shapes[-1][0] != len(self.class_labels):
            raise ShapeMismatch(f"Model output shape {shapes[-1]} does not match {len(self.class_labels)} class labels")
        return self

    @cached_property
    def layer_shapes(self) -> list[Shape]:
        """Input shape followed by the output shape of every layer."""
        shapes: list[Shape] = [tuple(self.input_shape)]
        for index, layer in enumerate(self.layers):
            try:
                shapes.append(layer.output_shape(shapes[-1]))
            except ShapeMismatch as error:
                raise ShapeMismatch(f"Layer {index} ({layer.type}): {error}") from error
        return shapes

    @cached_property
    def parameters_checksum(self) -> int:
        """CRC-32 of the parameters repacked in layer order (weights, then bias).

        This is the manifest checksum of the pair `save_model` writes; a manifest with another blob layout declares a
        different value for the same parameters.
        """
        return zlib.crc32(pack_parameters(self)[0].tobytes())

    def class_index(self, label: str) -> int:
        try:
            return self.class_labels.index(label)
        except ValueError:
            raise IndexOutOfRange(f"Unknown class {label!r}; valid labels: {', '.join(self.class_labels)}") from None

    def parameter_count(self) -> int:
        return sum(layer.parameter_count() for layer in self.layers)


class LayerActivations(FrozenModel):
    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    input: Tensor
    output: Tensor


class ForwardTrace(FrozenModel):
    """Input and output activations of every layer from one forward pass."""

    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    layers: list[LayerActivations]

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, index: int) -> LayerActivations:
        return self.layers[index]

    @property
    def input(self) -> Array:
        return self.layers[0].input

    @property
    def logits(self) -> Array:
        return self.layers[-1].output


def check_class_index(logits: Array, class_index: int) -> None:
    if not 0 <= class_index < logits.shape[0]:
        raise IndexOutOfRange(f"Class index {class_index} out of range for {logits.shape[0]} classes")


def forward(model: Model, input: Array) -> ForwardTrace:
    x = freeze(input)
    if x.shape != tuple(model.input_shape):
        raise ShapeMismatch(f"Input shape {x.shape} does not match model input shape {tuple(model.input_shape)}")
    records = []
    for layer in model.layers:
        y = freeze(layer.forward(x), copy=False)
        records.append(LayerActivations(input=x, output=y))
        x = y
    return ForwardTrace(layers=records)


def logit(trace: ForwardTrace, class_index: int) -> float:
    check_class_index(trace.logits, class_index)
    return float(trace.logits[class_index])


def gradient_wrt_input(model: Model, trace: ForwardTrace, class_index: int) -> Array:
    """Analytic gradient of one logit wrt. the input; the ReLU derivative at 0 is 0."""
    check_class_index(trace.logits, class_index)
    grad = np.zeros_like(trace.logits)
    grad[class_index] = 1.0
    for layer, activations in zip(reversed(model.layers), reversed(trace.layers)):
        grad = layer.backward(activations.input, grad)
    return freeze(grad, copy=False)


def _read_parameters(blob: Array, offset: int, shape: Shape, what: str) -> Array:
    size = int(np.prod(shape))
    if offset + size > blob.size:
        raise ShapeMismatch(f"{what} needs {size} values at offset {offset}, but the blob holds {blob.size}")
    values = blob[offset : offset + size].reshape(shape)
    if not np.all(np.isfinite(values)):
        raise NonFiniteWeight(f"{what} contains non-finite values")
    return values


def _build_layer(entry: DenseEntry | Conv2DEntry | PoolEntry | ActivationEntry, blob: Array, index: int) -> Layer:
    match entry:
        case DenseEntry(in_features=n_in, out_features=n_out):
            weights = _read_parameters(blob, entry.weight_offset, (n_out, n_in), f"Layer {index} weights")
            bias = _read_bias(blob, entry.bias_offset, n_out, index)
            return Dense(weights=weights, bias=bias)
        case Conv2DEntry(in_channels=c_in, out_channels=c_out, kernel_size=(kh, kw)):
            kernels = _read_parameters(blob, entry.weight_offset, (c_out, c_in, kh, kw), f"Layer {index} kernels")
            bias = _read_bias(blob, entry.bias_offset, c_out, index)
            return Conv2D(kernels=kernels, bias=bias, stride=entry.stride, padding=entry.padding)
        case PoolEntry(type="maxpool2d"):
            return MaxPool2D(window=entry.window, stride=entry.stride or entry.window)
        case PoolEntry(type="avgpool2d"):
            return AvgPool2D(window=entry.window, stride=entry.stride or entry.window)
        case ActivationEntry(type="relu"):
            return ReLU()
        case _:
            return Flatten()


def _read_bias(blob: Array, offset: int | None, size: int, index: int) -> Array:
    if offset is None:
        return np.zeros(size, dtype=np.float64)
    return _read_parameters(blob, offset, (size,), f"Layer {index} bias")


def load_manifest(manifest_path: Path) -> ModelManifest:
    if not manifest_path.is_file():
        raise MissingFile(f"Model manifest not found: {manifest_path}")
    try:
        return ModelManifest.model_validate_json(manifest_path.read_text())
    except ValidationError as error:
        unknown = [e for e in error.errors() if e["type"] == "union_tag_invalid"]
        if unknown:
            raise UnknownLayerType(f"{manifest_path}: {unknown[0]['msg']}") from error
        raise MalformedDocument(f"{manifest_path}: {error}") from error


def load_model(manifest_path: Path | str) -> Model:
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    blob_path = manifest_path.parent / manifest.weights_blob
    if not blob_path.is_file():
        raise MissingFile(f"Weights blob not found: {blob_path}")
    raw = blob_path.read_bytes()
    if len(raw) % BLOB_DTYPE.itemsize:
        raise ShapeMismatch(f"Weights blob {blob_path} is not a whole number of float64 values")
    if zlib.crc32(raw) != manifest.checksum:
        raise ChecksumMismatch(f"CRC-32 of {blob_path} is {zlib.crc32(raw)}, manifest declares {manifest.checksum}")
    blob = np.frombuffer(raw, dtype=BLOB_DTYPE).astype(np.float64)
    layers = [_build_layer(entry, blob, index) for index, entry in enumerate(manifest.layers)]
    try:
        model = Model(input_shape=manifest.input_shape, layers=layers, class_labels=manifest.class_labels)
    except ValidationError as error:
        raise ShapeMismatch(f"{manifest_path}: {error}") from error
    LOGGER.debug("Loaded %s: %d layers, %d parameters", manifest_path, len(model.layers), model.parameter_count())
    return model


def pack_parameters(model: Model) -> tuple[Array, list[dict]]:
    """Flatten all parameters into one blob and describe every layer as a manifest entry."""
    chunks: list[Array] = []
    entries: list[dict] = []
    offset = 0

    def push(values: Array) -> int:
        nonlocal offset
        chunks.append(values.reshape(-1))
        start, offset = offset, offset + values.size
        return start

    for layer in model.layers:
        match layer:
            case Dense():
                weight_offset = push(layer.weights)
                entries.append(
                    DenseEntry(
                        type="dense",
                        in_features=layer.in_features,
                        out_features=layer.out_features,
                        weight_offset=weight_offset,
                        bias_offset=push(layer.bias),
                    ).model_dump()
                )
            case Conv2D():
                weight_offset = push(layer.kernels)
                entries.append(
                    Conv2DEntry(
                        type="conv2d",
                        in_channels=layer.kernels.shape[1],
                        out_channels=layer.kernels.shape[0],
                        kernel_size=layer.window,
                        stride=layer.stride,
                        padding=layer.padding,
                        weight_offset=weight_offset,
                        bias_offset=push(layer.bias),
                    ).model_dump()
                )
            case MaxPool2D() | AvgPool2D():
                entries.append(PoolEntry(type=layer.type, window=layer.window, stride=layer.stride).model_dump())
            case _:
                entries.append(ActivationEntry(type=layer.type).model_dump())
    blob = np.concatenate(chunks) if chunks else np.zeros(0)
    return blob.astype(BLOB_DTYPE), entries


def save_model(model: Model, manifest_path: Path | str, weights_blob: str | None = None) -> Path:
    manifest_path = Path(manifest_path)
    blob, entries = pack_parameters(model)
    weights_blob = weights_blob or f"{manifest_path.stem}.bin"
    raw = blob.tobytes()
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    (manifest_path.parent / weights_blob).write_bytes(raw)
    manifest = {
        "input_shape": list(model.input_shape),
        "class_labels": list(model.class_labels),
        "weights_blob": weights_blob,
        "checksum": zlib.crc32(raw),
        "layers": entries,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path
