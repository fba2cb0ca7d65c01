"""Layer definitions of a feedforward ReLU network and their forward/transpose arithmetic.

All spatial tensors are channels-first ``(C, H, W)``. Linear layers (dense, conv2d, avgpool2d) expose the
bias-free mapping ``apply`` and its transpose ``apply_transpose`` for a chosen part of their weights, which is
what the decomposition rules are built from.
"""

from typing import Annotated, Literal, Self

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import ConfigDict, Field, PositiveInt, model_validator

from lrp_cmp.base import FrozenModel
from lrp_cmp.errors import ShapeMismatch
from lrp_cmp.typing import Array, Tensor
from lrp_cmp.utils import get_value_from_literal

type Shape = tuple[int, ...]
type Pair = tuple[PositiveInt, PositiveInt]
WeightPart = Literal["full", "positive", "negative", "ones"]


def split_weights(weights: Array, part: WeightPart) -> Array:
    match part:
        case "full":
            return weights
        case "positive":
            return np.maximum(weights, 0.0)
        case "negative":
            return np.minimum(weights, 0.0)
        case "ones":
            return np.ones_like(weights)


def windows(x: Array, window: Pair, stride: Pair) -> Array:
    """View of ``x`` (C, H, W) as ``(C, oH, oW, kH, kW)`` patches."""
    kh, kw = window
    sh, sw = stride
    return sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::sh, ::sw]


def scatter_windows(patches: Array, shape: Shape, stride: Pair) -> Array:
    """Transpose of `windows`: sum ``(C, oH, oW, kH, kW)`` patches back into an array of ``shape``."""
    _, oh, ow, kh, kw = patches.shape
    sh, sw = stride
    out = np.zeros(shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw] += patches[:, :, :, i, j]
    return out


def pooled_extent(size: int, window: int, stride: int) -> int:
    return (size - window) // stride + 1


class BaseLayer(FrozenModel):
    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    type: str

    @classmethod
    def layer_type(cls) -> str:
        return str(get_value_from_literal(cls.model_fields["type"].annotation))

    def output_shape(self, input_shape: Shape) -> Shape:
        raise NotImplementedError

    def forward(self, x: Array) -> Array:
        raise NotImplementedError

    def backward(self, x: Array, grad_output: Array) -> Array:
        """Gradient of a scalar wrt. the layer input given its gradient wrt. the layer output."""
        raise NotImplementedError

    def parameter_count(self) -> int:
        return 0


class LinearLayer(BaseLayer):
    """Bias plus a linear map of the input."""

    def apply(self, x: Array, part: WeightPart = "full") -> Array:
        raise NotImplementedError

    def apply_transpose(self, s: Array, input_shape: Shape, part: WeightPart = "full") -> Array:
        raise NotImplementedError

    def bias_term(self, output_shape: Shape) -> Array:
        return np.zeros(output_shape, dtype=np.float64)

    def forward(self, x: Array) -> Array:
        return self.apply(x) + self.bias_term(self.output_shape(x.shape))

    def backward(self, x: Array, grad_output: Array) -> Array:
        return self.apply_transpose(grad_output, x.shape)


class Dense(LinearLayer):
    type: Literal["dense"] = "dense"
    weights: Tensor
    bias: Tensor

    @model_validator(mode="after")
    def check_shapes(self) -> Self:
        if self.weights.ndim != 2:
            raise ShapeMismatch(f"Dense weights must be [out, in], got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeMismatch(f"Dense bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs")
        return self

    @property
    def in_features(self) -> int:
        return self.weights.shape[1]

    @property
    def out_features(self) -> int:
        return self.weights.shape[0]

    def output_shape(self, input_shape: Shape) -> Shape:
        if tuple(input_shape) != (self.in_features,):
            raise ShapeMismatch(f"Dense expects input ({self.in_features},), got {tuple(input_shape)}")
        return (self.out_features,)

    def apply(self, x: Array, part: WeightPart = "full") -> Array:
        return split_weights(self.weights, part) @ x

    def apply_transpose(self, s: Array, input_shape: Shape, part: WeightPart = "full") -> Array:
        return split_weights(self.weights, part).T @ s

    def bias_term(self, output_shape: Shape) -> Array:
        return self.bias

    def parameter_count(self) -> int:
        return self.weights.size + self.bias.size


class Conv2D(LinearLayer):
    type: Literal["conv2d"] = "conv2d"
    kernels: Tensor
    bias: Tensor
    stride: Pair = (1, 1)
    padding: tuple[int, int, int, int] = Field(default=(0, 0, 0, 0), description="top, bottom, left, right")

    @model_validator(mode="after")
    def check_shapes(self) -> Self:
        if self.kernels.ndim != 4:
            raise ShapeMismatch(f"Conv2D kernels must be [outC, inC, kH, kW], got shape {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ShapeMismatch(f"Conv2D bias shape {self.bias.shape} does not match {self.kernels.shape[0]} channels")
        if any(p < 0 for p in self.padding):
            raise ShapeMismatch(f"Conv2D padding must be non-negative, got {self.padding}")
        return self

    @property
    def window(self) -> Pair:
        return (self.kernels.shape[2], self.kernels.shape[3])

    def padded_shape(self, input_shape: Shape) -> Shape:
        c, h, w = input_shape
        top, bottom, left, right = self.padding
        return (c, h + top + bottom, w + left + right)

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3 or input_shape[0] != self.kernels.shape[1]:
            raise ShapeMismatch(f"Conv2D expects ({self.kernels.shape[1]}, H, W) input, got {tuple(input_shape)}")
        _, hp, wp = self.padded_shape(input_shape)
        kh, kw = self.window
        if hp < kh or wp < kw:
            raise ShapeMismatch(f"Conv2D kernel {self.window} larger than padded input {(hp, wp)}")
        return (self.kernels.shape[0], pooled_extent(hp, kh, self.stride[0]), pooled_extent(wp, kw, self.stride[1]))

    def pad(self, x: Array) -> Array:
        top, bottom, left, right = self.padding
        return np.pad(x, ((0, 0), (top, bottom), (left, right)))

    def crop(self, x: Array) -> Array:
        top, bottom, left, right = self.padding
        return x[:, top : x.shape[1] - bottom, left : x.shape[2] - right]

    def apply(self, x: Array, part: WeightPart = "full") -> Array:
        self.output_shape(x.shape)
        patches = windows(self.pad(x), self.window, self.stride)
        return np.tensordot(split_weights(self.kernels, part), patches, axes=([1, 2, 3], [0, 3, 4]))

    def apply_transpose(self, s: Array, input_shape: Shape, part: WeightPart = "full") -> Array:
        patches = np.tensordot(s, split_weights(self.kernels, part), axes=([0], [0]))
        padded = scatter_windows(patches.transpose(2, 0, 1, 3, 4), self.padded_shape(input_shape), self.stride)
        return self.crop(padded)

    def bias_term(self, output_shape: Shape) -> Array:
        return np.broadcast_to(self.bias[:, None, None], output_shape)

    def parameter_count(self) -> int:
        return self.kernels.size + self.bias.size


class PoolLayer(BaseLayer):
    window: Pair
    stride: Pair

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3:
            raise ShapeMismatch(f"{self.layer_type()} expects (C, H, W) input, got {tuple(input_shape)}")
        c, h, w = input_shape
        kh, kw = self.window
        if h < kh or w < kw:
            raise ShapeMismatch(f"{self.layer_type()} window {self.window} larger than input {(h, w)}")
        return (c, pooled_extent(h, kh, self.stride[0]), pooled_extent(w, kw, self.stride[1]))

    @property
    def window_size(self) -> int:
        return self.window[0] * self.window[1]

    def window_sum(self, x: Array) -> Array:
        self.output_shape(x.shape)
        return windows(x, self.window, self.stride).sum(axis=(3, 4))

    def spread(self, s: Array, input_shape: Shape) -> Array:
        """Add each output value to every input position of its window."""
        patches = np.broadcast_to(s[:, :, :, None, None], (*s.shape, *self.window))
        return scatter_windows(patches, input_shape, self.stride)


class MaxPool2D(PoolLayer):
    type: Literal["maxpool2d"] = "maxpool2d"

    def forward(self, x: Array) -> Array:
        self.output_shape(x.shape)
        return windows(x, self.window, self.stride).max(axis=(3, 4))

    def winners(self, x: Array) -> Array:
        """Flat index inside each window of its maximum; ties go to the lowest index."""
        patches = windows(x, self.window, self.stride)
        return patches.reshape(*patches.shape[:3], -1).argmax(axis=3)

    def route(self, x: Array, values: Array) -> Array:
        """Send each output value to the input position that attained the window maximum."""
        c, oh, ow = values.shape
        patches = np.zeros((c, oh, ow, self.window_size), dtype=np.float64)
        np.put_along_axis(patches, self.winners(x)[..., None], values[..., None], axis=3)
        return scatter_windows(patches.reshape(c, oh, ow, *self.window), x.shape, self.stride)

    def backward(self, x: Array, grad_output: Array) -> Array:
        return self.route(x, grad_output)


class AvgPool2D(PoolLayer, LinearLayer):
    type: Literal["avgpool2d"] = "avgpool2d"

    def apply(self, x: Array, part: WeightPart = "full") -> Array:
        match part:
            case "ones":
                return self.window_sum(x)
            case "negative":
                return np.zeros(self.output_shape(x.shape), dtype=np.float64)
            case _:
                return self.window_sum(x) / self.window_size

    def apply_transpose(self, s: Array, input_shape: Shape, part: WeightPart = "full") -> Array:
        match part:
            case "ones":
                return self.spread(s, input_shape)
            case "negative":
                return np.zeros(input_shape, dtype=np.float64)
            case _:
                return self.spread(s / self.window_size, input_shape)


class ReLU(BaseLayer):
    type: Literal["relu"] = "relu"

    def output_shape(self, input_shape: Shape) -> Shape:
        return tuple(input_shape)

    def forward(self, x: Array) -> Array:
        return np.maximum(x, 0.0)

    def backward(self, x: Array, grad_output: Array) -> Array:
        return np.where(x > 0, grad_output, 0.0)


class Flatten(BaseLayer):
    type: Literal["flatten"] = "flatten"

    def output_shape(self, input_shape: Shape) -> Shape:
        return (int(np.prod(input_shape)),)

    def forward(self, x: Array) -> Array:
        return x.reshape(-1)

    def backward(self, x: Array, grad_output: Array) -> Array:
        return grad_output.reshape(x.shape)


Layer = Annotated[Dense | Conv2D | MaxPool2D | AvgPool2D | ReLU | Flatten, Field(discriminator="type")]
