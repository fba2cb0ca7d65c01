"""Layer-wise relevance propagation.

Every rule redistributes the relevance ``R_j`` of a layer's outputs onto its inputs ``x_i`` in proportion to
some notion of contribution ``z_ij``. For linear layers all rules are evaluated without materialising ``z_ij``:
with ``s_j = R_j / z_j`` the input relevance is ``x_i * (W^T s)_i``.

Biases enter the denominators but the relevance they would receive is dropped, so conservation is exact only
for bias-free networks.
"""

import logging
from typing import Self

import numpy as np
from pydantic import ConfigDict, NonNegativeInt, model_validator

from lrp_cmp.base import FrozenModel
from lrp_cmp.composite import CompositeConfig, config_digest, resolve_rules
from lrp_cmp.errors import (
    BoundsViolation,
    InvalidAlpha,
    NonPositiveEpsilon,
    NotFirstLayer,
    ShapeMismatch,
    UnsupportedLayer,
)
from lrp_cmp.layers import AvgPool2D, Conv2D, Dense, Flatten, Layer, LinearLayer, MaxPool2D, PoolLayer, ReLU
from lrp_cmp.model import ForwardTrace, Model, check_class_index, forward
from lrp_cmp.numerics import negative_part, positive_part, safe_divide, signs
from lrp_cmp.render import Heatmap2D
from lrp_cmp.rules import ZB, AlphaBeta, Epsilon, Flat, Identity, Rule, WinnerTakeAll, Z
from lrp_cmp.typing import Array, Tensor, freeze

LOGGER = logging.getLogger(__name__)


class DecompositionContext(FrozenModel):
    """One layer with the activations it saw during the forward pass."""

    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    layer: Layer
    input_activations: Tensor
    output_aggregates: Tensor
    layer_index: NonNegativeInt

    @model_validator(mode="after")
    def check_shapes(self) -> Self:
        expected = self.layer.output_shape(self.input_activations.shape)
        if self.output_aggregates.shape != expected:
            actual = self.output_aggregates.shape
            raise ShapeMismatch(f"Output aggregates {actual} do not match layer output {expected}")
        return self

    @classmethod
    def from_input(cls, layer: Layer, x: Array, *, layer_index: int) -> "DecompositionContext":
        x = freeze(x)
        return cls(layer=layer, input_activations=x, output_aggregates=layer.forward(x), layer_index=layer_index)

    def aggregates_match_forward(self, rtol: float = 1e-12) -> bool:
        """Whether the stored aggregates equal the layer's output recomputed from the stored input."""
        return bool(np.allclose(self.layer.forward(self.input_activations), self.output_aggregates, rtol=rtol, atol=0))


class AttributionMap(FrozenModel):
    model_config = ConfigDict(frozen=True, extra="forbid", arbitrary_types_allowed=True)

    relevance: Tensor
    class_index: NonNegativeInt
    output_logit: float
    config_digest: str

    @property
    def total(self) -> float:
        return float(self.relevance.sum())


def _upper(ctx: DecompositionContext, relevance: Array) -> Array:
    relevance = np.asarray(relevance, dtype=np.float64)
    if relevance.shape != ctx.output_aggregates.shape:
        expected = ctx.output_aggregates.shape
        raise ShapeMismatch(f"Upper relevance {relevance.shape} does not match layer output {expected}")
    return relevance


def _linear(ctx: DecompositionContext) -> LinearLayer:
    if not isinstance(ctx.layer, LinearLayer):
        raise UnsupportedLayer(f"{ctx.layer.type} is not a linear layer")
    return ctx.layer


def init_output_relevance(trace: ForwardTrace, class_index: int) -> Array:
    """The selected logit at its own position, zero elsewhere."""
    check_class_index(trace.logits, class_index)
    relevance = np.zeros_like(trace.logits)
    relevance[class_index] = trace.logits[class_index]
    return freeze(relevance, copy=False)


def decompose_z(ctx: DecompositionContext, relevance: Array) -> Array:
    layer, x = _linear(ctx), ctx.input_activations
    s = safe_divide(_upper(ctx, relevance), ctx.output_aggregates)
    return freeze(x * layer.apply_transpose(s, x.shape), copy=False)


def decompose_epsilon(ctx: DecompositionContext, relevance: Array, epsilon: float) -> Array:
    if not epsilon > 0:
        raise NonPositiveEpsilon(f"epsilon must be positive, got {epsilon}")
    layer, x, z = _linear(ctx), ctx.input_activations, ctx.output_aggregates
    s = _upper(ctx, relevance) / (z + epsilon * signs(z))
    return freeze(x * layer.apply_transpose(s, x.shape), copy=False)


def alphabeta_aggregates(ctx: DecompositionContext) -> tuple[Array, Array]:
    """Sums of the positive and of the negative contributions ``z_ij`` per output, bias split by its sign."""
    layer, x = _linear(ctx), ctx.input_activations
    xp, xn = positive_part(x), negative_part(x)
    bias = layer.bias_term(ctx.output_aggregates.shape)
    zp = layer.apply(xp, "positive") + layer.apply(xn, "negative") + positive_part(bias)
    zn = layer.apply(xp, "negative") + layer.apply(xn, "positive") + negative_part(bias)
    return zp, zn


def decompose_alphabeta(ctx: DecompositionContext, relevance: Array, alpha: float) -> Array:
    if not alpha >= 1:
        raise InvalidAlpha(f"alpha must be >= 1, got {alpha}")
    beta = 1.0 - alpha
    layer, x = _linear(ctx), ctx.input_activations
    relevance = _upper(ctx, relevance)
    xp, xn = positive_part(x), negative_part(x)
    zp, zn = alphabeta_aggregates(ctx)
    sp, sn = safe_divide(relevance, zp), safe_divide(relevance, zn)
    transpose = layer.apply_transpose
    activating = xp * transpose(sp, x.shape, "positive") + xn * transpose(sp, x.shape, "negative")
    inhibiting = xp * transpose(sn, x.shape, "negative") + xn * transpose(sn, x.shape, "positive")
    return freeze(alpha * activating + beta * inhibiting, copy=False)


def decompose_flat(ctx: DecompositionContext, relevance: Array, *, count_padding: bool = False) -> Array:
    """Spread each output's relevance evenly over its receptive field.

    Padding positions are not part of the receptive field unless ``count_padding`` is set, in which case they
    take their share and that relevance is lost.
    """
    relevance, x = _upper(ctx, relevance), ctx.input_activations
    match ctx.layer:
        case Conv2D() as layer:
            if count_padding:
                counts = np.full(relevance.shape, float(layer.kernels[0].size))
            else:
                counts = layer.apply(np.ones(x.shape), "ones")
            return freeze(layer.apply_transpose(safe_divide(relevance, counts), x.shape, "ones"), copy=False)
        case PoolLayer() as layer:
            return freeze(layer.spread(relevance / layer.window_size, x.shape), copy=False)
        case _:
            raise UnsupportedLayer(f"flat cannot decompose a {ctx.layer.type} layer")


def decompose_zb(ctx: DecompositionContext, relevance: Array, low: float, high: float) -> Array:
    """Decomposition for the input layer when inputs are known to lie within ``[low, high]``."""
    if ctx.layer_index != 0:
        raise NotFirstLayer(f"zb applies to the first layer only, not layer {ctx.layer_index}")
    if not low < high:
        raise BoundsViolation(f"zb bounds need low < high, got low={low}, high={high}")
    x = ctx.input_activations
    if x.min() < low or x.max() > high:
        raise BoundsViolation(f"Inputs range {x.min():g}..{x.max():g} exceeds zb bounds [{low:g}, {high:g}]")
    if not isinstance(ctx.layer, (Dense, Conv2D)):
        raise UnsupportedLayer(f"zb cannot decompose a {ctx.layer.type} layer")
    layer = ctx.layer
    lower, upper = np.full(x.shape, float(low)), np.full(x.shape, float(high))
    z = layer.apply(x) - layer.apply(lower, "positive") - layer.apply(upper, "negative")
    s = safe_divide(_upper(ctx, relevance), z)
    result = (
        x * layer.apply_transpose(s, x.shape)
        - lower * layer.apply_transpose(s, x.shape, "positive")
        - upper * layer.apply_transpose(s, x.shape, "negative")
    )
    return freeze(result, copy=False)


def decompose_pool(ctx: DecompositionContext, relevance: Array, rule: Rule) -> Array:
    match ctx.layer, rule:
        case MaxPool2D() as layer, WinnerTakeAll():
            return freeze(layer.route(ctx.input_activations, _upper(ctx, relevance)), copy=False)
        case PoolLayer(), Flat():
            return decompose_flat(ctx, relevance)
        case AvgPool2D(), Z():
            return decompose_z(ctx, relevance)
        case AvgPool2D(), Epsilon(epsilon=epsilon):
            return decompose_epsilon(ctx, relevance, epsilon)
        case AvgPool2D(), AlphaBeta(alpha=alpha):
            return decompose_alphabeta(ctx, relevance, alpha)
        case _:
            raise UnsupportedLayer(f"{rule.rule} cannot decompose a {ctx.layer.type} layer")


def decompose(ctx: DecompositionContext, relevance: Array, rule: Rule) -> Array:
    """Apply ``rule`` to one layer."""
    match ctx.layer, rule:
        case (ReLU() | Flatten()), Identity():
            return freeze(np.reshape(_upper(ctx, relevance), ctx.input_activations.shape), copy=False)
        case PoolLayer(), _:
            return decompose_pool(ctx, relevance, rule)
        case _, Z():
            return decompose_z(ctx, relevance)
        case _, Epsilon(epsilon=epsilon):
            return decompose_epsilon(ctx, relevance, epsilon)
        case _, AlphaBeta(alpha=alpha):
            return decompose_alphabeta(ctx, relevance, alpha)
        case _, Flat(count_padding=count_padding):
            return decompose_flat(ctx, relevance, count_padding=count_padding)
        case _, ZB(low=low, high=high):
            return decompose_zb(ctx, relevance, low, high)
        case _:
            raise UnsupportedLayer(f"{rule.rule} cannot decompose a {ctx.layer.type} layer")


def propagate(model: Model, trace: ForwardTrace, class_index: int, rules: list[tuple[int, Rule]]) -> list[Array]:
    """Relevance at every layer boundary; entry ``i`` is the relevance of layer ``i``'s input, the last entry the
    initial output relevance."""
    relevance = init_output_relevance(trace, class_index)
    relevances = [relevance]
    for index, rule in reversed(rules):
        activations = trace[index]
        ctx = DecompositionContext(
            layer=model.layers[index],
            input_activations=activations.input,
            output_aggregates=activations.output,
            layer_index=index,
        )
        relevance = decompose(ctx, relevance, rule)
        LOGGER.debug("Layer %d (%s, %s): relevance sum %g", index, ctx.layer.type, rule.label, relevance.sum())
        relevances.append(relevance)
    return relevances[::-1]


def attribute(model: Model, input: Array, class_index: int, config: CompositeConfig) -> AttributionMap:
    trace = forward(model, input)
    check_class_index(trace.logits, class_index)
    rules = resolve_rules(model, config)
    relevances = propagate(model, trace, class_index, rules)
    return AttributionMap(
        relevance=relevances[0],
        class_index=class_index,
        output_logit=float(trace.logits[class_index]),
        config_digest=config_digest(model, class_index, rules),
    )


def pool_channels(attribution: AttributionMap, *, positive_first: bool = False) -> Heatmap2D:
    """Sum relevance over channels; with ``positive_first`` negative values are dropped before summing."""
    relevance = attribution.relevance
    if relevance.ndim != 3:
        raise ShapeMismatch(f"Channel pooling needs (C, H, W) relevance, got shape {relevance.shape}")
    if positive_first:
        relevance = positive_part(relevance)
    return Heatmap2D(values=relevance.sum(axis=0))
