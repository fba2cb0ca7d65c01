"""Assignment of decomposition rules to layers.

A `CompositeConfig` holds an ordered list of (selector, rule) assignments and optionally a preset. Presets expand
against a concrete model into further assignments, appended after the explicit ones; for every layer the first
matching assignment wins. ReLU and Flatten layers always resolve to `Identity`.
"""

import logging
from pathlib import Path
from typing import Annotated, Literal, Self

from pydantic import Field, NonNegativeInt, TypeAdapter, ValidationError, model_validator

from lrp_cmp.base import Document, FrozenModel, domain_error
from lrp_cmp.errors import InvalidAlpha, InvalidAssignment, MalformedDocument, MissingFile, NonPositiveEpsilon
from lrp_cmp.layers import AvgPool2D, BaseLayer, Conv2D, Dense, Flatten, MaxPool2D, ReLU
from lrp_cmp.model import Model
from lrp_cmp.rules import DEFAULT_EPSILON, ZB, AlphaBeta, Epsilon, Flat, Identity, Rule, WinnerTakeAll, Z
from lrp_cmp.utils import canonical_json, sha256_hex

LOGGER = logging.getLogger(__name__)

LayerTypeName = Literal["dense", "conv2d", "maxpool2d", "avgpool2d", "relu", "flatten"]
PresetName = Literal["z", "epsilon", "alphabeta", "cmp"]
RULE_ADAPTER: TypeAdapter[Rule] = TypeAdapter(Rule)


class ByIndexRange(FrozenModel):
    """Layers ``first`` to ``last``, both inclusive."""

    kind: Literal["range"] = "range"
    first: NonNegativeInt
    last: NonNegativeInt

    @model_validator(mode="after")
    def check_order(self) -> Self:
        if self.first > self.last:
            raise InvalidAssignment(None, f"range [{self.first}, {self.last}] is empty")
        return self

    def matches(self, index: int, layer: BaseLayer) -> bool:
        return self.first <= index <= self.last


class ByType(FrozenModel):
    kind: Literal["type"] = "type"
    layer_type: LayerTypeName

    def matches(self, index: int, layer: BaseLayer) -> bool:
        return layer.type == self.layer_type


class Default(FrozenModel):
    kind: Literal["default"] = "default"

    def matches(self, index: int, layer: BaseLayer) -> bool:
        return True


Selector = Annotated[ByIndexRange | ByType | Default, Field(discriminator="kind")]


class Assignment(FrozenModel):
    selector: Selector
    rule: Rule


class CompositeConfig(FrozenModel):
    """Explicit assignments (highest priority) plus an optional preset.

    Presets:
        z, epsilon, alphabeta: one rule for every linear layer.
        cmp: epsilon on dense layers, alphabeta on the convolutional stack.
    All presets send max pooling through `WinnerTakeAll`, apply `Flat` to the first ``flat_n`` layers of the
    convolutional stack (conv and pool layers before the first dense layer) and, with ``zb`` set, `ZB` to layer 0.
    """

    assignments: list[Assignment] = []
    preset: PresetName | None = None
    alpha: float = 1.0
    epsilon: float = DEFAULT_EPSILON
    flat_n: NonNegativeInt | Literal["all"] = 0
    zb: ZB | None = None

    @model_validator(mode="after")
    def check_default(self) -> Self:
        if self.preset is None and not any(isinstance(a.selector, Default) for a in self.assignments):
            raise InvalidAssignment(None, "a config without preset needs a default assignment")
        return self

    @model_validator(mode="after")
    def check_preset_parameters(self) -> Self:
        if not self.alpha >= 1:
            raise InvalidAlpha(f"alpha must be >= 1, got {self.alpha}")
        if not self.epsilon > 0:
            raise NonPositiveEpsilon(f"epsilon must be positive, got {self.epsilon}")
        return self

    @classmethod
    def from_preset(cls, preset: PresetName, **options) -> "CompositeConfig":
        return cls(preset=preset, **options)

    def preset_assignments(self, model: Model) -> list[Assignment]:
        if self.preset is None:
            return []
        assignments: list[Assignment] = []
        if self.zb is not None:
            assignments.append(Assignment(selector=ByIndexRange(first=0, last=0), rule=self.zb))
        for index in flat_layer_indices(model, self.flat_n):
            assignments.append(Assignment(selector=ByIndexRange(first=index, last=index), rule=Flat()))
        assignments.append(Assignment(selector=ByType(layer_type="maxpool2d"), rule=WinnerTakeAll()))
        match self.preset:
            case "z":
                assignments.append(Assignment(selector=Default(), rule=Z()))
            case "epsilon":
                assignments.append(Assignment(selector=Default(), rule=Epsilon(epsilon=self.epsilon)))
            case "alphabeta":
                assignments.append(Assignment(selector=Default(), rule=AlphaBeta(alpha=self.alpha)))
            case "cmp":
                assignments.append(Assignment(selector=ByType(layer_type="dense"), rule=Epsilon(epsilon=self.epsilon)))
                assignments.append(Assignment(selector=Default(), rule=AlphaBeta(alpha=self.alpha)))
        return assignments

    def expand(self, model: Model) -> list[Assignment]:
        return [*self.assignments, *self.preset_assignments(model)]


def conv_stack_indices(model: Model) -> list[int]:
    """Indices of the conv and pool layers before the first dense layer."""
    indices = []
    for index, layer in enumerate(model.layers):
        if isinstance(layer, Dense):
            break
        if isinstance(layer, (Conv2D, MaxPool2D, AvgPool2D)):
            indices.append(index)
    return indices


def flat_layer_indices(model: Model, flat_n: int | Literal["all"]) -> list[int]:
    stack = conv_stack_indices(model)
    if flat_n == "all":
        return stack
    if flat_n > len(stack):
        LOGGER.warning("flat_n=%d exceeds the %d layers of the convolutional stack", flat_n, len(stack))
    return stack[:flat_n]


def check_rule(index: int, layer: BaseLayer, rule: Rule) -> None:
    """Reject rules that cannot decompose the given layer."""
    match layer, rule:
        case (ReLU() | Flatten()), Identity():
            return
        case _, Identity():
            raise InvalidAssignment(index, f"identity is reserved for relu and flatten, not {layer.type}")
        case Dense(), Flat():
            raise InvalidAssignment(index, "flat cannot decompose a dense layer")
        case _, ZB() if index != 0:
            raise InvalidAssignment(index, "zb applies to the first layer only")
        case (Dense() | Conv2D()), ZB():
            return
        case _, ZB():
            raise InvalidAssignment(index, f"zb needs a dense or conv2d layer, not {layer.type}")
        case MaxPool2D(), (WinnerTakeAll() | Flat()):
            return
        case MaxPool2D(), _:
            raise InvalidAssignment(index, f"max pooling accepts wta or flat, not {rule.rule}")
        case _, WinnerTakeAll():
            raise InvalidAssignment(index, f"wta applies to max pooling only, not {layer.type}")


def resolve_rules(model: Model, config: CompositeConfig) -> list[tuple[int, Rule]]:
    assignments = config.expand(model)
    resolved: list[tuple[int, Rule]] = []
    for index, layer in enumerate(model.layers):
        if isinstance(layer, (ReLU, Flatten)):
            rule: Rule = Identity()
        else:
            assignment = next((a for a in assignments if a.selector.matches(index, layer)), None)
            if assignment is None:
                raise InvalidAssignment(index, f"no selector matches {layer.type}")
            rule = assignment.rule
        check_rule(index, layer, rule)
        resolved.append((index, rule))
    LOGGER.debug("Resolved rules: %s", ", ".join(f"{i}:{rule.label}" for i, rule in resolved))
    return resolved


def config_digest(model: Model, class_index: int, resolved: list[tuple[int, Rule]]) -> str:
    """SHA-256 of the canonical JSON of parameter checksum, class and resolved rules with their parameters."""
    payload = {
        "parameters_checksum": model.parameters_checksum,
        "class_index": class_index,
        "rules": [[index, rule.model_dump()] for index, rule in resolved],
    }
    return sha256_hex(canonical_json(payload))


class TypeSelectorEntry(Document):
    type: LayerTypeName


class RangeSelectorEntry(Document):
    range: tuple[NonNegativeInt, NonNegativeInt]


class DefaultSelectorEntry(Document):
    default: Literal[True] = True


class OverrideEntry(Document):
    selector: TypeSelectorEntry | RangeSelectorEntry | DefaultSelectorEntry
    rule: Literal["z", "epsilon", "alphabeta", "flat", "zb", "wta"]
    params: dict[str, float | bool] = {}

    def to_assignment(self) -> Assignment:
        match self.selector:
            case TypeSelectorEntry(type=layer_type):
                selector: Selector = ByType(layer_type=layer_type)
            case RangeSelectorEntry(range=(first, last)):
                selector = ByIndexRange(first=first, last=last)
            case _:
                selector = Default()
        return Assignment(selector=selector, rule=RULE_ADAPTER.validate_python({"rule": self.rule, **self.params}))


class ZBBounds(Document):
    low: float = 0.0
    high: float = 1.0


class CompositeConfigFile(Document):
    """The JSON form of a composite config."""

    preset: PresetName
    alpha: float = 1.0
    epsilon: float = DEFAULT_EPSILON
    flat_n: NonNegativeInt | Literal["all"] = 0
    zb: ZBBounds | None = None
    overrides: list[OverrideEntry] = []

    def to_config(self) -> CompositeConfig:
        return CompositeConfig(
            assignments=[override.to_assignment() for override in self.overrides],
            preset=self.preset,
            alpha=self.alpha,
            epsilon=self.epsilon,
            flat_n=self.flat_n,
            zb=None if self.zb is None else ZB(low=self.zb.low, high=self.zb.high),
        )


def load_config(path: Path | str) -> CompositeConfig:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"Composite config not found: {path}")
    try:
        return CompositeConfigFile.model_validate_json(path.read_text()).to_config()
    except ValidationError as error:
        cause = domain_error(error)
        if cause is not error:
            raise cause from error
        raise MalformedDocument(f"{path}: {error}") from error


ANALYZERS: dict[str, CompositeConfig] = {
    "z": CompositeConfig(preset="z"),
    "epsilon": CompositeConfig(preset="epsilon"),
    "alphabeta1": CompositeConfig(preset="alphabeta", alpha=1.0),
    "alphabeta2": CompositeConfig(preset="alphabeta", alpha=2.0),
    "cmp-a1": CompositeConfig(preset="cmp", alpha=1.0),
    "cmp-a2": CompositeConfig(preset="cmp", alpha=2.0),
    "cmp-a1-flat": CompositeConfig(preset="cmp", alpha=1.0, flat_n=1),
    "cmp-a2-flat": CompositeConfig(preset="cmp", alpha=2.0, flat_n=1),
}
