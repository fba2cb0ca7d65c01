from typing import Annotated, Literal, Self

from pydantic import Field, model_validator

from lrp_cmp.base import FrozenModel
from lrp_cmp.errors import BoundsViolation, InvalidAlpha, NonPositiveEpsilon

DEFAULT_EPSILON = 1e-2


class BaseRule(FrozenModel):
    rule: str

    @property
    def label(self) -> str:
        return self.rule


class Z(BaseRule):
    rule: Literal["z"] = "z"


class Epsilon(BaseRule):
    rule: Literal["epsilon"] = "epsilon"
    epsilon: float = DEFAULT_EPSILON

    @model_validator(mode="after")
    def check_epsilon(self) -> Self:
        if not self.epsilon > 0:
            raise NonPositiveEpsilon(f"epsilon must be positive, got {self.epsilon}")
        return self

    @property
    def label(self) -> str:
        return f"epsilon({self.epsilon:g})"


class AlphaBeta(BaseRule):
    """Separate decomposition of activating and inhibiting contributions; beta is always ``1 - alpha``."""

    rule: Literal["alphabeta"] = "alphabeta"
    alpha: float = 1.0

    @model_validator(mode="after")
    def check_alpha(self) -> Self:
        if not self.alpha >= 1:
            raise InvalidAlpha(f"alpha must be >= 1, got {self.alpha}")
        return self

    @property
    def beta(self) -> float:
        return 1.0 - self.alpha

    @property
    def label(self) -> str:
        return f"alphabeta({self.alpha:g})"


class Flat(BaseRule):
    rule: Literal["flat"] = "flat"
    count_padding: bool = False


class ZB(BaseRule):
    rule: Literal["zb"] = "zb"
    low: float = 0.0
    high: float = 1.0

    @model_validator(mode="after")
    def check_bounds(self) -> Self:
        if not self.low < self.high:
            raise BoundsViolation(f"zb bounds need low < high, got low={self.low}, high={self.high}")
        return self

    @property
    def label(self) -> str:
        return f"zb({self.low:g},{self.high:g})"


class WinnerTakeAll(BaseRule):
    rule: Literal["wta"] = "wta"


class Identity(BaseRule):
    rule: Literal["identity"] = "identity"


Rule = Annotated[Z | Epsilon | AlphaBeta | Flat | ZB | WinnerTakeAll | Identity, Field(discriminator="rule")]
