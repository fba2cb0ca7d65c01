from collections.abc import Iterator, Mapping
from typing import Any

import pydantic as pd

from lrp_cmp.errors import LrpError


def domain_error(error: pd.ValidationError) -> Exception:
    """The first lrp_cmp error a validator raised inside `error`, or `error` itself."""
    for detail in error.errors():
        cause = detail.get("ctx", {}).get("error")
        if isinstance(cause, LrpError):
            return cause
    return error


class FrozenModel(pd.BaseModel):
    """Immutable domain record. Errors raised by its validators surface as themselves, not as ValidationError."""

    model_config = pd.ConfigDict(frozen=True, extra="forbid")

    def __init__(self, /, **data: Any) -> None:
        try:
            super().__init__(**data)
        except pd.ValidationError as error:
            cause = domain_error(error)
            if cause is error:
                raise
            raise cause from error


class Row(FrozenModel, Mapping):
    """Record that reads like a mapping of its columns (field aliases where set), e.g. to be written as a CSV row."""

    model_config = pd.ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    @classmethod
    def columns(cls) -> list[str]:
        return [field.alias or name for name, field in cls.model_fields.items()]

    @classmethod
    def field_name(cls, column: str) -> str:
        for name, field in cls.model_fields.items():
            if column in (name, field.alias):
                return name
        if column in cls.model_computed_fields:
            return column
        raise KeyError(column)

    def __iter__(self) -> Iterator[str]:  # type: ignore[override]
        return iter(self.columns())

    def __len__(self):
        return len(self.columns())

    def __getitem__(self, key):
        return getattr(self, self.field_name(key))


class Document(pd.BaseModel):
    """On-disk JSON document; unknown keys are rejected."""

    model_config = pd.ConfigDict(extra="forbid")
