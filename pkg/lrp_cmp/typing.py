from typing import Annotated, Any

import numpy as np
import numpy.typing as npt
from pydantic import GetCoreSchemaHandler, GetJsonSchemaHandler
from pydantic.json_schema import JsonSchemaValue
from pydantic_core import core_schema

from lrp_cmp.errors import NonFiniteValue

type Array = npt.NDArray[np.float64]


def freeze(value: Any, *, copy: bool = True) -> Array:
    """Convert `value` to a read-only float64 array, rejecting NaN and Inf."""
    if copy:
        array = np.array(value, dtype=np.float64, order="C")
    else:
        array = np.ascontiguousarray(value, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise NonFiniteValue("Tensor contains non-finite values")
    array.setflags(write=False)
    return array


class TensorSchema:
    """Pydantic integration for read-only float64 numpy arrays."""

    @classmethod
    def __get_pydantic_core_schema__(cls, source_type: Any, handler: GetCoreSchemaHandler) -> core_schema.CoreSchema:
        def validate(value: Any) -> Array:
            if isinstance(value, np.ndarray) and value.dtype == np.float64 and not value.flags.writeable:
                if not np.all(np.isfinite(value)):
                    raise NonFiniteValue("Tensor contains non-finite values")
                return value
            return freeze(value)

        return core_schema.no_info_plain_validator_function(
            validate,
            serialization=core_schema.plain_serializer_function_ser_schema(lambda array: array.tolist()),
        )

    @classmethod
    def __get_pydantic_json_schema__(
        cls, core_schema: core_schema.CoreSchema, handler: GetJsonSchemaHandler
    ) -> JsonSchemaValue:
        return {"type": "array", "items": {}}


Tensor = Annotated[Array, TensorSchema()]
