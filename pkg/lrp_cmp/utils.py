import hashlib
import json
from typing import Any, Literal, get_args, get_origin


def get_value_from_literal(literal: Any) -> int | str | None:
    """Get the value from a Literal type"""
    if get_origin(literal) is not Literal:
        return None
    return get_args(literal)[0]


def canonical_json(value: Any) -> str:
    """JSON with sorted keys and no whitespace, so equal values always serialise to equal text."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()
