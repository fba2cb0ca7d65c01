"""Shared numerical primitives for the decomposition rules.

Tensors are plain numpy arrays of float64, channels-first and row-major; see `lrp_cmp.typing.freeze`.
"""

import numpy as np

from lrp_cmp.typing import Array, freeze

__all__ = ["freeze", "stabilized_sign", "safe_fraction", "signs", "safe_divide", "positive_part", "negative_part"]


def stabilized_sign(value: float) -> float:
    """Sign of `value` where zero counts as positive."""
    return 1.0 if value >= 0 else -1.0


def safe_fraction(numerator: float, denominator: float) -> float:
    """`numerator / denominator`, or exactly 0 when the denominator is 0."""
    if denominator == 0:
        return 0.0
    return numerator / denominator


def signs(values: Array) -> Array:
    """Elementwise `stabilized_sign`."""
    return np.where(values >= 0, 1.0, -1.0)


def safe_divide(numerator: Array, denominator: Array) -> Array:
    """Elementwise `safe_fraction`."""
    numerator, denominator = np.broadcast_arrays(np.asarray(numerator, np.float64), np.asarray(denominator, np.float64))
    out = np.zeros(numerator.shape, dtype=np.float64)
    np.divide(numerator, denominator, out=out, where=denominator != 0)
    return out


def positive_part(values: Array) -> Array:
    return np.maximum(values, 0.0)


def negative_part(values: Array) -> Array:
    return np.minimum(values, 0.0)
