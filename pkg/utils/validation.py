"""
Validation utilities for the AHP-Net low-dose CT toolkit.

Guard functions used at the entry of every tool. Each raises
ValidationError with a context dict naming the offending argument.
"""

from typing import Any, Sequence, Tuple

import numpy as np

from .error_handling import ValidationError


def require_shape(name: str, array: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Check that an array has exactly the expected shape."""
    array = np.asarray(array)
    if array.shape != tuple(shape):
        raise ValidationError(
            f"{name} has shape {array.shape}, expected {tuple(shape)}",
            context={"argument": name, "shape": array.shape, "expected": tuple(shape)},
        )
    return array


def require_size(name: str, array: np.ndarray, size: int) -> np.ndarray:
    """Check that an array holds exactly `size` elements."""
    array = np.asarray(array)
    if array.size != size:
        raise ValidationError(
            f"{name} has {array.size} elements, expected {size}",
            context={"argument": name, "size": array.size, "expected": size},
        )
    return array


def require_ndim(name: str, array: np.ndarray, ndim: int) -> np.ndarray:
    """Check the number of axes of an array."""
    array = np.asarray(array)
    if array.ndim != ndim:
        raise ValidationError(
            f"{name} has {array.ndim} axes, expected {ndim}",
            context={"argument": name, "ndim": array.ndim, "expected": ndim},
        )
    return array


def require_positive(name: str, value: Any, strict: bool = True) -> Any:
    """Check that a scalar (or every entry of an array) is positive."""
    values = np.asarray(value, dtype=float)
    ok = np.all(values > 0) if strict else np.all(values >= 0)
    if not ok:
        bound = "> 0" if strict else ">= 0"
        raise ValidationError(
            f"{name} must be {bound}, got {value}",
            context={"argument": name, "value": np.asarray(value).tolist()},
        )
    return value


def require_finite(name: str, array: np.ndarray) -> np.ndarray:
    """Check that an array contains no NaN or infinity."""
    array = np.asarray(array)
    if not np.all(np.isfinite(array)):
        raise ValidationError(
            f"{name} contains non-finite values",
            context={"argument": name, "non_finite": int(np.sum(~np.isfinite(array)))},
        )
    return array


def require_choice(name: str, value: str, choices: Sequence[str]) -> str:
    """Check that a string is one of the allowed names."""
    if value not in choices:
        raise ValidationError(
            f"Unknown {name} '{value}', expected one of {sorted(choices)}",
            context={"argument": name, "value": value, "choices": list(choices)},
        )
    return value
