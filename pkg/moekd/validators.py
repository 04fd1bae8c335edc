"""
MoEKD - Precondition validators
Shared checks for numeric arguments, vectors and on-disk artifacts.
"""

import math
import re

import numpy as np
from django.core.exceptions import ValidationError

IDENTIFIER_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


def validate_positive(value, name, *, allow_zero=False):
    """
    Validates that a scalar hyperparameter is finite and positive.

    Args:
        value: number to check
        name: parameter name used in the error message
        allow_zero: accept exactly 0 as well

    Returns:
        value: the unchanged number

    Raises:
        ValidationError: if value is non-finite, negative, or zero when not allowed
    """
    if value is None or not math.isfinite(value):
        raise ValidationError(f"{name} must be a finite number, got {value!r}.", code="invalid")
    if value < 0 or (value == 0 and not allow_zero):
        bound = ">= 0" if allow_zero else "> 0"
        raise ValidationError(f"{name} must be {bound}, got {value!r}.", code="invalid")
    return value


def validate_power_of_two(dim):
    """Feature dimensions must be powers of two and at least 2."""
    if not isinstance(dim, (int, np.integer)) or dim < 2 or dim & (dim - 1):
        raise ValidationError(
            f"Feature dimension must be a power of two >= 2, got {dim!r}.",
            code="invalid_dimension",
        )
    return int(dim)


def validate_finite(values, what):
    """
    Validates that every entry of an array is finite.

    Args:
        values: array-like of reals
        what: description used in the error message

    Returns:
        ndarray: the values as float64

    Raises:
        ValidationError: if any entry is NaN or infinite
    """
    array = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise ValidationError(f"{what} contains non-finite values.", code="non_finite")
    return array


def validate_dimension(x, expected, what="input"):
    """Raise unless a vector has exactly ``expected`` entries."""
    if x.shape[-1] != expected:
        raise ValidationError(
            f"{what} has dimension {x.shape[-1]}, expected {expected}.",
            code="dimension_mismatch",
        )
    return x


def validate_identifier_grammar(name):
    """Identifier names must match [A-Za-z_][A-Za-z0-9_]*."""
    if not isinstance(name, str) or not IDENTIFIER_RE.fullmatch(name):
        raise ValidationError(f"{name!r} is not a valid identifier.", code="grammar")
    return name


def validate_file_exists(path, what):
    """
    Validates that a referenced artifact or input file is present.

    Raises:
        ValidationError: naming the missing file
    """
    if not path.is_file():
        raise ValidationError(f"{what} not found: {path}", code="missing_file")
    return path
