"""Small input-validation helpers in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import numbers

import numpy as np

from .errors import ValidationError


def check_points(points, dim: int | None = None, name: str = "points") -> np.ndarray:
    """Return ``points`` as a finite float array of shape (P, dim)."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValidationError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    if dim is not None and arr.shape[1] != dim:
        raise ValidationError(f"{name} must have {dim} columns, got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite values")
    return arr


def check_scalar(value, name: str, *, lower=None, upper=None, lower_inclusive=True,
                 integer=False) -> float:
    if integer:
        if not isinstance(value, numbers.Integral) or isinstance(value, bool):
            raise ValidationError(f"{name} must be an integer, got {value!r}")
    elif not isinstance(value, numbers.Real) or isinstance(value, bool):
        raise ValidationError(f"{name} must be a real number, got {value!r}")
    if not np.isfinite(value):
        raise ValidationError(f"{name} must be finite")
    if lower is not None:
        bad = value < lower if lower_inclusive else value <= lower
        if bad:
            op = ">=" if lower_inclusive else ">"
            raise ValidationError(f"{name} must be {op} {lower}, got {value}")
    if upper is not None and value > upper:
        raise ValidationError(f"{name} must be <= {upper}, got {value}")
    return value


def check_rank(m, *, max_rank: int = 4, name: str = "rank") -> int:
    check_scalar(m, name, lower=0, upper=max_rank, integer=True)
    return int(m)


def check_random_state(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_is_fitted(estimator, attributes) -> None:
    from sklearn.exceptions import NotFittedError

    if isinstance(attributes, str):
        attributes = [attributes]
    if not all(hasattr(estimator, a) for a in attributes):
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call 'fit' first."
        )
