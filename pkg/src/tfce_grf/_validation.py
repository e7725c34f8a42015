"""Input validation helpers, in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import numbers

import numpy as np

from .errors import DataError, EmptyMask, TooFewSubjects
from .volio import Mask3D, SubjectStack, Volume3D


def check_volume(X, name="zmap") -> np.ndarray:
    """Return ``X`` as a float64 3D array (accepts :class:`Volume3D`)."""
    if isinstance(X, Volume3D):
        return X.data
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim != 3:
        raise DataError(f"{name} must be a 3D array, got shape {arr.shape}")
    return arr


def check_mask(mask, shape, allow_empty=False) -> np.ndarray:
    """Boolean 3D mask matching ``shape``; ``None`` means every voxel."""
    if mask is None:
        inc = np.ones(shape, dtype=bool)
    elif isinstance(mask, Mask3D):
        inc = mask.included
    else:
        inc = np.asarray(mask, dtype=bool)
    if inc.shape != tuple(shape):
        raise DataError(f"mask shape {inc.shape} does not match data shape {tuple(shape)}")
    if not allow_empty and not inc.any():
        raise EmptyMask("mask contains no voxels")
    return inc


def check_volume_and_mask(X, mask, name="zmap", allow_empty=False):
    arr = check_volume(X, name)
    inc = check_mask(mask, arr.shape, allow_empty=allow_empty)
    if not np.all(np.isfinite(arr[inc])):
        raise DataError(f"{name} has non-finite values inside the mask")
    return arr, inc


def check_stack(stack, name="stack") -> np.ndarray:
    """Return a ``(M, nx, ny, nz)`` float64 array with ``M >= 2``."""
    if isinstance(stack, SubjectStack):
        return stack.data
    arr = np.asarray(stack, dtype=np.float64)
    if arr.ndim != 4:
        raise DataError(f"{name} must have shape (M, nx, ny, nz), got {arr.shape}")
    if arr.shape[0] < 2:
        raise TooFewSubjects(f"{name} needs at least 2 subjects, got {arr.shape[0]}")
    return arr


def check_scalar(x, name, *, lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
    kind = numbers.Integral if integer else numbers.Real
    if not isinstance(x, kind) or isinstance(x, bool):
        raise DataError(f"{name} must be {'an integer' if integer else 'a real number'}, got {x!r}")
    if not np.isfinite(x):
        raise DataError(f"{name} must be finite, got {x!r}")
    if lo is not None and (x < lo or (lo_open and x == lo)):
        raise DataError(f"{name} must be {'>' if lo_open else '>='} {lo}, got {x!r}")
    if hi is not None and (x > hi or (hi_open and x == hi)):
        raise DataError(f"{name} must be {'<' if hi_open else '<='} {hi}, got {x!r}")
    return x
