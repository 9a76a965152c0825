"""Input validation helpers, in the spirit of ``sklearn.utils.check_array``.

Images are ``(H, W)`` float arrays in ``[0, 1]``, label masks are ``(H, W)``
integer arrays and displacement fields are ``(H, W, 2)`` float arrays holding
``(dx, dy)`` in pixels of the grid they live on.
"""
from __future__ import annotations

import enum

import numpy as np

from .exceptions import DimensionMismatch, LabelSetMismatch


class LabelSemantics(enum.Enum):
    LUNGS = "lungs"
    RIB_PAIRS = "ribpairs"
    BINARY = "binary"

    @property
    def labels(self) -> tuple[int, ...]:
        """Foreground labels allowed for this semantics (background 0 excluded)."""
        return _LABELS[self]

    @property
    def all_labels(self) -> tuple[int, ...]:
        return (0,) + _LABELS[self]


_LABELS = {
    LabelSemantics.LUNGS: (1, 2),
    LabelSemantics.RIB_PAIRS: tuple(range(2, 11)),
    LabelSemantics.BINARY: (1,),
}


def check_image(img, name="image", normalize=False) -> np.ndarray:
    """Validate a 2D intensity grid and return it as float64.

    With ``normalize=True`` values are min-max rescaled into ``[0, 1]``
    instead of being rejected.
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2D, got shape {arr.shape}")
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise DimensionMismatch(f"{name} must be at least 2x2, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if normalize:
        lo, hi = arr.min(), arr.max()
        arr = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    elif arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_label_mask(mask, semantics: LabelSemantics | None = None,
                     name="mask") -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2D, got shape {arr.shape}")
    if arr.dtype == bool:
        arr = arr.astype(np.int64)
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError(f"{name} must hold integer labels")
    arr = arr.astype(np.int64)
    if arr.size and arr.min() < 0:
        raise ValueError(f"{name} labels must be non-negative")
    if semantics is not None:
        extra = np.setdiff1d(np.unique(arr), semantics.all_labels)
        if extra.size:
            raise LabelSetMismatch(
                f"{name} has labels {extra.tolist()} outside {semantics.value}")
    return arr


def check_field(field, name="field") -> np.ndarray:
    arr = np.asarray(field, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise DimensionMismatch(f"{name} must have shape (H, W, 2), got {arr.shape}")
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise DimensionMismatch(f"{name} must be at least 2x2, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite displacements")
    return arr


def check_same_shape(*arrays, names=None):
    shapes = [a.shape[:2] for a in arrays]
    if len(set(shapes)) > 1:
        label = ", ".join(names) if names else "inputs"
        raise DimensionMismatch(f"{label} have mismatched grid sizes {shapes}")
