"""Input validation helpers shared by the estimators and free functions."""
from __future__ import annotations

import numbers

import numpy as np

from .exceptions import ShapeError


def check_tensor(x, ndim=None, name="input", layer=None) -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array with every extent >= 1."""
    arr = np.ascontiguousarray(x, dtype=np.float32)
    if ndim is not None and arr.ndim != ndim:
        raise ShapeError(
            f"{name} must have {ndim} dimensions, got shape {arr.shape}", layer
        )
    if arr.ndim == 0 or any(d < 1 for d in arr.shape):
        raise ShapeError(f"{name} has an empty extent: shape {arr.shape}", layer)
    return arr


def check_probability(value, name) -> float:
    if not isinstance(value, numbers.Real) or not 0.0 <= float(value) <= 1.0:
        raise ValueError(f"{name} must be a number in [0, 1], got {value!r}")
    return float(value)


def check_input_size(size) -> int:
    if not isinstance(size, numbers.Integral) or size <= 0 or size % 32:
        raise ValueError(f"input size must be a positive multiple of 32, got {size!r}")
    return int(size)


def check_image(image) -> np.ndarray:
    """Coerce an HxW or HxWxC image to an HxWx3 uint8 RGB array.

    Grayscale images are promoted by channel replication and an alpha
    channel is dropped.
    """
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] not in (1, 3, 4):
        raise ShapeError(f"expected an HxW or HxWx{{1,3,4}} image, got shape {arr.shape}")
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    elif arr.shape[2] == 4:
        arr = arr[:, :, :3]
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"image has an empty extent: shape {arr.shape}")
    if arr.dtype != np.uint8:
        if np.issubdtype(arr.dtype, np.floating):
            arr = np.clip(np.rint(arr * 255.0), 0, 255)
        arr = arr.astype(np.uint8)
    return np.ascontiguousarray(arr)
