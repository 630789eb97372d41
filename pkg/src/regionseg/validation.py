"""Input validation helpers shared by the public API surfaces."""
from __future__ import annotations

import numpy as np


def check_image(pixels: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate a channels-first float image in [0, 1] with H, W divisible by 4."""
    arr = np.asarray(pixels)
    if arr.ndim != 3:
        raise ValueError(f"{name} must have shape (channels, H, W), got {arr.shape}")
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float32)
    _, h, w = arr.shape
    if h % 4 or w % 4:
        raise ValueError(f"{name} height and width must be divisible by 4, got {h}x{w}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name} values must lie in [0, 1]")
    return arr


def check_mask(mask: np.ndarray, shape: tuple[int, int] | None = None,
               name: str = "mask") -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValueError(f"{name} shape {arr.shape} does not match expected {shape}")
    if arr.dtype != bool:
        uniq = np.unique(arr)
        if not np.isin(uniq, (0, 1)).all():
            raise ValueError(f"{name} must be binary")
        arr = arr.astype(bool)
    return arr


def check_label_map(labels: np.ndarray, num_classes: int | None = None,
                    name: str = "label map") -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.issubdtype(arr.dtype, np.integer):
        raise ValueError(f"{name} must be integer-typed")
    if arr.min() < 1:
        raise ValueError(f"{name} class ids must be >= 1")
    if num_classes is not None and arr.max() > num_classes:
        raise ValueError(f"{name} contains class ids above {num_classes}")
    return arr
