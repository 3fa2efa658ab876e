"""8-bit PNG raster I/O for images and masks."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

MASK_ON = 255
BINARIZE_AT = 128


class RasterError(IOError):
    pass


def _open(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im)
    except (OSError, ValueError) as exc:
        raise RasterError(f"cannot read raster {path}: {exc}") from exc


def write_image(path, image: np.ndarray) -> None:
    """``image`` is (H,W,3) float in [0,1] or uint8."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(Path(path))


def read_image(path) -> np.ndarray:
    arr = _open(path)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return (arr[..., :3].astype(np.float32) / 255.0)


def write_mask(path, mask: np.ndarray) -> None:
    """Binary mask stored as 0/255 grayscale."""
    arr = (np.asarray(mask) > 0).astype(np.uint8) * MASK_ON
    Image.fromarray(arr, mode="L").save(Path(path))


def write_soft_mask(path, mask: np.ndarray) -> None:
    """Soft mask in [0,1] quantised to 8 bits."""
    arr = np.round(np.clip(np.asarray(mask, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(Path(path))


def _gray(path) -> np.ndarray:
    arr = _open(path)
    if arr.ndim == 3:
        arr = arr[..., 0]
    if arr.dtype != np.uint8:
        raise RasterError(f"{path}: expected 8-bit raster, got {arr.dtype}")
    return arr


def read_mask(path) -> np.ndarray:
    """Binary {0,1} uint8 mask; foreground where value >= 128."""
    return (_gray(path) >= BINARIZE_AT).astype(np.uint8)


def read_soft_mask(path) -> np.ndarray:
    return _gray(path).astype(np.float64) / 255.0
