"""Raster image file I/O (PNG and TIFF, 8-bit and 16-bit)."""

from __future__ import annotations

import os

import numpy as np
from PIL import Image

from .errors import InvalidInputError
from .od_color import DEFAULT_I0, RgbImage


def load_rgb(path: str | os.PathLike, background_intensity: float = DEFAULT_I0) -> RgbImage:
    """Load an 8- or 16-bit RGB raster as an :class:`RgbImage`.

    16-bit inputs are scaled by 255/65535 so the file's white point maps
    to ``background_intensity`` at the 8-bit default.
    """
    with Image.open(path) as im:
        mode = im.mode
        if mode in ("RGB", "RGBA"):
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
        elif mode in ("I;16", "I", "L", "LA"):
            arr = np.asarray(im, dtype=np.float64)
            if arr.ndim == 2:
                arr = np.repeat(arr[:, :, None], 3, axis=2)
        else:
            raise InvalidInputError(f"unsupported image mode {mode!r} in {path}")
        if mode in ("I;16", "I"):
            arr = arr * (255.0 / 65535.0)
    arr = np.clip(arr, 0.0, background_intensity)
    return RgbImage(arr, np.full(3, background_intensity))


def save_rgb_u8(path: str | os.PathLike, pixels: np.ndarray) -> None:
    """Write an (h, w, 3) float array in [0, 255] as an 8-bit RGB PNG."""
    arr = np.clip(np.rint(np.asarray(pixels, dtype=np.float64)), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def save_gray_u16(path: str | os.PathLike, values: np.ndarray) -> None:
    """Write an (h, w) float array in [0, 1] as a 16-bit grayscale PNG."""
    arr = np.asarray(values, dtype=np.float64)
    if np.any(arr < 0) or np.any(arr > 1):
        raise InvalidInputError("grayscale values must lie in [0, 1]")
    q = np.clip(np.rint(arr * 65535.0), 0, 65535).astype("<u2")
    Image.fromarray(q).save(path)


def load_gray_u16(path: str | os.PathLike) -> np.ndarray:
    """Read a 16-bit grayscale PNG back into floats in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / 65535.0


def save_rgba(path: str | os.PathLike, pixels: np.ndarray) -> None:
    """Write an (h, w, 4) uint8 RGBA overlay PNG."""
    arr = np.asarray(pixels)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[2] != 4:
        raise InvalidInputError("RGBA overlay must be uint8 with shape (h, w, 4)")
    Image.fromarray(arr, mode="RGBA").save(path)
