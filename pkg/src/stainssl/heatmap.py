"""Prediction overlays for whole images.

A sliding window classifies every foreground tile; the overlay paints each
tile's footprint with its class hue at an opacity equal to the softmax
confidence.  Background tiles and classes configured as transparent (by
convention the Normal/Benign class) stay fully transparent.
"""

from __future__ import annotations

import numpy as np
import torch

from .augment import center_crop
from .datapipe import (
    DEFAULT_MIN_TISSUE_FRACTION,
    DEFAULT_OD_THRESHOLD,
    foreground_filter,
)
from .errors import InvalidInputError
from .od_color import RgbImage
from .separation import separate_tile
from .stain_model import StainBasis

# class index -> RGB hue
PALETTE = (
    (0, 160, 60),  # green
    (250, 180, 20),  # amber
    (220, 40, 40),  # red
    (90, 90, 90),  # dark grey
    (60, 90, 220),  # blue
    (160, 60, 200),  # purple
)


def render_heatmap(
    model,
    image: RgbImage,
    basis: StainBasis,
    tile_size: int,
    crop_size: int,
    stride: int | None = None,
    transparent_classes: frozenset = frozenset({0}),
    od_threshold: float = DEFAULT_OD_THRESHOLD,
    min_tissue_fraction: float = DEFAULT_MIN_TISSUE_FRACTION,
) -> np.ndarray:
    """Return an (H, W, 4) uint8 RGBA overlay of tile predictions."""
    if tile_size < crop_size:
        raise InvalidInputError("tile_size must be at least crop_size")
    stride = stride or tile_size
    dtype = next(model.parameters()).dtype
    height, width = image.height, image.width
    overlay = np.zeros((height, width, 4), dtype=np.uint8)

    positions, crops = [], []
    for y in range(0, height - tile_size + 1, stride):
        for x in range(0, width - tile_size + 1, stride):
            pixels = image.pixels[y : y + tile_size, x : x + tile_size]
            if not foreground_filter(
                pixels,
                od_threshold,
                min_tissue_fraction,
                image.background_intensity,
            ):
                continue
            h, e = separate_tile(RgbImage(pixels, image.background_intensity), basis)
            crops.append(
                np.stack(
                    [center_crop(h.values, crop_size), center_crop(e.values, crop_size)]
                )
            )
            positions.append((x, y))
    if not crops:
        return overlay

    batch = torch.as_tensor(np.stack(crops), dtype=dtype)
    probs = []
    with torch.no_grad():
        for start in range(0, len(batch), 64):
            chunk = batch[start : start + 64]
            probs.append(model(chunk[:, 0:1], chunk[:, 1:2])[2].numpy())
    probs = np.concatenate(probs)

    for (x, y), p in zip(positions, probs):
        cls = int(np.argmax(p))
        if cls in transparent_classes:
            continue
        color = PALETTE[cls % len(PALETTE)]
        alpha = int(round(255.0 * float(p[cls])))
        overlay[y : y + tile_size, x : x + tile_size] = (*color, alpha)
    return overlay
