"""RGB intensity <-> optical density conversion.

Transmitted light through stained tissue follows the Beer-Lambert law:
stains absorb light multiplicatively in intensity, hence additively in
OD = log10(I0 / I).  All conversions compute in float64 regardless of the
storage dtype of the input; the eigen/percentile stages downstream are
sensitive to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError

DEFAULT_I0 = 255.0
DEFAULT_INTENSITY_FLOOR = 1.0


def _as_i0(background_intensity) -> np.ndarray:
    i0 = np.broadcast_to(np.asarray(background_intensity, dtype=np.float64), (3,)).copy()
    if np.any(i0 <= 0):
        raise InvalidInputError(f"background intensity must be positive, got {i0}")
    return i0


@dataclass
class RgbImage:
    """Per-pixel light intensities, shape (height, width, 3), in [0, I0].

    ``background_intensity`` is the per-channel intensity of light before
    it passes through the specimen.  By convention it is 255 per channel
    for 8-bit scans; a per-slide estimator (e.g. from detected background
    pixels) can be plugged in by constructing images with a measured value.
    """

    pixels: np.ndarray
    background_intensity: np.ndarray = field(
        default_factory=lambda: np.full(3, DEFAULT_I0)
    )

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        self.background_intensity = _as_i0(self.background_intensity)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InvalidInputError(
                f"RGB pixels must have shape (h, w, 3), got {self.pixels.shape}"
            )
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise InvalidInputError("image must be at least 1x1")
        if np.any(self.pixels < 0) or np.any(self.pixels > self.background_intensity):
            raise InvalidInputError("intensities must lie in [0, I0]")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass
class OdImage:
    """Per-pixel optical densities, shape (height, width, 3), finite and >= 0."""

    pixels: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InvalidInputError(
                f"OD pixels must have shape (h, w, 3), got {self.pixels.shape}"
            )
        if not np.all(np.isfinite(self.pixels)) or np.any(self.pixels < 0):
            raise InvalidInputError("OD values must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


def rgb_to_od(
    img: RgbImage, intensity_floor: float = DEFAULT_INTENSITY_FLOOR
) -> OdImage:
    """Convert intensities to optical densities, OD = log10(I0 / I).

    Intensities are clamped to at least ``intensity_floor`` before the log
    so saturated black pixels map to a large finite OD instead of infinity
    (log10(255) ~ 2.4065 at the 8-bit defaults).
    """
    if intensity_floor <= 0:
        raise InvalidInputError(
            f"intensity_floor must be positive, got {intensity_floor}"
        )
    i = np.maximum(img.pixels.astype(np.float64), intensity_floor)
    od = np.log10(img.background_intensity / i)
    return OdImage(np.maximum(od, 0.0))


def od_to_rgb(od: OdImage, background_intensity=DEFAULT_I0) -> RgbImage:
    """Invert :func:`rgb_to_od`: I = I0 * 10**(-OD).

    Round-trips an image exactly (to float64 rounding) as long as all of
    its intensities are at or above the conversion floor.
    """
    i0 = _as_i0(background_intensity)
    intensities = i0 * np.power(10.0, -od.pixels.astype(np.float64))
    return RgbImage(np.minimum(intensities, i0), i0)


def od_vectors(img: RgbImage, intensity_floor: float = DEFAULT_INTENSITY_FLOOR) -> np.ndarray:
    """Flattened (n_pixels, 3) float64 OD array for pixel-pool statistics."""
    return rgb_to_od(img, intensity_floor).pixels.reshape(-1, 3)
