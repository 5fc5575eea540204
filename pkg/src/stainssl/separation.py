"""Projection of RGB tiles into normalized H and E concentration images."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidBasisError, InvalidInputError
from .od_color import RgbImage, rgb_to_od
from .stain_model import StainBasis

MIN_NORM_SAMPLES = 100
NORM_TARGET = 0.5  # the slide's 99th-percentile concentration maps here


class Stain(Enum):
    H = "H"
    E = "E"


@dataclass
class ConcentrationImage:
    """Single-stain concentration map with values in [0, 1]."""

    values: np.ndarray  # (height, width)
    stain: Stain

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise InvalidInputError(
                f"concentration map must be 2D, got shape {self.values.shape}"
            )
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise InvalidInputError("concentration values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def separate_od_pixels(od_pixels: np.ndarray, basis: StainBasis) -> tuple[np.ndarray, np.ndarray]:
    """Unmix flat (n, 3) OD pixels into raw (alpha_H, alpha_E) arrays.

    The residual coordinate is computed by the same matrix product and
    dropped.  Raw values can be slightly negative on noisy pixels.
    """
    od_pixels = np.asarray(od_pixels, dtype=np.float64)
    if od_pixels.ndim != 2 or od_pixels.shape[1] != 3:
        raise InvalidInputError(f"OD pixels must be (n, 3), got {od_pixels.shape}")
    alphas = od_pixels @ basis.mat_rgb_to_heres_od.T
    return alphas[:, 0], alphas[:, 1]


def separate_concentrations(img: RgbImage, basis: StainBasis) -> tuple[np.ndarray, np.ndarray]:
    """Raw, unclamped per-pixel H and E concentration maps of an RGB tile."""
    od = rgb_to_od(img, basis.params.intensity_floor)
    raw_h, raw_e = separate_od_pixels(od.pixels.reshape(-1, 3), basis)
    shape = (img.height, img.width)
    return raw_h.reshape(shape), raw_e.reshape(shape)


def compute_norm(raw: np.ndarray) -> float:
    """Slide normalization constant: the exact 99th percentile of the raw
    concentration pool (linear interpolation between order statistics)."""
    raw = np.asarray(raw, dtype=np.float64).ravel()
    if raw.size == 0:
        raise InvalidInputError("cannot compute a percentile of an empty pool")
    if raw.size < MIN_NORM_SAMPLES:
        raise InvalidInputError(
            f"need at least {MIN_NORM_SAMPLES} values for a stable percentile, got {raw.size}"
        )
    return float(np.quantile(raw, 0.99))


def normalize_concentrations(raw: np.ndarray, norm: float, stain: Stain) -> ConcentrationImage:
    """Map raw concentrations to [0, 1]: the slide's 99th-percentile value
    goes to 0.5, larger values clip at 1, and negative noise clamps to 0."""
    if norm is None or norm <= 0:
        raise InvalidBasisError(f"normalization constant must be positive, got {norm}")
    values = np.clip(np.asarray(raw, dtype=np.float64) * (NORM_TARGET / norm), 0.0, 1.0)
    return ConcentrationImage(values, stain)


def separate_tile(img: RgbImage, basis: StainBasis) -> tuple[ConcentrationImage, ConcentrationImage]:
    """Full separation of one tile: unmix, then slide-level normalization."""
    raw_h, raw_e = separate_concentrations(img, basis)
    return (
        normalize_concentrations(raw_h, basis.norm_h, Stain.H),
        normalize_concentrations(raw_e, basis.norm_e, Stain.E),
    )


def reconstruct_rgb(
    h: ConcentrationImage, e: ConcentrationImage, basis: StainBasis
) -> RgbImage:
    """Recompose an RGB image from normalized H/E maps (residual = 0).

    Visual QA helper: de-normalizes both maps, mixes the OD vector
    alpha_H * v_h + alpha_E * v_e per pixel, and converts back to
    intensities.  Values clipped at 1.0 by normalization cannot be
    recovered.
    """
    if h.values.shape != e.values.shape:
        raise InvalidInputError("H and E maps must have identical dimensions")
    if basis.norm_h is None or basis.norm_e is None:
        raise InvalidBasisError("basis norms are unset")
    raw_h = h.values.astype(np.float64) * (basis.norm_h / NORM_TARGET)
    raw_e = e.values.astype(np.float64) * (basis.norm_e / NORM_TARGET)
    od = raw_h[..., None] * basis.v_h + raw_e[..., None] * basis.v_e
    i0 = basis.params.i0
    intensities = np.clip(i0 * np.power(10.0, -od), 0.0, i0)
    return RgbImage(intensities, i0)
