"""Forward-construction helpers shared by the stain tests.

Images are generated from known stain vectors and concentrations, so the
generation side is the oracle: estimators must invert it.
"""

from __future__ import annotations

import numpy as np

from stainssl.od_color import RgbImage

# Implementer-chosen synthetic stain basis (unit-normalized below):
# a blue-purple H-like absorber and a pink E-like absorber ~36 deg apart.
V_H_TRUE = np.array([0.651, 0.701, 0.290])
V_H_TRUE = V_H_TRUE / np.linalg.norm(V_H_TRUE)
V_E_TRUE = np.array([0.092, 0.954, 0.283])
V_E_TRUE = V_E_TRUE / np.linalg.norm(V_E_TRUE)


def two_stain_od(
    rng: np.random.Generator,
    n_pixels: int,
    v_h: np.ndarray = V_H_TRUE,
    v_e: np.ndarray = V_E_TRUE,
    alpha_lo: float = 0.0,
    alpha_hi: float = 1.2,
):
    """Flat OD pixels alpha_h * v_h + alpha_e * v_e with uniform alphas."""
    alpha_h = rng.uniform(alpha_lo, alpha_hi, size=n_pixels)
    alpha_e = rng.uniform(alpha_lo, alpha_hi, size=n_pixels)
    od = alpha_h[:, None] * v_h + alpha_e[:, None] * v_e
    return od, alpha_h, alpha_e


def two_stain_image(
    rng: np.random.Generator,
    size: int,
    v_h: np.ndarray = V_H_TRUE,
    v_e: np.ndarray = V_E_TRUE,
    alpha_lo: float = 0.0,
    alpha_hi: float = 1.2,
    i0: float = 255.0,
    quantize: bool = False,
):
    """Synthetic two-stain slide image plus its generating concentrations."""
    od, alpha_h, alpha_e = two_stain_od(rng, size * size, v_h, v_e, alpha_lo, alpha_hi)
    intensities = i0 * np.power(10.0, -od.reshape(size, size, 3))
    if quantize:
        intensities = np.clip(np.rint(intensities), 0, i0)
    img = RgbImage(intensities, np.full(3, i0))
    return img, alpha_h.reshape(size, size), alpha_e.reshape(size, size)


def angle_deg(u: np.ndarray, v: np.ndarray) -> float:
    """Angle between two vectors in degrees."""
    c = float(np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
