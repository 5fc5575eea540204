"""Adaptive H&E stain separation with two-view semi-supervised classification."""

__version__ = "0.1.0"

from .od_color import OdImage, RgbImage, od_to_rgb, rgb_to_od
from .separation import (
    ConcentrationImage,
    Stain,
    compute_norm,
    normalize_concentrations,
    reconstruct_rgb,
    separate_concentrations,
    separate_tile,
)
from .stain_model import (
    PlaneProjection,
    StainBasis,
    StainSeparationParams,
    build_basis,
    estimate_basis_for_slide,
    estimate_plane,
    extract_stain_vectors,
    load_basis,
    save_basis,
)

__all__ = [
    "OdImage",
    "RgbImage",
    "od_to_rgb",
    "rgb_to_od",
    "ConcentrationImage",
    "Stain",
    "compute_norm",
    "normalize_concentrations",
    "reconstruct_rgb",
    "separate_concentrations",
    "separate_tile",
    "PlaneProjection",
    "StainBasis",
    "StainSeparationParams",
    "build_basis",
    "estimate_basis_for_slide",
    "estimate_plane",
    "extract_stain_vectors",
    "load_basis",
    "save_basis",
]
