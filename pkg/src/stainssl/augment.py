"""Seeded two-stage augmentation.

Stage one jitters brightness/contrast/saturation on the RGB tile before
stain separation; stage two applies geometry and brightness to the H and E
concentration images independently (the two channels may get different
crops, rotations and flips).  Every random draw comes from an explicit
generator and is recorded in a draw log, so identical (inputs, policy,
stream) reproduce bitwise-identical outputs on any worker.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.ndimage

from .errors import InvalidInputError
from .od_color import RgbImage
from .separation import ConcentrationImage

ROTATION_MODES = ("none", "right_angle", "continuous")

# Rec.601 luma weights, the standard broadcast-video convention.
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class AugmentPolicy:
    rgb_brightness_jitter: float = 0.15
    rgb_contrast_jitter: float = 0.15
    rgb_saturation_jitter: float = 0.15
    crop_size: int = 256
    rotation: str = "right_angle"
    rotation_range_deg: float = 180.0  # continuous mode only
    flip_horizontal: bool = True
    flip_vertical: bool = True
    he_brightness_jitter: float = 0.15
    seed: int = 0

    def __post_init__(self):
        for name in (
            "rgb_brightness_jitter",
            "rgb_contrast_jitter",
            "rgb_saturation_jitter",
            "he_brightness_jitter",
        ):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise InvalidInputError(f"{name} must be in [0, 1), got {v}")
        if self.crop_size < 1:
            raise InvalidInputError("crop_size must be at least 1")
        if self.rotation not in ROTATION_MODES:
            raise InvalidInputError(
                f"rotation must be one of {ROTATION_MODES}, got {self.rotation!r}"
            )

    def identity(self) -> "AugmentPolicy":
        """Policy that leaves tiles untouched apart from the center crop."""
        return AugmentPolicy(
            rgb_brightness_jitter=0.0,
            rgb_contrast_jitter=0.0,
            rgb_saturation_jitter=0.0,
            crop_size=self.crop_size,
            rotation="none",
            flip_horizontal=False,
            flip_vertical=False,
            he_brightness_jitter=0.0,
            seed=self.seed,
        )


@dataclass
class AugmentedPair:
    h: ConcentrationImage
    e: ConcentrationImage
    draw_log: dict = field(default_factory=dict)


def apply_brightness(pixels: np.ndarray, factor: float, i0) -> np.ndarray:
    return np.clip(pixels * factor, 0.0, i0)


def apply_contrast(pixels: np.ndarray, factor: float, i0) -> np.ndarray:
    mean = float((pixels @ _LUMA).mean())
    return np.clip(factor * pixels + (1.0 - factor) * mean, 0.0, i0)


def apply_saturation(pixels: np.ndarray, factor: float, i0) -> np.ndarray:
    luma = (pixels @ _LUMA)[..., None]
    return np.clip(factor * pixels + (1.0 - factor) * luma, 0.0, i0)


def jitter_rgb(
    img: RgbImage,
    policy: AugmentPolicy,
    rng: np.random.Generator,
    draw_log: list | None = None,
) -> RgbImage:
    """Color-jitter an RGB tile: brightness, then contrast, then saturation.

    Each factor is drawn uniformly from [1 - j, 1 + j]; a zero jitter skips
    the draw entirely so that policies stay replay-compatible.
    """
    pixels = img.pixels.astype(np.float64)
    i0 = img.background_intensity
    for name, jitter, op in (
        ("rgb_brightness", policy.rgb_brightness_jitter, apply_brightness),
        ("rgb_contrast", policy.rgb_contrast_jitter, apply_contrast),
        ("rgb_saturation", policy.rgb_saturation_jitter, apply_saturation),
    ):
        if jitter > 0:
            factor = float(rng.uniform(1.0 - jitter, 1.0 + jitter))
            if draw_log is not None:
                draw_log.append((name, factor))
            pixels = op(pixels, factor, i0)
    return RgbImage(pixels, i0)


def _augment_channel(
    values: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator
) -> tuple[np.ndarray, list]:
    """Rotate -> crop -> flip -> brightness on one concentration channel."""
    log: list = []
    out = values
    if policy.rotation == "right_angle":
        k = int(rng.integers(4))
        log.append(("rot90", k))
        out = np.rot90(out, k)
    elif policy.rotation == "continuous":
        angle = float(rng.uniform(-policy.rotation_range_deg, policy.rotation_range_deg))
        log.append(("rotate_deg", angle))
        out = scipy.ndimage.rotate(
            out, angle, reshape=False, order=1, mode="reflect", prefilter=False
        )
        out = np.clip(out, 0.0, 1.0)
    c = policy.crop_size
    oy = int(rng.integers(out.shape[0] - c + 1))
    ox = int(rng.integers(out.shape[1] - c + 1))
    log.append(("crop_offset", (ox, oy)))
    out = out[oy : oy + c, ox : ox + c]
    if policy.flip_horizontal:
        f = int(rng.integers(2))
        log.append(("flip_h", f))
        if f:
            out = out[:, ::-1]
    if policy.flip_vertical:
        f = int(rng.integers(2))
        log.append(("flip_v", f))
        if f:
            out = out[::-1, :]
    if policy.he_brightness_jitter > 0:
        factor = float(
            rng.uniform(1.0 - policy.he_brightness_jitter, 1.0 + policy.he_brightness_jitter)
        )
        log.append(("brightness", factor))
        out = np.clip(out * factor, 0.0, 1.0)
    return np.ascontiguousarray(out), log


def augment_he_pair(
    h_full: ConcentrationImage,
    e_full: ConcentrationImage,
    policy: AugmentPolicy,
    rng_h: np.random.Generator,
    rng_e: np.random.Generator,
) -> AugmentedPair:
    """Independently augment the H and E images of one tile.

    The two channels consume separate streams, so changing one channel's
    input or policy never perturbs the draws of the other.
    """
    for img in (h_full, e_full):
        if img.height < policy.crop_size or img.width < policy.crop_size:
            raise InvalidInputError(
                f"tile {img.width}x{img.height} is smaller than crop_size {policy.crop_size}"
            )
    h_out, h_log = _augment_channel(h_full.values, policy, rng_h)
    e_out, e_log = _augment_channel(e_full.values, policy, rng_e)
    return AugmentedPair(
        h=ConcentrationImage(h_out, h_full.stain),
        e=ConcentrationImage(e_out, e_full.stain),
        draw_log={"h": h_log, "e": e_log},
    )


def draw_log_jsonl(draw_log: dict) -> str:
    """Serialize a pair's draw log as JSON lines (one record per draw),
    suitable for appending to a debug log and replaying augmentations."""
    import json

    lines = []
    for channel, draws in draw_log.items():
        for op, value in draws:
            lines.append(json.dumps({"channel": channel, "op": op, "value": value}))
    return "\n".join(lines) + ("\n" if lines else "")


def center_crop(values: np.ndarray, crop_size: int) -> np.ndarray:
    """Deterministic crop used for validation and test tiles."""
    h, w = values.shape
    if h < crop_size or w < crop_size:
        raise InvalidInputError(f"tile {w}x{h} is smaller than crop_size {crop_size}")
    oy = (h - crop_size) // 2
    ox = (w - crop_size) // 2
    return np.ascontiguousarray(values[oy : oy + crop_size, ox : ox + crop_size])
