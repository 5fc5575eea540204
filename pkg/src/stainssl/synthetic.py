"""Procedural two-stain texture data.

Tiles are rendered from the same physical model the pipeline assumes:
an H concentration map of elliptical nucleus blobs, an E concentration map
of smooth cytoplasm texture, mixed in OD space through per-slide stain
vectors and converted to 8-bit RGB.  Classes differ in nucleus
density/size/shape and cytoplasm statistics; slides differ in stain
vectors, staining strength and texture style, which is exactly the
nuisance variation per-slide separation is meant to absorb.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.ndimage

from .datapipe import TileRecord, TileSample, TileSet
from .od_color import RgbImage
from .rng import STREAM_DATAGEN, substream
from .stain_model import StainSeparationParams, estimate_basis_for_slide

BASE_V_H = np.array([0.651, 0.701, 0.290])
BASE_V_H = BASE_V_H / np.linalg.norm(BASE_V_H)
BASE_V_E = np.array([0.092, 0.954, 0.283])
BASE_V_E = BASE_V_E / np.linalg.norm(BASE_V_E)

# nucleus count range, radius range (px), eccentricity range,
# eosin gain, blotch strength; ranges overlap across classes on purpose,
# so single tiles are ambiguous and style transfer is required
CLASS_PARAMS = (
    {"n_nuclei": (6, 14), "radius": (3.8, 6.2), "ecc": (1.0, 1.4), "eosin": 1.0, "blotch": 0.0},
    {"n_nuclei": (18, 34), "radius": (2.4, 4.0), "ecc": (1.0, 1.4), "eosin": 0.85, "blotch": 0.0},
    {"n_nuclei": (2, 8), "radius": (2.5, 5.0), "ecc": (1.8, 3.0), "eosin": 1.15, "blotch": 0.45},
)

CLASS_NAMES = ("sparse_nuclei", "dense_nuclei", "fragmented")


@dataclass
class SlideStyle:
    v_h: np.ndarray
    v_e: np.ndarray
    intensity: float
    nucleus_scale: float
    eosin_level: float
    texture_sigma: float
    focus_blur: float


def slide_style(seed: int, slide_idx: int) -> SlideStyle:
    rng = substream(seed, STREAM_DATAGEN, slide_idx, 0)
    v_h = BASE_V_H + rng.normal(0.0, 0.05, size=3)
    v_e = BASE_V_E + rng.normal(0.0, 0.05, size=3)
    v_h = np.abs(v_h)  # stain absorption stays non-negative per channel
    v_e = np.abs(v_e)
    return SlideStyle(
        v_h=v_h / np.linalg.norm(v_h),
        v_e=v_e / np.linalg.norm(v_e),
        intensity=float(rng.uniform(0.65, 1.45)),
        nucleus_scale=float(rng.uniform(0.7, 1.5)),
        eosin_level=float(rng.uniform(0.3, 0.85)),
        texture_sigma=float(rng.uniform(1.5, 5.5)),
        focus_blur=float(rng.uniform(0.0, 0.9)),
    )


def _smooth_noise(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    field = scipy.ndimage.gaussian_filter(rng.normal(size=(size, size)), sigma)
    return (field - field.mean()) / (field.std() + 1e-9)


def render_tile(
    seed: int, slide_idx: int, tile_idx: int, class_idx: int, style: SlideStyle, size: int = 96
) -> np.ndarray:
    """One (size, size, 3) uint8 tile of the given class in the slide's style."""
    rng = substream(seed, STREAM_DATAGEN, slide_idx, 1 + tile_idx)
    params = CLASS_PARAMS[class_idx]
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)

    alpha_h = 0.05 + 0.03 * _smooth_noise(rng, size, 4.0)
    n_lo, n_hi = params["n_nuclei"]
    for _ in range(int(rng.integers(n_lo, n_hi + 1))):
        cx, cy = rng.uniform(0, size, size=2)
        amp = rng.uniform(0.55, 0.95) * style.intensity
        r = rng.uniform(*params["radius"]) * style.nucleus_scale
        ecc = rng.uniform(*params["ecc"])
        phi = rng.uniform(0, np.pi)
        dx, dy = xs - cx, ys - cy
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        alpha_h += amp * np.exp(-0.5 * ((u / (r * ecc)) ** 2 + (v / r) ** 2))

    base = style.eosin_level * params["eosin"] * style.intensity
    texture = _smooth_noise(rng, size, style.texture_sigma)
    alpha_e = base * (0.75 + 0.35 * texture)
    if params["blotch"] > 0:
        blotch_field = _smooth_noise(rng, size, style.texture_sigma * 1.6)
        alpha_e += params["blotch"] * style.intensity * (blotch_field > 0.4)

    alpha_h = np.clip(alpha_h, 0.0, None)
    alpha_e = np.clip(alpha_e, 0.0, None)
    if style.focus_blur > 0:
        alpha_h = scipy.ndimage.gaussian_filter(alpha_h, style.focus_blur)
        alpha_e = scipy.ndimage.gaussian_filter(alpha_e, style.focus_blur)
    od = alpha_h[..., None] * style.v_h + alpha_e[..., None] * style.v_e
    rgb = np.clip(np.rint(255.0 * np.power(10.0, -od)), 0, 255)
    return rgb.astype(np.uint8)


def _estimate_slide_basis(tiles: list[np.ndarray], slide_id: str, seed: int):
    mosaic = np.concatenate(tiles[:12], axis=1).astype(np.float64)
    params = StainSeparationParams(seed=seed)
    return estimate_basis_for_slide(RgbImage(mosaic), params, slide_id=slide_id)


def make_benefit_dataset(
    seed: int,
    tile_size: int = 96,
    labeled_per_class: int = 20,
    n_unlabeled: int = 2000,
    n_val: int = 300,
    n_test: int = 300,
    n_labeled_slides: int = 2,
    n_unlabeled_slides: int = 20,
    n_eval_slides: int = 6,
) -> TileSet:
    """Semi-supervised benchmark dataset with slide-disjoint splits.

    Labeled tiles come from very few slides (two by default), while
    unlabeled, val and test tiles span many more styles, so a labels-only
    model sees far less style variation than the unlabeled pool offers.
    """
    n_classes = len(CLASS_PARAMS)
    tiles = TileSet(class_names=list(CLASS_NAMES))
    plan: dict[str, list] = {}  # slide_id -> [(tile_idx, class_idx, split)]
    slide_indices: dict[str, int] = {}

    def add_slide(idx: int, kind: str) -> str:
        sid = f"{kind}_{idx:03d}"
        plan[sid] = []
        slide_indices[sid] = idx
        return sid

    next_slide = 0
    labeled_sids = []
    for _ in range(n_labeled_slides):
        labeled_sids.append(add_slide(next_slide, "train"))
        next_slide += 1
    unlabeled_sids = []
    for _ in range(n_unlabeled_slides):
        unlabeled_sids.append(add_slide(next_slide, "train"))
        next_slide += 1
    val_sids = [add_slide(next_slide + i, "val") for i in range(n_eval_slides)]
    next_slide += n_eval_slides
    test_sids = [add_slide(next_slide + i, "test") for i in range(n_eval_slides)]
    next_slide += n_eval_slides

    counters = {sid: 0 for sid in plan}

    def schedule(sid: str, class_idx: int, split: str):
        plan[sid].append((counters[sid], class_idx, split))
        counters[sid] += 1

    for c in range(n_classes):
        for k in range(labeled_per_class):
            schedule(labeled_sids[k % len(labeled_sids)], c, "train_labeled")
    mix_rng = substream(seed, STREAM_DATAGEN, 0, 0, 1)
    for k in range(n_unlabeled):
        sid = unlabeled_sids[k % len(unlabeled_sids)]
        schedule(sid, int(mix_rng.integers(n_classes)), "train_unlabeled")
    for k in range(n_val):
        schedule(val_sids[k % len(val_sids)], k % n_classes, "val")
    for k in range(n_test):
        schedule(test_sids[k % len(test_sids)], k % n_classes, "test")

    buckets = {
        "train_labeled": tiles.train_labeled,
        "train_unlabeled": tiles.train_unlabeled,
        "val": tiles.val,
        "test": tiles.test,
    }
    for sid, entries in plan.items():
        if not entries:
            continue
        style = slide_style(seed, slide_indices[sid])
        rendered = []
        for tile_idx, class_idx, _split in entries:
            rendered.append(
                render_tile(seed, slide_indices[sid], tile_idx, class_idx, style, tile_size)
            )
        tiles.bases[sid] = _estimate_slide_basis(rendered, sid, seed)
        for (tile_idx, class_idx, split), rgb in zip(entries, rendered):
            label = class_idx if split in ("train_labeled", "val", "test") else None
            sample = TileSample(sid, 0, tile_idx, tile_size, label, split)
            buckets[split].append(TileRecord(sample, rgb))

    tiles.check_no_slide_leakage()
    return tiles


def render_slide_image(
    seed: int,
    slide_idx: int,
    grid: int = 4,
    tile_size: int = 96,
    class_layout: list[int] | None = None,
) -> tuple[np.ndarray, list[dict]]:
    """A grid-of-regions slide image plus polygon annotations for tiling demos.

    Each grid cell is one class region; the returned polygon dicts cover
    the cells in annotation-file format ({"label", "points"}).  Cell
    classes are drawn from the slide's stream unless ``class_layout``
    pins them (row-major).
    """
    style = slide_style(seed, slide_idx)
    size = grid * tile_size
    image = np.zeros((size, size, 3), dtype=np.uint8)
    polys = []
    rng = substream(seed, STREAM_DATAGEN, slide_idx, 0, 2)
    for gy in range(grid):
        for gx in range(grid):
            cell = gy * grid + gx
            if class_layout is not None:
                class_idx = int(class_layout[cell % len(class_layout)])
            else:
                class_idx = int(rng.integers(len(CLASS_PARAMS)))
            tile = render_tile(seed, slide_idx, cell, class_idx, style, tile_size)
            y0, x0 = gy * tile_size, gx * tile_size
            image[y0 : y0 + tile_size, x0 : x0 + tile_size] = tile
            polys.append(
                {
                    "label": CLASS_NAMES[class_idx],
                    "points": [
                        [x0, y0],
                        [x0 + tile_size, y0],
                        [x0 + tile_size, y0 + tile_size],
                        [x0, y0 + tile_size],
                    ],
                }
            )
    return image, polys
