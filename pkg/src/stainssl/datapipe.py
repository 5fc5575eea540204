"""Tile extraction from polygon-annotated rasters, dataset assembly, and
class-balanced batch addressing.

Geometry is pure integer/float arithmetic with documented tie rules, so
tile extraction is identical across runs and platforms.  The batch sampler
is random-access: batch ``b`` is a pure function of (seed, b), which keeps
training resumable and exactly reproducible.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AnnotationError,
    ConfigurationError,
    EvaluationError,
    InvalidInputError,
)
from .od_color import DEFAULT_I0, DEFAULT_INTENSITY_FLOOR, RgbImage, rgb_to_od
from .rng import STREAM_SAMPLER, substream

SPLITS = ("train_labeled", "train_unlabeled", "val", "test")

DEFAULT_OD_THRESHOLD = 0.15
DEFAULT_MIN_TISSUE_FRACTION = 0.25


@dataclass
class PolygonAnnotation:
    label: str
    points: np.ndarray  # (n, 2) vertex coordinates, closed implicitly

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise InvalidInputError("polygon points must be (n, 2)")


@dataclass
class TileSample:
    slide_id: str
    x: int
    y: int
    size: int
    label: int | None = None
    split: str = "unassigned"


@dataclass
class BatchComposition:
    per_class_labeled: tuple
    unlabeled_count: int

    def __post_init__(self):
        self.per_class_labeled = tuple(int(c) for c in self.per_class_labeled)
        if any(c < 0 for c in self.per_class_labeled) or self.unlabeled_count < 0:
            raise InvalidInputError("batch composition counts must be non-negative")
        if self.labeled_count + self.unlabeled_count < 1:
            raise InvalidInputError("batch composition is empty")

    @property
    def labeled_count(self) -> int:
        return sum(self.per_class_labeled)

    @property
    def batch_size(self) -> int:
        return self.labeled_count + self.unlabeled_count


# ---------------------------------------------------------------------------
# point-in-polygon geometry
# ---------------------------------------------------------------------------


def _on_edge(px, py, x1, y1, x2, y2) -> bool:
    cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    if cross != 0.0:
        return False
    return min(x1, x2) <= px <= max(x1, x2) and min(y1, y2) <= py <= max(y1, y2)


def points_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd ray casting for a batch of points.

    Tie rules: a point exactly on a polygon edge (or vertex) counts as
    inside; ray crossings use the half-open rule (an edge is crossed when
    its endpoints straddle the horizontal ray through the point), which
    counts each vertex with exactly one of its two edges.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    poly = np.asarray(polygon, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    on_edge = np.zeros(len(pts), dtype=bool)
    n = len(poly)
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
        on_seg = (
            (cross == 0.0)
            & (x >= min(x1, x2))
            & (x <= max(x1, x2))
            & (y >= min(y1, y2))
            & (y <= max(y1, y2))
        )
        on_edge |= on_seg
        straddles = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at_y = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddles & (x < x_at_y)
    return inside | on_edge


def point_in_polygon(px: float, py: float, polygon: np.ndarray) -> bool:
    return bool(points_in_polygon(np.array([[px, py]]), polygon)[0])


def _segments_intersect(p1, p2, p3, p4) -> bool:
    """Proper or improper intersection between segments p1p2 and p3p4."""

    def orient(a, b, c):
        v = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        return 0 if v == 0 else (1 if v > 0 else -1)

    def on_seg(a, b, c):  # c collinear with ab, is it between?
        return (
            min(a[0], b[0]) <= c[0] <= max(a[0], b[0])
            and min(a[1], b[1]) <= c[1] <= max(a[1], b[1])
        )

    o1, o2 = orient(p1, p2, p3), orient(p1, p2, p4)
    o3, o4 = orient(p3, p4, p1), orient(p3, p4, p2)
    if o1 != o2 and o3 != o4:
        return True
    if o1 == 0 and on_seg(p1, p2, p3):
        return True
    if o2 == 0 and on_seg(p1, p2, p4):
        return True
    if o3 == 0 and on_seg(p3, p4, p1):
        return True
    if o4 == 0 and on_seg(p3, p4, p2):
        return True
    return False


def validate_polygon(poly: PolygonAnnotation, index: int) -> None:
    """Reject degenerate or self-intersecting polygons, naming the index."""
    pts = poly.points
    n = len(pts)
    if n < 3:
        raise AnnotationError(index, f"needs at least 3 vertices, has {n}")
    for i in range(n):
        if np.array_equal(pts[i], pts[(i + 1) % n]):
            raise AnnotationError(index, f"zero-length edge at vertex {i}")
    area2 = 0.0
    for i in range(n):
        x1, y1 = pts[i]
        x2, y2 = pts[(i + 1) % n]
        area2 += x1 * y2 - x2 * y1
    if area2 == 0.0:
        raise AnnotationError(index, "zero area")
    for i in range(n):
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue  # adjacent edges share a vertex by construction
            if _segments_intersect(pts[i], pts[(i + 1) % n], pts[j], pts[(j + 1) % n]):
                raise AnnotationError(index, f"edges {i} and {j} intersect")


def _rect_intersects_polygon(x0, y0, x1, y1, polygon: np.ndarray) -> bool:
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)
    if points_in_polygon(corners, polygon).any():
        return True
    if point_in_polygon((x0 + x1) / 2.0, (y0 + y1) / 2.0, polygon):
        return True
    vx, vy = polygon[:, 0], polygon[:, 1]
    if np.any((vx >= x0) & (vx <= x1) & (vy >= y0) & (vy <= y1)):
        return True
    n = len(polygon)
    rect_edges = [
        ((x0, y0), (x1, y0)),
        ((x1, y0), (x1, y1)),
        ((x1, y1), (x0, y1)),
        ((x0, y1), (x0, y0)),
    ]
    for i in range(n):
        p1, p2 = polygon[i], polygon[(i + 1) % n]
        for r1, r2 in rect_edges:
            if _segments_intersect(p1, p2, r1, r2):
                return True
    return False


# ---------------------------------------------------------------------------
# tile extraction
# ---------------------------------------------------------------------------


def extract_tiles(
    width: int,
    height: int,
    polygons: list[PolygonAnnotation],
    tile_size: int = 400,
    stride: int = 200,
    unlabeled_stride: int | None = None,
    class_to_index: dict | None = None,
    slide_id: str = "",
) -> list[TileSample]:
    """Grid tiles over an image, labeling those fully inside one polygon.

    A tile at (x, y) is labeled with a polygon's class iff its four
    geometric corners and its center are inside that polygon (and no other
    polygon also contains all five).  Tiles intersecting no polygon are
    unlabeled candidates, gridded at ``unlabeled_stride`` (defaults to
    ``stride``).  Output order is row-major per grid, labeled grid first.
    """
    if tile_size < 1 or stride < 1:
        raise InvalidInputError("tile_size and stride must be positive")
    unlabeled_stride = unlabeled_stride or stride
    for idx, poly in enumerate(polygons):
        validate_polygon(poly, idx)
    if class_to_index is None:
        names = sorted({p.label for p in polygons})
        class_to_index = {name: i for i, name in enumerate(names)}

    tiles: list[TileSample] = []
    if polygons:
        for y in range(0, height - tile_size + 1, stride):
            for x in range(0, width - tile_size + 1, stride):
                probes = np.array(
                    [
                        [x, y],
                        [x + tile_size, y],
                        [x, y + tile_size],
                        [x + tile_size, y + tile_size],
                        [x + tile_size / 2.0, y + tile_size / 2.0],
                    ],
                    dtype=np.float64,
                )
                containing = [
                    p.label
                    for p in polygons
                    if points_in_polygon(probes, p.points).all()
                ]
                if len(containing) == 1:
                    tiles.append(
                        TileSample(slide_id, x, y, tile_size, class_to_index[containing[0]])
                    )
    for y in range(0, height - tile_size + 1, unlabeled_stride):
        for x in range(0, width - tile_size + 1, unlabeled_stride):
            if any(
                _rect_intersects_polygon(x, y, x + tile_size, y + tile_size, p.points)
                for p in polygons
            ):
                continue
            tiles.append(TileSample(slide_id, x, y, tile_size, None))
    return tiles


def foreground_filter(
    tile_pixels: np.ndarray,
    od_threshold: float = DEFAULT_OD_THRESHOLD,
    min_tissue_fraction: float = DEFAULT_MIN_TISSUE_FRACTION,
    background_intensity=DEFAULT_I0,
    intensity_floor: float = DEFAULT_INTENSITY_FLOOR,
) -> bool:
    """Keep a tile iff enough of it absorbs light like tissue.

    The tissue fraction is the share of pixels whose OD vector norm is at
    least ``od_threshold``; the tile passes when that fraction is >=
    ``min_tissue_fraction`` (boundary kept).
    """
    img = RgbImage(np.asarray(tile_pixels, dtype=np.float64), background_intensity)
    od = rgb_to_od(img, intensity_floor).pixels
    tissue = np.linalg.norm(od, axis=2) >= od_threshold
    return bool(tissue.mean() >= min_tissue_fraction)


# ---------------------------------------------------------------------------
# balanced batches
# ---------------------------------------------------------------------------


class BalancedBatchSampler:
    """Addressable class-balanced sampler.

    Every batch holds exactly ``per_class_labeled[c]`` samples of class c
    plus ``unlabeled_count`` unlabeled samples.  Each pool is consumed as
    an endless stream of reshuffled epochs (so small classes repeat with a
    fresh permutation per pass), and ``batch(b)`` is a pure function of
    (seed, b): no iteration state to checkpoint.
    """

    _UNLABELED_KEY = 0

    def __init__(
        self,
        labeled_by_class: dict,
        unlabeled_pool: list,
        comp: BatchComposition,
        seed: int,
        class_names: list[str] | None = None,
    ):
        self.comp = comp
        self.seed = seed
        self.pools = {c: list(v) for c, v in labeled_by_class.items()}
        self.unlabeled = list(unlabeled_pool)
        for c, count in enumerate(comp.per_class_labeled):
            if count > 0 and not self.pools.get(c):
                name = class_names[c] if class_names else str(c)
                raise ConfigurationError(f"labeled pool for class {name!r} is empty")
        if comp.unlabeled_count > 0 and not self.unlabeled:
            raise ConfigurationError("unlabeled pool is empty")
        self._perm_cache: dict = {}

    def _stream_item(self, key: int, pool: list, position: int):
        epoch, offset = divmod(position, len(pool))
        cache_key = (key, epoch)
        if cache_key not in self._perm_cache:
            if len(self._perm_cache) > 64:
                self._perm_cache.clear()
            rng = substream(self.seed, STREAM_SAMPLER, key, epoch)
            self._perm_cache[cache_key] = rng.permutation(len(pool))
        return pool[self._perm_cache[cache_key][offset]]

    def batch(self, index: int):
        """Return (labeled, unlabeled) where labeled is [(item, class), ...]."""
        if index < 0:
            raise InvalidInputError("batch index must be non-negative")
        labeled = []
        for c, count in enumerate(self.comp.per_class_labeled):
            pool = self.pools.get(c, [])
            start = index * count
            for k in range(count):
                labeled.append((self._stream_item(1 + c, pool, start + k), c))
        unlabeled = []
        count = self.comp.unlabeled_count
        for k in range(count):
            unlabeled.append(
                self._stream_item(self._UNLABELED_KEY, self.unlabeled, index * count + k)
            )
        return labeled, unlabeled

    def batches(self, start: int = 0):
        index = start
        while True:
            yield self.batch(index)
            index += 1


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def balanced_accuracy(confusion: np.ndarray) -> float:
    """Mean of per-class recalls from a CxC count matrix (rows = truth)."""
    conf = np.asarray(confusion, dtype=np.float64)
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
        raise InvalidInputError(f"confusion matrix must be square, got {conf.shape}")
    row_sums = conf.sum(axis=1)
    if np.any(row_sums == 0):
        empty = int(np.argmin(row_sums))
        raise EvaluationError(f"class {empty} has no samples in the confusion matrix")
    return float(np.mean(np.diag(conf) / row_sums))


def per_class_metrics(confusion: np.ndarray) -> dict:
    """Recall, precision and F-score per class, plus balanced accuracy."""
    conf = np.asarray(confusion, dtype=np.float64)
    recall = np.diag(conf) / conf.sum(axis=1)
    col = conf.sum(axis=0)
    precision = np.divide(np.diag(conf), col, out=np.zeros(len(conf)), where=col > 0)
    denom = precision + recall
    fscore = np.divide(
        2 * precision * recall, denom, out=np.zeros(len(conf)), where=denom > 0
    )
    return {
        "balanced_accuracy": balanced_accuracy(conf),
        "recall": recall.tolist(),
        "precision": precision.tolist(),
        "fscore": fscore.tolist(),
        "confusion": conf.astype(int).tolist(),
    }


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class TileRecord:
    sample: TileSample
    rgb: np.ndarray  # (size, size, 3) intensities


@dataclass
class TileSet:
    """In-memory dataset: tile records per split plus per-slide stain bases."""

    class_names: list
    train_labeled: list = field(default_factory=list)
    train_unlabeled: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)
    bases: dict = field(default_factory=dict)
    background_intensity: float = DEFAULT_I0

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def labeled_pools(self) -> dict:
        pools: dict = {c: [] for c in range(self.n_classes)}
        for i, rec in enumerate(self.train_labeled):
            pools[rec.sample.label].append(i)
        return pools

    def check_no_slide_leakage(self) -> None:
        seen: dict = {}
        for split_name in ("train", "val", "test"):
            records = (
                self.train_labeled + self.train_unlabeled
                if split_name == "train"
                else getattr(self, split_name)
            )
            for rec in records:
                sid = rec.sample.slide_id
                if seen.setdefault(sid, split_name) != split_name:
                    raise ConfigurationError(
                        f"slide {sid!r} appears in both {seen[sid]!r} and {split_name!r}"
                    )


def load_annotations(path: str | os.PathLike) -> tuple[str, int, int, list]:
    """Read an annotation JSON: slide_id, width, height and its polygons."""
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    try:
        slide_id = str(doc["slide_id"])
        width, height = int(doc["width"]), int(doc["height"])
        polygons = [
            PolygonAnnotation(str(p["label"]), np.asarray(p["points"], dtype=np.float64))
            for p in doc["polygons"]
        ]
    except (KeyError, TypeError, ValueError) as err:
        raise AnnotationError(-1, f"malformed annotation file {path}: {err}") from err
    return slide_id, width, height, polygons


def load_manifest_dataset(path: str | os.PathLike, basis_seed: int = 0) -> TileSet:
    """Assemble a TileSet from a dataset manifest.

    The manifest assigns whole slides to train/val/test (tile-level splits
    would leak slide style), names the class order, and sets the tile
    geometry.  Labeled tiles come from polygon interiors; unlabeled tiles
    are taken outside all polygons on train slides only.  Every tile must
    pass the foreground filter, and each slide gets its own stain basis
    estimated from the full slide image.
    """
    from .raster import load_rgb
    from .stain_model import StainSeparationParams, estimate_basis_for_slide

    path = os.fspath(path)
    base_dir = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    class_names = list(doc["classes"])
    class_to_index = {name: i for i, name in enumerate(class_names)}
    tile_size = int(doc.get("tile_size", 400))
    stride = int(doc.get("stride", 200))
    unlabeled_stride = int(doc.get("unlabeled_stride", stride))
    fg = doc.get("foreground", {})
    od_threshold = float(fg.get("od_threshold", DEFAULT_OD_THRESHOLD))
    min_tissue = float(fg.get("min_tissue_fraction", DEFAULT_MIN_TISSUE_FRACTION))

    tiles = TileSet(class_names=class_names)
    buckets = {
        ("train", True): tiles.train_labeled,
        ("train", False): tiles.train_unlabeled,
        ("val", True): tiles.val,
        ("test", True): tiles.test,
    }
    seen_ids = set()
    for entry in doc["slides"]:
        sid = str(entry["slide_id"])
        split = str(entry["split"])
        if split not in ("train", "val", "test"):
            raise ConfigurationError(f"slide {sid!r}: unknown split {split!r}")
        if sid in seen_ids:
            raise ConfigurationError(f"slide {sid!r} listed twice in the manifest")
        seen_ids.add(sid)
        img = load_rgb(os.path.join(base_dir, entry["image"]))
        polygons: list[PolygonAnnotation] = []
        if entry.get("annotations"):
            ann_id, width, height, polygons = load_annotations(
                os.path.join(base_dir, entry["annotations"])
            )
            if (width, height) != (img.width, img.height):
                raise AnnotationError(
                    -1, f"slide {sid!r}: annotation is {width}x{height}, image is "
                    f"{img.width}x{img.height}"
                )
            for p in polygons:
                if p.label not in class_to_index:
                    raise ConfigurationError(
                        f"slide {sid!r}: polygon label {p.label!r} not in manifest classes"
                    )
        samples = extract_tiles(
            img.width,
            img.height,
            polygons,
            tile_size,
            stride,
            unlabeled_stride,
            class_to_index,
            slide_id=sid,
        )
        labeled_split = {"train": "train_labeled", "val": "val", "test": "test"}[split]
        basis = None
        for sample in samples:
            labeled = sample.label is not None
            if not labeled and split != "train":
                continue
            pixels = img.pixels[
                sample.y : sample.y + tile_size, sample.x : sample.x + tile_size
            ]
            if not foreground_filter(
                pixels, od_threshold, min_tissue, img.background_intensity
            ):
                continue
            if basis is None:
                basis = estimate_basis_for_slide(
                    img, StainSeparationParams(seed=basis_seed), slide_id=sid
                )
                tiles.bases[sid] = basis
            sample.split = labeled_split if labeled else "train_unlabeled"
            buckets[(split, labeled)].append(TileRecord(sample, pixels.copy()))
    tiles.check_no_slide_leakage()
    return tiles
