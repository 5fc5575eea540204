"""Per-slide stain basis estimation.

H&E pixels in OD space are (to noise) non-negative combinations of two
unit stain vectors, so the pixel cloud lies in a plane through the origin.
The basis is recovered in four steps: fit that plane with the two leading
eigenvectors of the uncentered second-moment matrix, project foreground
pixels onto it, take the angular percentiles of the projected cloud as the
stain directions, and assemble the 3x3 HERes<->RGB conversion matrices.
All estimation runs on a seeded, size-capped pixel pool so a slide always
produces the same basis.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConditioningError,
    DegenerateStainError,
    InsufficientTissueError,
    InvalidBasisError,
    InvalidInputError,
)
from .od_color import DEFAULT_I0, DEFAULT_INTENSITY_FLOOR, OdImage, RgbImage, rgb_to_od
from .rng import STREAM_SUBSAMPLE, substream

MIN_FOREGROUND_PIXELS = 100
MIN_ANGULAR_SPREAD_DEG = 1.0
MAX_POOL_PIXELS = 2_000_000
_COLLINEARITY_LIMIT = 1.0 - 1e-6


def eigh3(mat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decompose a symmetric 3x3 matrix by cyclic Jacobi rotations.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted in
    non-increasing order and eigenvectors as matching orthonormal columns.
    Each eigenvector's sign is canonicalized (largest-magnitude component
    positive) so the decomposition is deterministic.
    """
    a = np.array(mat, dtype=np.float64)
    if a.shape != (3, 3) or not np.allclose(a, a.T, atol=1e-12):
        raise InvalidInputError("eigh3 requires a symmetric 3x3 matrix")
    v = np.eye(3)
    scale = max(np.max(np.abs(a)), 1e-300)
    for _ in range(64):
        off = math.sqrt(a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2)
        if off <= 1e-15 * scale:
            break
        for p, q in ((0, 1), (0, 2), (1, 2)):
            apq = a[p, q]
            if abs(apq) <= 1e-30 * scale:
                continue
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
            c = 1.0 / math.sqrt(t * t + 1.0)
            s = t * c
            rot = np.eye(3)
            rot[p, p] = rot[q, q] = c
            rot[p, q] = s
            rot[q, p] = -s
            a = rot.T @ a @ rot
            v = v @ rot
    order = np.argsort(-np.diag(a), kind="stable")
    vals = np.diag(a)[order].copy()
    vecs = v[:, order].copy()
    for j in range(3):
        k = int(np.argmax(np.abs(vecs[:, j])))
        if vecs[k, j] < 0:
            vecs[:, j] = -vecs[:, j]
    return vals, vecs


@dataclass
class StainSeparationParams:
    """Knobs of the basis estimation, frozen into every saved basis."""

    outlier_fraction: float = 0.01
    min_od_norm: float = 0.1
    intensity_floor: float = DEFAULT_INTENSITY_FLOOR
    i0: np.ndarray = field(default_factory=lambda: np.full(3, DEFAULT_I0))
    seed: int = 0
    max_pool_pixels: int = MAX_POOL_PIXELS
    centered_plane: bool = False  # comparison flag; production uses uncentered

    def __post_init__(self):
        self.i0 = np.broadcast_to(np.asarray(self.i0, dtype=np.float64), (3,)).copy()
        if not 0.0 < self.outlier_fraction < 0.5:
            raise InvalidInputError(
                f"outlier_fraction must be in (0, 0.5), got {self.outlier_fraction}"
            )
        if self.min_od_norm < 0:
            raise InvalidInputError("min_od_norm must be non-negative")


@dataclass
class PlaneProjection:
    """Two leading OD directions and the retained pixels' plane coordinates."""

    basis_x: np.ndarray
    basis_y: np.ndarray
    coords: np.ndarray  # (n, 2) plane coordinates of retained pixels
    od_norms: np.ndarray  # (n,) full 3D OD norms of the same pixels
    eigenvalues: np.ndarray  # all three, non-increasing

    def __post_init__(self):
        if abs(float(self.basis_x @ self.basis_y)) > 1e-10:
            raise InvalidInputError("plane basis vectors must be orthogonal")


@dataclass
class StainBasis:
    """Unit H/E/residual stain vectors plus the OD conversion matrices.

    ``norm_h`` / ``norm_e`` are the slide's 99th-percentile raw
    concentrations; they stay ``None`` until filled by the per-slide
    estimation so that every tile of the slide is normalized identically.
    """

    v_h: np.ndarray
    v_e: np.ndarray
    v_residual: np.ndarray
    mat_heres_to_rgb_od: np.ndarray
    mat_rgb_to_heres_od: np.ndarray
    norm_h: float | None = None
    norm_e: float | None = None
    slide_id: str = ""
    params: StainSeparationParams = field(default_factory=StainSeparationParams)

    def validate(self) -> None:
        for name, v in (("v_h", self.v_h), ("v_e", self.v_e), ("v_residual", self.v_residual)):
            if abs(np.linalg.norm(v) - 1.0) > 1e-10:
                raise InvalidBasisError(f"{name} is not a unit vector")
        if abs(float(self.v_h @ self.v_e)) >= _COLLINEARITY_LIMIT:
            raise InvalidBasisError("v_h and v_e are (near) collinear")
        prod = self.mat_heres_to_rgb_od @ self.mat_rgb_to_heres_od
        if np.max(np.abs(prod - np.eye(3))) > 1e-8:
            raise InvalidBasisError("conversion matrices are not mutually inverse")
        for name, n in (("norm_h", self.norm_h), ("norm_e", self.norm_e)):
            if n is not None and n <= 0:
                raise InvalidBasisError(f"{name} must be positive, got {n}")


def _unit(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0:
        raise InvalidInputError("zero vector cannot be normalized")
    return v / n


def estimate_plane(
    od, min_od_norm: float = 0.1, slide_id: str = "", centered: bool = False
) -> PlaneProjection:
    """Fit the 2D stain plane to foreground OD pixels.

    ``od`` is an :class:`OdImage` or an (n, 3) OD pixel array.  Pixels with
    OD norm below ``min_od_norm`` carry mostly noise and are excluded; at
    least 100 must remain.  The plane is spanned by the two leading
    eigenvectors of the second-moment matrix of the retained pixels (the
    stain model is linear through the origin, so the moments are not
    centered unless ``centered`` is set); the third direction is residual
    and dropped.  basis_x is flipped so the mean plane-x coordinate is
    positive, putting the pixel cloud on the +x side.
    """
    pixels = od.pixels.reshape(-1, 3) if isinstance(od, OdImage) else np.asarray(od, dtype=np.float64)
    if pixels.ndim != 2 or pixels.shape[1] != 3:
        raise InvalidInputError(f"OD pixels must be (n, 3), got {pixels.shape}")
    norms = np.linalg.norm(pixels, axis=1)
    keep = norms >= min_od_norm
    retained = pixels[keep]
    if retained.shape[0] < MIN_FOREGROUND_PIXELS:
        raise InsufficientTissueError(slide_id, retained.shape[0], MIN_FOREGROUND_PIXELS)
    sample = retained - retained.mean(axis=0) if centered else retained
    moment = (sample.T @ sample) / sample.shape[0]
    vals, vecs = eigh3(moment)
    basis_x = vecs[:, 0]
    basis_y = vecs[:, 1]
    x = retained @ basis_x
    if x.mean() < 0:
        basis_x = -basis_x
        x = -x
    coords = np.column_stack([x, retained @ basis_y])
    return PlaneProjection(basis_x, basis_y, coords, norms[keep], vals)


def extract_stain_vectors(
    proj: PlaneProjection,
    outlier_fraction: float = 0.01,
    min_od_norm: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Pick the H and E unit vectors from the projected pixel cloud.

    Real pixels should sit between the two stain directions, but noise is
    unavoidable, so the directions are taken at the ``outlier_fraction``
    and ``1 - outlier_fraction`` percentiles of the pixel angles (both
    sides trimmed independently).  Pixels whose full 3D OD norm is below
    ``min_od_norm`` are ignored.  Of the two extreme directions, the one
    absorbing red light more strongly (larger red OD component) is
    Hematoxylin; with the y-axis oriented toward Eosin, H then falls in
    quadrant IV and E in quadrant I.
    """
    if not 0.0 < outlier_fraction < 0.5:
        raise InvalidInputError(
            f"outlier_fraction must be in (0, 0.5), got {outlier_fraction}"
        )
    keep = proj.od_norms >= min_od_norm
    coords = proj.coords[keep]
    if coords.shape[0] < MIN_FOREGROUND_PIXELS:
        raise InsufficientTissueError("", coords.shape[0], MIN_FOREGROUND_PIXELS)
    angles = np.arctan2(coords[:, 1], coords[:, 0])
    lo, hi = np.quantile(angles, [outlier_fraction, 1.0 - outlier_fraction])
    spread_deg = math.degrees(hi - lo)
    if spread_deg < MIN_ANGULAR_SPREAD_DEG:
        raise DegenerateStainError("", spread_deg)
    v_lo = math.cos(lo) * proj.basis_x + math.sin(lo) * proj.basis_y
    v_hi = math.cos(hi) * proj.basis_x + math.sin(hi) * proj.basis_y
    # Blue-purple H absorbs red light most; ties broken toward the lower angle.
    if v_lo[0] >= v_hi[0]:
        v_h, v_e = v_lo, v_hi
    else:
        v_h, v_e = v_hi, v_lo
    return _unit(v_h), _unit(v_e)


def build_basis(
    v_h: np.ndarray,
    v_e: np.ndarray,
    v_residual_hint: np.ndarray | None = None,
    slide_id: str = "",
    params: StainSeparationParams | None = None,
) -> StainBasis:
    """Assemble conversion matrices from unit H and E stain vectors.

    The residual direction is the normalized cross product of v_h and v_e,
    signed toward the hint when given, otherwise toward the positive
    octant.  Norms are left unset.
    """
    v_h = _unit(v_h)
    v_e = _unit(v_e)
    cos_he = float(v_h @ v_e)
    if abs(cos_he) > _COLLINEARITY_LIMIT:
        raise ConditioningError(
            f"stain vectors are near collinear (|cos| = {abs(cos_he):.9f})"
        )
    v_res = np.cross(v_h, v_e)
    v_res = _unit(v_res)
    if v_residual_hint is not None:
        if float(v_res @ np.asarray(v_residual_hint, dtype=np.float64)) < 0:
            v_res = -v_res
    else:
        s = float(v_res.sum())
        if s < 0 or (s == 0 and v_res[np.nonzero(v_res)[0][0]] < 0):
            v_res = -v_res
    mat = np.column_stack([v_h, v_e, v_res])
    inv = np.linalg.inv(mat)
    if np.max(np.abs(mat @ inv - np.eye(3))) > 1e-8:
        raise ConditioningError("matrix inversion failed the identity check")
    basis = StainBasis(
        v_h=v_h,
        v_e=v_e,
        v_residual=v_res,
        mat_heres_to_rgb_od=mat,
        mat_rgb_to_heres_od=inv,
        slide_id=slide_id,
        params=params if params is not None else StainSeparationParams(),
    )
    return basis


def estimate_basis_for_slide(
    img: RgbImage,
    params: StainSeparationParams | None = None,
    slide_id: str = "",
) -> StainBasis:
    """Estimate the full stain basis of one slide from a representative image.

    Composes OD conversion, plane fit, percentile stain vectors, matrix
    construction, and the 99th-percentile concentration norms.  The pixel
    pool is uniformly subsampled (seeded) to at most ``max_pool_pixels``
    and the same retained pool feeds both the plane fit and the norms, so
    the result is deterministic for a fixed input.
    """
    from .separation import compute_norm, separate_od_pixels

    params = params if params is not None else StainSeparationParams()
    od = rgb_to_od(img, params.intensity_floor)
    pixels = od.pixels.reshape(-1, 3)
    if pixels.shape[0] > params.max_pool_pixels:
        rng = substream(params.seed, STREAM_SUBSAMPLE)
        idx = rng.choice(pixels.shape[0], size=params.max_pool_pixels, replace=False)
        pixels = pixels[np.sort(idx)]
    try:
        proj = estimate_plane(
            pixels, params.min_od_norm, slide_id=slide_id, centered=params.centered_plane
        )
        v_h, v_e = extract_stain_vectors(proj, params.outlier_fraction, params.min_od_norm)
    except DegenerateStainError as err:
        raise DegenerateStainError(slide_id, err.spread_degrees) from None
    basis = build_basis(v_h, v_e, slide_id=slide_id, params=replace(params, i0=img.background_intensity))
    foreground = pixels[np.linalg.norm(pixels, axis=1) >= params.min_od_norm]
    raw_h, raw_e = separate_od_pixels(foreground, basis)
    basis.norm_h = compute_norm(raw_h)
    basis.norm_e = compute_norm(raw_e)
    basis.validate()
    return basis


def _fmt_float(x: float) -> str:
    s = format(float(x), ".17g")
    if "e" not in s and "E" not in s and "." not in s and "n" not in s and "inf" not in s:
        s += ".0"
    return s


def dumps_basis(basis: StainBasis) -> str:
    """Serialize a basis to deterministic JSON with 17-significant-digit
    floats (lossless float64 round trip)."""
    basis.validate()
    if basis.norm_h is None or basis.norm_e is None:
        raise InvalidBasisError("norms must be set before serialization")
    p = basis.params

    def arr(a):
        return "[" + ", ".join(_fmt_float(v) for v in np.asarray(a).ravel()) + "]"

    lines = [
        "{",
        f'  "slide_id": {json.dumps(basis.slide_id)},',
        f'  "v_h": {arr(basis.v_h)},',
        f'  "v_e": {arr(basis.v_e)},',
        f'  "v_residual": {arr(basis.v_residual)},',
        f'  "mat_heres_to_rgb_od": {arr(basis.mat_heres_to_rgb_od)},',
        f'  "mat_rgb_to_heres_od": {arr(basis.mat_rgb_to_heres_od)},',
        f'  "norm_h": {_fmt_float(basis.norm_h)},',
        f'  "norm_e": {_fmt_float(basis.norm_e)},',
        '  "params": {',
        f'    "outlier_fraction": {_fmt_float(p.outlier_fraction)},',
        f'    "min_od_norm": {_fmt_float(p.min_od_norm)},',
        f'    "intensity_floor": {_fmt_float(p.intensity_floor)},',
        f'    "i0": {arr(p.i0)},',
        f'    "seed": {int(p.seed)}',
        "  }",
        "}",
    ]
    return "\n".join(lines) + "\n"


def save_basis(basis: StainBasis, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_basis(basis))


def load_basis(path: str | os.PathLike) -> StainBasis:
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    try:
        p = doc["params"]
        params = StainSeparationParams(
            outlier_fraction=float(p["outlier_fraction"]),
            min_od_norm=float(p["min_od_norm"]),
            intensity_floor=float(p["intensity_floor"]),
            i0=np.asarray(p["i0"], dtype=np.float64),
            seed=int(p["seed"]),
        )
        basis = StainBasis(
            v_h=np.asarray(doc["v_h"], dtype=np.float64),
            v_e=np.asarray(doc["v_e"], dtype=np.float64),
            v_residual=np.asarray(doc["v_residual"], dtype=np.float64),
            mat_heres_to_rgb_od=np.asarray(doc["mat_heres_to_rgb_od"], dtype=np.float64).reshape(3, 3),
            mat_rgb_to_heres_od=np.asarray(doc["mat_rgb_to_heres_od"], dtype=np.float64).reshape(3, 3),
            norm_h=float(doc["norm_h"]),
            norm_e=float(doc["norm_e"]),
            slide_id=str(doc["slide_id"]),
            params=params,
        )
    except (KeyError, ValueError) as err:
        raise InvalidBasisError(f"malformed basis file {path}: {err}") from err
    basis.validate()
    return basis
