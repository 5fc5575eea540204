"""Command-line entry point.

Subcommands: stain-estimate, separate, tile, train, eval, heatmap.  Every
command is deterministic given --seed, refuses to overwrite outputs
without --force, writes a run manifest next to its outputs, and maps
errors to stable exit codes:

    1  generic error (bad paths, invalid inputs, malformed config)
    2  insufficient tissue for stain estimation
    3  degenerate (single-stain) slide
    4  basis/image mismatch
    5  malformed polygon annotations
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import __version__
from .errors import (
    AnnotationError,
    BasisMismatchError,
    DegenerateStainError,
    InsufficientTissueError,
    StainSslError,
)
from .datapipe import extract_tiles, foreground_filter, load_annotations, load_manifest_dataset
from .heatmap import render_heatmap
from .raster import load_rgb, save_gray_u16, save_rgb_u8, save_rgba
from .separation import reconstruct_rgb, separate_tile
from .stain_model import (
    StainSeparationParams,
    estimate_basis_for_slide,
    load_basis,
    save_basis,
)

EXIT_CODES = (
    (InsufficientTissueError, 2),
    (DegenerateStainError, 3),
    (BasisMismatchError, 4),
    (AnnotationError, 5),
)


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _resolve_seed(seed) -> int:
    if seed is not None:
        return int(seed)
    return int(np.random.SeedSequence().entropy % (2**32))


def _check_overwrite(paths, force: bool) -> None:
    for p in paths:
        if p is not None and Path(p).exists() and not force:
            raise StainSslError(f"refusing to overwrite {p} (use --force)")


def write_run_manifest(
    target, command: str, config: dict, inputs: dict, artifacts: list, seed: int
) -> Path:
    """One manifest per output location: config echo, seeds, input hashes."""
    target = Path(target)
    if target.suffix:  # file output: manifest sits alongside
        manifest_path = target.with_suffix(target.suffix + ".manifest.json")
    else:
        target.mkdir(parents=True, exist_ok=True)
        manifest_path = target / "run_manifest.json"
    doc = {
        "tool": "stainssl",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config,
        "input_hashes": {name: _sha256(p) for name, p in inputs.items()},
        "artifacts": [str(a) for a in artifacts],
    }
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest_path


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_stain_estimate(args) -> int:
    _check_overwrite([args.out], args.force)
    seed = _resolve_seed(args.seed)
    img = load_rgb(args.input, background_intensity=args.i0)
    params = StainSeparationParams(
        outlier_fraction=args.outlier_fraction,
        min_od_norm=args.min_od_norm,
        intensity_floor=args.intensity_floor,
        i0=np.full(3, args.i0),
        seed=seed,
    )
    slide_id = args.slide_id or Path(args.input).stem
    basis = estimate_basis_for_slide(img, params, slide_id=slide_id)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_basis(basis, args.out)
    write_run_manifest(
        args.out,
        "stain-estimate",
        {
            "outlier_fraction": args.outlier_fraction,
            "min_od_norm": args.min_od_norm,
            "intensity_floor": args.intensity_floor,
            "i0": args.i0,
            "slide_id": slide_id,
        },
        {"input": args.input},
        [args.out],
        seed,
    )
    print(f"wrote {args.out} (slide {slide_id})")
    return 0


def cmd_separate(args) -> int:
    _check_overwrite([args.out_h, args.out_e, args.reconstruct], args.force)
    basis = load_basis(args.basis)
    cross_basis = False
    if args.slide_id is not None and args.slide_id != basis.slide_id:
        if not args.allow_cross_basis:
            raise BasisMismatchError(
                f"image is from slide {args.slide_id!r} but basis was estimated "
                f"for {basis.slide_id!r} (pass --allow-cross-basis to force)"
            )
        cross_basis = True
    img = load_rgb(args.input, background_intensity=float(basis.params.i0[0]))
    h, e = separate_tile(img, basis)
    for p in (args.out_h, args.out_e):
        Path(p).parent.mkdir(parents=True, exist_ok=True)
    save_gray_u16(args.out_h, h.values)
    save_gray_u16(args.out_e, e.values)
    artifacts = [args.out_h, args.out_e]
    if args.reconstruct:
        save_rgb_u8(args.reconstruct, reconstruct_rgb(h, e, basis).pixels)
        artifacts.append(args.reconstruct)
    write_run_manifest(
        args.out_h,
        "separate",
        {"cross_basis": cross_basis, "slide_id": args.slide_id},
        {"input": args.input, "basis": args.basis},
        artifacts,
        basis.params.seed,
    )
    print(f"wrote {args.out_h}, {args.out_e}" + (f", {args.reconstruct}" if args.reconstruct else ""))
    return 0


def cmd_tile(args) -> int:
    out_dir = Path(args.out)
    _check_overwrite([out_dir / "index.json"], args.force)
    slide_id, width, height, polygons = load_annotations(args.annotations)
    img = load_rgb(args.image)
    if (img.width, img.height) != (width, height):
        raise AnnotationError(
            -1,
            f"annotation says {width}x{height}, image is {img.width}x{img.height}",
        )
    class_names = sorted({p.label for p in polygons})
    class_to_index = {name: i for i, name in enumerate(class_names)}
    samples = extract_tiles(
        width,
        height,
        polygons,
        args.size,
        args.stride,
        args.unlabeled_stride,
        class_to_index,
        slide_id=slide_id,
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"slide_id": slide_id, "classes": class_names, "tile_size": args.size, "tiles": []}
    counts: dict = {name: 0 for name in class_names}
    counts["unlabeled"] = 0
    for sample in samples:
        pixels = img.pixels[sample.y : sample.y + args.size, sample.x : sample.x + args.size]
        if not foreground_filter(
            pixels, args.od_threshold, args.min_tissue_fraction, img.background_intensity
        ):
            continue
        name = f"{slide_id}_{sample.x}_{sample.y}.png"
        save_rgb_u8(out_dir / name, pixels)
        label = class_names[sample.label] if sample.label is not None else None
        counts[label if label is not None else "unlabeled"] += 1
        index["tiles"].append(
            {"file": name, "x": sample.x, "y": sample.y, "label": label}
        )
    with open(out_dir / "index.json", "w", encoding="utf-8") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")
    write_run_manifest(
        out_dir,
        "tile",
        {
            "size": args.size,
            "stride": args.stride,
            "unlabeled_stride": args.unlabeled_stride,
            "od_threshold": args.od_threshold,
            "min_tissue_fraction": args.min_tissue_fraction,
        },
        {"image": args.image, "annotations": args.annotations},
        ["index.json"] + [t["file"] for t in index["tiles"]],
        0,
    )
    for name in class_names + ["unlabeled"]:
        print(f"{name}: {counts[name]}")
    return 0


def _load_train_config(path):
    from .trainer import TrainConfig

    with open(path, "rb") as f:
        doc = tomllib.load(f)
    dataset = doc.pop("dataset", None)
    if dataset is None:
        raise StainSslError("config is missing the [dataset] section")
    return TrainConfig.from_dict(doc), dataset


def _load_dataset(dataset_cfg: dict, seed: int):
    from .synthetic import make_benefit_dataset

    unknown = set(dataset_cfg) - {"manifest", "synthetic"}
    if unknown:
        raise StainSslError(f"unknown keys in [dataset] config: {sorted(unknown)}")
    if "manifest" in dataset_cfg:
        return load_manifest_dataset(dataset_cfg["manifest"], basis_seed=seed)
    if "synthetic" in dataset_cfg:
        return make_benefit_dataset(**dataset_cfg["synthetic"])
    raise StainSslError("[dataset] must give either 'manifest' or 'synthetic'")


def cmd_train(args) -> int:
    from .trainer import Trainer

    out_dir = Path(args.out)
    _check_overwrite([out_dir / "report.json"], args.force)
    config, dataset_cfg = _load_train_config(args.config)
    from dataclasses import replace

    if args.seed is not None:
        config = replace(config, seed=int(args.seed))
    if args.workers is not None:
        config = replace(config, workers=int(args.workers))
    tiles = _load_dataset(dataset_cfg, config.seed)
    trainer = Trainer(config, tiles, out_dir=out_dir)
    report = trainer.fit()
    write_run_manifest(
        out_dir,
        "train",
        config.to_dict(),
        {"config": args.config},
        ["report.json", "checkpoint_best.pt", "checkpoint_last.pt", "train_log.jsonl"],
        config.seed,
    )
    best = report["best_val_balanced_accuracy"]
    test = report["test"]["balanced_accuracy"] if report["test"] else float("nan")
    print(f"best val balanced accuracy: {best:.4f}")
    print(f"test balanced accuracy (best checkpoint): {test:.4f}")
    return 0


def cmd_eval(args) -> int:
    from .trainer import Trainer

    tiles = load_manifest_dataset(args.manifest, basis_seed=_resolve_seed(args.seed))
    trainer = Trainer.resume(args.checkpoint, tiles)
    metrics = trainer.validate_split(args.split)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    print(text)
    if args.out:
        _check_overwrite([args.out], args.force)
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
        write_run_manifest(
            args.out,
            "eval",
            {"split": args.split},
            {"checkpoint": args.checkpoint, "manifest": args.manifest},
            [args.out],
            0,
        )
    return 0


def cmd_heatmap(args) -> int:
    from .model import load_checkpoint

    _check_overwrite([args.out], args.force)
    model, _, _, extra = load_checkpoint(args.checkpoint)
    basis = load_basis(args.basis)
    img = load_rgb(args.image, background_intensity=float(basis.params.i0[0]))
    crop = extra.get("train_config", {}).get("augment", {}).get("crop_size", args.tile_size)
    overlay = render_heatmap(
        model,
        img,
        basis,
        tile_size=args.tile_size,
        crop_size=min(args.tile_size, crop),
        stride=args.stride,
        transparent_classes=frozenset(args.transparent_class),
    )
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_rgba(args.out, overlay)
    write_run_manifest(
        args.out,
        "heatmap",
        {"tile_size": args.tile_size, "stride": args.stride,
         "transparent_classes": sorted(args.transparent_class)},
        {"checkpoint": args.checkpoint, "image": args.image, "basis": args.basis},
        [args.out],
        0,
    )
    print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stainssl",
        description="Adaptive H&E stain separation and semi-supervised tile classification",
    )
    parser.add_argument("--version", action="version", version=f"stainssl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        p.add_argument("--json-errors", action="store_true", help="machine-readable stderr")

    p = sub.add_parser("stain-estimate", help="estimate a per-slide stain basis")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--outlier-fraction", type=float, default=0.01)
    p.add_argument("--min-od-norm", type=float, default=0.1)
    p.add_argument("--intensity-floor", type=float, default=1.0)
    p.add_argument("--i0", type=float, default=255.0)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--slide-id", default=None)
    common(p)
    p.set_defaults(fn=cmd_stain_estimate)

    p = sub.add_parser("separate", help="split an image into H and E channels")
    p.add_argument("--input", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--out-h", required=True)
    p.add_argument("--out-e", required=True)
    p.add_argument("--reconstruct", default=None)
    p.add_argument("--slide-id", default=None)
    p.add_argument("--allow-cross-basis", action="store_true")
    common(p)
    p.set_defaults(fn=cmd_separate)

    p = sub.add_parser("tile", help="extract tiles from a polygon-annotated image")
    p.add_argument("--image", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--size", type=int, default=400)
    p.add_argument("--stride", type=int, default=200)
    p.add_argument("--unlabeled-stride", type=int, default=400)
    p.add_argument("--od-threshold", type=float, default=0.15)
    p.add_argument("--min-tissue-fraction", type=float, default=0.25)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_tile)

    p = sub.add_parser("train", help="run the training loop from a TOML config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument(
        "--workers",
        type=int,
        default=None,
        help="data-preparation threads (deterministic mode forces 1)",
    )
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train_labeled", "val", "test"])
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("heatmap", help="render a prediction overlay for an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--basis", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tile-size", type=int, default=400)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument(
        "--transparent-class",
        type=int,
        action="append",
        default=None,
        help="class index left transparent (repeatable; default 0)",
    )
    common(p)
    p.set_defaults(fn=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "transparent_class", None) is None and args.command == "heatmap":
        args.transparent_class = [0]
    try:
        return args.fn(args)
    except Exception as err:  # noqa: BLE001 - single exit-code boundary
        code = 1
        for cls, exit_code in EXIT_CODES:
            if isinstance(err, cls):
                code = exit_code
                break
        if not isinstance(err, (StainSslError, OSError, ValueError, KeyError)):
            raise
        if getattr(args, "json_errors", False):
            print(
                json.dumps(
                    {"error": type(err).__name__, "message": str(err), "exit_code": code}
                ),
                file=sys.stderr,
            )
        else:
            print(f"stainssl {args.command}: {err}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
