#!/usr/bin/env python3
"""Regenerate the committed golden CLI fixtures under tests/golden/.

Run from the repository root after an intentional behavior change:

    python3 scripts/make_golden.py
"""

import json
import shutil
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from synth_util import two_stain_image

from stainssl.cli import main
from stainssl.raster import save_rgb_u8
from stainssl.synthetic import render_slide_image, slide_style

GOLDEN = Path(__file__).resolve().parents[1] / "tests" / "golden"


def build() -> None:
    if GOLDEN.exists():
        shutil.rmtree(GOLDEN)
    GOLDEN.mkdir(parents=True)

    style = slide_style(123, 0)
    rng = np.random.default_rng(42)
    img, _, _ = two_stain_image(rng, 192, v_h=style.v_h, v_e=style.v_e, quantize=True)
    uniform = GOLDEN / "uniform.png"
    save_rgb_u8(uniform, img.pixels)

    image, polys = render_slide_image(
        seed=123, slide_idx=3, grid=2, tile_size=96, class_layout=[0, 1, 2, 1]
    )
    slide = GOLDEN / "slide.png"
    save_rgb_u8(slide, image.astype(np.float64))
    (GOLDEN / "annotations.json").write_text(
        json.dumps(
            {
                "slide_id": "golden_slide",
                "width": image.shape[1],
                "height": image.shape[0],
                "polygons": polys,
            },
            indent=2,
        )
        + "\n"
    )

    rc = main(
        [
            "stain-estimate",
            "--input", str(uniform),
            "--out", str(GOLDEN / "basis.json"),
            "--seed", "7",
            "--force",
        ]
    )
    assert rc == 0, rc
    rc = main(
        [
            "separate",
            "--input", str(uniform),
            "--basis", str(GOLDEN / "basis.json"),
            "--out-h", str(GOLDEN / "h.png"),
            "--out-e", str(GOLDEN / "e.png"),
            "--reconstruct", str(GOLDEN / "recon.png"),
            "--force",
        ]
    )
    assert rc == 0, rc
    rc = main(
        [
            "tile",
            "--image", str(slide),
            "--annotations", str(GOLDEN / "annotations.json"),
            "--size", "96",
            "--stride", "96",
            "--unlabeled-stride", "96",
            "--out", str(GOLDEN / "tiles"),
            "--force",
        ]
    )
    assert rc == 0, rc
    # manifests are run records, not golden outputs
    for manifest in GOLDEN.rglob("*manifest.json"):
        manifest.unlink()
    print(f"golden fixtures written to {GOLDEN}")


if __name__ == "__main__":
    build()
