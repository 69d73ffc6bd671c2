"""Regenerate the parity fixtures under tests/fixtures/.

The browser code re-implements two server behaviors that must match
bit-for-bit: the even-odd polygon fill and 16-bit label-map PNG decoding.
This script captures the server-side results so the vitest suite can compare
against them offline. Run from the frontend directory:

    python3 scripts/gen_fixtures.py
"""
import json
from pathlib import Path

import numpy as np
from PIL import Image

from cytoscreen.corrections import rasterize_polygon
from cytoscreen.imgio import write_label_map
from cytoscreen.raster import LabelMap

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def polygon_cases() -> list:
    rng = np.random.default_rng(20260823)
    cases = [
        ("triangle", [[2.0, 2.0], [13.0, 3.0], [6.0, 12.0]], 16, 16),
        ("unit_square_on_grid", [[1.0, 1.0], [5.0, 1.0], [5.0, 5.0], [1.0, 5.0]], 8, 8),
        ("half_pixel_square", [[1.5, 1.5], [6.5, 1.5], [6.5, 6.5], [1.5, 6.5]], 9, 9),
        ("concave_l_shape", [[1.0, 1.0], [9.0, 1.0], [9.0, 4.0], [5.0, 4.0],
                             [5.0, 9.0], [1.0, 9.0]], 12, 12),
        ("bowtie_even_odd", [[1.0, 1.0], [11.0, 9.0], [11.0, 1.0], [1.0, 9.0]], 12, 14),
        ("star_self_overlap", [[8.0, 1.0], [11.0, 12.0], [2.0, 5.0], [14.0, 5.0],
                               [5.0, 12.0]], 16, 16),
        ("thin_sliver", [[1.2, 1.1], [14.8, 1.4], [14.9, 2.1]], 5, 17),
        ("out_of_bounds", [[-4.0, -3.0], [10.0, -2.0], [9.0, 6.0], [-3.0, 5.0]], 8, 8),
        ("exceeds_canvas", [[2.0, 2.0], [30.0, 2.0], [30.0, 30.0], [2.0, 30.0]], 10, 10),
        ("single_pixel", [[3.0, 3.0], [4.2, 3.0], [4.2, 4.2], [3.0, 4.2]], 8, 8),
        ("degenerate_line", [[1.0, 2.0], [7.0, 2.0], [4.0, 2.0]], 6, 10),
        ("vertex_on_center", [[2.5, 2.5], [8.5, 2.5], [8.5, 8.5], [2.5, 8.5]], 11, 11),
        # same polygon and canvas the controller tests draw against
        ("app_triangle", [[2.0, 2.0], [14.0, 3.0], [6.0, 12.0]], 40, 48),
    ]
    for i in range(6):
        n = int(rng.integers(5, 13))
        cx, cy = rng.uniform(8, 24, size=2)
        angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
        radii = rng.uniform(2, 12, size=n)
        poly = [[float(cx + r * np.cos(a)), float(cy + r * np.sin(a))]
                for a, r in zip(angles, radii)]
        cases.append((f"random_{i}", poly, 32, 32))
    for i in range(3):
        n = int(rng.integers(4, 9))
        poly = [[float(x), float(y)]
                for x, y in rng.uniform(-4, 28, size=(n, 2))]
        cases.append((f"random_tangled_{i}", poly, 24, 24))
    return cases


def write_rasterize_fixture() -> int:
    out = []
    for name, polygon, height, width in polygon_cases():
        mask = rasterize_polygon(polygon, height, width)
        ys, xs = mask.nonzero()
        out.append({
            "name": name,
            "polygon": polygon,
            "height": height,
            "width": width,
            "pixels": [[int(y), int(x)] for y, x in zip(ys, xs)],
        })
    (FIXTURES / "rasterize.json").write_text(json.dumps(out, indent=1))
    return len(out)


def write_png_fixtures() -> int:
    png_dir = FIXTURES / "png"
    png_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(7)
    cases = {}

    gray8 = rng.integers(0, 256, size=(9, 13), dtype=np.uint8)
    Image.fromarray(gray8).save(png_dir / "gray8.png")
    cases["gray8.png"] = {"width": 13, "height": 9, "channels": 1, "bitDepth": 8,
                          "samples": gray8.ravel().tolist()}

    rgb8 = rng.integers(0, 256, size=(7, 5, 3), dtype=np.uint8)
    Image.fromarray(rgb8).save(png_dir / "rgb8.png")
    cases["rgb8.png"] = {"width": 5, "height": 7, "channels": 3, "bitDepth": 8,
                         "samples": rgb8.ravel().tolist()}

    rgba8 = rng.integers(0, 256, size=(6, 6, 4), dtype=np.uint8)
    Image.fromarray(rgba8).save(png_dir / "rgba8.png")
    cases["rgba8.png"] = {"width": 6, "height": 6, "channels": 4, "bitDepth": 8,
                          "samples": rgba8.ravel().tolist()}

    gray16 = rng.integers(0, 65536, size=(11, 8), dtype=np.uint16)
    # large smooth block exercises the up/average/paeth filter paths
    gray16[4:, :] = (np.arange(7)[:, None] * 700 + np.arange(8) * 90).astype(np.uint16)
    Image.fromarray(gray16).save(png_dir / "gray16.png")
    cases["gray16.png"] = {"width": 8, "height": 11, "channels": 1, "bitDepth": 16,
                           "samples": gray16.ravel().tolist()}

    labels = np.zeros((20, 24), dtype=np.int64)
    labels[2:8, 3:9] = 1
    labels[10:17, 5:12] = 2
    labels[4:9, 14:21] = 300  # forces the 16-bit path past one byte
    labels[14:18, 16:23] = 4
    write_label_map(LabelMap(labels), png_dir / "labels.png")
    cases["labels.png"] = {"width": 24, "height": 20, "channels": 1, "bitDepth": 16,
                           "samples": labels.ravel().tolist()}

    (FIXTURES / "png_cases.json").write_text(json.dumps(cases))
    return len(cases)


def write_app_fixtures() -> None:
    """Slide snapshots the controller tests serve from a scripted fetch:
    version 1 with 12 instances, version 2 with the last two removed, and an
    instance-free map for the image-only path."""
    app_dir = FIXTURES / "app"
    app_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(11)

    height, width = 40, 48
    v1 = np.zeros((height, width), dtype=np.int64)
    inst = 0
    for row in range(3):
        for col in range(4):
            inst += 1
            y, x = 3 + row * 12, 3 + col * 11
            v1[y : y + 6, x : x + 6] = inst
    v2 = v1.copy()
    v2[(v2 == 11) | (v2 == 12)] = 0

    write_label_map(LabelMap(v1), app_dir / "labels_v1.png")
    write_label_map(LabelMap(v2), app_dir / "labels_v2.png")
    write_label_map(LabelMap(np.zeros_like(v1)), app_dir / "labels_empty.png")
    pano = rng.integers(40, 220, size=(height, width), dtype=np.uint8)
    Image.fromarray(pano).save(app_dir / "panorama.png")
    meta = {
        "height": height,
        "width": width,
        "v1_ids": sorted(int(i) for i in np.unique(v1) if i > 0),
        "v2_ids": sorted(int(i) for i in np.unique(v2) if i > 0),
    }
    (app_dir / "meta.json").write_text(json.dumps(meta))


def main() -> None:
    FIXTURES.mkdir(parents=True, exist_ok=True)
    n_poly = write_rasterize_fixture()
    n_png = write_png_fixtures()
    write_app_fixtures()
    print(f"wrote {n_poly} rasterize cases and {n_png} png cases to {FIXTURES}")


if __name__ == "__main__":
    main()
