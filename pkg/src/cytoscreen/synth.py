"""Synthetic fixtures: blob label maps, cell-like textures, and tiled slides.

These feed round-trip tests and the end-to-end service fixture; nothing here
touches real microscopy data.
"""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .raster import FOUR_CONNECTED, LabelMap, RasterImage


def _paint_blob(labels, inst_id, cy, cx, radius, rng):
    """Star-shaped blob: radius modulated by low-order angular harmonics."""
    e2 = rng.uniform(0.0, 0.25)
    w3 = rng.uniform(0.0, 0.1)
    th2 = rng.uniform(0, 2 * np.pi)
    th3 = rng.uniform(0, 2 * np.pi)
    reach = int(np.ceil(radius * 1.4)) + 2
    h, w = labels.shape
    y0, y1 = max(cy - reach, 0), min(cy + reach + 1, h)
    x0, x1 = max(cx - reach, 0), min(cx + reach + 1, w)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dy = yy - cy
    dx = xx - cx
    phi = np.arctan2(dy, dx)
    rim = radius * (1.0 + e2 * np.cos(2 * (phi - th2)) + w3 * np.cos(3 * phi + th3))
    blob = dy * dy + dx * dx <= rim * rim
    if not blob.any():
        return False
    # wobble can pinch off corner pixels; keep the main component only
    parts, n = ndimage.label(blob, structure=FOUR_CONNECTED)
    if n > 1:
        sizes = ndimage.sum_labels(np.ones_like(parts), parts, index=np.arange(1, n + 1))
        blob = parts == (1 + int(np.argmax(sizes)))
    region = labels[y0:y1, x0:x1]
    region[blob & (region == 0)] = inst_id
    return True


def random_blob_map(
    height: int = 256,
    width: int = 256,
    n_instances: int = 20,
    rng=None,
    min_radius: float = 6.0,
    max_radius: float = 24.0,
) -> LabelMap:
    """Non-overlapping deformed-ellipse instances on empty background."""
    rng = np.random.default_rng(rng)
    # leave headroom so dense requests still pack
    cap = np.sqrt(0.30 * height * width / (np.pi * max(n_instances, 1)))
    hi = float(np.clip(cap, min_radius + 1, max_radius))
    labels = np.zeros((height, width), dtype=np.int32)
    placed = []  # (cy, cx, radius)
    inst_id = 0
    radius = None
    while inst_id < n_instances:
        if radius is None:
            radius = rng.uniform(min_radius, hi)
        margin = 1.4 * radius + 2
        if margin * 2 >= min(height, width):
            radius = max(radius * 0.9, min_radius)
            continue
        for _ in range(300):
            cy = rng.uniform(margin, height - margin)
            cx = rng.uniform(margin, width - margin)
            if all(
                (cy - py) ** 2 + (cx - px) ** 2 > (1.4 * (radius + pr) + 2) ** 2
                for py, px, pr in placed
            ):
                break
        else:
            if radius <= min_radius:
                raise RuntimeError(
                    f"could not place {n_instances} blobs in {height}x{width}"
                )
            radius = max(radius * 0.9, min_radius)
            continue
        if _paint_blob(labels, inst_id + 1, int(round(cy)), int(round(cx)), radius, rng):
            placed.append((cy, cx, radius))
            inst_id += 1
        radius = None
    return LabelMap(labels)


def textured_field(height: int, width: int, rng=None) -> RasterImage:
    """Multi-octave smoothed noise: distinctive blobs at several scales,
    good for keypoint registration fixtures."""
    rng = np.random.default_rng(rng)
    img = np.zeros((height, width), dtype=np.float64)
    for sigma, gain in ((12, 55), (5, 35), (2, 20)):
        octave = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma)
        img += gain * octave / max(octave.std(), 1e-9)
    return RasterImage(np.clip(128 + img, 0, 255).astype(np.uint8))


def cut_tiles(source: RasterImage, tile: int, overlap_fraction: float):
    """Cut a grid of overlapping tiles; returns (tiles, (y, x) offsets).

    Tiles stride by tile*(1 - overlap_fraction) and are clamped to the
    source bounds, row-major order.
    """
    step = max(1, int(round(tile * (1.0 - overlap_fraction))))
    h, w = source.height, source.width
    ys = list(range(0, max(h - tile, 0) + 1, step))
    xs = list(range(0, max(w - tile, 0) + 1, step))
    if ys[-1] != h - tile:
        ys.append(h - tile)
    if xs[-1] != w - tile:
        xs.append(w - tile)
    tiles, offsets = [], []
    for y in ys:
        for x in xs:
            tiles.append(RasterImage(np.ascontiguousarray(source.data[y : y + tile, x : x + tile])))
            offsets.append((y, x))
    return tiles, offsets


def render_cells(labels: LabelMap, rng=None, background: int = 185) -> RasterImage:
    """Paint a plausible RGB stain texture for a blob label map."""
    rng = np.random.default_rng(rng)
    h, w = labels.height, labels.width
    img = np.zeros((h, w, 3), dtype=np.float64)
    img[:] = background
    img += rng.normal(0, 4, size=(h, w, 3))
    lab = labels.labels
    yy, xx = np.mgrid[0:h, 0:w]
    for inst_id in labels.instance_ids:
        mask = lab == inst_id
        tint = rng.uniform(0.45, 0.8)
        img[mask, 0] *= tint * rng.uniform(0.9, 1.1)
        img[mask, 1] *= tint
        img[mask, 2] *= min(tint * rng.uniform(1.05, 1.25), 1.0)
        # darker nucleus blot near the instance center
        ys, xs = np.nonzero(mask)
        cy, cx = ys.mean(), xs.mean()
        r = 0.35 * np.sqrt(mask.sum() / np.pi)
        core = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r) & mask
        img[core] *= 0.55
    return RasterImage(np.clip(img, 0, 255).astype(np.uint8))


def make_slide_scene(height: int = 340, width: int = 480, n_cells: int = 8,
                     rng=None):
    """Cells rendered over textured background; returns (scene, labels)."""
    rng = np.random.default_rng(rng)
    labels = random_blob_map(height, width, n_cells, rng,
                             min_radius=9.0, max_radius=16.0)
    base = textured_field(height, width, rng).data.astype(np.float64)
    scene = np.stack([base, base * 0.97, base * 1.03], axis=2)
    cells = render_cells(labels, rng).data.astype(np.float64)
    scene = np.where((labels.labels > 0)[:, :, None], cells, scene)
    return RasterImage(np.clip(scene, 0, 255).astype(np.uint8)), labels


def write_slide_fixture(out_dir, height: int = 340, width: int = 480,
                        n_cells: int = 8, tile: int = 192,
                        overlap_fraction: float = 0.35, seed: int = 0) -> dict:
    """Persist a tiled synthetic slide: frames/, scene.png, truth_labels.png.

    Returns the fixture manifest (also written as fixture.json).
    """
    import json
    from pathlib import Path

    from . import imgio

    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    scene, labels = make_slide_scene(height, width, n_cells, rng)
    tiles, offsets = cut_tiles(scene, tile, overlap_fraction)
    for i, piece in enumerate(tiles):
        imgio.write_image(piece, frames_dir / f"frame_{i:03d}.png")
    imgio.write_image(scene, out_dir / "scene.png")
    imgio.write_label_map(labels, out_dir / "truth_labels.png")
    meta = {
        "height": height,
        "width": width,
        "n_cells": int(labels.num_instances),
        "tile": tile,
        "overlap_fraction": overlap_fraction,
        "seed": seed,
        "n_frames": len(tiles),
        "offsets": [[int(y), int(x)] for y, x in offsets],
    }
    (out_dir / "fixture.json").write_text(json.dumps(meta, indent=2))
    return meta
