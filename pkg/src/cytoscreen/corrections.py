"""Label-map corrections: polygon ROIs, deletes, merges, and splits.

Polygons use even-odd scanline rasterization sampled at pixel centers
(x + 0.5, y + 0.5) with a half-open edge rule, so the same vertex list fills
the same pixels in any client that mirrors the rule. Vertices are (x, y)
pairs in pixel coordinates.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .raster import FOUR_CONNECTED, LabelMap, compact_labels


class VersionConflictError(Exception):
    """Patch was built against a label-map version that is no longer current."""


@dataclass(frozen=True)
class CorrectionPatch:
    slide_id: str
    base_version: int
    ops: list = field(default_factory=list)


def rasterize_polygon(points, height: int, width: int) -> np.ndarray:
    """Even-odd fill of a closed polygon; returns a bool mask.

    A pixel is inside when its center crosses an odd number of edges along
    the +x ray. Edges are half-open in y (min(y1,y2) <= yc < max(y1,y2)), so
    vertices are counted once and shared edges of adjacent polygons abut
    without overlap.
    """
    pts = [(float(x), float(y)) for x, y in points]
    mask = np.zeros((height, width), dtype=bool)
    if len(pts) < 3:
        return mask
    edges = [(pts[i], pts[(i + 1) % len(pts)]) for i in range(len(pts))]
    ys = [p[1] for p in pts]
    row_lo = max(int(np.floor(min(ys) - 0.5)), 0)
    row_hi = min(int(np.ceil(max(ys))), height - 1)
    for row in range(row_lo, row_hi + 1):
        yc = row + 0.5
        crossings = []
        for (x1, y1), (x2, y2) in edges:
            if y1 == y2:
                continue
            if min(y1, y2) <= yc < max(y1, y2):
                crossings.append(x1 + (yc - y1) * (x2 - x1) / (y2 - y1))
        crossings.sort()
        for i in range(0, len(crossings) - 1, 2):
            xa, xb = crossings[i], crossings[i + 1]
            # pixel centers x+0.5 in [xa, xb)
            lo = max(int(np.ceil(xa - 0.5)), 0)
            hi = min(int(np.ceil(xb - 0.5)) - 1, width - 1)
            if lo <= hi:
                mask[row, lo : hi + 1] = True
    return mask


def rasterize_polyline(points, height: int, width: int) -> np.ndarray:
    """1-pixel-wide line through the given (x, y) vertices; returns a bool mask."""
    mask = np.zeros((height, width), dtype=bool)
    pts = [(int(round(float(x))), int(round(float(y)))) for x, y in points]
    for (x1, y1), (x2, y2) in zip(pts, pts[1:]):
        dx = abs(x2 - x1)
        dy = abs(y2 - y1)
        sx = 1 if x1 < x2 else -1
        sy = 1 if y1 < y2 else -1
        err = dx - dy
        x, y = x1, y1
        while True:
            if 0 <= y < height and 0 <= x < width:
                mask[y, x] = True
            if x == x2 and y == y2:
                break
            e2 = 2 * err
            if e2 > -dy:
                err -= dy
                x += sx
            if e2 < dx:
                err += dx
                y += sy
    return mask


def _add_roi(work: np.ndarray, polygon) -> None:
    roi = rasterize_polygon(polygon, *work.shape)
    target = roi & (work == 0)  # never overwrite existing instances
    if target.any():
        work[target] = work.max() + 1


def _delete_instance(work: np.ndarray, inst_id: int) -> None:
    work[work == inst_id] = 0


def _merge(work: np.ndarray, a: int, b: int) -> None:
    work[work == b] = a


def _split(work: np.ndarray, inst_id: int, polyline) -> None:
    mask = work == inst_id
    if not mask.any():
        warnings.warn(f"split target instance {inst_id} does not exist")
        return
    cut = rasterize_polyline(polyline, *work.shape)
    parts, n_parts = ndimage.label(mask & ~cut, structure=FOUR_CONNECTED)
    if n_parts <= 1:
        warnings.warn(f"split polyline does not divide instance {inst_id}")
        return
    # put the severed cut pixels back with their nearest surviving part
    orphan = mask & (parts == 0)
    if orphan.any():
        _, (iy, ix) = ndimage.distance_transform_edt(parts == 0, return_indices=True)
        parts[orphan] = parts[iy[orphan], ix[orphan]]
    sizes = ndimage.sum_labels(np.ones_like(parts), parts, index=np.arange(1, n_parts + 1))
    largest = 1 + int(np.argmax(sizes))
    next_id = work.max() + 1
    for part in range(1, n_parts + 1):
        sel = parts == part
        if part == largest:
            work[sel] = inst_id
        else:
            work[sel] = next_id
            next_id += 1


def apply_correction(labels: LabelMap, patch: CorrectionPatch, current_version: int) -> LabelMap:
    """Apply a correction patch; ops reference IDs of the base version.

    Raises VersionConflictError when the patch was built against a stale
    version. The result is compacted; the caller owns the version bump.
    """
    if patch.base_version != current_version:
        raise VersionConflictError(
            f"patch base version {patch.base_version} != current {current_version}"
        )
    work = labels.labels.copy()
    for op in patch.ops:
        kind = op.get("op")
        if kind == "add_roi":
            _add_roi(work, op["polygon"])
        elif kind == "delete_instance":
            _delete_instance(work, int(op["id"]))
        elif kind == "merge":
            _merge(work, int(op["a"]), int(op["b"]))
        elif kind == "split":
            _split(work, int(op["id"]), op["polyline"])
        else:
            raise ValueError(f"unknown correction op {kind!r}")
    return LabelMap(compact_labels(work))
