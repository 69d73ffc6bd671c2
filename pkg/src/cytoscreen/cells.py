"""Per-cell classification over a panorama and its label map.

Each instance gets a traced outline, a margin-padded crop, and a class
probability vector from the convolutional transformer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cvt import CLASS_GROUPS, ClassProbabilities, CvTConfig, forward
from .raster import LabelMap, RasterImage
from .weights import TensorStore

# clockwise ring around a pixel, starting west, y growing downward
_RING = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))
_RING_INDEX = {d: i for i, d in enumerate(_RING)}


def trace_boundary(mask: np.ndarray) -> np.ndarray:
    """Moore-neighbor boundary trace, returned as (P, 2) columns (x, y).

    Starts at the topmost-leftmost pixel and walks clockwise; terminates on
    re-entering the start pixel from the original direction, so each boundary
    pixel of a convex blob appears exactly once.
    """
    mask = np.asarray(mask, dtype=bool)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise ValueError("cannot trace an empty mask")
    h, w = mask.shape
    start = (int(ys[0]), int(xs[0]))

    cur = start
    back = 0
    first_back = back
    contour = []
    limit = 8 * ys.size + 8
    while True:
        if contour and cur == start and back == first_back:
            break
        contour.append(cur)
        if len(contour) > limit:
            raise RuntimeError("boundary trace failed to close")
        moved = False
        for step in range(1, 9):
            d = (back + step) % 8
            ny, nx = cur[0] + _RING[d][0], cur[1] + _RING[d][1]
            if 0 <= ny < h and 0 <= nx < w and mask[ny, nx]:
                prev = (back + step - 1) % 8
                py, px = cur[0] + _RING[prev][0], cur[1] + _RING[prev][1]
                back = _RING_INDEX[(py - ny, px - nx)]
                cur = (ny, nx)
                moved = True
                break
        if not moved:
            break
    return np.array([(x, y) for y, x in contour], dtype=np.int64)


@dataclass(frozen=True)
class CellInstance:
    id: int
    bbox: tuple
    contour: np.ndarray
    probs: ClassProbabilities

    @property
    def class_name(self) -> str:
        return self.probs.class_name

    @property
    def group(self) -> str:
        return CLASS_GROUPS[self.class_name]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "bbox": list(self.bbox),
            "contour": self.contour.tolist(),
            "probs": list(self.probs.probs),
            "predicted": self.probs.predicted,
            "class_name": self.class_name,
        }


def _margin_crop(image: RasterImage, ys: np.ndarray, xs: np.ndarray) -> tuple:
    """Bounding box of the pixels plus a 10 percent margin, clamped."""
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    my = math.ceil(0.1 * (y1 - y0))
    mx = math.ceil(0.1 * (x1 - x0))
    cy0 = max(y0 - my, 0)
    cx0 = max(x0 - mx, 0)
    cy1 = min(y1 + my, image.height)
    cx1 = min(x1 + mx, image.width)
    crop = RasterImage(image.data[cy0:cy1, cx0:cx1].copy())
    return crop, (x0, y0, x1, y1)


def classify_cells(panorama: RasterImage, labels: LabelMap, cfg: CvTConfig,
                   weights: TensorStore) -> "list[CellInstance]":
    """Classify every labeled instance; K instances yield K results."""
    if (panorama.height, panorama.width) != labels.labels.shape:
        raise ValueError(
            f"panorama {panorama.height}x{panorama.width} does not match "
            f"label map {labels.labels.shape[0]}x{labels.labels.shape[1]}"
        )
    out = []
    for inst_id in labels.instance_ids:
        mask = labels.labels == inst_id
        ys, xs = np.nonzero(mask)
        crop, bbox = _margin_crop(panorama, ys, xs)
        contour = trace_boundary(mask)
        probs = forward(crop, cfg, weights)
        out.append(CellInstance(id=int(inst_id), bbox=bbox, contour=contour,
                                probs=probs))
    return out


def cells_to_json(cells: "list[CellInstance]") -> "list[dict]":
    return [c.to_dict() for c in cells]
