"""Shared raster types: images, instance label maps, flow fields, channel picks.

All types are plain immutable wrappers around numpy arrays. Pixel coordinates
follow numpy order (row y, column x); JSON-facing code converts to (x, y) at
the boundary.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

# 4-connectivity structuring element used for every instance-connectivity
# question in this codebase (diagonal-touching blobs stay separate instances).
FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R BT.601


@dataclass(frozen=True)
class RasterImage:
    """8-bit image, (H, W) grayscale or (H, W, 3) RGB."""

    data: np.ndarray

    def __post_init__(self):
        d = self.data
        if d.dtype != np.uint8:
            raise ValueError(f"image data must be uint8, got {d.dtype}")
        if d.ndim == 3 and d.shape[2] == 1:
            object.__setattr__(self, "data", d[:, :, 0])
            d = self.data
        if d.ndim not in (2, 3) or (d.ndim == 3 and d.shape[2] != 3):
            raise ValueError(f"image must be (H,W) or (H,W,3), got {d.shape}")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ValueError("image dimensions must be >= 1")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel instance IDs; 0 is background, instances are 1..K.

    Stored as int32 in memory; the on-disk format is 16-bit PNG, so writing
    enforces IDs <= 65535. Use :meth:`compact` to renumber arbitrary IDs to
    1..K by order of first appearance (row-major).
    """

    labels: np.ndarray

    def __post_init__(self):
        lab = self.labels
        if lab.ndim != 2:
            raise ValueError(f"label map must be 2-D, got shape {lab.shape}")
        if not np.issubdtype(lab.dtype, np.integer):
            raise ValueError(f"label map must be integer, got {lab.dtype}")
        if lab.dtype != np.int32:
            object.__setattr__(self, "labels", lab.astype(np.int32))
        if self.labels.min(initial=0) < 0:
            raise ValueError("label map contains negative IDs")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def instance_ids(self) -> np.ndarray:
        ids = np.unique(self.labels)
        return ids[ids > 0]

    @property
    def num_instances(self) -> int:
        return int(self.instance_ids.size)

    def compact(self) -> "LabelMap":
        return LabelMap(compact_labels(self.labels))

    def is_compact(self) -> bool:
        ids = self.instance_ids
        return ids.size == 0 or (ids[0] == 1 and ids[-1] == ids.size)


def compact_labels(labels: np.ndarray) -> np.ndarray:
    """Renumber nonzero IDs to 1..K in order of first appearance (row-major)."""
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    out = np.zeros(flat.shape, dtype=np.int32)
    if ids.size:
        appearance = ids[np.argsort(first, kind="stable")]
        perm = np.argsort(appearance)
        sorted_old = appearance[perm]          # old ids, ascending
        new_for_sorted = (perm + 1).astype(np.int32)  # their 1..K replacements
        nz = flat > 0
        out[nz] = new_for_sorted[np.searchsorted(sorted_old, flat[nz])]
    return out.reshape(labels.shape)


def noncontiguous_instances(labels: np.ndarray) -> list[int]:
    """IDs whose pixels do not form a single 4-connected component."""
    bad: list[int] = []
    max_id = int(labels.max(initial=0))
    if max_id == 0:
        return bad
    if max_id <= 1 << 20:
        for idx, sl in enumerate(ndimage.find_objects(labels)):
            if sl is None:
                continue
            _, n = ndimage.label(labels[sl] == idx + 1, structure=FOUR_CONNECTED)
            if n != 1:
                bad.append(idx + 1)
    else:  # sparse huge IDs: avoid find_objects' O(max_id) allocation
        for inst_id in np.unique(labels):
            if inst_id == 0:
                continue
            _, n = ndimage.label(labels == inst_id, structure=FOUR_CONNECTED)
            if n != 1:
                bad.append(int(inst_id))
    return bad


@dataclass(frozen=True)
class FlowField:
    """Per-pixel flow toward the owning instance center plus cell probability.

    dy/dx/cellprob are (H, W) float32. Ground-truth fields have unit-norm
    (dy, dx) inside instances (zero at the center pixel) and cellprob in {0,1}.
    """

    dy: np.ndarray
    dx: np.ndarray
    cellprob: np.ndarray

    def __post_init__(self):
        for name in ("dy", "dx", "cellprob"):
            arr = getattr(self, name)
            if arr.ndim != 2:
                raise ValueError(f"{name} must be 2-D")
            if arr.dtype != np.float32:
                object.__setattr__(self, name, arr.astype(np.float32))
        if not (self.dy.shape == self.dx.shape == self.cellprob.shape):
            raise ValueError("flow planes must share one shape")

    @property
    def height(self) -> int:
        return self.dy.shape[0]

    @property
    def width(self) -> int:
        return self.dy.shape[1]


CHANNEL_NAMES = ("red", "green", "blue", "gray")


@dataclass(frozen=True)
class ChannelSpec:
    """Which channels feed cytoplasm / nucleus processing.

    Defaults follow the pipeline configuration: cytoplasm on the green
    channel, nucleus on grayscale.
    """

    cytoplasm_channel: str = "green"
    nucleus_channel: Optional[str] = "gray"

    def __post_init__(self):
        if self.cytoplasm_channel not in CHANNEL_NAMES:
            raise ValueError(f"bad cytoplasm channel {self.cytoplasm_channel!r}")
        if self.nucleus_channel is not None and self.nucleus_channel not in CHANNEL_NAMES + ("none",):
            raise ValueError(f"bad nucleus channel {self.nucleus_channel!r}")


def to_gray(img: RasterImage) -> np.ndarray:
    """BT.601 luma, rounded half-up to uint8."""
    if img.channels == 1:
        return img.data.copy()
    r, g, b = (img.data[:, :, i].astype(np.float64) for i in range(3))
    wr, wg, wb = GRAY_WEIGHTS
    return np.floor(wr * r + wg * g + wb * b + 0.5).astype(np.uint8)


def _pick_channel(img: RasterImage, name: str) -> np.ndarray:
    if name == "gray":
        return to_gray(img)
    if img.channels == 1:
        # grayscale input: every color plane is the single channel
        return img.data.copy()
    idx = {"red": 0, "green": 1, "blue": 2}[name]
    return img.data[:, :, idx].copy()


def extract_channel(img: RasterImage, spec: ChannelSpec = ChannelSpec()):
    """Split an image into (cytoplasm, nucleus) single-channel planes.

    The nucleus plane is None when the spec requests none.
    """
    cyto = RasterImage(_pick_channel(img, spec.cytoplasm_channel))
    nucleus = None
    if spec.nucleus_channel is not None and spec.nucleus_channel != "none":
        nucleus = RasterImage(_pick_channel(img, spec.nucleus_channel))
    return cyto, nucleus
