"""Bit-exact file formats: 8-bit image PNGs, 16-bit label-map PNGs, and the
".cytf" flow container (magic "CYTF", version, dims, then dy/dx/cellprob
planes as little-endian float32).
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .raster import FlowField, LabelMap, RasterImage, compact_labels


class FormatError(ValueError):
    """File is not in the expected on-disk format."""


class CapacityError(ValueError):
    """Data exceeds what the on-disk format can represent."""


MAX_LABEL = 65535

CYTF_MAGIC = b"CYTF"
CYTF_VERSION = 1


def read_image(path) -> RasterImage:
    try:
        im = Image.open(path)
        im.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot decode image {path}: {exc}") from exc
    if im.mode in ("RGBA", "P", "CMYK"):
        im = im.convert("RGB")
    elif im.mode == "LA":
        im = im.convert("L")
    elif im.mode not in ("L", "RGB"):
        raise FormatError(f"unsupported image mode {im.mode!r} in {path}")
    return RasterImage(np.asarray(im, dtype=np.uint8))


def write_image(img: RasterImage, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img.data).save(path, format="PNG")


def read_label_map(path) -> LabelMap:
    """Read a label-map PNG and compact IDs to 1..K by first appearance.

    Accepts 16-bit or 8-bit single-channel files (8-bit values are widened);
    gray+alpha keeps the gray plane; >2 channel files are rejected.
    """
    try:
        im = Image.open(path)
        im.load()
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot decode label map {path}: {exc}") from exc
    if im.mode in ("I;16", "I;16B", "I"):
        arr = np.asarray(im).astype(np.int64)
        if arr.max(initial=0) > MAX_LABEL or arr.min(initial=0) < 0:
            raise FormatError(f"label values outside uint16 range in {path}")
    elif im.mode == "L":
        arr = np.asarray(im).astype(np.int64)
    elif im.mode == "LA":
        arr = np.asarray(im)[:, :, 0].astype(np.int64)
    else:
        raise FormatError(
            f"label map must be single-channel, got mode {im.mode!r} in {path}"
        )
    return LabelMap(compact_labels(arr))


def write_label_map(label_map: LabelMap, path) -> None:
    """Write a label map as 16-bit grayscale PNG (round-trips bit-exactly)."""
    labels = label_map.labels
    if labels.max(initial=0) > MAX_LABEL:
        raise CapacityError(
            f"label map holds IDs above {MAX_LABEL}; 16-bit PNG cannot store it"
        )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labels.astype(np.uint16)).save(path, format="PNG")


def write_flow_field(flows: FlowField, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = CYTF_MAGIC + struct.pack(
        "<III", CYTF_VERSION, flows.height, flows.width
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for plane in (flows.dy, flows.dx, flows.cellprob):
            fh.write(np.ascontiguousarray(plane, dtype="<f4").tobytes())


def read_flow_field(path) -> FlowField:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != CYTF_MAGIC:
        raise FormatError(f"{path} is not a CYTF flow container")
    version, height, width = struct.unpack("<III", blob[4:16])
    if version != CYTF_VERSION:
        raise FormatError(f"unsupported CYTF version {version} in {path}")
    plane_bytes = height * width * 4
    expected = 16 + 3 * plane_bytes
    if len(blob) != expected:
        raise FormatError(
            f"CYTF payload length {len(blob) - 16} != expected {expected - 16}"
        )
    planes = []
    for i in range(3):
        start = 16 + i * plane_bytes
        planes.append(
            np.frombuffer(blob[start : start + plane_bytes], dtype="<f4")
            .reshape(height, width)
            .copy()
        )
    return FlowField(dy=planes[0], dx=planes[1], cellprob=planes[2])
