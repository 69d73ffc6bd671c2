"""Flat tensor container for model weights.

Layout: 8-byte little-endian header length, UTF-8 JSON index mapping tensor
name to {dtype, shape, offset}, then the packed float32 payload. Entries must
tile the payload exactly (no gaps, no overlaps), which doubles as truncation
detection.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np


class WeightFormatError(ValueError):
    """Weight file violates the container layout."""


class WeightMismatchError(KeyError):
    """A tensor required by the model is absent from the store."""


class TensorStore:
    """Ordered name -> float32 ndarray mapping."""

    def __init__(self, tensors=None):
        self.tensors = OrderedDict()
        if tensors:
            for name, arr in tensors.items():
                self.put(name, arr)

    def put(self, name: str, arr: np.ndarray) -> None:
        self.tensors[name] = np.ascontiguousarray(arr, dtype=np.float32)

    def get(self, name: str) -> np.ndarray:
        if name not in self.tensors:
            raise WeightMismatchError(f"missing tensor {name!r}")
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self):
        return list(self.tensors)


def save_weights(store: TensorStore, path) -> None:
    index = OrderedDict()
    offset = 0
    chunks = []
    for name, arr in store.tensors.items():
        raw = arr.astype("<f4").tobytes()
        index[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset}
        offset += len(raw)
        chunks.append(raw)
    header = json.dumps(index, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def load_weights(path) -> TensorStore:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise WeightFormatError(f"{path}: shorter than the 8-byte header")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if len(blob) < 8 + header_len:
        raise WeightFormatError(f"{path}: truncated header")
    try:
        index = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFormatError(f"{path}: bad index: {exc}") from exc
    payload = blob[8 + header_len :]

    spans = []
    for name, entry in index.items():
        if entry.get("dtype") != "f32":
            raise WeightFormatError(f"{path}: tensor {name!r} has unsupported dtype")
        shape = tuple(int(d) for d in entry["shape"])
        if any(d < 0 for d in shape):
            raise WeightFormatError(f"{path}: tensor {name!r} has negative dims")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        offset = int(entry["offset"])
        if offset < 0 or offset + nbytes > len(payload):
            raise WeightFormatError(f"{path}: tensor {name!r} exceeds payload")
        spans.append((offset, nbytes, name, shape))

    spans_sorted = sorted(spans)
    cursor = 0
    for offset, nbytes, name, _ in spans_sorted:
        if offset < cursor:
            raise WeightFormatError(f"{path}: tensor {name!r} overlaps a neighbor")
        if offset > cursor:
            raise WeightFormatError(f"{path}: gap in payload before tensor {name!r}")
        cursor = offset + nbytes
    if cursor != len(payload):
        raise WeightFormatError(
            f"{path}: payload holds {len(payload)} bytes, entries cover {cursor}"
        )

    store = TensorStore()
    for offset, nbytes, name, shape in spans:
        count = nbytes // 4
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        store.put(name, arr.reshape(shape))
    return store
