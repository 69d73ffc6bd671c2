"""Flow-field instance segmentation.

Ground-truth flows are synthesized per instance by diffusing heat from the
instance's medoid center and taking the normalized gradient of the log-heat
map. Masks are recovered from (predicted or oracle) flows by Euler
integration along the field and clustering of trajectory arrival points,
then filtered by a flow-consistency QC threshold.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from . import imgio
from .raster import (
    ChannelSpec,
    FlowField,
    LabelMap,
    RasterImage,
    compact_labels,
    extract_channel,
    noncontiguous_instances,
)


class InterfaceError(ValueError):
    """Predictor output does not fit the query image."""


@dataclass(frozen=True)
class FlowConfig:
    flow_threshold: float = 0.5
    cellprob_threshold: float = 0.0
    n_euler_steps: int = 200
    step_size: float = 1.0
    min_mask_pixels: int = 15
    diameter: Optional[float] = None

    def __post_init__(self):
        if self.flow_threshold < 0:
            raise ValueError("flow_threshold must be >= 0")
        if self.n_euler_steps < 1:
            raise ValueError("n_euler_steps must be >= 1")
        if self.min_mask_pixels < 1:
            raise ValueError("min_mask_pixels must be >= 1")
        if self.diameter is not None and self.diameter <= 0:
            raise ValueError("diameter must be positive")


@dataclass(frozen=True)
class FlowPredictorHandle:
    """Source of flow fields: a ground-truth label map or a saved .cytf file.

    Network inference happens outside this package; saved flow files are the
    seam through which real model outputs enter.
    """

    kind: str  # "oracle" | "file"
    labels: Optional[LabelMap] = None
    path: Optional[Path] = None
    description: str = ""

    def __post_init__(self):
        if self.kind == "oracle":
            if self.labels is None:
                raise ValueError("oracle predictor needs a label map")
        elif self.kind == "file":
            if self.path is None:
                raise ValueError("file predictor needs a path")
        else:
            raise ValueError(f"unknown predictor kind {self.kind!r}")

    @classmethod
    def oracle(cls, labels: LabelMap, description: str = "oracle"):
        return cls(kind="oracle", labels=labels, description=description)

    @classmethod
    def from_file(cls, path, description: str = "flow file"):
        return cls(kind="file", path=Path(path), description=description)


def _instance_flow(mask: np.ndarray):
    """Flow vectors for one instance mask (2-D bool, 1-pixel zero border).

    Returns (ys, xs, dy, dx) in the mask's own coordinates. Heat from a unit
    source at the medoid diffuses by repeated 3x3 averaging restricted to the
    mask; the flow is the per-pixel normalized central-difference gradient of
    log(1 + heat), zeroed at the medoid.
    """
    hh, ww = mask.shape
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    med = int(np.argmin((ys - cy) ** 2 + (xs - cx) ** 2))
    flat = ys * ww + xs
    offsets = np.array(
        [-ww - 1, -ww, -ww + 1, -1, 0, 1, ww - 1, ww, ww + 1], dtype=np.int64
    )
    gather = flat[None, :] + offsets[:, None]
    n_iter = 2 * max(hh - 2, ww - 2)
    heat = np.zeros(hh * ww, dtype=np.float64)
    source = flat[med]
    for _ in range(max(n_iter, 1)):
        heat[source] += 1.0
        heat[flat] = heat[gather].mean(axis=0)
    log_heat = np.log1p(heat)
    dy = log_heat[flat + ww] - log_heat[flat - ww]
    dx = log_heat[flat + 1] - log_heat[flat - 1]
    norm = np.hypot(dy, dx)
    ok = norm > 1e-20
    dy = np.where(ok, dy / np.where(ok, norm, 1.0), 0.0)
    dx = np.where(ok, dx / np.where(ok, norm, 1.0), 0.0)
    dy[med] = 0.0
    dx[med] = 0.0
    return ys, xs, dy.astype(np.float32), dx.astype(np.float32)


def _gt_flows_unchecked(labels: LabelMap) -> FlowField:
    lab = labels.labels
    h, w = lab.shape
    dy = np.zeros((h, w), dtype=np.float32)
    dx = np.zeros((h, w), dtype=np.float32)
    for inst_id, sl in enumerate(ndimage.find_objects(lab), start=1):
        if sl is None:
            continue
        sub = lab[sl] == inst_id
        padded = np.zeros((sub.shape[0] + 2, sub.shape[1] + 2), dtype=bool)
        padded[1:-1, 1:-1] = sub
        ys, xs, gy, gx = _instance_flow(padded)
        dy[sl[0].start + ys - 1, sl[1].start + xs - 1] = gy
        dx[sl[0].start + ys - 1, sl[1].start + xs - 1] = gx
    cellprob = (lab > 0).astype(np.float32)
    return FlowField(dy=dy, dx=dx, cellprob=cellprob)


def compute_gt_flows(labels: LabelMap) -> FlowField:
    """Synthesize ground-truth flows routing every instance pixel to its center."""
    bad = noncontiguous_instances(labels.labels)
    if bad:
        raise ValueError(f"instances are not 4-connected: {bad}")
    return _gt_flows_unchecked(labels)


def follow_flows(flows: FlowField, cfg: FlowConfig = FlowConfig()) -> LabelMap:
    """Recover instances by integrating pixels along the flow field.

    Pixels above the cellprob threshold are advected by Euler steps along
    bilinearly interpolated flow; arrival points are clustered around local
    maxima of the arrival histogram.
    """
    h, w = flows.height, flows.width
    active = flows.cellprob > cfg.cellprob_threshold
    labels = np.zeros(h * w, dtype=np.int32)
    if not active.any():
        return LabelMap(labels.reshape(h, w))

    ys, xs = np.nonzero(active)
    py = ys.astype(np.float32)
    px = xs.astype(np.float32)
    fdy = np.ascontiguousarray(flows.dy, dtype=np.float32).ravel()
    fdx = np.ascontiguousarray(flows.dx, dtype=np.float32).ravel()
    step = np.float32(cfg.step_size)
    ymax = np.float32(h - 1)
    xmax = np.float32(w - 1)
    # neighbor strides collapse on degenerate 1-wide/1-tall fields
    dy_stride = w if h > 1 else 0
    dx_stride = 1 if w > 1 else 0
    for _ in range(cfg.n_euler_steps):
        y0 = py.astype(np.int32)
        x0 = px.astype(np.int32)
        if h > 1:
            np.minimum(y0, h - 2, out=y0)
        if w > 1:
            np.minimum(x0, w - 2, out=x0)
        fy = py - y0
        fx = px - x0
        base = y0 * w + x0
        w00 = (1 - fy) * (1 - fx)
        w01 = (1 - fy) * fx
        w10 = fy * (1 - fx)
        w11 = fy * fx
        vy = (
            w00 * fdy[base]
            + w01 * fdy[base + dx_stride]
            + w10 * fdy[base + dy_stride]
            + w11 * fdy[base + dy_stride + dx_stride]
        )
        vx = (
            w00 * fdx[base]
            + w01 * fdx[base + dx_stride]
            + w10 * fdx[base + dy_stride]
            + w11 * fdx[base + dy_stride + dx_stride]
        )
        np.clip(py + step * vy, 0, ymax, out=py)
        np.clip(px + step * vx, 0, xmax, out=px)

    arrival = np.rint(py).astype(np.int64) * w + np.rint(px).astype(np.int64)
    hist = np.bincount(arrival, minlength=h * w).reshape(h, w)
    peaks = (hist > 0) & (hist == ndimage.maximum_filter(hist, size=3, mode="constant"))
    seeds = ndimage.binary_dilation(peaks, structure=np.ones((3, 3), dtype=bool))
    components, n_components = ndimage.label(seeds, structure=np.ones((3, 3), dtype=bool))
    assigned = components.ravel()[arrival]
    counts = np.bincount(assigned, minlength=n_components + 1)
    small = counts < cfg.min_mask_pixels
    small[0] = True
    assigned[small[assigned]] = 0
    labels[ys * w + xs] = assigned
    return LabelMap(compact_labels(labels.reshape(h, w)))


def flow_qc(candidate: LabelMap, flows: FlowField, cfg: FlowConfig = FlowConfig()) -> LabelMap:
    """Drop instances whose mask-implied flows disagree with the predicted ones.

    The per-instance error is the mean squared difference over all 2N flow
    components (dy and dx at each of the instance's N pixels).
    """
    if (candidate.height, candidate.width) != (flows.height, flows.width):
        raise ValueError("candidate and flow dimensions differ")
    ids = candidate.instance_ids
    if ids.size == 0:
        return candidate
    implied = _gt_flows_unchecked(candidate)
    sq = (flows.dy - implied.dy) ** 2 + (flows.dx - implied.dx) ** 2
    lab = candidate.labels
    sums = ndimage.sum_labels(sq, lab, index=ids)
    areas = ndimage.sum_labels(np.ones_like(sq), lab, index=ids)
    errors = sums / (2.0 * areas)
    drop = ids[errors > cfg.flow_threshold]
    if drop.size == 0:
        return candidate
    out = lab.copy()
    out[np.isin(lab, drop)] = 0
    return LabelMap(compact_labels(out))


def estimate_diameter(labels: LabelMap) -> float:
    """Median equivalent diameter 2*sqrt(area/pi) over instances."""
    ids = labels.instance_ids
    if ids.size == 0:
        raise ValueError("label map has no instances")
    areas = np.bincount(labels.labels.ravel())[ids]
    return float(np.median(2.0 * np.sqrt(areas / np.pi)))


def _nearest_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = arr.shape
    rows = np.minimum(((np.arange(out_h) + 0.5) * in_h / out_h).astype(np.int64), in_h - 1)
    cols = np.minimum(((np.arange(out_w) + 0.5) * in_w / out_w).astype(np.int64), in_w - 1)
    return arr[rows[:, None], cols[None, :]]


def segment(
    image: RasterImage,
    predictor: FlowPredictorHandle,
    cfg: FlowConfig = FlowConfig(),
    channels: ChannelSpec = ChannelSpec(),
) -> tuple[LabelMap, FlowField]:
    """Segment an image with a flow predictor; returns (masks, flows used).

    With cfg.diameter set, prediction runs at scale 30/diameter and the
    recovered masks are resized back (nearest-neighbor).
    """
    cyto, _ = extract_channel(image, channels)
    h, w = cyto.height, cyto.width
    scale = None
    if cfg.diameter is not None:
        scale = 30.0 / cfg.diameter
        work_h = max(1, int(round(h * scale)))
        work_w = max(1, int(round(w * scale)))
    else:
        work_h, work_w = h, w

    if predictor.kind == "oracle":
        oracle = predictor.labels
        if (oracle.height, oracle.width) != (h, w):
            raise InterfaceError(
                f"oracle label map is {oracle.height}x{oracle.width}, "
                f"image is {h}x{w}"
            )
        if scale is not None:
            oracle = LabelMap(_nearest_resize(oracle.labels, work_h, work_w))
        flows = compute_gt_flows(oracle)
    else:
        flows = imgio.read_flow_field(predictor.path)
        if (flows.height, flows.width) != (work_h, work_w):
            raise InterfaceError(
                f"flow file is {flows.height}x{flows.width}, "
                f"expected {work_h}x{work_w}"
            )

    masks = flow_qc(follow_flows(flows, cfg), flows, cfg)
    if scale is not None:
        masks = LabelMap(compact_labels(_nearest_resize(masks.labels, h, w)))
    return masks, flows


TRAINING_RECIPE = {"epochs": 120, "learning_rate": 0.05, "weight_decay": 0.00005}


def export_training_pair(image: RasterImage, labels: LabelMap, out_dir, name: str = "sample") -> None:
    """Write a corrected image/label pair plus flows and fine-tune metadata."""
    if (image.height, image.width) != (labels.height, labels.width):
        raise ValueError("image and label dimensions differ")
    labels = labels.compact()  # reading compacts, so write a fixed point
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    imgio.write_image(image, out_dir / f"{name}_img.png")
    imgio.write_label_map(labels, out_dir / f"{name}_lbl.png")
    imgio.write_flow_field(compute_gt_flows(labels), out_dir / f"{name}_flows.cytf")
    meta = dict(TRAINING_RECIPE, num_instances=labels.num_instances)
    (out_dir / f"{name}_meta.json").write_text(json.dumps(meta, indent=2))
