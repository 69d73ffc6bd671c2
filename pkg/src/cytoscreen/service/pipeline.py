"""Stage execution over the slide store.

Each run_* function loads the manifest, verifies the prerequisite state,
writes its artifacts, and commits the manifest last. Callers hold the
per-slide lock.
"""
from __future__ import annotations

import datetime
import io
import json
import tarfile
import threading
from pathlib import Path

import numpy as np

from .. import imgio
from ..cells import cells_to_json, classify_cells
from ..corrections import CorrectionPatch, apply_correction
from ..cvt import CLASS_GROUPS, CLASS_NAMES, init_weights, make_config
from ..flowseg import FlowConfig, FlowPredictorHandle, export_training_pair, segment
from ..raster import LabelMap, compact_labels
from ..stitcher import (
    FrameSampleConfig,
    canvas_bounds,
    graph_to_dict,
    sample_frames,
    stitch_frames,
)
from ..weights import load_weights, save_weights
from .store import SlideStore

_weights_guard = threading.Lock()


def _merged(settings: dict, params) -> dict:
    out = dict(settings)
    if params:
        out.update(params)
    return out


def _flow_config(opts: dict) -> FlowConfig:
    return FlowConfig(
        flow_threshold=float(opts.get("flow_threshold", 0.5)),
        cellprob_threshold=float(opts.get("cellprob_threshold", 0.0)),
        min_mask_pixels=int(opts.get("min_mask_pixels", 15)),
        diameter=opts.get("diameter"),
    )


def _align_to_canvas(arr: np.ndarray, origin_yx, out_shape) -> np.ndarray:
    """Place an anchor-frame raster onto the panorama canvas grid."""
    oy, ox = origin_yx
    out = np.zeros(out_shape, dtype=arr.dtype)
    src_y0, src_x0 = max(0, oy), max(0, ox)
    dst_y0, dst_x0 = max(0, -oy), max(0, -ox)
    h = min(arr.shape[0] - src_y0, out_shape[0] - dst_y0)
    w = min(arr.shape[1] - src_x0, out_shape[1] - dst_x0)
    if h > 0 and w > 0:
        out[dst_y0 : dst_y0 + h, dst_x0 : dst_x0 + w] = (
            arr[src_y0 : src_y0 + h, src_x0 : src_x0 + w]
        )
    return out


# ---- stages


def run_stitch(store: SlideStore, slide_id: str, settings: dict, params=None) -> dict:
    man = store.load(slide_id)
    store.require_state(man, "ingested")
    opts = _merged(settings, params)
    cfg = FrameSampleConfig(
        stride=int(opts.get("stride", 50)),
        min_overlap_fraction=float(opts.get("min_overlap", 0.25)),
    )
    frames = sample_frames(store.frames_dir(slide_id), cfg)
    panorama, graph, warns = stitch_frames(
        frames, cfg, confidence_threshold=float(opts.get("confidence", 0.2))
    )
    x0, y0, _, _ = canvas_bounds(frames, graph)

    imgio.write_image(panorama, store.artifact(slide_id, "panorama.png"))
    graph_doc = graph_to_dict(graph)
    graph_doc["canvas_origin"] = [y0, x0]
    graph_doc["warnings"] = warns
    store.artifact(slide_id, "pose_graph.json").write_text(
        json.dumps(graph_doc, indent=2)
    )
    store.fall_back(man, "stitched")
    man["warnings"] = warns
    man["canvas_origin"] = [y0, x0]
    man["artifacts"]["panorama.png"] = "panorama.png"
    man["artifacts"]["pose_graph.json"] = "pose_graph.json"
    store.save(man)
    return man


def _flow_handle(store: SlideStore, slide_id: str, opts: dict,
                 panorama_shape, origin_yx) -> FlowPredictorHandle:
    source = opts.get("flow_source", "auto")
    truth_path = store.artifact(slide_id, "truth_labels.png")
    flow_path = Path(opts["flow_file"]) if opts.get("flow_file") else (
        store.artifact(slide_id, "uploaded_flows.cytf")
    )
    if source == "auto":
        source = "oracle" if truth_path.exists() else "file"
    if source == "oracle":
        if not truth_path.exists():
            raise FileNotFoundError(
                "oracle segmentation needs reference labels uploaded with the slide"
            )
        truth = imgio.read_label_map(truth_path)
        aligned = _align_to_canvas(truth.labels, origin_yx, panorama_shape)
        return FlowPredictorHandle.oracle(LabelMap(compact_labels(aligned)))
    if source == "file":
        if not flow_path.exists():
            raise FileNotFoundError("no flow field available; upload one first")
        return FlowPredictorHandle.from_file(flow_path)
    raise ValueError(f"unknown flow source {source!r}")


def run_segment(store: SlideStore, slide_id: str, settings: dict, params=None) -> dict:
    man = store.load(slide_id)
    store.require_state(man, "stitched")
    opts = _merged(settings, params)
    panorama = imgio.read_image(store.artifact(slide_id, "panorama.png"))
    origin = man.get("canvas_origin", [0, 0])
    handle = _flow_handle(store, slide_id, opts,
                          (panorama.height, panorama.width), origin)
    masks, flows = segment(panorama, handle, _flow_config(opts))

    version = man["label_version"] + 1
    imgio.write_label_map(masks, store.labels_path(slide_id, version))
    imgio.write_flow_field(flows, store.artifact(slide_id, "flows.cytf"))
    _export_training(store, slide_id, panorama, masks, version)
    store.fall_back(man, "segmented")
    man["label_version"] = version
    man["artifacts"]["flows.cytf"] = "flows.cytf"
    man["artifacts"]["labels.png"] = f"labels_v{version}.png"
    man["num_instances"] = masks.num_instances
    store.save(man)
    return man


def _export_training(store: SlideStore, slide_id: str, panorama, labels,
                     version: int) -> None:
    out = store.training_dir(slide_id)
    if out.exists():
        for old in out.iterdir():
            old.unlink()
    export_training_pair(panorama, labels, out, name=f"{slide_id}_v{version}")


def ensure_weights(store: SlideStore, variant: str) -> Path:
    """Deterministic random weights generated once per variant.

    Stands in for trained parameters so the full pipeline runs end to end;
    real weights drop into the same container path.
    """
    path = store.root / "weights" / f"auto_{variant}.bin"
    with _weights_guard:
        if not path.exists():
            cfg = make_config(variant)
            tmp = path.with_suffix(".tmp")
            save_weights(init_weights(cfg, seed=0), tmp)
            tmp.replace(path)
    return path


def run_classify(store: SlideStore, slide_id: str, settings: dict, params=None) -> dict:
    man = store.load(slide_id)
    store.require_state(man, "segmented")
    opts = _merged(settings, params)
    variant = str(opts.get("variant", "original13"))
    cfg = make_config(variant=variant,
                      input_resolution=int(opts.get("input_resolution", 224)))
    weights_path = opts.get("weights") or ensure_weights(store, variant)
    weights = load_weights(weights_path)

    panorama = imgio.read_image(store.artifact(slide_id, "panorama.png"))
    labels = imgio.read_label_map(store.labels_path(slide_id, man["label_version"]))
    cells = classify_cells(panorama, labels, cfg, weights)
    doc = {
        "slide_id": slide_id,
        "label_version": man["label_version"],
        "variant": variant,
        "cells": cells_to_json(cells),
    }
    store.artifact(slide_id, "cells.json").write_text(json.dumps(doc, indent=2))
    store.fall_back(man, "classified")
    man["artifacts"]["cells.json"] = "cells.json"
    store.save(man)
    return man


def build_report(slide_id: str, predictions, label_version: int) -> dict:
    """Tally argmax classes; fractions omitted for an empty slide."""
    counts = [0] * len(CLASS_NAMES)
    for pred in predictions:
        counts[pred] += 1
    total = len(predictions)
    group_counts = {"normal": 0, "abnormal": 0, "benign": 0}
    for name, count in zip(CLASS_NAMES, counts):
        group_counts[CLASS_GROUPS[name]] += count
    report = {
        "slide_id": slide_id,
        "label_version": label_version,
        "total_cells": total,
        "per_class": dict(zip(CLASS_NAMES, counts)),
        "grouping": group_counts,
        "generated_at": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    if total > 0:
        report["per_class_fraction"] = {
            name: count / total for name, count in zip(CLASS_NAMES, counts)
        }
        report["group_fraction"] = {
            grp: count / total for grp, count in group_counts.items()
        }
    return report


def render_report_text(report: dict) -> str:
    lines = [
        f"Cytology report for slide {report['slide_id']}",
        f"Label version: {report['label_version']}",
        f"Generated: {report['generated_at']}",
        f"Total cells: {report['total_cells']}",
        "",
    ]
    total = report["total_cells"]
    for name, count in report["per_class"].items():
        if total > 0:
            lines.append(f"  {name:<26} {count:>5}  ({100.0 * count / total:5.1f}%)")
        else:
            lines.append(f"  {name:<26} {count:>5}")
    lines.append("")
    for grp, count in report["grouping"].items():
        lines.append(f"  {grp:<10} {count:>5}")
    return "\n".join(lines) + "\n"


def run_report(store: SlideStore, slide_id: str, settings: dict, params=None) -> dict:
    man = store.load(slide_id)
    store.require_state(man, "classified")
    doc = json.loads(store.artifact(slide_id, "cells.json").read_text())
    preds = [cell["predicted"] for cell in doc["cells"]]
    report = build_report(slide_id, preds, man["label_version"])
    store.artifact(slide_id, "report.json").write_text(json.dumps(report, indent=2))
    store.artifact(slide_id, "report.txt").write_text(render_report_text(report))
    man["state"] = "reported"
    man["artifacts"]["report.json"] = "report.json"
    man["artifacts"]["report.txt"] = "report.txt"
    store.save(man)
    return man


STAGES = {
    "stitch": run_stitch,
    "segment": run_segment,
    "classify": run_classify,
    "report": run_report,
}


# ---- corrections


def apply_patch(store: SlideStore, slide_id: str, base_version: int, ops) -> tuple:
    """Apply a correction patch; returns (new_version, diff_summary)."""
    man = store.load(slide_id)
    store.require_state(man, "segmented")
    current = man["label_version"]
    labels = imgio.read_label_map(store.labels_path(slide_id, current))
    patch = CorrectionPatch(slide_id=slide_id, base_version=base_version, ops=list(ops))
    updated = apply_correction(labels, patch, current_version=current)

    new_version = current + 1
    imgio.write_label_map(updated, store.labels_path(slide_id, new_version))
    panorama = imgio.read_image(store.artifact(slide_id, "panorama.png"))
    _export_training(store, slide_id, panorama, updated, new_version)
    store.fall_back(man, "segmented")
    man["label_version"] = new_version
    man["artifacts"]["labels.png"] = f"labels_v{new_version}.png"
    man["num_instances"] = updated.num_instances
    store.save(man)

    tally = {"added": 0, "deleted": 0, "merged": 0, "split": 0}
    verbs = {"add_roi": "added", "delete_instance": "deleted",
             "merge": "merged", "split": "split"}
    for op in ops:
        tally[verbs[op["op"]]] += 1
    summary = dict(tally, instances_before=labels.num_instances,
                   instances_after=updated.num_instances)
    return new_version, summary


# ---- training export


def export_training_tar(store: SlideStore) -> bytes:
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w") as tar:
        for slide_id in store.list_ids():
            tdir = store.training_dir(slide_id)
            if not tdir.exists():
                continue
            for path in sorted(tdir.iterdir()):
                tar.add(path, arcname=f"{slide_id}/{path.name}")
    return buf.getvalue()
