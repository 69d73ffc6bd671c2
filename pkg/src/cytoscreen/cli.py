"""Command line entry points.

Top-level commands run stages in-process on local files. The `slide`
group is a thin HTTP client for a running service and mirrors its
endpoints one to one.
"""
from __future__ import annotations

import csv
import json
import sys
import time
from pathlib import Path

import click
import numpy as np

from . import imgio
from .cells import cells_to_json, classify_cells
from .config import coerce, load_settings
from .cvt import CLASS_NAMES, init_weights, make_config
from .embed import StyleVector, TsneConfig, export_embedding, fallback_feature_map, style_vector, tsne
from .flowseg import FlowConfig, FlowPredictorHandle, segment
from .metrics import (
    average_folds,
    binary_seg_metrics,
    classification_metrics,
    confusion_from_predictions,
    roc_auc_ovr,
    stratified_kfold,
)
from .stitcher import FrameSampleConfig, canvas_bounds, graph_to_dict, sample_frames, stitch_frames
from .synth import write_slide_fixture
from .weights import load_weights, save_weights


@click.group()
def main():
    """Whole-slide cytology screening tools."""


# ---- local stage commands


@main.command()
@click.option("--frames", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--stride", default=50, show_default=True)
@click.option("--confidence", default=0.2, show_default=True)
@click.option("--min-overlap", default=0.25, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--report", "report_path", type=click.Path(), default=None,
              help="Also write poses, edges, and rejected frames as JSON.")
def stitch(frames, stride, confidence, min_overlap, out, report_path):
    """Register a frame directory into a panorama."""
    cfg = FrameSampleConfig(stride=stride, min_overlap_fraction=min_overlap)
    loaded = sample_frames(frames, cfg)
    panorama, graph, warnings = stitch_frames(loaded, cfg, confidence_threshold=confidence)
    imgio.write_image(panorama, out)
    for message in warnings:
        click.echo(f"warning: {message}", err=True)
    if report_path:
        doc = graph_to_dict(graph)
        x0, y0, _, _ = canvas_bounds(loaded, graph)
        doc["canvas_origin"] = [y0, x0]
        doc["warnings"] = warnings
        Path(report_path).write_text(json.dumps(doc, indent=2))
    click.echo(f"panorama {panorama.width}x{panorama.height} -> {out}")


@main.command("segment")
@click.option("--image", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--flows", "flow_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--oracle", "oracle_labels", type=click.Path(exists=True, dir_okay=False),
              help="Reference label map to derive flows from instead of --flows.")
@click.option("--flow-threshold", default=0.5, show_default=True)
@click.option("--cellprob-threshold", default=0.0, show_default=True)
@click.option("--min-mask-pixels", default=15, show_default=True)
@click.option("--out", required=True, type=click.Path())
def segment_cmd(image, flow_file, oracle_labels, flow_threshold,
                cellprob_threshold, min_mask_pixels, out):
    """Recover instance masks from a flow field."""
    if (flow_file is None) == (oracle_labels is None):
        raise click.UsageError("pass exactly one of --flows or --oracle")
    if oracle_labels is not None:
        handle = FlowPredictorHandle.oracle(imgio.read_label_map(oracle_labels))
    else:
        handle = FlowPredictorHandle.from_file(flow_file)
    cfg = FlowConfig(
        flow_threshold=flow_threshold,
        cellprob_threshold=cellprob_threshold,
        min_mask_pixels=min_mask_pixels,
    )
    masks, _ = segment(imgio.read_image(image), handle, cfg)
    imgio.write_label_map(masks, out)
    click.echo(f"{masks.num_instances} instances -> {out}")


@main.command()
@click.option("--panorama", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--labels", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--weights", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--variant", default="original13", show_default=True)
@click.option("--input-resolution", default=224, show_default=True)
@click.option("--out", required=True, type=click.Path())
def classify(panorama, labels, weights, variant, input_resolution, out):
    """Classify segmented cells; writes a JSON array of cell records."""
    cfg = make_config(variant=variant, input_resolution=input_resolution)
    store = load_weights(weights)
    cells = classify_cells(
        imgio.read_image(panorama), imgio.read_label_map(labels), cfg, store
    )
    Path(out).write_text(json.dumps(cells_to_json(cells), indent=2))
    click.echo(f"{len(cells)} cells -> {out}")


@main.command("init-weights")
@click.option("--variant", default="original13", show_default=True)
@click.option("--num-classes", default=5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
def init_weights_cmd(variant, num_classes, seed, out):
    """Write a deterministic random weight container for a variant."""
    cfg = make_config(variant=variant, num_classes=num_classes)
    save_weights(init_weights(cfg, seed=seed), out)
    click.echo(f"weights for {variant} -> {out}")


@main.command("synth-slide")
@click.option("--out", required=True, type=click.Path())
@click.option("--height", default=340, show_default=True)
@click.option("--width", default=480, show_default=True)
@click.option("--cells", "n_cells", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
def synth_slide(out, height, width, n_cells, seed):
    """Generate a synthetic slide fixture: frames, scene, truth labels."""
    meta = write_slide_fixture(out, height=height, width=width,
                               n_cells=n_cells, seed=seed)
    click.echo(f"{meta['n_frames']} frames, {meta['n_cells']} cells -> {out}")


# ---- evaluation commands


@main.command("evaluate-seg")
@click.option("--pred-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--truth-dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--out", required=True, type=click.Path())
def evaluate_seg(pred_dir, truth_dir, out):
    """Score predicted label maps against truth maps with matching names."""
    pred_dir, truth_dir = Path(pred_dir), Path(truth_dir)
    names = sorted(p.name for p in pred_dir.glob("*.png"))
    if not names:
        raise click.ClickException(f"no .png label maps in {pred_dir}")
    per_image = {}
    for name in names:
        truth_path = truth_dir / name
        if not truth_path.exists():
            raise click.ClickException(f"no truth map for {name}")
        dice, sens, spec, counts = binary_seg_metrics(
            imgio.read_label_map(pred_dir / name),
            imgio.read_label_map(truth_path),
        )
        per_image[name] = {
            "dice": dice,
            "sensitivity": sens,
            "specificity": spec,
            "tp": counts.tp, "tn": counts.tn, "fp": counts.fp, "fn": counts.fn,
        }
    mean = {
        key: float(np.mean([m[key] for m in per_image.values()]))
        for key in ("dice", "sensitivity", "specificity")
    }
    doc = {"n_images": len(names), "mean": mean, "per_image": per_image}
    Path(out).write_text(json.dumps(doc, indent=2))
    click.echo(f"dice {mean['dice']:.4f} over {len(names)} images -> {out}")


def _read_cells_doc(path) -> "list[dict]":
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict):
        doc = doc["cells"]
    return doc


def _read_truth_csv(path) -> dict:
    truth = {}
    with open(path, newline="") as handle:
        for row in csv.reader(handle):
            if not row or row[0] == "sample_id":
                continue
            if len(row) != 2:
                raise click.ClickException(f"bad truth row: {row}")
            truth[row[0]] = int(row[1])
    return truth


@main.command("evaluate-cls")
@click.option("--cells", "cells_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--truth", "truth_path", required=True,
              type=click.Path(exists=True, dir_okay=False))
@click.option("--folds", default=5, show_default=True)
@click.option("--seed", default=42, show_default=True)
@click.option("--out", required=True, type=click.Path())
def evaluate_cls(cells_path, truth_path, folds, seed, out):
    """Cross-validated classification report for predicted cells.

    Truth CSV rows are `sample_id,class_index`; sample ids match the `id`
    field of the cell records.
    """
    cells = _read_cells_doc(cells_path)
    truth = _read_truth_csv(truth_path)
    joined = [c for c in cells if str(c["id"]) in truth]
    if not joined:
        raise click.ClickException("no cell ids matched the truth table")
    truths = np.array([truth[str(c["id"])] for c in joined])
    preds = np.array([int(c["predicted"]) for c in joined])
    probs = np.array([c["probs"] for c in joined], dtype=np.float64)

    try:
        split = stratified_kfold(truths, folds, seed)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    per_fold = []
    for fold in range(folds):
        idx = split.fold_indices(fold)
        conf = confusion_from_predictions(truths[idx], preds[idx], CLASS_NAMES)
        metrics = classification_metrics(conf)
        _, auc_macro = roc_auc_ovr(probs[idx], truths[idx])
        per_fold.append({
            "accuracy": metrics.accuracy,
            "macro_precision": metrics.macro_precision,
            "macro_recall": metrics.macro_recall,
            "macro_f1": metrics.macro_f1,
            "weighted_precision": metrics.weighted_precision,
            "weighted_recall": metrics.weighted_recall,
            "weighted_f1": metrics.weighted_f1,
            "auc_macro": auc_macro,
        })
    mean, sd = average_folds(per_fold)

    overall_conf = confusion_from_predictions(truths, preds, CLASS_NAMES)
    per_class_auc, macro_auc = roc_auc_ovr(probs, truths)
    doc = {
        "n_samples": len(joined),
        "folds": folds,
        "seed": seed,
        "class_names": list(CLASS_NAMES),
        "per_fold": per_fold,
        "mean": mean,
        "sd": sd,
        "overall": {
            "confusion": overall_conf.matrix.tolist(),
            "per_class_auc": [None if np.isnan(v) else float(v)
                              for v in per_class_auc],
            "macro_auc": None if np.isnan(macro_auc) else float(macro_auc),
            "metrics": classification_metrics(overall_conf).as_dict(),
        },
    }
    Path(out).write_text(json.dumps(doc, indent=2))
    click.echo(f"accuracy {mean['accuracy']:.4f} +/- {sd['accuracy']:.4f} -> {out}")


# ---- style embedding


def _vectors_from_dir(root: Path) -> "list[StyleVector]":
    vectors = []
    for path in sorted(root.rglob("*")):
        if path.suffix.lower() not in (".cytf", ".png"):
            continue
        rel = path.relative_to(root)
        group = rel.parts[0] if len(rel.parts) > 1 else "all"
        if path.suffix.lower() == ".cytf":
            flows = imgio.read_flow_field(path)
            fmap = np.stack([flows.dy, flows.dx, flows.cellprob], axis=2)
        else:
            fmap = fallback_feature_map(imgio.read_image(path))
        vectors.append(style_vector(fmap, source_id=path.stem, group=group))
    return vectors


def _vectors_from_csv(path: Path) -> "list[StyleVector]":
    vectors = []
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    for row in rows:
        if not row or row[0] == "id":
            continue
        if len(row) < 3:
            raise click.ClickException(f"bad feature row: {row}")
        values = np.array([float(v) for v in row[2:]])
        vectors.append(StyleVector(values=values, source_id=row[0], group=row[1]))
    return vectors


@main.command()
@click.option("--features", required=True, type=click.Path(exists=True),
              help="Directory of .cytf activation dumps (or .png images), "
                   "or a CSV of id,group,v0,v1,... rows.")
@click.option("--perplexity", default=30.0, show_default=True)
@click.option("--iterations", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path())
@click.option("--svg", "svg_path", type=click.Path(), default=None)
def embed(features, perplexity, iterations, seed, out, svg_path):
    """Project style vectors to 2D and write a scatter CSV (and SVG)."""
    source = Path(features)
    if source.is_dir():
        vectors = _vectors_from_dir(source)
    else:
        vectors = _vectors_from_csv(source)
    if not vectors:
        raise click.ClickException(f"no feature inputs found under {features}")
    cfg = TsneConfig(perplexity=perplexity, iterations=iterations, seed=seed)
    points = tsne(vectors, cfg)
    export_embedding(
        points,
        [v.source_id for v in vectors],
        [v.group for v in vectors],
        out,
        svg_path,
    )
    click.echo(f"{len(vectors)} points -> {out}")


# ---- service client


def _client(url):
    import httpx

    return httpx.Client(base_url=url, timeout=600.0)


def _check(resp):
    if resp.status_code >= 400:
        try:
            detail = resp.json().get("detail", resp.text)
        except Exception:
            detail = resp.text
        raise click.ClickException(f"{resp.status_code}: {detail}")
    return resp


def _wait_for_job(client, token, poll=0.2):
    while True:
        job = _check(client.get(f"/jobs/{token}")).json()
        if job["status"] == "done":
            return job
        if job["status"] == "error":
            raise click.ClickException(f"{job['stage']} failed: {job['error']}")
        time.sleep(poll)


def _parse_params(pairs) -> dict:
    params = {}
    for pair in pairs:
        if "=" not in pair:
            raise click.UsageError(f"expected key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        params[key.strip()] = coerce(raw)
    return params


@main.group()
@click.option("--url", default="http://127.0.0.1:8000", show_default=True,
              envvar="CYTO_URL")
@click.pass_context
def slide(ctx, url):
    """Talk to a running screening service."""
    ctx.obj = url


@slide.command()
@click.option("--frames", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--truth", "truth_path", type=click.Path(exists=True, dir_okay=False),
              help="Optional reference label map enabling oracle segmentation.")
@click.pass_obj
def ingest(url, frames, truth_path):
    """Upload a frame directory as a new slide."""
    paths = sorted(
        p for p in Path(frames).iterdir()
        if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp")
    )
    if not paths:
        raise click.ClickException(f"no frames in {frames}")
    files = [("files", (p.name, p.read_bytes(), "application/octet-stream"))
             for p in paths]
    if truth_path:
        files.append(("truth_labels",
                      ("truth_labels.png", Path(truth_path).read_bytes(),
                       "application/octet-stream")))
    with _client(url) as client:
        record = _check(client.post("/slides", files=files)).json()
    click.echo(record["slide_id"])


def _stage_command(stage):
    @click.argument("slide_id")
    @click.option("--param", "params", multiple=True,
                  help="Stage option as key=value; repeatable.")
    @click.option("--no-wait", is_flag=True, help="Return the job token immediately.")
    @click.pass_obj
    def run(url, slide_id, params, no_wait):
        with _client(url) as client:
            resp = _check(client.post(
                f"/slides/{slide_id}/{stage}",
                json={"params": _parse_params(params)},
            )).json()
            if no_wait:
                click.echo(resp["job"])
                return
            _wait_for_job(client, resp["job"])
            record = _check(client.get(f"/slides/{slide_id}")).json()
        click.echo(f"{slide_id}: {record['state']}")

    run.__name__ = stage
    run.__doc__ = f"Run the {stage} stage and wait for it."
    return run


for _stage in ("stitch", "segment", "classify", "report"):
    slide.command(_stage)(_stage_command(_stage))


@slide.command()
@click.argument("slide_id")
@click.option("--base-version", required=True, type=int)
@click.option("--ops", "ops_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="JSON file holding the list of correction ops.")
@click.pass_obj
def correct(url, slide_id, base_version, ops_path):
    """Apply a correction patch to the current segmentation."""
    ops = json.loads(Path(ops_path).read_text())
    with _client(url) as client:
        resp = _check(client.post(
            f"/slides/{slide_id}/corrections",
            json={"base_version": base_version, "ops": ops},
        )).json()
    click.echo(json.dumps(resp, indent=2))


@slide.command("list")
@click.pass_obj
def list_slides(url):
    """List slide ids known to the service."""
    with _client(url) as client:
        for slide_id in _check(client.get("/slides")).json()["slides"]:
            click.echo(slide_id)


@slide.command()
@click.argument("slide_id")
@click.pass_obj
def show(url, slide_id):
    """Print a slide record as JSON."""
    with _client(url) as client:
        record = _check(client.get(f"/slides/{slide_id}")).json()
    click.echo(json.dumps(record, indent=2))


@slide.command()
@click.argument("slide_id")
@click.argument("artifact", type=click.Choice(
    ["panorama.png", "labels.png", "cells.json", "report.json", "report.txt",
     "pose_graph.json"]))
@click.option("--version", type=int, default=None,
              help="Label map version; labels.png only.")
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
def fetch(url, slide_id, artifact, version, out):
    """Download a slide artifact."""
    query = {"version": version} if version is not None else None
    with _client(url) as client:
        resp = _check(client.get(f"/slides/{slide_id}/{artifact}", params=query))
    Path(out).write_bytes(resp.content)
    click.echo(f"{artifact} -> {out}")


@slide.command("export-training")
@click.option("--out", required=True, type=click.Path())
@click.pass_obj
def export_training(url, out):
    """Download the corrected training pairs as a tar archive."""
    with _client(url) as client:
        resp = _check(client.get("/training/export"))
    Path(out).write_bytes(resp.content)
    click.echo(f"training export -> {out}")


@slide.command()
@click.option("--root", required=True, type=click.Path(),
              help="Directory holding slide state and artifacts.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="key=value settings file overriding built-in thresholds.")
@click.option("--frontend", "frontend_dir", type=click.Path(file_okay=False),
              help="Static UI bundle to serve at /ui.")
def serve(root, host, port, config_path, frontend_dir):
    """Run the screening service."""
    import uvicorn

    from .service.app import create_app

    app = create_app(root, settings=load_settings(config_path),
                     frontend_dir=frontend_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")


if __name__ == "__main__":
    sys.exit(main())
