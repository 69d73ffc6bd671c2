import io
import json
import tarfile
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from cytoscreen import imgio
from cytoscreen.service.app import create_app
from cytoscreen.service.jobs import JobRunner
from cytoscreen.service.pipeline import build_report
from cytoscreen.service.store import (
    SlideNotFoundError,
    SlideStore,
    StateError,
)
from cytoscreen.synth import write_slide_fixture

# Slow stage knobs shared by every pipeline call in this module: exhaustive
# frame sampling so all 12 fixture tiles register, tiny classifier input.
STITCH_PARAMS = {"stride": 1}
CLASSIFY_PARAMS = {"input_resolution": 32}


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("fixture")
    write_slide_fixture(out, seed=3)
    return out


@pytest.fixture()
def client(tmp_path):
    app = create_app(tmp_path / "slides")
    with TestClient(app) as c:
        yield c


def upload_slide(client, fixture_dir, with_truth=True):
    names = sorted(p.name for p in (fixture_dir / "frames").glob("*.png"))
    files = [
        ("files", (n, (fixture_dir / "frames" / n).read_bytes(), "image/png"))
        for n in names
    ]
    if with_truth:
        truth = (fixture_dir / "truth_labels.png").read_bytes()
        files.append(("truth_labels", ("truth_labels.png", truth, "image/png")))
    resp = client.post("/slides", files=files)
    assert resp.status_code == 201, resp.text
    return resp.json()


def run_stage(client, slide_id, stage, params=None, timeout=120.0):
    resp = client.post(f"/slides/{slide_id}/{stage}", json={"params": params or {}})
    assert resp.status_code == 202, resp.text
    body = resp.json()
    assert body["stage"] == stage
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        job = client.get(f"/jobs/{body['job']}").json()
        if job["status"] in ("done", "error"):
            return job
        time.sleep(0.02)
    raise TimeoutError(f"stage {stage} did not finish")


def run_ok(client, slide_id, stage, params=None):
    job = run_stage(client, slide_id, stage, params)
    assert job["status"] == "done", job["error"]
    return job


@pytest.fixture(scope="module")
def reported_slide(fixture_dir, tmp_path_factory):
    """One slide pushed through every stage, shared by read-only tests."""
    app = create_app(tmp_path_factory.mktemp("slides"))
    with TestClient(app) as client:
        record = upload_slide(client, fixture_dir)
        sid = record["slide_id"]
        run_ok(client, sid, "stitch", STITCH_PARAMS)
        run_ok(client, sid, "segment")
        run_ok(client, sid, "classify", CLASSIFY_PARAMS)
        run_ok(client, sid, "report")
        yield client, sid


# ---- store


def test_store_create_and_load(tmp_path):
    store = SlideStore(tmp_path)
    manifest = store.create_slide()
    sid = manifest["slide_id"]
    assert manifest["state"] == "ingested"
    assert manifest["label_version"] == 0
    assert store.load(sid) == manifest
    assert store.list_ids() == [sid]


def test_store_missing_slide(tmp_path):
    store = SlideStore(tmp_path)
    with pytest.raises(SlideNotFoundError):
        store.load("nope")


def test_store_save_is_atomic(tmp_path):
    store = SlideStore(tmp_path)
    manifest = store.create_slide()
    sid = manifest["slide_id"]
    manifest["state"] = "stitched"
    store.save(manifest)
    path = store.slide_dir(sid) / "manifest.json"
    assert json.loads(path.read_text())["state"] == "stitched"
    leftovers = [p for p in store.slide_dir(sid).iterdir() if p.name.startswith("tmp")]
    assert leftovers == []


def test_store_require_state(tmp_path):
    store = SlideStore(tmp_path)
    manifest = store.create_slide()
    store.require_state(manifest, "ingested")
    with pytest.raises(StateError):
        store.require_state(manifest, "stitched")


def test_store_fall_back_removes_downstream(tmp_path):
    store = SlideStore(tmp_path)
    manifest = store.create_slide()
    sid = manifest["slide_id"]
    for name in ("panorama.png", "cells.json", "report.json"):
        store.artifact(sid, name).write_text("x")
        manifest["artifacts"][name] = name
    manifest["state"] = "classified"
    store.save(manifest)
    manifest = store.fall_back(manifest, "stitched")
    assert manifest["state"] == "stitched"
    assert store.artifact(sid, "panorama.png").exists()
    assert not store.artifact(sid, "cells.json").exists()
    assert not store.artifact(sid, "report.json").exists()
    assert "cells.json" not in manifest["artifacts"]
    assert "panorama.png" in manifest["artifacts"]


def test_store_delete_slide(tmp_path):
    store = SlideStore(tmp_path)
    sid = store.create_slide()["slide_id"]
    store.delete_slide(sid)
    assert store.list_ids() == []


# ---- jobs


def test_job_runner_success():
    runner = JobRunner()
    seen = []
    job = runner.submit("s1", "stitch", lambda: seen.append(1))
    done = runner.wait(job.token, timeout=5.0)
    assert done.status == "done"
    assert done.error is None
    assert seen == [1]


def test_job_runner_captures_error():
    runner = JobRunner()

    def boom():
        raise ValueError("bad input")

    job = runner.submit("s1", "segment", boom)
    done = runner.wait(job.token, timeout=5.0)
    assert done.status == "error"
    assert "ValueError" in done.error
    assert "bad input" in done.error


def test_job_runner_unknown_token():
    runner = JobRunner()
    with pytest.raises(KeyError):
        runner.get("missing")


def test_job_runner_serializes_per_slide():
    # Two jobs on one slide must not overlap; a third on another slide may.
    runner = JobRunner()
    active = []
    overlap = []
    lock = threading.Lock()

    def work():
        with lock:
            active.append(1)
            if len(active) > 1:
                overlap.append(1)
        time.sleep(0.05)
        with lock:
            active.pop()

    jobs = [runner.submit("same", "stitch", work) for _ in range(3)]
    for job in jobs:
        runner.wait(job.token, timeout=5.0)
    assert overlap == []


# ---- ingest


def test_upload_creates_slide(client, fixture_dir):
    record = upload_slide(client, fixture_dir)
    assert record["state"] == "ingested"
    assert record["label_version"] == 0
    assert len(record["frames"]) == 12
    assert record["frames"] == sorted(record["frames"])
    assert "truth_labels.png" in record["artifacts"]
    listing = client.get("/slides").json()
    assert record["slide_id"] in listing["slides"]


def test_upload_without_truth(client, fixture_dir):
    record = upload_slide(client, fixture_dir, with_truth=False)
    assert "truth_labels.png" not in record["artifacts"]


def test_upload_rejects_undecodable_frame(client, fixture_dir):
    good = next((fixture_dir / "frames").glob("*.png"))
    files = [
        ("files", (good.name, good.read_bytes(), "image/png")),
        ("files", ("broken.png", b"not a png", "image/png")),
    ]
    resp = client.post("/slides", files=files)
    assert resp.status_code == 400
    assert "broken.png" in resp.json()["detail"]
    assert client.get("/slides").json()["slides"] == []


def test_upload_rejects_duplicate_names(client, fixture_dir):
    good = next((fixture_dir / "frames").glob("*.png"))
    payload = good.read_bytes()
    files = [
        ("files", (good.name, payload, "image/png")),
        ("files", (good.name, payload, "image/png")),
    ]
    resp = client.post("/slides", files=files)
    assert resp.status_code == 400
    assert "duplicate" in resp.json()["detail"]


def test_upload_rejects_bad_truth_labels(client, fixture_dir):
    good = next((fixture_dir / "frames").glob("*.png"))
    files = [
        ("files", (good.name, good.read_bytes(), "image/png")),
        ("truth_labels", ("truth_labels.png", b"junk", "image/png")),
    ]
    resp = client.post("/slides", files=files)
    assert resp.status_code == 400
    assert client.get("/slides").json()["slides"] == []


# ---- stage ordering and jobs over REST


def test_unknown_slide_404(client):
    assert client.get("/slides/nope").status_code == 404
    assert client.post("/slides/nope/stitch", json={}).status_code == 404
    assert client.get("/slides/nope/panorama.png").status_code == 404


def test_unknown_job_404(client):
    assert client.get("/jobs/deadbeef").status_code == 404


def test_stage_out_of_order_409(client, fixture_dir):
    sid = upload_slide(client, fixture_dir)["slide_id"]
    for stage in ("segment", "classify", "report"):
        resp = client.post(f"/slides/{sid}/{stage}", json={})
        assert resp.status_code == 409, stage
    assert client.post(f"/slides/{sid}/stitch", json={}).status_code == 202


def test_artifacts_404_before_stage(client, fixture_dir):
    sid = upload_slide(client, fixture_dir)["slide_id"]
    assert client.get(f"/slides/{sid}/panorama.png").status_code == 404
    assert client.get(f"/slides/{sid}/labels.png").status_code == 404
    assert client.get(f"/slides/{sid}/cells.json").status_code == 404
    assert client.get(f"/slides/{sid}/report.json").status_code == 404


# ---- pipeline results


def test_stitch_outputs(reported_slide, fixture_dir, tmp_path):
    client, sid = reported_slide
    record = client.get(f"/slides/{sid}").json()
    assert record["state"] == "reported"
    meta = json.loads((fixture_dir / "fixture.json").read_text())

    png = client.get(f"/slides/{sid}/panorama.png")
    assert png.status_code == 200
    out = tmp_path / "p.png"
    out.write_bytes(png.content)
    panorama = imgio.read_image(out)
    # Canvas origin rounding can pad a pixel on either axis.
    assert abs(panorama.height - meta["height"]) <= 2
    assert abs(panorama.width - meta["width"]) <= 2

    graph = client.get(f"/slides/{sid}/pose_graph.json").json()
    assert len(graph["poses"]) == meta["n_frames"]
    assert len(graph["canvas_origin"]) == 2


def test_segment_matches_truth_instances(reported_slide, fixture_dir, tmp_path):
    client, sid = reported_slide
    record = client.get(f"/slides/{sid}").json()
    meta = json.loads((fixture_dir / "fixture.json").read_text())
    assert record["num_instances"] == meta["n_cells"]
    assert record["label_version"] == 1

    png = client.get(f"/slides/{sid}/labels.png")
    out = tmp_path / "l.png"
    out.write_bytes(png.content)
    labels = imgio.read_label_map(out)
    assert labels.num_instances == meta["n_cells"]


def test_cells_json_shape(reported_slide):
    client, sid = reported_slide
    doc = client.get(f"/slides/{sid}/cells.json").json()
    assert doc["slide_id"] == sid
    assert doc["label_version"] == 1
    cells = doc["cells"]
    assert len(cells) > 0
    ids = [c["id"] for c in cells]
    assert ids == sorted(ids)
    for cell in cells:
        assert set(cell) == {"id", "bbox", "contour", "probs", "predicted",
                             "class_name"}
        assert len(cell["probs"]) == 5
        assert sum(cell["probs"]) == pytest.approx(1.0, abs=1e-6)
        assert cell["predicted"] == int(np.argmax(cell["probs"]))


def test_report_conserves_counts(reported_slide):
    client, sid = reported_slide
    cells = client.get(f"/slides/{sid}/cells.json").json()["cells"]
    report = client.get(f"/slides/{sid}/report.json").json()
    assert report["total_cells"] == len(cells)
    assert sum(report["per_class"].values()) == report["total_cells"]
    assert sum(report["grouping"].values()) == report["total_cells"]
    for name, count in report["per_class"].items():
        assert count == sum(1 for c in cells if c["class_name"] == name)
    fractions = report["per_class_fraction"]
    assert sum(fractions.values()) == pytest.approx(1.0, abs=1e-6)

    text = client.get(f"/slides/{sid}/report.txt")
    assert text.status_code == 200
    assert sid in text.text
    assert f"Total cells: {report['total_cells']}" in text.text


def test_build_report_empty_slide():
    report = build_report("s", [], 3)
    assert report["total_cells"] == 0
    assert "per_class_fraction" not in report
    assert set(report["grouping"]) == {"normal", "abnormal", "benign"}


def test_rerun_segment_invalidates_downstream(client, fixture_dir):
    sid = upload_slide(client, fixture_dir)["slide_id"]
    run_ok(client, sid, "stitch", STITCH_PARAMS)
    run_ok(client, sid, "segment")
    run_ok(client, sid, "classify", CLASSIFY_PARAMS)
    run_ok(client, sid, "report")
    run_ok(client, sid, "segment")
    record = client.get(f"/slides/{sid}").json()
    assert record["state"] == "segmented"
    assert record["label_version"] == 2
    assert client.get(f"/slides/{sid}/cells.json").status_code == 404
    assert client.get(f"/slides/{sid}/report.json").status_code == 404
    # First segmentation is kept as history.
    assert client.get(f"/slides/{sid}/labels.png?version=1").status_code == 200


# ---- corrections


@pytest.fixture()
def segmented_slide(client, fixture_dir):
    sid = upload_slide(client, fixture_dir)["slide_id"]
    run_ok(client, sid, "stitch", STITCH_PARAMS)
    run_ok(client, sid, "segment")
    return client, sid


def test_correction_bumps_version(segmented_slide):
    client, sid = segmented_slide
    before = client.get(f"/slides/{sid}").json()
    resp = client.post(
        f"/slides/{sid}/corrections",
        json={"base_version": 1, "ops": [{"op": "delete_instance", "id": 1}]},
    )
    assert resp.status_code == 200
    body = resp.json()
    assert body["new_version"] == 2
    summary = body["diff_summary"]
    assert summary["deleted"] == 1
    assert summary["instances_before"] == before["num_instances"]
    assert summary["instances_after"] == before["num_instances"] - 1
    record = client.get(f"/slides/{sid}").json()
    assert record["label_version"] == 2
    assert record["num_instances"] == before["num_instances"] - 1
    assert record["state"] == "segmented"


def test_correction_stale_base_409(segmented_slide):
    client, sid = segmented_slide
    ok = client.post(
        f"/slides/{sid}/corrections",
        json={"base_version": 1, "ops": [{"op": "delete_instance", "id": 1}]},
    )
    assert ok.status_code == 200
    stale = client.post(
        f"/slides/{sid}/corrections",
        json={"base_version": 1, "ops": [{"op": "delete_instance", "id": 2}]},
    )
    assert stale.status_code == 409
    assert stale.json()["detail"]["current_version"] == 2


def test_correction_bad_op_400(segmented_slide):
    client, sid = segmented_slide
    resp = client.post(
        f"/slides/{sid}/corrections",
        json={"base_version": 1, "ops": [{"op": "nonsense"}]},
    )
    assert resp.status_code == 400
    # A failed patch must not bump the version.
    assert client.get(f"/slides/{sid}").json()["label_version"] == 1


def test_correction_before_segmentation_409(client, fixture_dir):
    sid = upload_slide(client, fixture_dir)["slide_id"]
    resp = client.post(
        f"/slides/{sid}/corrections",
        json={"base_version": 0, "ops": [{"op": "delete_instance", "id": 1}]},
    )
    assert resp.status_code == 409


def test_correction_resets_classified_state(segmented_slide):
    client, sid = segmented_slide
    run_ok(client, sid, "classify", CLASSIFY_PARAMS)
    resp = client.post(
        f"/slides/{sid}/corrections",
        json={"base_version": 1, "ops": [{"op": "delete_instance", "id": 1}]},
    )
    assert resp.status_code == 200
    record = client.get(f"/slides/{sid}").json()
    assert record["state"] == "segmented"
    assert client.get(f"/slides/{sid}/cells.json").status_code == 404


def test_correction_add_roi(segmented_slide):
    client, sid = segmented_slide
    before = client.get(f"/slides/{sid}").json()["num_instances"]
    # A small box in the top-left corner, clear of seeded cells.
    polygon = [[2.0, 2.0], [14.0, 2.0], [14.0, 14.0], [2.0, 14.0]]
    resp = client.post(
        f"/slides/{sid}/corrections",
        json={"base_version": 1, "ops": [{"op": "add_roi", "polygon": polygon}]},
    )
    assert resp.status_code == 200
    body = resp.json()
    assert body["diff_summary"]["added"] == 1
    assert body["diff_summary"]["instances_after"] == before + 1


# ---- flow upload seam


def test_flow_upload_then_segment(client, fixture_dir, tmp_path):
    record = upload_slide(client, fixture_dir, with_truth=False)
    sid = record["slide_id"]
    run_ok(client, sid, "stitch", STITCH_PARAMS)

    # No truth labels and no uploaded flows: oracle and auto sources fail.
    job = run_stage(client, sid, "segment", {"flow_source": "oracle"})
    assert job["status"] == "error"
    assert "reference labels" in job["error"]
    job = run_stage(client, sid, "segment")
    assert job["status"] == "error"

    # Build a flow field from the fixture truth and upload it.
    from cytoscreen.flowseg import compute_gt_flows
    from cytoscreen.raster import LabelMap

    truth = imgio.read_label_map(fixture_dir / "truth_labels.png")
    panorama = client.get(f"/slides/{sid}/panorama.png")
    out = tmp_path / "p.png"
    out.write_bytes(panorama.content)
    pano = imgio.read_image(out)
    graph = client.get(f"/slides/{sid}/pose_graph.json").json()
    oy, ox = graph["canvas_origin"]
    src = truth.labels
    aligned = np.zeros((pano.height, pano.width), dtype=src.dtype)
    h = min(src.shape[0], pano.height - max(0, -oy))
    w = min(src.shape[1], pano.width - max(0, -ox))
    aligned[max(0, -oy) : max(0, -oy) + h, max(0, -ox) : max(0, -ox) + w] = src[:h, :w]
    flows = compute_gt_flows(LabelMap(aligned))
    flow_path = tmp_path / "f.cytf"
    imgio.write_flow_field(flows, flow_path)

    resp = client.post(
        f"/slides/{sid}/flows",
        files=[("flows", ("f.cytf", flow_path.read_bytes(), "application/octet-stream"))],
    )
    assert resp.status_code == 201

    run_ok(client, sid, "segment", {"flow_source": "file"})
    record = client.get(f"/slides/{sid}").json()
    assert record["state"] == "segmented"
    assert record["num_instances"] > 0


def test_flow_upload_rejects_garbage(client, fixture_dir):
    sid = upload_slide(client, fixture_dir)["slide_id"]
    resp = client.post(
        f"/slides/{sid}/flows",
        files=[("flows", ("f.cytf", b"junk", "application/octet-stream"))],
    )
    assert resp.status_code == 400


# ---- training export


def test_training_export_tar(segmented_slide):
    client, sid = segmented_slide
    resp = client.get("/training/export")
    assert resp.status_code == 200
    assert resp.headers["content-type"] == "application/x-tar"
    with tarfile.open(fileobj=io.BytesIO(resp.content)) as tar:
        names = tar.getnames()
    assert all(name.startswith(f"{sid}/") for name in names)
    suffixes = sorted(name.rsplit("_", 1)[-1] for name in names)
    assert suffixes == ["flows.cytf", "img.png", "lbl.png", "meta.json"]


def test_training_export_tracks_corrections(segmented_slide):
    client, sid = segmented_slide
    client.post(
        f"/slides/{sid}/corrections",
        json={"base_version": 1, "ops": [{"op": "delete_instance", "id": 1}]},
    )
    resp = client.get("/training/export")
    with tarfile.open(fileobj=io.BytesIO(resp.content)) as tar:
        names = tar.getnames()
    assert all("_v2_" in name for name in names)


def test_training_export_empty(client):
    resp = client.get("/training/export")
    assert resp.status_code == 200
    with tarfile.open(fileobj=io.BytesIO(resp.content)) as tar:
        assert tar.getnames() == []


# ---- health


def test_healthz(client):
    assert client.get("/healthz").json() == {"status": "ok"}
