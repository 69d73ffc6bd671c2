"""REST API tying ingest, pipeline stages, corrections, and artifacts together.

Long stages run on background threads; POST returns 202 with a job token
the client polls at /jobs/{token}. Artifacts are plain files served from
the slide directory.
"""
from __future__ import annotations

import json
from pathlib import Path

from fastapi import FastAPI, File, HTTPException, UploadFile
from fastapi.responses import FileResponse, PlainTextResponse, Response

from .. import imgio
from ..config import DEFAULTS
from ..corrections import VersionConflictError, rasterize_polygon
from . import pipeline
from .jobs import JobRunner
from .schemas import (
    CorrectionRequest,
    CorrectionResponse,
    JobAccepted,
    JobStatus,
    RasterizeRequest,
    RasterizeResponse,
    SlideRecord,
    StageRequest,
)
from .store import SlideNotFoundError, SlideStore, StateError

_STAGE_NEEDS = {
    "stitch": "ingested",
    "segment": "stitched",
    "classify": "segmented",
    "report": "classified",
}


def create_app(root, settings=None, frontend_dir=None) -> FastAPI:
    app = FastAPI(title="cytoscreen", version="0.1.0")
    store = SlideStore(root)
    runner = JobRunner()
    app.state.store = store
    app.state.runner = runner
    app.state.settings = dict(DEFAULTS, **(settings or {}))

    def get_manifest(slide_id: str) -> dict:
        try:
            return store.load(slide_id)
        except SlideNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc

    def artifact_or_404(slide_id: str, name: str) -> Path:
        get_manifest(slide_id)
        path = store.artifact(slide_id, name)
        if not path.exists():
            raise HTTPException(status_code=404,
                                detail=f"{name} not available for {slide_id}")
        return path

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    # ---- ingest

    @app.post("/slides", status_code=201, response_model=SlideRecord)
    def upload_slide(files: "list[UploadFile]" = File(...),
                     truth_labels: UploadFile = File(None)):
        if not files:
            raise HTTPException(status_code=400, detail="no frames supplied")
        manifest = store.create_slide()
        slide_id = manifest["slide_id"]
        names = []
        try:
            for item in files:
                name = Path(item.filename or "").name
                if not name:
                    raise HTTPException(status_code=400,
                                        detail="frame without a filename")
                if name in names:
                    raise HTTPException(status_code=400,
                                        detail=f"duplicate frame name: {name}")
                target = store.frames_dir(slide_id) / name
                target.write_bytes(item.file.read())
                try:
                    imgio.read_image(target)
                except Exception as exc:
                    raise HTTPException(
                        status_code=400,
                        detail=f"undecodable frame: {name}") from exc
                names.append(name)
            if truth_labels is not None:
                target = store.artifact(slide_id, "truth_labels.png")
                target.write_bytes(truth_labels.file.read())
                try:
                    imgio.read_label_map(target)
                except Exception as exc:
                    raise HTTPException(
                        status_code=400,
                        detail="undecodable truth label map") from exc
                manifest["artifacts"]["truth_labels.png"] = "truth_labels.png"
        except HTTPException:
            store.delete_slide(slide_id)
            raise
        manifest["frames"] = sorted(names)
        store.save(manifest)
        return manifest

    # ---- pipeline stages

    def enqueue(slide_id: str, stage: str, body: StageRequest) -> JobAccepted:
        manifest = get_manifest(slide_id)
        try:
            store.require_state(manifest, _STAGE_NEEDS[stage])
        except StateError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        params = dict(body.params) if body else {}

        def work():
            pipeline.STAGES[stage](store, slide_id, app.state.settings, params)

        job = runner.submit(slide_id, stage, work)
        return JobAccepted(job=job.token, slide_id=slide_id, stage=stage)

    @app.post("/slides/{slide_id}/stitch", status_code=202,
              response_model=JobAccepted)
    def stitch(slide_id: str, body: StageRequest = None):
        return enqueue(slide_id, "stitch", body)

    @app.post("/slides/{slide_id}/segment", status_code=202,
              response_model=JobAccepted)
    def segment(slide_id: str, body: StageRequest = None):
        return enqueue(slide_id, "segment", body)

    @app.post("/slides/{slide_id}/classify", status_code=202,
              response_model=JobAccepted)
    def classify(slide_id: str, body: StageRequest = None):
        return enqueue(slide_id, "classify", body)

    @app.post("/slides/{slide_id}/report", status_code=202,
              response_model=JobAccepted)
    def report(slide_id: str, body: StageRequest = None):
        return enqueue(slide_id, "report", body)

    @app.get("/jobs/{token}", response_model=JobStatus)
    def job_status(token: str):
        try:
            return runner.get(token).to_dict()
        except KeyError as exc:
            raise HTTPException(status_code=404, detail=str(exc)) from exc

    # ---- artifacts

    @app.get("/slides")
    def list_slides():
        return {"slides": store.list_ids()}

    @app.get("/slides/{slide_id}", response_model=SlideRecord)
    def slide_record(slide_id: str):
        return get_manifest(slide_id)

    @app.get("/slides/{slide_id}/panorama.png")
    def panorama(slide_id: str):
        return FileResponse(artifact_or_404(slide_id, "panorama.png"),
                            media_type="image/png")

    @app.get("/slides/{slide_id}/labels.png")
    def labels(slide_id: str, version: int = None):
        manifest = get_manifest(slide_id)
        if version is None:
            version = manifest["label_version"]
        if version < 1:
            raise HTTPException(status_code=404,
                                detail=f"slide {slide_id} has no segmentation")
        path = store.labels_path(slide_id, version)
        if not path.exists():
            raise HTTPException(status_code=404,
                                detail=f"no label version {version}")
        return FileResponse(path, media_type="image/png")

    @app.get("/slides/{slide_id}/cells.json")
    def cells(slide_id: str):
        return Response(artifact_or_404(slide_id, "cells.json").read_text(),
                        media_type="application/json")

    @app.get("/slides/{slide_id}/report.json")
    def report_json(slide_id: str):
        return Response(artifact_or_404(slide_id, "report.json").read_text(),
                        media_type="application/json")

    @app.get("/slides/{slide_id}/report.txt", response_class=PlainTextResponse)
    def report_text(slide_id: str):
        return artifact_or_404(slide_id, "report.txt").read_text()

    @app.get("/slides/{slide_id}/pose_graph.json")
    def pose_graph(slide_id: str):
        return Response(artifact_or_404(slide_id, "pose_graph.json").read_text(),
                        media_type="application/json")

    # ---- flows upload (segmentation input seam)

    @app.post("/slides/{slide_id}/flows", status_code=201)
    def upload_flows(slide_id: str, flows: UploadFile = File(...)):
        manifest = get_manifest(slide_id)
        target = store.artifact(slide_id, "uploaded_flows.cytf")
        target.write_bytes(flows.file.read())
        try:
            imgio.read_flow_field(target)
        except Exception as exc:
            target.unlink()
            raise HTTPException(status_code=400,
                                detail=f"bad flow field: {exc}") from exc
        manifest["artifacts"]["uploaded_flows.cytf"] = "uploaded_flows.cytf"
        store.save(manifest)
        return {"stored": "uploaded_flows.cytf"}

    # ---- corrections

    @app.post("/slides/{slide_id}/corrections", response_model=CorrectionResponse)
    def corrections(slide_id: str, body: CorrectionRequest):
        manifest = get_manifest(slide_id)
        with runner.slide_lock(slide_id):
            try:
                new_version, summary = pipeline.apply_patch(
                    store, slide_id, body.base_version, body.ops
                )
            except VersionConflictError as exc:
                current = store.load(slide_id)["label_version"]
                raise HTTPException(
                    status_code=409,
                    detail={"message": str(exc), "current_version": current},
                ) from exc
            except StateError as exc:
                raise HTTPException(status_code=409, detail=str(exc)) from exc
            except (ValueError, KeyError) as exc:
                raise HTTPException(status_code=400, detail=str(exc)) from exc
        return CorrectionResponse(new_version=new_version, diff_summary=summary)

    @app.post("/rasterize", response_model=RasterizeResponse)
    def rasterize(body: RasterizeRequest):
        if len(body.polygon) < 3:
            raise HTTPException(status_code=400,
                                detail="polygon needs at least 3 vertices")
        mask = rasterize_polygon(body.polygon, body.height, body.width)
        ys, xs = mask.nonzero()
        pixels = [[int(y), int(x)] for y, x in zip(ys, xs)]
        return RasterizeResponse(pixels=pixels, count=len(pixels))

    # ---- training export

    @app.get("/training/export")
    def training_export():
        payload = pipeline.export_training_tar(store)
        return Response(
            payload,
            media_type="application/x-tar",
            headers={
                "Content-Disposition": "attachment; filename=training_export.tar"
            },
        )

    if frontend_dir is not None and Path(frontend_dir).exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(frontend_dir), html=True),
                  name="ui")

    return app
