"""Filesystem persistence for slides.

Each slide lives under <root>/slides/<id>/ with a manifest.json recording
state, label version, and artifact paths. Manifests are written atomically
(temp file then rename) so an interrupted stage never leaves a half-written
commit point.
"""
from __future__ import annotations

import json
import os
import secrets
import tempfile
import time
from pathlib import Path

STATES = ("ingested", "stitched", "segmented", "classified", "reported")

# artifacts invalidated when the pipeline falls back to the keyed state
_DOWNSTREAM = {
    "ingested": ("panorama.png", "pose_graph.json", "flows.cytf", "cells.json",
                 "report.json", "report.txt"),
    "stitched": ("flows.cytf", "cells.json", "report.json", "report.txt"),
    "segmented": ("cells.json", "report.json", "report.txt"),
    "classified": ("report.json", "report.txt"),
}


class SlideNotFoundError(KeyError):
    pass


class StateError(RuntimeError):
    """A stage was requested before its prerequisite state was reached."""


def state_index(state: str) -> int:
    return STATES.index(state)


class SlideStore:
    def __init__(self, root):
        self.root = Path(root)
        (self.root / "slides").mkdir(parents=True, exist_ok=True)

    # ---- paths

    def slide_dir(self, slide_id: str) -> Path:
        return self.root / "slides" / slide_id

    def frames_dir(self, slide_id: str) -> Path:
        return self.slide_dir(slide_id) / "frames"

    def artifact(self, slide_id: str, name: str) -> Path:
        return self.slide_dir(slide_id) / name

    def labels_path(self, slide_id: str, version: int) -> Path:
        return self.slide_dir(slide_id) / f"labels_v{version}.png"

    def training_dir(self, slide_id: str) -> Path:
        return self.slide_dir(slide_id) / "training"

    # ---- manifests

    def create_slide(self) -> dict:
        while True:
            slide_id = secrets.token_hex(6)
            if not self.slide_dir(slide_id).exists():
                break
        self.frames_dir(slide_id).mkdir(parents=True)
        manifest = {
            "slide_id": slide_id,
            "state": "ingested",
            "label_version": 0,
            "frames": [],
            "warnings": [],
            "artifacts": {},
            "created_at": time.time(),
            "updated_at": time.time(),
        }
        self.save(manifest)
        return manifest

    def load(self, slide_id: str) -> dict:
        path = self.slide_dir(slide_id) / "manifest.json"
        if not path.exists():
            raise SlideNotFoundError(f"unknown slide {slide_id!r}")
        return json.loads(path.read_text())

    def save(self, manifest: dict) -> None:
        manifest["updated_at"] = time.time()
        target = self.slide_dir(manifest["slide_id"]) / "manifest.json"
        fd, tmp = tempfile.mkstemp(dir=target.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(manifest, fh, indent=2)
            os.replace(tmp, target)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def delete_slide(self, slide_id: str) -> None:
        import shutil

        if not self.slide_dir(slide_id).exists():
            raise SlideNotFoundError(f"unknown slide {slide_id!r}")
        shutil.rmtree(self.slide_dir(slide_id))

    def list_ids(self):
        base = self.root / "slides"
        return sorted(p.name for p in base.iterdir()
                      if (p / "manifest.json").exists())

    # ---- state management

    def require_state(self, manifest: dict, at_least: str) -> None:
        if state_index(manifest["state"]) < state_index(at_least):
            raise StateError(
                f"slide {manifest['slide_id']} is {manifest['state']!r}, "
                f"needs {at_least!r}"
            )

    def fall_back(self, manifest: dict, to_state: str) -> dict:
        """Drop to to_state, removing artifacts that belong further along."""
        slide_id = manifest["slide_id"]
        for name in _DOWNSTREAM.get(to_state, ()):
            path = self.artifact(slide_id, name)
            if path.exists():
                path.unlink()
            manifest["artifacts"].pop(name, None)
        manifest["state"] = to_state
        return manifest
