"""Asynchronous stage execution with per-slide serialization.

Stages run on daemon threads; clients poll job tokens. A per-slide lock
serializes stages and corrections for one slide while different slides
proceed in parallel.
"""
from __future__ import annotations

import secrets
import threading
import time
from dataclasses import dataclass, field


@dataclass
class Job:
    token: str
    slide_id: str
    stage: str
    status: str = "queued"  # queued | running | done | error
    error: str | None = None
    created_at: float = field(default_factory=time.time)
    finished_at: float = 0.0

    def to_dict(self) -> dict:
        return {
            "token": self.token,
            "slide_id": self.slide_id,
            "stage": self.stage,
            "status": self.status,
            "error": self.error,
        }


class JobRunner:
    def __init__(self):
        self._jobs = {}
        self._lock = threading.Lock()
        self._slide_locks = {}

    def slide_lock(self, slide_id: str) -> threading.Lock:
        with self._lock:
            if slide_id not in self._slide_locks:
                self._slide_locks[slide_id] = threading.Lock()
            return self._slide_locks[slide_id]

    def submit(self, slide_id: str, stage: str, fn) -> Job:
        job = Job(token=secrets.token_hex(8), slide_id=slide_id, stage=stage)
        with self._lock:
            self._jobs[job.token] = job
        thread = threading.Thread(target=self._run, args=(job, fn), daemon=True)
        thread.start()
        return job

    def _run(self, job: Job, fn) -> None:
        with self.slide_lock(job.slide_id):
            job.status = "running"
            try:
                fn()
                job.status = "done"
            except Exception as exc:
                job.status = "error"
                job.error = f"{type(exc).__name__}: {exc}"
            finally:
                job.finished_at = time.time()

    def get(self, token: str) -> Job:
        with self._lock:
            if token not in self._jobs:
                raise KeyError(f"unknown job {token!r}")
            return self._jobs[token]

    def wait(self, token: str, timeout: float = 60.0) -> Job:
        deadline = time.time() + timeout
        while time.time() < deadline:
            job = self.get(token)
            if job.status in ("done", "error"):
                return job
            time.sleep(0.01)
        raise TimeoutError(f"job {token} still {self.get(token).status}")
