"""Request and response bodies for the REST surface."""
from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class SlideRecord(BaseModel):
    slide_id: str
    state: str
    label_version: int
    frames: "list[str]" = Field(default_factory=list)
    warnings: "list[str]" = Field(default_factory=list)
    artifacts: "dict[str, str]" = Field(default_factory=dict)
    num_instances: Optional[int] = None
    canvas_origin: Optional["list[int]"] = None
    created_at: float
    updated_at: float


class JobStatus(BaseModel):
    token: str
    slide_id: str
    stage: str
    status: str
    error: str | None = None


class StageRequest(BaseModel):
    params: dict = Field(default_factory=dict)


class JobAccepted(BaseModel):
    job: str
    slide_id: str
    stage: str


class CorrectionRequest(BaseModel):
    base_version: int = Field(ge=0)
    ops: "list[dict]"


class CorrectionResponse(BaseModel):
    new_version: int
    diff_summary: dict


class RasterizeRequest(BaseModel):
    """Dry-run fill preview so clients can verify their own rasterizer."""

    polygon: "list[list[float]]"
    height: int = Field(ge=1, le=8192)
    width: int = Field(ge=1, le=8192)


class RasterizeResponse(BaseModel):
    pixels: "list[list[int]]"
    count: int
