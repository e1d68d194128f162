"""Request and response bodies for the service endpoints.

Every operation works on server-local paths: the service is a
single-machine operator tool, so requests name files and directories
rather than uploading payloads.
"""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: Literal["ok"]
    version: str


class ErrorBody(BaseModel):
    """Uniform error payload for every 4xx response."""

    error: str
    message: str
    problems: list[str] = Field(default_factory=list)


class SynthesizeRequest(BaseModel):
    out_dir: str
    n: int = Field(ge=1)
    seed: int = 0
    kind: Literal["vg", "pl"] = "vg"
    image_size: int = Field(default=64, ge=8)
    split: str = "train"
    size_min: int | None = Field(default=None, ge=2)
    size_max: int | None = Field(default=None, ge=2)


class SynthesizeResponse(BaseModel):
    manifest_path: str
    kind: Literal["vg", "pl"]
    num_samples: int
    num_images: int


class TrainRequest(BaseModel):
    config_path: str
    data_path: str
    out_dir: str
    toy: bool = False
    seed: int | None = None
    stop_at_acc: float | None = None


class TrainResponse(BaseModel):
    run_record_path: str
    checkpoint_path: str
    steps_run: int
    final_loss: float
    train_acc50: float
    wall_clock_seconds: float


class EvaluateRequest(BaseModel):
    checkpoint_path: str
    data_path: str
    out_dir: str


class EvaluateResponse(BaseModel):
    report_path: str
    predictions_path: str | None
    report: dict


class VerifyRequest(BaseModel):
    train_path: str
    eval_path: str
    out_path: str | None = None


class VerifyResponse(BaseModel):
    passed: bool
    shared_image_ids: list[str]
    category_overlaps: list[str]
    report_path: str | None


class ReportRequest(BaseModel):
    in_path: str
    out_dir: str


class ReportResponse(BaseModel):
    files: list[str]


class PredictRequest(BaseModel):
    checkpoint_path: str
    image_path: str
    expression: str


class PredictResponse(BaseModel):
    bbox: list[float]
    score: float
    expression: str
