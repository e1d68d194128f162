"""FastAPI application wiring the core package to HTTP endpoints.

The service is stateless: every request names its inputs on disk and
each handler loads what it needs, runs the core routines, writes the
artifacts, and answers with paths plus a summary.  Domain failures map
to structured 400 bodies (``{"error", "message", "problems"}``) so
clients can surface validation reports verbatim.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from fastapi import FastAPI
from fastapi.responses import JSONResponse
from PIL import Image

from ovground import __version__
from ovground.config import ModelConfig, load_config
from ovground.data import (
    check_disjointness,
    generate_synthetic,
    generate_synthetic_pl,
    load_image,
    load_manifest,
    write_dataset,
)
from ovground.errors import ConfigError, InputError, ManifestError, MatchingError
from ovground.model import build_model, load_checkpoint, save_checkpoint
from ovground.reporting import render_report
from ovground.service import schemas
from ovground.training import (
    build_vocabulary,
    evaluate_grounding,
    evaluate_phrases,
    examples_from_arrays,
    save_predictions,
    train_model,
)

CHECKPOINT_NAME = "checkpoint.npz"
RUN_RECORD_NAME = "run_record.json"
EVAL_REPORT_NAME = "eval_report.json"
PREDICTIONS_NAME = "predictions.json"

_ERROR_KINDS = (
    (ManifestError, "manifest"),
    (ConfigError, "config"),
    (MatchingError, "matching"),
    (InputError, "input"),
    (OSError, "io"),
)


def _error_response(kind: str, exc: Exception) -> JSONResponse:
    body = schemas.ErrorBody(
        error=kind,
        message=str(exc).split("\n", 1)[0],
        problems=list(getattr(exc, "problems", [])),
    )
    return JSONResponse(status_code=400, content=body.model_dump())


def _read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise InputError(f"image file missing: {path}")
    array = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return array / 255.0


def _require_image_size(cfg, width: int, height: int, what: str) -> None:
    if (width, height) != (cfg.image_size, cfg.image_size):
        raise ConfigError(
            f"checkpoint/config mismatch: model expects "
            f"{cfg.image_size}x{cfg.image_size} images, {what} is {width}x{height}"
        )


def create_app() -> FastAPI:
    app = FastAPI(title="ovground", version=__version__)

    for exc_type, kind in _ERROR_KINDS:
        def handler(request, exc, kind=kind):
            return _error_response(kind, exc)

        app.add_exception_handler(exc_type, handler)

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/synthesize", response_model=schemas.SynthesizeResponse)
    def synthesize(req: schemas.SynthesizeRequest):
        cfg = ModelConfig.toy(image_size=req.image_size)
        size_range = None
        if req.size_min is not None or req.size_max is not None:
            if req.size_min is None or req.size_max is None or req.size_min > req.size_max:
                raise InputError("size_min and size_max must be set together, min <= max")
            size_range = (req.size_min, req.size_max)
        generator = generate_synthetic_pl if req.kind == "pl" else generate_synthetic
        dataset = generator(req.n, cfg, seed=req.seed, size_range=size_range, split=req.split)
        manifest_path = write_dataset(dataset, req.out_dir)
        return schemas.SynthesizeResponse(
            manifest_path=str(manifest_path),
            kind=req.kind,
            num_samples=len(dataset.manifest.samples),
            num_images=len(dataset.images),
        )

    @app.post("/train", response_model=schemas.TrainResponse)
    def train(req: schemas.TrainRequest):
        model_cfg, train_cfg = load_config(req.config_path, force_toy=req.toy)
        if req.seed is not None:
            model_cfg = model_cfg.replace(seed=req.seed)
        manifest = load_manifest(req.data_path)
        images = {
            image_id: load_image(req.data_path, image_id)
            for image_id in manifest.image_ids
        }
        examples = examples_from_arrays(manifest, images)
        for ex in examples:
            _require_image_size(
                model_cfg, ex.sample.image_width, ex.sample.image_height,
                f"sample {ex.sample.image_id!r}",
            )
        model = build_model(model_cfg, build_vocabulary(manifest))
        record = train_model(
            model, examples, train_cfg, stop_acc=req.stop_at_acc
        )
        out_dir = Path(req.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        checkpoint_path = out_dir / CHECKPOINT_NAME
        save_checkpoint(model, checkpoint_path)
        record_path = out_dir / RUN_RECORD_NAME
        record.save(record_path)
        return schemas.TrainResponse(
            run_record_path=str(record_path),
            checkpoint_path=str(checkpoint_path),
            steps_run=record.steps_run,
            final_loss=record.step_losses[-1]["total"],
            train_acc50=record.eval_report.overall_acc50,
            wall_clock_seconds=record.wall_clock_seconds,
        )

    @app.post("/evaluate", response_model=schemas.EvaluateResponse)
    def evaluate(req: schemas.EvaluateRequest):
        model = load_checkpoint(req.checkpoint_path)
        manifest = load_manifest(req.data_path)
        images = {
            image_id: load_image(req.data_path, image_id)
            for image_id in set(manifest.image_ids)
        }
        for image_id, image in sorted(images.items()):
            _require_image_size(
                model.cfg, image.shape[1], image.shape[0], f"image {image_id!r}"
            )
        out_dir = Path(req.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path = out_dir / EVAL_REPORT_NAME
        if manifest.kind == "pl":
            report = evaluate_phrases(model, manifest, images)
            predictions_path = None
        else:
            examples = examples_from_arrays(manifest, images)
            report, records = evaluate_grounding(model, examples)
            predictions_path = out_dir / PREDICTIONS_NAME
            save_predictions(records, predictions_path)
        report.save(report_path)
        return schemas.EvaluateResponse(
            report_path=str(report_path),
            predictions_path=None if predictions_path is None else str(predictions_path),
            report=report.to_dict(),
        )

    @app.post("/verify", response_model=schemas.VerifyResponse)
    def verify(req: schemas.VerifyRequest):
        train_manifest = load_manifest(req.train_path)
        eval_manifest = load_manifest(req.eval_path)
        result = check_disjointness(train_manifest, eval_manifest)
        report_path = None
        if req.out_path:
            report_path = Path(req.out_path)
            report_path.parent.mkdir(parents=True, exist_ok=True)
            report_path.write_text(
                json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n",
                encoding="utf-8",
            )
        return schemas.VerifyResponse(
            passed=result.passed,
            shared_image_ids=list(result.shared_image_ids),
            category_overlaps=list(result.category_overlaps),
            report_path=None if report_path is None else str(report_path),
        )

    @app.post("/report", response_model=schemas.ReportResponse)
    def report(req: schemas.ReportRequest):
        files = render_report(req.in_path, req.out_dir)
        return schemas.ReportResponse(files=[str(f) for f in files])

    @app.post("/predict", response_model=schemas.PredictResponse)
    def predict(req: schemas.PredictRequest):
        model = load_checkpoint(req.checkpoint_path)
        image = _read_image(req.image_path)
        _require_image_size(model.cfg, image.shape[1], image.shape[0], "input image")
        with torch.no_grad():
            result = model(image, req.expression)
        box = result.top1_box(clip=True)
        score = float(result.output.final_scores[result.output.top1_index])
        return schemas.PredictResponse(
            bbox=list(box.as_tuple()), score=score, expression=req.expression
        )

    return app
