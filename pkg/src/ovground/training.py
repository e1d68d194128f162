"""Deterministic training loop, evaluation drivers, and run records.

Training is plain AdamW over the composite loss, with the batch stream
drawn from a generator seeded by the model seed, so two runs with the
same config and seed replay the exact same per-step losses.  A
:class:`RunRecord` captures everything needed to audit a run: config
snapshot, seed, the per-step loss curve, the final evaluation report,
and wall-clock time.

Evaluation covers both protocols: grounding accuracy bucketed by
ground-truth size (predictions clipped to the image before IoU), and
phrase-localization Recall@k, split into base-only and base+novel
sentences.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ovground.backbone import Vocabulary
from ovground.boxes import BBox, bbox_to_norm, norm_to_bbox
from ovground.config import TrainConfig, seeded_rng
from ovground.data import DatasetManifest, load_image, load_manifest
from ovground.errors import InputError
from ovground.losses import assign_positives, sample_loss, total_loss
from ovground.metrics import (
    IOU_THRESHOLD,
    RECALL_KS,
    EvalReport,
    acc50,
    iou,
    recall_at_k,
    size_bucket,
)
from ovground.model import GroundingModel
from ovground.samples import GroundingSample, PLSample

RECORD_VERSION = 1


# ---------------------------------------------------------------------------
# training examples


@dataclass(frozen=True)
class TrainingExample:
    """One grounding sample with its pixels and normalized target."""

    image: np.ndarray
    sample: GroundingSample

    @property
    def target_norm(self):
        s = self.sample
        return bbox_to_norm(s.target, s.image_width, s.image_height)


def build_vocabulary(manifest: DatasetManifest) -> Vocabulary:
    """Vocabulary over every expression (or sentence) plus category names."""
    texts = []
    for s in manifest.samples:
        texts.append(s.expression if isinstance(s, GroundingSample) else s.sentence)
    texts.extend(manifest.registry.base)
    texts.extend(manifest.registry.novel)
    return Vocabulary.build(texts)


def examples_from_arrays(manifest: DatasetManifest, images: dict) -> tuple:
    """Pair grounding samples with in-memory images keyed by image id."""
    examples = []
    for s in manifest.samples:
        if not isinstance(s, GroundingSample):
            raise InputError("training examples require a grounding manifest")
        if s.image_id not in images:
            raise InputError(f"no image provided for sample {s.image_id!r}")
        examples.append(TrainingExample(image=images[s.image_id], sample=s))
    return tuple(examples)


def load_examples(manifest_path) -> tuple:
    """Load a grounding manifest plus its PNGs from one directory.

    Returns ``(manifest, examples)``.
    """
    manifest = load_manifest(manifest_path)
    images = {
        image_id: load_image(manifest_path, image_id)
        for image_id in manifest.image_ids
    }
    return manifest, examples_from_arrays(manifest, images)


# ---------------------------------------------------------------------------
# run records


@dataclass(frozen=True)
class RunRecord:
    """Serializable audit trail of one training run.

    ``step_losses`` holds one entry per optimizer step; replaying the
    same config and seed reproduces it bit-for-bit (the recorded values
    are exact float64 readouts of the step losses).
    """

    model_config: dict
    train_config: dict
    seed: int
    step_losses: tuple
    eval_report: EvalReport | None = None
    wall_clock_seconds: float = 0.0
    version: int = RECORD_VERSION

    @property
    def steps_run(self) -> int:
        return len(self.step_losses)

    @property
    def totals(self) -> tuple:
        return tuple(entry["total"] for entry in self.step_losses)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "model_config": dict(self.model_config),
            "train_config": dict(self.train_config),
            "seed": self.seed,
            "step_losses": [dict(entry) for entry in self.step_losses],
            "eval_report": None if self.eval_report is None else self.eval_report.to_dict(),
            "wall_clock_seconds": self.wall_clock_seconds,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "RunRecord":
        report = doc.get("eval_report")
        return cls(
            model_config=doc["model_config"],
            train_config=doc["train_config"],
            seed=doc["seed"],
            step_losses=tuple(doc["step_losses"]),
            eval_report=None if report is None else EvalReport.from_dict(report),
            wall_clock_seconds=doc.get("wall_clock_seconds", 0.0),
            version=doc.get("version", RECORD_VERSION),
        )

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# loss over a batch


def _symmetric_term(model: GroundingModel, results, gts) -> torch.Tensor:
    """Object-to-text direction over the batch: each sample's matched query
    embedding must prefer its own sentence among the batch's sentences."""
    texts = torch.stack([model.text_embedding(r.fused) for r in results])
    matched = []
    for result, gt in zip(results, gts):
        match = assign_positives(result.output, gt, model.cfg)
        matched.append(result.output.final_queries[match.positive_indices[0]])
    logits = torch.stack(matched) @ texts.T / model.cfg.temperature
    return (torch.logsumexp(logits, dim=1) - logits.diagonal()).mean()


def batch_loss(model: GroundingModel, results, gts) -> dict:
    """Mean composite loss over a batch of forward results.

    With ``symmetric_contrastive`` enabled and more than one sample, the
    contrastive term averages the per-sample text-to-object losses with
    a batch-level object-to-text direction.
    """
    results = list(results)
    gts = list(gts)
    if not results or len(results) != len(gts):
        raise InputError(
            f"batch needs matching results and targets, got {len(results)} vs {len(gts)}"
        )
    terms = [sample_loss(model, r, g) for r, g in zip(results, gts)]
    n = len(terms)
    l1 = sum(t["l1"] for t in terms) / n
    giou = sum(t["giou"] for t in terms) / n
    cts = sum(t["cts"] for t in terms) / n
    if model.cfg.symmetric_contrastive and n > 1:
        cts = 0.5 * (cts + _symmetric_term(model, results, gts))
    return {
        "l1": l1,
        "giou": giou,
        "cts": cts,
        "total": total_loss(giou, l1, cts, model.cfg),
    }


# ---------------------------------------------------------------------------
# the loop


def _index_stream(count: int, rng):
    """Endless sample indices, reshuffled every epoch."""
    while True:
        for i in rng.permutation(count):
            yield int(i)


def build_optimizer(model: GroundingModel, train_cfg: TrainConfig):
    return torch.optim.AdamW(
        model.parameters(),
        lr=train_cfg.learning_rate,
        weight_decay=train_cfg.weight_decay,
    )


def train_model(
    model: GroundingModel,
    examples,
    train_cfg: TrainConfig,
    stop_acc: float | None = None,
    eval_every: int = 25,
    progress=None,
) -> RunRecord:
    """Optimize the composite loss; returns the full run record.

    ``stop_acc`` enables early stopping: every ``eval_every`` steps the
    training set is scored and the loop ends once overall Acc50 reaches
    the target.  The final evaluation report always covers the training
    set as it stands at the last step.
    """
    examples = tuple(examples)
    if not examples:
        raise InputError("cannot train on an empty example list")
    started = time.monotonic()
    optimizer = build_optimizer(model, train_cfg)
    stream = _index_stream(len(examples), seeded_rng(model.cfg.seed, "batches"))
    gts = [ex.target_norm for ex in examples]

    step_losses = []
    for step in range(train_cfg.max_steps):
        batch = [next(stream) for _ in range(train_cfg.batch_size)]
        results = [model(examples[i].image, examples[i].sample.expression) for i in batch]
        losses = batch_loss(model, results, [gts[i] for i in batch])
        optimizer.zero_grad()
        losses["total"].backward()
        optimizer.step()
        entry = {
            "step": step,
            "total": float(losses["total"].detach()),
            "l1": float(losses["l1"].detach()),
            "giou": float(losses["giou"].detach()),
            "cts": float(losses["cts"].detach()),
        }
        step_losses.append(entry)
        if progress is not None:
            progress(entry)
        if (
            stop_acc is not None
            and (step + 1) % eval_every == 0
            and evaluate_grounding(model, examples)[0].overall_acc50 >= stop_acc
        ):
            break

    report, _ = evaluate_grounding(model, examples)
    return RunRecord(
        model_config=model.cfg.to_dict(),
        train_config=train_cfg.to_dict(),
        seed=model.cfg.seed,
        step_losses=tuple(step_losses),
        eval_report=report,
        wall_clock_seconds=time.monotonic() - started,
    )


# ---------------------------------------------------------------------------
# evaluation: grounding


@dataclass(frozen=True)
class PredictionRecord:
    """One scored prediction, as written to the evaluation dump."""

    image_id: str
    pred_bbox: BBox
    gt_bbox: BBox
    iou: float
    bucket: str
    correct: bool

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "pred_bbox": list(self.pred_bbox.as_tuple()),
            "gt_bbox": list(self.gt_bbox.as_tuple()),
            "iou": self.iou,
            "bucket": self.bucket,
            "correct": self.correct,
        }


def predict_example(model: GroundingModel, example: TrainingExample) -> BBox:
    """Top-1 box in annotation pixels, clipped to the image."""
    with torch.no_grad():
        result = model(example.image, example.sample.expression)
    norm = result.output.layer_norm_boxes(-1)[result.output.top1_index]
    s = example.sample
    return norm_to_bbox(norm, s.image_width, s.image_height, clip=True)


def evaluate_grounding(model: GroundingModel, examples) -> tuple:
    """Score every example; returns ``(EvalReport, prediction records)``."""
    examples = tuple(examples)
    preds, records = [], []
    for ex in examples:
        pred = predict_example(model, ex)
        gt = ex.sample.target
        value = iou(pred, gt)
        preds.append(pred)
        records.append(
            PredictionRecord(
                image_id=ex.sample.image_id,
                pred_bbox=pred,
                gt_bbox=gt,
                iou=value,
                bucket=size_bucket(gt),
                correct=value >= IOU_THRESHOLD,
            )
        )
    report = acc50(preds, [ex.sample.target for ex in examples])
    return report, tuple(records)


def save_predictions(records, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps([r.to_dict() for r in records], indent=2) + "\n",
        encoding="utf-8",
    )


def load_predictions(path) -> tuple:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    records = []
    for raw in doc:
        for key in ("image_id", "pred_bbox", "iou", "bucket", "correct"):
            if key not in raw:
                raise InputError(f"prediction record missing field {key!r}")
        records.append(
            PredictionRecord(
                image_id=raw["image_id"],
                pred_bbox=BBox(*raw["pred_bbox"]),
                gt_bbox=BBox(*raw.get("gt_bbox", raw["pred_bbox"])),
                iou=raw["iou"],
                bucket=raw["bucket"],
                correct=raw["correct"],
            )
        )
    return tuple(records)


# ---------------------------------------------------------------------------
# evaluation: phrase localization


def ranked_boxes(model: GroundingModel, image, phrase: str, image_width, image_height):
    """All k predicted boxes for one phrase, best alignment first."""
    with torch.no_grad():
        result = model(image, phrase)
    order = torch.argsort(result.output.final_scores, descending=True, stable=True)
    norms = result.output.layer_norm_boxes(-1)
    return [
        norm_to_bbox(norms[int(i)], image_width, image_height, clip=True) for i in order
    ]


def evaluate_phrases(model: GroundingModel, manifest: DatasetManifest, images: dict) -> EvalReport:
    """Recall@k over every phrase chunk, split by sentence kind.

    Base-only sentences feed the ``base_*`` fields, base+novel sentences
    the ``full_*`` fields.  Phrases whose chain has no boxes are skipped
    by the metric.
    """
    groups = {False: ([], []), True: ([], [])}
    for s in manifest.samples:
        if not isinstance(s, PLSample):
            raise InputError("phrase evaluation requires a phrase-localization manifest")
        if s.image_id not in images:
            raise InputError(f"no image provided for sample {s.image_id!r}")
        image = images[s.image_id]
        height, width = int(image.shape[0]), int(image.shape[1])
        ranked_lists, gt_lists = groups[s.uses_novel]
        for chunk in s.chunks:
            gt_boxes = s.chains[chunk.chain]
            if not gt_boxes:
                continue
            ranked_lists.append(
                ranked_boxes(model, image, s.phrase_text(chunk), width, height)
            )
            gt_lists.append(list(gt_boxes))
    fields = {}
    for uses_novel, prefix in ((False, "base"), (True, "full")):
        ranked_lists, gt_lists = groups[uses_novel]
        recalls = recall_at_k(ranked_lists, gt_lists, RECALL_KS)
        fields[f"{prefix}_phrases"] = len(gt_lists)
        for k in RECALL_KS:
            fields[f"{prefix}_r{k}"] = recalls[k]
    return EvalReport(**fields)
