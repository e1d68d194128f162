"""Evaluation protocol: IoU, size-bucketed accuracy, and phrase recall.

Grounding accuracy (Acc50) counts a prediction correct when its IoU with
the ground truth reaches 0.5; the threshold is inclusive.  Accuracy is
additionally reported per ground-truth size bucket: small (area below
32 x 32), large (area above 96 x 96), middle otherwise, with boundary
areas assigned to middle.  Buckets use annotation-space pixels.

Phrase localization reports Recall@k: a phrase counts as a hit at k when
any of its k highest-ranked boxes reaches IoU 0.5 with any box of its
coreference chain.  Chains without boxes (scenes/events) are excluded
from the denominator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from ovground.boxes import BBox
from ovground.errors import InputError

SMALL_AREA = 32.0 * 32.0
LARGE_AREA = 96.0 * 96.0
IOU_THRESHOLD = 0.5
BUCKETS = ("small", "middle", "large")
RECALL_KS = (1, 5, 10)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; symmetric, in [0, 1]; 0 when both degenerate."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, ix) * max(0.0, iy)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def size_bucket(gt: BBox) -> str:
    """Bucket a ground-truth box by area; boundaries land in middle."""
    area = gt.area
    if area < SMALL_AREA:
        return "small"
    if area > LARGE_AREA:
        return "large"
    return "middle"


@dataclass(frozen=True)
class EvalReport:
    """Flat, JSON-serializable evaluation summary.

    Bucket fields cover the grounding protocol; ``base_*``/``full_*``
    recall fields cover phrase localization (base-only vs base+novel
    sentences) and stay ``None`` for grounding-only runs.  ``overall_acc50``
    is total_correct/total_count over all samples, never a mean of bucket
    accuracies.
    """

    clip_policy: str = "clip"
    small_count: int = 0
    small_correct: int = 0
    middle_count: int = 0
    middle_correct: int = 0
    large_count: int = 0
    large_correct: int = 0
    total_count: int = 0
    total_correct: int = 0
    base_phrases: int | None = None
    base_r1: float | None = None
    base_r5: float | None = None
    base_r10: float | None = None
    full_phrases: int | None = None
    full_r1: float | None = None
    full_r5: float | None = None
    full_r10: float | None = None

    def bucket_accuracy(self, bucket: str) -> float:
        count = getattr(self, f"{bucket}_count")
        correct = getattr(self, f"{bucket}_correct")
        return 100.0 * correct / count if count else 0.0

    @property
    def overall_acc50(self) -> float:
        return 100.0 * self.total_correct / self.total_count if self.total_count else 0.0

    def to_dict(self) -> dict:
        doc = {
            "clip_policy": self.clip_policy,
            "total_count": self.total_count,
            "total_correct": self.total_correct,
            "overall_acc50": self.overall_acc50,
        }
        for bucket in BUCKETS:
            doc[f"{bucket}_count"] = getattr(self, f"{bucket}_count")
            doc[f"{bucket}_correct"] = getattr(self, f"{bucket}_correct")
            doc[f"{bucket}_acc"] = self.bucket_accuracy(bucket)
        for prefix in ("base", "full"):
            if getattr(self, f"{prefix}_phrases") is not None:
                doc[f"{prefix}_phrases"] = getattr(self, f"{prefix}_phrases")
                for k in RECALL_KS:
                    doc[f"{prefix}_r{k}"] = getattr(self, f"{prefix}_r{k}")
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "EvalReport":
        kwargs = {}
        for name in (
            "clip_policy",
            "small_count", "small_correct", "middle_count", "middle_correct",
            "large_count", "large_correct", "total_count", "total_correct",
            "base_phrases", "base_r1", "base_r5", "base_r10",
            "full_phrases", "full_r1", "full_r5", "full_r10",
        ):
            if name in doc:
                kwargs[name] = doc[name]
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def acc50(preds: list, gts: list, clip_policy: str = "clip") -> EvalReport:
    """Score predicted boxes against ground truths, bucketed by gt size.

    ``preds`` are assumed already clipped per the stated policy; this
    function only records the flag.
    """
    if len(preds) != len(gts):
        raise InputError(f"length mismatch: {len(preds)} predictions vs {len(gts)} targets")
    counts = {b: 0 for b in BUCKETS}
    corrects = {b: 0 for b in BUCKETS}
    total_correct = 0
    for pred, gt in zip(preds, gts):
        bucket = size_bucket(gt)
        counts[bucket] += 1
        if iou(pred, gt) >= IOU_THRESHOLD:
            corrects[bucket] += 1
            total_correct += 1
    return EvalReport(
        clip_policy=clip_policy,
        small_count=counts["small"],
        small_correct=corrects["small"],
        middle_count=counts["middle"],
        middle_correct=corrects["middle"],
        large_count=counts["large"],
        large_correct=corrects["large"],
        total_count=len(preds),
        total_correct=total_correct,
    )


def recall_at_k(
    ranked_boxes_per_phrase: list,
    gt_boxes_per_phrase: list,
    ks: tuple = RECALL_KS,
) -> dict:
    """Recall@k percentages over phrases with at least one ground-truth box.

    A phrase is a hit at k when any of its top-k ranked boxes reaches IoU
    0.5 with any box of its chain.  Boxless chains never enter the
    denominator; an all-boxless input yields 0.0 across the board.
    """
    if len(ranked_boxes_per_phrase) != len(gt_boxes_per_phrase):
        raise InputError(
            f"length mismatch: {len(ranked_boxes_per_phrase)} ranked lists vs "
            f"{len(gt_boxes_per_phrase)} chains"
        )
    hits = {k: 0 for k in ks}
    total = 0
    for ranked, gt_boxes in zip(ranked_boxes_per_phrase, gt_boxes_per_phrase):
        if not gt_boxes:
            continue
        total += 1
        first_hit = None
        for rank, pred in enumerate(ranked, start=1):
            if any(iou(pred, gt) >= IOU_THRESHOLD for gt in gt_boxes):
                first_hit = rank
                break
        if first_hit is None:
            continue
        for k in ks:
            if first_hit <= k:
                hits[k] += 1
    if total == 0:
        return {k: 0.0 for k in ks}
    return {k: 100.0 * hits[k] / total for k in ks}
