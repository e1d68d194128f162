"""Training objective: L1 + GIoU box regression and contrastive alignment.

The grounding setting has exactly one ground-truth box per sample, so
positive-set assignment reduces to the single query minimizing the
weighted box-matching cost (ties go to the lowest index).  The
contrastive term softmaxes raw dot products between the pooled text
embedding and all query embeddings at temperature tau, as the
text-to-object direction; the total is the lambda-weighted sum of the
three components.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from ovground.boxes import BBox, NormBox
from ovground.config import ModelConfig
from ovground.decoder import DecoderOutput
from ovground.errors import AnnotationError, ConfigError, MatchingError
from ovground.model import GroundingModel, GroundingResult


def _norm_to_tensor(box, dtype=torch.float64) -> torch.Tensor:
    if isinstance(box, NormBox):
        return torch.tensor([box.cx, box.cy, box.w, box.h], dtype=dtype)
    return box


def _corner_to_tensor(box, dtype=torch.float64) -> torch.Tensor:
    if isinstance(box, BBox):
        return torch.tensor([box.x1, box.y1, box.x2, box.y2], dtype=dtype)
    return box


def cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack(
        [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], dim=-1
    )


def l1_loss(pred, gt) -> torch.Tensor:
    """Mean absolute coordinate difference; reduces the last axis only."""
    return (_norm_to_tensor(pred) - _norm_to_tensor(gt)).abs().mean(dim=-1)


def giou_loss(pred, gt) -> torch.Tensor:
    """1 - GIoU on corner-form boxes (BBox or (..., 4) xyxy tensors).

    Ground-truth boxes must have positive area; degenerate predictions
    are fine and simply score badly.
    """
    p = _corner_to_tensor(pred)
    g = _corner_to_tensor(gt)
    px1, py1, px2, py2 = p.unbind(-1)
    gx1, gy1, gx2, gy2 = g.unbind(-1)
    g_area = (gx2 - gx1) * (gy2 - gy1)
    if bool((g_area.detach() <= 0).any()):
        raise AnnotationError("ground-truth box must have positive area")
    p_area = (px2 - px1) * (py2 - py1)
    inter_w = (torch.minimum(px2, gx2) - torch.maximum(px1, gx1)).clamp_min(0.0)
    inter_h = (torch.minimum(py2, gy2) - torch.maximum(py1, gy1)).clamp_min(0.0)
    inter = inter_w * inter_h
    union = p_area + g_area - inter
    hull_w = torch.maximum(px2, gx2) - torch.minimum(px1, gx1)
    hull_h = torch.maximum(py2, gy2) - torch.minimum(py1, gy1)
    hull = hull_w * hull_h
    giou = inter / union - (hull - union) / hull
    return 1.0 - giou


@dataclass(frozen=True)
class MatchResult:
    """Positive query indices plus the full per-query matching cost."""

    positive_indices: tuple
    costs: torch.Tensor = field(compare=False)

    def __post_init__(self):
        if not self.positive_indices:
            raise MatchingError("positive set is empty")
        k = self.costs.shape[0]
        if any(i < 0 or i >= k for i in self.positive_indices):
            raise MatchingError(f"positive indices out of range for {k} queries")


def assign_positives(output: DecoderOutput, gt: NormBox, cfg: ModelConfig) -> MatchResult:
    """Pick the final-layer query minimizing lambda_l1*L1 + lambda_giou*GIoU."""
    boxes = output.final_boxes
    gt_t = _norm_to_tensor(gt, dtype=boxes.dtype)
    costs = cfg.lambda_l1 * l1_loss(boxes, gt_t) + cfg.lambda_giou * giou_loss(
        cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(gt_t)
    )
    flat = costs.detach().tolist()
    winner = min(range(len(flat)), key=lambda i: (flat[i], i))
    return MatchResult(positive_indices=(winner,), costs=costs)


def contrastive_loss(text_emb: torch.Tensor, objects: torch.Tensor, positives,
                     tau: float) -> torch.Tensor:
    """Mean over positives of -log softmax(t . o_j / tau) over all objects."""
    if tau <= 0.0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    positives = tuple(positives)
    if not positives:
        raise MatchingError("contrastive loss needs a nonempty positive set")
    n = objects.shape[0]
    if any(i < 0 or i >= n for i in positives):
        raise MatchingError(f"positive indices out of range for {n} objects")
    logits = objects @ text_emb / tau
    lse = torch.logsumexp(logits, dim=0)
    return lse - logits[list(positives)].mean()


def total_loss(l_giou, l_l1, l_cts, cfg: ModelConfig):
    """lambda_giou * GIoU + lambda_l1 * L1 + lambda_cts * contrastive."""
    return cfg.lambda_giou * l_giou + cfg.lambda_l1 * l_l1 + cfg.lambda_cts * l_cts


def _layer_terms(model, result, layer, gt):
    output = result.output
    boxes = output.boxes[layer]
    queries = output.query_states[layer]
    gt_t = _norm_to_tensor(gt, dtype=boxes.dtype)
    view = DecoderOutput(
        boxes=boxes.unsqueeze(0), scores=output.scores[layer].unsqueeze(0),
        query_states=queries.unsqueeze(0), image_size=output.image_size,
    )
    match = assign_positives(view, gt, model.cfg)
    pos = list(match.positive_indices)
    l1 = l1_loss(boxes[pos], gt_t).mean()
    giou = giou_loss(cxcywh_to_xyxy(boxes[pos]), cxcywh_to_xyxy(gt_t)).mean()
    cts = contrastive_loss(
        model.text_embedding(result.fused), queries, pos, model.cfg.temperature
    )
    return l1, giou, cts


def sample_loss(model: GroundingModel, result: GroundingResult, gt: NormBox) -> dict:
    """Composite loss for one sample; aux mode sums over all decoder layers."""
    num_layers = result.output.boxes.shape[0]
    layers = range(num_layers) if model.cfg.aux_loss else [num_layers - 1]
    l1 = giou = cts = 0.0
    for layer in layers:
        layer_l1, layer_giou, layer_cts = _layer_terms(model, result, layer, gt)
        l1 = l1 + layer_l1
        giou = giou + layer_giou
        cts = cts + layer_cts
    return {
        "l1": l1,
        "giou": giou,
        "cts": cts,
        "total": total_loss(giou, l1, cts, model.cfg),
    }
