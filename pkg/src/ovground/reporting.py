"""Rendered artifacts for an evaluation run.

``render_report`` turns an evaluation report plus its prediction dump
into three deterministic files: a plain-text accuracy table, a scatter
of ground-truth box sizes colored by bucket, and a per-bucket bar
chart.  Reruns produce byte-identical text and pixel-identical images.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from ovground.errors import InputError
from ovground.metrics import BUCKETS, RECALL_KS, EvalReport

TABLE_NAME = "accuracy_table.txt"
SCATTER_NAME = "box_size_scatter.png"
BARS_NAME = "bucket_accuracy.png"

BUCKET_COLORS = {"small": "#4878cf", "middle": "#6acc65", "large": "#d65f5f"}

# Strip the writer's software tag so repeated renders are byte-identical.
_PNG_KWARGS = dict(dpi=120, metadata={"Software": None})


def accuracy_table_text(report: EvalReport) -> str:
    """Fixed-width accuracy table; stable across reruns byte for byte."""
    lines = ["Acc50 by ground-truth size bucket", ""]
    lines.append(f"{'bucket':<10}{'count':>8}{'correct':>10}{'acc50':>10}")
    for bucket in BUCKETS:
        count = getattr(report, f"{bucket}_count")
        correct = getattr(report, f"{bucket}_correct")
        lines.append(
            f"{bucket:<10}{count:>8}{correct:>10}{report.bucket_accuracy(bucket):>10.2f}"
        )
    lines.append(
        f"{'overall':<10}{report.total_count:>8}{report.total_correct:>10}"
        f"{report.overall_acc50:>10.2f}"
    )
    lines += ["", f"clip policy: {report.clip_policy}"]

    if report.base_phrases is not None or report.full_phrases is not None:
        lines += ["", "Phrase localization Recall@k (%)", ""]
        header = f"{'sentences':<14}{'phrases':>9}"
        for k in RECALL_KS:
            header += f"{f'R@{k}':>9}"
        lines.append(header)
        for prefix, label in (("base", "base-only"), ("full", "base+novel")):
            if getattr(report, f"{prefix}_phrases") is None:
                continue
            row = f"{label:<14}{getattr(report, f'{prefix}_phrases'):>9}"
            for k in RECALL_KS:
                row += f"{getattr(report, f'{prefix}_r{k}'):>9.2f}"
            lines.append(row)
    return "\n".join(lines) + "\n"


def render_size_scatter(records, path) -> None:
    """Ground-truth width/height scatter, one color per size bucket."""
    fig, ax = plt.subplots(figsize=(5.0, 5.0))
    for bucket in BUCKETS:
        widths = [r.gt_bbox.width for r in records if r.bucket == bucket]
        heights = [r.gt_bbox.height for r in records if r.bucket == bucket]
        ax.scatter(widths, heights, s=18, color=BUCKET_COLORS[bucket],
                   label=f"{bucket} ({len(widths)})", alpha=0.8)
    ax.set_xlabel("ground-truth width (px)")
    ax.set_ylabel("ground-truth height (px)")
    ax.set_title("Bounding-box size distribution")
    ax.legend(loc="upper right")
    ax.set_xlim(left=0)
    ax.set_ylim(bottom=0)
    fig.tight_layout()
    fig.savefig(path, **_PNG_KWARGS)
    plt.close(fig)


def render_bucket_bars(report: EvalReport, path) -> None:
    """Per-bucket sample counts next to correct counts."""
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    positions = range(len(BUCKETS))
    counts = [getattr(report, f"{b}_count") for b in BUCKETS]
    corrects = [getattr(report, f"{b}_correct") for b in BUCKETS]
    width = 0.38
    ax.bar([p - width / 2 for p in positions], counts, width,
           label="samples", color="#b0b0b0")
    ax.bar([p + width / 2 for p in positions], corrects, width,
           label="correct (IoU ≥ 0.5)",
           color=[BUCKET_COLORS[b] for b in BUCKETS])
    ax.set_xticks(list(positions))
    ax.set_xticklabels(BUCKETS)
    ax.set_ylabel("samples")
    ax.set_title(f"Acc50 per bucket (overall {report.overall_acc50:.1f}%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, **_PNG_KWARGS)
    plt.close(fig)


def resolve_eval_inputs(in_path) -> tuple:
    """Accept the eval output directory or the report file itself.

    Returns ``(report_path, predictions_path)``; the prediction dump is
    expected beside the report under its standard name.
    """
    in_path = Path(in_path)
    if in_path.is_dir():
        report_path = in_path / "eval_report.json"
    else:
        report_path = in_path
    if not report_path.exists():
        raise InputError(f"evaluation report not found: {report_path}")
    predictions_path = report_path.parent / "predictions.json"
    if not predictions_path.exists():
        raise InputError(f"prediction dump not found: {predictions_path}")
    return report_path, predictions_path


def render_report(in_path, out_dir) -> tuple:
    """Write the table and both plots; returns the created paths."""
    from ovground.training import load_predictions

    report_path, predictions_path = resolve_eval_inputs(in_path)
    report = EvalReport.load(report_path)
    records = load_predictions(predictions_path)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table_path = out_dir / TABLE_NAME
    table_path.write_text(accuracy_table_text(report), encoding="utf-8")
    scatter_path = out_dir / SCATTER_NAME
    render_size_scatter(records, scatter_path)
    bars_path = out_dir / BARS_NAME
    render_bucket_bars(report, bars_path)
    return (table_path, scatter_path, bars_path)
