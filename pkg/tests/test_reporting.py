"""Report rendering: table formatting and input resolution."""

import pytest

from ovground.boxes import BBox
from ovground.errors import InputError
from ovground.metrics import EvalReport
from ovground.reporting import (
    accuracy_table_text,
    render_bucket_bars,
    render_size_scatter,
    resolve_eval_inputs,
)
from ovground.training import PredictionRecord


def make_records():
    return (
        PredictionRecord("a", BBox(0, 0, 20, 20), BBox(0, 0, 20, 20), 1.0, "small", True),
        PredictionRecord("b", BBox(0, 0, 50, 50), BBox(0, 0, 60, 60), 0.69, "middle", True),
        PredictionRecord("c", BBox(0, 0, 10, 10), BBox(0, 0, 100, 100), 0.01, "large", False),
    )


class TestAccuracyTable:
    def test_counts_and_percentages(self):
        report = EvalReport(
            small_count=4, small_correct=3, middle_count=5, middle_correct=5,
            large_count=3, large_correct=2, total_count=12, total_correct=10,
        )
        text = accuracy_table_text(report)
        lines = text.splitlines()
        assert "Acc50 by ground-truth size bucket" in lines[0]
        assert any("small" in l and "75.00" in l for l in lines)
        assert any("middle" in l and "100.00" in l for l in lines)
        assert any("overall" in l and "83.33" in l for l in lines)
        assert "clip policy: clip" in text
        assert "Recall" not in text

    def test_zero_counts_render(self):
        text = accuracy_table_text(EvalReport())
        assert "overall" in text
        assert "0.00" in text

    def test_recall_section_when_present(self):
        report = EvalReport(
            base_phrases=10, base_r1=40.0, base_r5=70.0, base_r10=90.0,
            full_phrases=20, full_r1=35.0, full_r5=65.0, full_r10=85.0,
        )
        text = accuracy_table_text(report)
        assert "Recall@k" in text
        assert any("base-only" in l and "40.00" in l for l in text.splitlines())
        assert any("base+novel" in l and "85.00" in l for l in text.splitlines())

    def test_stable_output(self):
        report = EvalReport(total_count=3, total_correct=1, small_count=3, small_correct=1)
        assert accuracy_table_text(report) == accuracy_table_text(report)


class TestPlots:
    def test_scatter_handles_empty_records(self, tmp_path):
        path = tmp_path / "scatter.png"
        render_size_scatter((), path)
        assert path.stat().st_size > 0

    def test_bars_handle_zero_report(self, tmp_path):
        path = tmp_path / "bars.png"
        render_bucket_bars(EvalReport(), path)
        assert path.stat().st_size > 0

    def test_scatter_with_records(self, tmp_path):
        path = tmp_path / "scatter.png"
        render_size_scatter(make_records(), path)
        assert path.stat().st_size > 0


class TestResolveInputs:
    def test_directory_resolution(self, tiny_workspace):
        report_path, predictions_path = resolve_eval_inputs(tiny_workspace["eval_out"])
        assert report_path == tiny_workspace["eval_report"]
        assert predictions_path == tiny_workspace["predictions"]

    def test_file_resolution(self, tiny_workspace):
        report_path, _ = resolve_eval_inputs(tiny_workspace["eval_report"])
        assert report_path == tiny_workspace["eval_report"]

    def test_missing_report_rejected(self, tmp_path):
        with pytest.raises(InputError, match="report not found"):
            resolve_eval_inputs(tmp_path / "nope")

    def test_missing_dump_rejected(self, tmp_path):
        (tmp_path / "eval_report.json").write_text(EvalReport().to_dict().__str__())
        with pytest.raises(InputError, match="prediction dump"):
            resolve_eval_inputs(tmp_path)
