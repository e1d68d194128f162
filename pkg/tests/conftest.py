"""Shared fixtures: a tiny on-disk workspace built through the CLI."""

import pytest
import torch

from ovground.cli import main

# surface warn-once torch warnings at every site so suppressed duplicates
# cannot hide behind whichever test happens to run first
torch.set_warn_always(True)

TINY_CONFIG = """\
# desk-scale profile, shrunk further for fast tests
toy = true
feature_dim = 8
num_heads = 2
top_k = 4
seed = 5
max_steps = 2
batch_size = 2
learning_rate = 0.001
"""


@pytest.fixture(scope="session")
def tiny_workspace(tmp_path_factory):
    """Synthetic dataset, a 2-step checkpoint, and one evaluation run.

    Built once per session through the real CLI so every artifact has
    the exact layout the commands produce.
    """
    root = tmp_path_factory.mktemp("workspace")
    paths = {
        "root": root,
        "config": root / "toy.cfg",
        "data": root / "data",
        "manifest": root / "data" / "manifest.json",
        "eval_data": root / "eval_data",
        "eval_manifest": root / "eval_data" / "manifest.json",
        "run": root / "run",
        "checkpoint": root / "run" / "checkpoint.npz",
        "run_record": root / "run" / "run_record.json",
        "eval_out": root / "eval_out",
        "eval_report": root / "eval_out" / "eval_report.json",
        "predictions": root / "eval_out" / "predictions.json",
    }
    paths["config"].write_text(TINY_CONFIG, encoding="utf-8")
    assert main(["synth", "--out", str(paths["data"]), "--n", "3", "--seed", "3"]) == 0
    assert main([
        "synth", "--out", str(paths["eval_data"]), "--n", "2", "--seed", "8",
        "--split", "eval",
    ]) == 0
    assert main([
        "train", "--config", str(paths["config"]),
        "--data", str(paths["manifest"]), "--out", str(paths["run"]),
    ]) == 0
    assert main([
        "eval", "--ckpt", str(paths["checkpoint"]),
        "--data", str(paths["manifest"]), "--out", str(paths["eval_out"]),
    ]) == 0
    return paths
