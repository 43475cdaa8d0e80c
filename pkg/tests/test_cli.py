from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import pytest

from scenediff import shape as S
from scenediff.cli import main
from test_train import TINY


def _tree(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scene.json").write_text(json.dumps({"max_objects": 3}))
    assert main(["dataset", "--out", str(root / "data"), "--count", "3", "--seed", "5",
                 "--scene-config", str(root / "scene.json")]) == 0
    (root / "tiny.json").write_text(json.dumps(TINY))
    assert main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--config",
                 str(root / "tiny.json")]) == 0
    return root


def test_dataset_rebuild_is_byte_identical(workspace, tmp_path):
    assert main(["dataset", "--out", str(tmp_path / "again"), "--count", "3", "--seed", "5",
                 "--scene-config", str(workspace / "scene.json")]) == 0
    assert _tree(tmp_path / "again") == _tree(workspace / "data")


def test_dataset_refuses_overwrite(workspace, capsys):
    assert main(["dataset", "--out", str(workspace / "data"), "--count", "3"]) == 2
    assert "error" in capsys.readouterr().err


def test_dataset_invalid_field(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"max_objectz": 3}))
    assert main(["dataset", "--out", str(tmp_path / "d"), "--scene-config", str(tmp_path / "bad.json")]) == 2
    assert "max_objectz" in capsys.readouterr().err


def test_train_invalid_config_field(workspace, tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"lr": -1.0}))
    assert main(["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "r"), "--config",
                 str(tmp_path / "bad.json")]) == 2
    assert "lr" in capsys.readouterr().err


def test_run_manifest(workspace):
    run = json.loads((workspace / "run" / "run.json").read_text())
    for key in ("source_revision", "config_hash", "metrics", "checkpoint", "dataset_config_hash"):
        assert run[key]
    assert (workspace / "run" / run["metrics"]).exists()
    assert (workspace / "run" / run["checkpoint"]).exists()


def test_sample_and_eval(workspace, capsys):
    out = workspace / "samples"
    assert main(["sample", "--run", str(workspace / "run"), "--data", str(workspace / "data"), "--out", str(out),
                 "--steps", "3"]) == 0
    rep = json.loads((out / "predictions.json").read_text())
    entries = [e for v in rep["scenes"].values() for e in v]
    assert entries and {"offset", "distance", "size", "yaw", "mesh"} <= set(entries[0])
    for e in entries:
        if e["mesh"]:
            assert not S.read_obj(out / e["mesh"]).is_empty
    assert main(["eval", "--run", str(workspace / "run"), "--data", str(workspace / "data"), "--predictions",
                 str(out / "predictions.json"), "--out", str(workspace / "eval.csv"), "--no-shape"]) == 0
    assert "iou3d=" in capsys.readouterr().out
    rows = list(csv.DictReader(open(workspace / "eval.csv")))
    assert rows[-1]["class"] == "mean"


def test_eval_excludes_missing_scenes(workspace, tmp_path, caplog):
    pred = workspace / "samples" / "predictions.json"
    if not pred.exists():
        pytest.skip("sample step did not run")
    rep = json.loads(pred.read_text())
    dropped = sorted(rep["scenes"])[0]
    del rep["scenes"][dropped]
    (tmp_path / "p.json").write_text(json.dumps(rep))
    with caplog.at_level(logging.WARNING, logger="scenediff"):
        assert main(["eval", "--run", str(workspace / "run"), "--data", str(workspace / "data"), "--predictions",
                     str(tmp_path / "p.json"), "--out", str(tmp_path / "e.csv"), "--no-shape"]) == 0
    assert "excluding 1 scene(s)" in caplog.text and dropped in caplog.text


def test_sample_width_mismatch(workspace, tmp_path, capsys):
    (tmp_path / "wide.json").write_text(json.dumps({**TINY, "shape_width": 16}))
    assert main(["sample", "--run", str(workspace / "run"), "--data", str(workspace / "data"), "--out",
                 str(tmp_path / "s"), "--config", str(tmp_path / "wide.json")]) == 2
    assert "shape_width: checkpoint 8 vs config 16" in capsys.readouterr().err
