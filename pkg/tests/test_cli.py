import json
import subprocess
import sys

import pytest

from boardembed.cli import run_command


def _run(*argv):
    return run_command([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert _run("gen", "--boards", 12, "--classes", 5, "--dim", 16, "--seed", 3,
                "--out", data) == 0
    assert _run("split", "--data", data, "--folds", 3, "--seed", 3,
                "--out", root / "split.json") == 0
    return root


def test_gen_writes_boards_and_manifest(tmp_path):
    out = tmp_path / "data"
    assert _run("gen", "--boards", 60, "--classes", 12, "--dim", 64, "--seed", 1,
                "--out", out) == 0
    assert len(list(out.glob("board*.json"))) == 60
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 1 and len(manifest["artifacts"]["boards"]) == 60


def test_gen_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert _run("gen", "--boards", 4, "--seed", 9, "--out", tmp_path / name) == 0
    for f in (tmp_path / "a").glob("board*.json"):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_usage_errors_exit_2(tmp_path, capsys):
    assert _run("frobnicate") == 2
    assert _run("gen", "--bogus", 1, "--out", tmp_path) == 2
    assert _run("split", "--data", tmp_path / "missing", "--out", tmp_path / "s.json") == 2
    err = capsys.readouterr().err
    assert "missing" in err


def test_runtime_error_exits_1(tmp_path, capsys):
    assert _run("gen", "--classes", 30, "--out", tmp_path / "d") == 1
    assert len(capsys.readouterr().err.strip().splitlines()) == 1


def test_gradcheck_exit_code(capsys):
    assert _run("gradcheck", "--dim", 16, "--nodes", 6, "--seed", 0) == 0
    assert "max relative error" in capsys.readouterr().out


def test_train_eval_predict(workspace):
    ckpt = workspace / "model.json"
    argv = ["train", "--data", workspace / "data", "--split", workspace / "split.json",
            "--fold", 0, "--epochs", 2, "--lr", 1e-3, "--seed", 1, "--out", ckpt]
    assert _run(*argv) == 0
    for suffix in (".best.json", ".metrics.csv", ".curves.png", ".manifest.json"):
        assert (workspace / f"model{suffix}").exists()
    first = {p: (workspace / p).read_bytes() for p in ("model.json", "model.metrics.csv")}
    assert _run(*argv) == 0
    assert all((workspace / p).read_bytes() == b for p, b in first.items())
    assert (workspace / "model.metrics.csv").read_text().splitlines()[0] == \
        "epoch,loss,eval_top1,lr"

    report = workspace / "clf.json"
    assert _run("eval", "--data", workspace / "data", "--split", workspace / "split.json",
                "--model", ckpt, "--mode", "classification", "--out", report) == 0
    doc = json.loads(report.read_text())
    assert 0 <= doc["top1"] <= doc["top5"] <= 1

    pipe = workspace / "pipe.json"
    assert _run("eval", "--data", workspace / "data", "--split", workspace / "split.json",
                "--model", ckpt, "--mode", "pipeline", "--templates", "centroid",
                "--out", pipe) == 0
    assert 0 <= json.loads(pipe.read_text())["mAP"] <= 1
    assert (workspace / "pipe.ap.csv").exists() and (workspace / "pipe.ap.png").exists()

    board = sorted((workspace / "data").glob("board*.json"))[0]
    dets = workspace / "dets.json"
    assert _run("predict", "--board", board, "--model", ckpt, "--out", dets) == 0
    out = json.loads(dets.read_text())
    assert all(0 <= d["confidence"] <= 1 for d in out["detections"])


def test_bad_fold_is_usage_error(workspace):
    assert _run("train", "--data", workspace / "data", "--split", workspace / "split.json",
                "--fold", 7, "--epochs", 1, "--out", workspace / "x.json") == 2


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "boardembed", "--help"], capture_output=True,
                          text=True, check=False)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
