import json
import subprocess
import sys

import pytest

from taskgraph import __version__
from taskgraph.cli import main
from taskgraph.data import save_dataset
from taskgraph.synthetic import SynthConfig, generate_dataset

SMALL = ["--hidden", "8", "--readout-hidden", "8"]


def _manifest(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--seed", "3", "--out", str(out), "--train-scenes", "40", "--test-scenes", "12"]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(data):
    ckpt = data / "model.json"
    code = main(["train", "--scenes", str(data / "train.json"), "--out", str(ckpt),
                 "--epochs", "2", "--lr", "1e-3", *SMALL])
    assert code == 0
    return ckpt


def test_synth_writes_all_splits(data):
    for name in ("train", "test", "test_noisy"):
        assert (data / f"{name}.json").exists() and (data / f"{name}.ftrs").exists()


def test_stats(data, tmp_path, capsys):
    out = tmp_path / "stats.json"
    assert main(["stats", "--scenes", str(data / "train.json"), "--out", str(out)]) == 0
    assert "task 1:" in capsys.readouterr().out
    doc = json.loads(out.read_text())
    assert set(doc) == {"1", "2", "3"}


def test_train_outputs(checkpoint):
    assert checkpoint.with_suffix(".bin").exists()
    assert checkpoint.with_name("model.state.json").exists()
    lines = checkpoint.with_name("model.log.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]


def test_eval_writes_results_and_manifest(data, checkpoint, tmp_path, capsys):
    out, manifest = tmp_path / "res.json", tmp_path / "man.json"
    code = main(["--manifest", str(manifest), "eval", "--checkpoint", str(checkpoint),
                 "--scenes", str(data / "test.json"), "--out", str(out), "--pr-dir", str(tmp_path / "pr")])
    assert code == 0
    assert "mAP@0.5" in capsys.readouterr().out
    res = json.loads(out.read_text())
    assert 0.0 <= res["map"] <= 1.0
    assert (tmp_path / "pr" / "pr_task1.csv").exists()
    man = json.loads(manifest.read_text())
    assert man["command"] == "eval" and man["exit_code"] == 0
    assert all(len(h) == 64 for h in man["inputs"].values())


def test_manifest_on_stderr(data, checkpoint, capsys):
    main(["eval", "--checkpoint", str(checkpoint), "--scenes", str(data / "test.json")])
    man = _manifest(capsys)
    assert {"command", "config", "seed", "inputs", "outputs", "wall_ms", "exit_code"} <= set(man)


def test_analyze_context(data, checkpoint, tmp_path):
    out = tmp_path / "ctx.json"
    assert main(["analyze-context", "--checkpoint", str(checkpoint), "--scenes",
                 str(data / "test.json"), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert all({"h0_acc", "hT_acc"} == set(v) for v in doc.values())


def test_baselines(data, tmp_path):
    out = tmp_path / "pb.json"
    assert main(["baseline", "pick-best-class", "--train", str(data / "train.json"),
                 "--test", str(data / "test.json"), "--out", str(out)]) == 0
    assert "map" in json.loads(out.read_text())
    assert main(["baseline", "classifier", "--train", str(data / "train.json"),
                 "--test", str(data / "test.json"), "--epochs", "1", *SMALL]) == 0


def test_resume_continues_epochs(data, checkpoint, tmp_path, capsys):
    ckpt = tmp_path / "more.json"
    state = checkpoint.with_name("model.state.json")
    assert main(["train", "--scenes", str(data / "train.json"), "--out", str(ckpt), "--epochs", "3",
                 "--lr", "1e-3", "--resume", str(state), *SMALL]) == 0
    history = json.loads(ckpt.read_text())["extra"]["history"]
    assert [h["epoch"] for h in history] == [1, 2, 3]


def test_ablation_training(data, tmp_path):
    assert main(["train", "--scenes", str(data / "train.json"), "--out", str(tmp_path / "g.json"),
                 "--epochs", "1", "--ablation", "g", *SMALL]) == 0


def test_gradcheck_passes():
    assert main(["gradcheck", "--seed", "0", "--instances", "3"]) == 0


def test_missing_file_exit_code(tmp_path, capsys):
    assert main(["stats", "--scenes", str(tmp_path / "nope.json")]) == 3
    assert "error" in capsys.readouterr().err


def test_dimension_mismatch_exit_code(checkpoint, tmp_path):
    other = generate_dataset(SynthConfig(F=8, train_scenes=3, test_scenes=3))["test"]
    save_dataset(other, tmp_path / "f8.json")
    assert main(["eval", "--checkpoint", str(checkpoint), "--scenes", str(tmp_path / "f8.json")]) == 5


def test_missing_features_exit_code(data, tmp_path):
    (tmp_path / "t.json").write_text((data / "test.json").read_text())
    assert main(["eval", "--checkpoint", str(data / "model.json"), "--scenes", str(tmp_path / "t.json")]) == 3


def test_bad_format_exit_code(tmp_path):
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["stats", "--scenes", str(tmp_path / "bad.json")]) == 4


def test_invalid_config_exit_code(data, tmp_path):
    code = main(["train", "--scenes", str(data / "train.json"), "--out", str(tmp_path / "x.json"),
                 "--no-class-input", "--no-visual-input", "--no-aux-head", "--fusion", "graph_only", *SMALL])
    assert code == 2


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "taskgraph", "--version"], capture_output=True, text=True)
    assert res.returncode == 0 and __version__ in res.stdout
