"""End-to-end CLI pipeline and the exit-code contract."""

import json

import pytest

from fluidseg import cli
from fluidseg.errors import DivergenceError

TINY_DATA = [
    "--set", "scene.height=32", "--set", "scene.width=32",
    "--set", "dataset.n_volumes=4", "--set", "dataset.scans_per_volume=2",
    "--set", "split.n_splits=2", "--set", "split.n_val=1",
    "--set", "split.n_test=1", "--set", "split.budgets=2,4",
]
TINY_MODEL = [
    "--set", "model.input_h=32", "--set", "model.input_w=32",
    "--set", "model.depth=2", "--set", "model.base_channels=4",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert cli.main(["gen-data", "--out", str(data), "--seed", "5"] + TINY_DATA) == 0
    run = root / "run"
    rc = cli.main(["train", "--data", str(data), "--out", str(run),
                   "--regime", "mlds", "--weak-tier", "global",
                   "--budget", "2", "--split", "0",
                   "--set", "train.epochs=2", "--set", "train.val_period=1"]
                  + TINY_MODEL)
    assert rc == 0
    return root, data, run


def test_gen_data_artifacts(pipeline):
    _, data, _ = pipeline
    assert (data / "manifest.json").exists()
    assert (data / "splits.json").exists()
    assert (data / "runconfig.json").exists()
    manifest = json.loads((data / "manifest.json").read_text())
    assert len(manifest["records"]) == 8


def test_train_artifacts(pipeline):
    _, _, run = pipeline
    assert (run / "best.fseg").exists()
    assert (run / "history.csv").exists()


def test_eval_and_report(pipeline, capsys):
    root, data, run = pipeline
    rc = cli.main(["eval", "--checkpoint", str(run / "best.fseg"),
                   "--data", str(data), "--out", str(run), "--subset", "test"])
    assert rc == 0
    assert (run / "rows.csv").exists()
    assert "miou" in capsys.readouterr().out
    rc = cli.main(["report", "--runs", str(root), "--out", str(root / "report")])
    assert rc == 0
    assert (root / "report" / "report.csv").exists()
    assert (root / "report" / "aggregate.csv").exists()


def test_verify_fast_suites(capsys):
    assert cli.main(["verify", "--suite", "perturb"]) == 0
    assert cli.main(["verify", "--suite", "metric"]) == 0
    out = capsys.readouterr().out
    assert "[PASS]" in out and "[FAIL]" not in out


def test_config_file_plus_override(pipeline, tmp_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"train": {"epochs": 3}, "scene": {"height": 32}}))
    _, data, _ = pipeline
    rc = cli.main(["train", "--data", str(data), "--out", str(tmp_path / "r2"),
                   "--config", str(cfg_file), "--budget", "2",
                   "--set", "train.epochs=1", "--set", "train.val_period=5"]
                  + TINY_MODEL)
    assert rc == 0


def test_exit_code_2_on_config_errors(pipeline, tmp_path):
    _, data, _ = pipeline
    base = ["train", "--data", str(data), "--out", str(tmp_path / "x"),
            "--budget", "2"] + TINY_MODEL
    assert cli.main(base + ["--set", "train.regime=gan"]) == 2
    assert cli.main(base + ["--set", "train.nope=1"]) == 2
    assert cli.main(base + ["--set", "notasection.k=1"]) == 2
    assert cli.main(base + ["--set", "malformed"]) == 2
    # budget outside the training pool is a config error too
    bad = ["train", "--data", str(data), "--out", str(tmp_path / "x"),
           "--budget", "999", "--set", "train.epochs=1"] + TINY_MODEL
    assert cli.main(bad) == 2


def test_exit_code_3_on_data_errors(tmp_path):
    assert cli.main(["train", "--data", str(tmp_path / "absent"),
                     "--out", str(tmp_path / "o"), "--budget", "2"]) == 3
    garbage = tmp_path / "g.fseg"
    garbage.write_bytes(b"xxxx")
    assert cli.main(["eval", "--checkpoint", str(garbage),
                     "--data", str(tmp_path / "absent"),
                     "--out", str(tmp_path / "o")]) == 3


def test_exit_code_4_on_divergence(pipeline, tmp_path, monkeypatch):
    _, data, _ = pipeline

    def boom(*a, **kw):
        raise DivergenceError("non-finite loss at step 0")

    monkeypatch.setattr(cli, "fit", boom)
    rc = cli.main(["train", "--data", str(data), "--out", str(tmp_path / "d"),
                   "--budget", "2", "--set", "train.epochs=1"] + TINY_MODEL)
    assert rc == 4


def test_unknown_split_is_config_error(pipeline, tmp_path):
    _, data, _ = pipeline
    rc = cli.main(["train", "--data", str(data), "--out", str(tmp_path / "s"),
                   "--budget", "2", "--split", "7",
                   "--set", "train.epochs=1"] + TINY_MODEL)
    assert rc == 2
