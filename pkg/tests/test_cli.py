import csv
import json

import numpy as np
import pytest

from qcrec import cli
from qcrec.model import load_checkpoint
from qcrec.train import TensorCheck

SMALL = ["--N", "8", "--D", "8", "--H", "1", "--batch-size", "32", "--min-count", "0"]


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--n-users", "120", "--n-items", "20", "--n-contexts", "4", "--seed", "1",
                     "--output-dir", str(root / "synth")]) == 0
    assert cli.main(["prepare", "--events", str(root / "synth" / "events.csv"), "--output-dir",
                     str(root / "data"), *SMALL]) == 0
    return root


def read_jsonl(path):
    return [json.loads(line) for line in open(path)]


def test_synth_writes_taobao_layout(prepared):
    rows = list(csv.reader(open(prepared / "synth" / "events.csv")))
    assert len(rows[0]) == 5 and rows[0][3] == "pv"
    cfg = json.loads((prepared / "synth" / "run_config.json").read_text())
    assert cfg["n_users"] == 120 and cfg["seed"] == 1


def test_prepare_outputs(prepared):
    data = prepared / "data"
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["n_items"] == 20 and manifest["n_contexts"] == 4 and manifest["N"] == 8
    assert manifest["counts"]["windows"] > 0 and manifest["counts"]["test_instances"] > 0
    loaded = cli.load_prepared(data)
    assert loaded.windows.items.shape[1] == 8
    assert len(loaded.instances) == manifest["counts"]["test_instances"]


def test_train_and_eval(prepared, tmp_path):
    out = tmp_path / "train"
    assert cli.main(["train", "--data-dir", str(prepared / "data"), "--mode", "B", "--context-mask-prob", "0.5",
                     "--max-epochs", "2", "--output-dir", str(out), *SMALL]) == 0
    log = read_jsonl(out / "train_log.jsonl")
    assert {r["epoch"] for r in log} == {0, 1}
    assert all(r["mode"] == "B" and r["p"] == 0.5 for r in log)
    config, params, meta, state = load_checkpoint(out / "checkpoint.npz")
    assert meta["epoch"] == 1 and config.mode.variant.value == "B"
    assert all(v.dtype == np.float64 for v in params.values())

    ev = tmp_path / "eval"
    assert cli.main(["eval", "--data-dir", str(prepared / "data"), "--checkpoint", str(out / "checkpoint.npz"),
                     "--ks", "1", "5", "--output-dir", str(ev)]) == 0
    report = json.loads((ev / "report.json").read_text())
    assert report["visibility"] == "current" and report["ks"] == [1, 5]
    assert all(np.isfinite(v) for v in report["metrics"].values())
    ranks = list(csv.DictReader(open(ev / "ranks.csv")))
    assert len(ranks) == report["counts"]["instances"]


def test_training_reproducible(prepared, tmp_path):
    losses = []
    for name in ("a", "b"):
        assert cli.main(["train", "--data-dir", str(prepared / "data"), "--mode", "C", "--max-epochs", "2",
                         "--dropout-rate", "0.1", "--seed", "3", "--output-dir", str(tmp_path / name), *SMALL]) == 0
        losses.append([r["loss"] for r in read_jsonl(tmp_path / name / "train_log.jsonl")])
    assert losses[0] == losses[1]


def test_resume_matches_uninterrupted(prepared, tmp_path):
    common = ["--data-dir", str(prepared / "data"), "--mode", "A", "--seed", "2", *SMALL]
    assert cli.main(["train", *common, "--max-epochs", "4", "--output-dir", str(tmp_path / "full")]) == 0
    assert cli.main(["train", *common, "--max-epochs", "2", "--output-dir", str(tmp_path / "half")]) == 0
    assert cli.main(["train", *common, "--max-epochs", "4", "--resume", str(tmp_path / "half" / "checkpoint.npz"),
                     "--output-dir", str(tmp_path / "resumed")]) == 0
    full = read_jsonl(tmp_path / "full" / "train_log.jsonl")
    resumed = read_jsonl(tmp_path / "resumed" / "train_log.jsonl")
    assert {r["epoch"] for r in resumed} == {2, 3}
    last_full = [r["loss"] for r in full if r["epoch"] == 3]
    last_resumed = [r["loss"] for r in resumed if r["epoch"] == 3]
    assert abs(np.mean(last_resumed) - np.mean(last_full)) <= 0.01 * np.mean(last_full)


def test_config_file_and_flag_precedence(tmp_path, monkeypatch):
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({"n_users": 7, "n_items": 8, "n_contexts": 2, "seed": 5}))
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert cli.main(["synth", "--config", str(conf), "--seed", "9"]) == 0
    written = json.loads((tmp_path / "root" / "synth" / "run_config.json").read_text())
    assert written["n_users"] == 7 and written["seed"] == 9


def test_unknown_config_key_is_validation_error(tmp_path, capsys):
    conf = tmp_path / "run.json"
    conf.write_text(json.dumps({"n_userz": 7}))
    assert cli.main(["synth", "--config", str(conf), "--output-dir", str(tmp_path)]) == cli.EXIT_VALIDATION
    assert "n_userz" in capsys.readouterr().err


def test_validation_exit_codes(tmp_path):
    assert cli.main(["prepare", "--output-dir", str(tmp_path)]) == cli.EXIT_VALIDATION
    assert cli.main(["prepare", "--events", str(tmp_path / "missing.csv"),
                     "--output-dir", str(tmp_path)]) == cli.EXIT_VALIDATION
    assert cli.main(["train", "--data-dir", str(tmp_path), "--output-dir", str(tmp_path)]) == cli.EXIT_VALIDATION
    with pytest.raises(SystemExit):
        cli.main(["train", "--max-epochs", "many"])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(prepared, tmp_path):
    code = cli.main(["train", "--data-dir", str(prepared / "data"), "--learning-rate", "1e305", "--max-epochs", "3",
                     "--output-dir", str(tmp_path), *SMALL])
    assert code == cli.EXIT_NUMERICAL


def test_gradcheck_verb(tmp_path, monkeypatch):
    assert cli.main(["gradcheck", "--output-dir", str(tmp_path / "ok")]) == 0
    report = json.loads((tmp_path / "ok" / "gradcheck.json").read_text())
    assert set(report) == {"none", "A", "B", "C"}

    def broken(*a, **kw):
        return [TensorCheck("w", 1, 1.0, False)]

    monkeypatch.setattr(cli, "finite_difference_check", broken)
    assert cli.main(["gradcheck", "--output-dir", str(tmp_path / "bad")]) == cli.EXIT_CHECK_FAILED


def test_oracle_check_verb(tmp_path):
    assert cli.main(["oracle-check", "--n-configs", "2", "--output-dir", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "oracle_check.json").read_text())
    assert report["max_abs_diff"] < 1e-9 and len(report["cases"]) == 8
    assert [t["N"] for t in report["timing"]] == [8, 16, 32]


def test_gridsearch_single_p_equals_train_then_eval(prepared, tmp_path):
    common = ["--data-dir", str(prepared / "data"), "--max-epochs", "2", "--seed", "4",
              "--checkpoint-dtype", "float64", *SMALL]
    assert cli.main(["gridsearch", *common, "--p-list", "0.0", "--output-dir", str(tmp_path / "grid")]) == 0
    assert cli.main(["train", *common, "--mode", "B", "--context-mask-prob", "0.0",
                     "--output-dir", str(tmp_path / "train")]) == 0
    assert cli.main(["eval", "--data-dir", str(prepared / "data"), "--checkpoint",
                     str(tmp_path / "train" / "checkpoint.npz"), "--output-dir", str(tmp_path / "eval")]) == 0
    grid = json.loads((tmp_path / "grid" / "gridsearch.json").read_text())
    single = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert grid["rows"][0]["metrics"] == single["metrics"]
    assert (tmp_path / "grid" / "gridsearch.txt").exists()


def test_concave_trend():
    assert cli.concave_trend([0.1, 0.3, 0.2])
    assert not cli.concave_trend([0.1, 0.2, 0.3])
    assert not cli.concave_trend([0.3, 0.2])
