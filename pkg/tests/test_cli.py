import json

import numpy as np
import pytest

from compound_norm import cli
from compound_norm import data as D
from compound_norm import train as T


@pytest.fixture
def dataset_path(tmp_path):
    path = tmp_path / "d.cnld"
    assert cli.main(["gen-data", "--k", "5", "--d", "6", "--rho", "10", "--nmax", "60", "--seed", "2",
                     "--test-per-class", "10", "--out", str(path)]) == 0
    return path


def test_gen_data_counts_match(tmp_path, capsys):
    path = tmp_path / "d.cnld"
    assert cli.main(["gen-data", "--k", "10", "--rho", "100", "--nmax", "500", "--seed", "1",
                     "--out", str(path)]) == 0
    ds = D.load_dataset(path)
    np.testing.assert_array_equal(ds.train_counts, D.longtail_counts(10, 500, 100))
    assert capsys.readouterr().out.strip() == "counts 500 300 180 108 65 39 23 14 8 5"
    assert (tmp_path / "d.csv").exists()


def test_gen_data_balanced_and_rerun_identical(tmp_path):
    a, b = tmp_path / "a.cnld", tmp_path / "b.cnld"
    for p in (a, b):
        assert cli.main(["gen-data", "--k", "4", "--rho", "1", "--nmax", "30", "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert set(D.load_dataset(a).train_counts) == {30}


def test_gen_data_rejects_bad_values(tmp_path):
    assert cli.main(["gen-data", "--k", "1", "--out", str(tmp_path / "x")]) == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["gen-data", "--k", "ten"])
    assert e.value.code == 2


def _train(dataset_path, out, *extra):
    return cli.main(["train", str(dataset_path), "--out-dir", str(out), "--epochs", "3", "--m", "2",
                     "--hidden", "16", "--batch-size", "32", *extra])


def test_train_outputs_and_reproducibility(dataset_path, tmp_path):
    assert _train(dataset_path, tmp_path / "a") == 0
    assert _train(dataset_path, tmp_path / "b") == 0
    csv_a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert csv_a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert len(csv_a.decode().strip().splitlines()) == 1 + 3
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["config"]["M"] == 2 and manifest["config"]["hidden"] == [16]
    assert len(manifest["dataset_sha256"]) == 64
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["manifest"].endswith("manifest.json")


def test_train_baseline_row(dataset_path, tmp_path):
    assert _train(dataset_path, tmp_path / "b", "--norm", "bn", "--sbn", "off", "--m", "1") == 0
    config = json.loads((tmp_path / "b" / "manifest.json").read_text())["config"]
    assert (config["norm"], config["sbn"], config["M"]) == ("bn", False, 1)


def test_config_precedence(dataset_path, tmp_path, monkeypatch):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("lr: 0.01\nepochs: 7\nseed: 3\nstrong_dropout: 0.0\n")
    monkeypatch.delenv("CNL_SEED", raising=False)
    merged = cli.merge_config(cli.read_config(cfg), {"epochs": 2, "lr": None}, env={})
    assert (merged.lr, merged.epochs, merged.seed, merged.strong.dropout) == (0.01, 2, 3, 0.0)
    assert cli.merge_config({"seed": 3}, {"seed": 4}, env={"CNL_SEED": "9"}).seed == 9
    assert cli.merge_config({}, {}, env={}) == T.TrainConfig()


def test_train_config_errors(dataset_path, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("unknown_key: 1\n")
    assert cli.main(["train", str(dataset_path), "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    bad.write_text("lambda_c: 3\n")
    assert cli.main(["train", str(dataset_path), "--config", str(bad), "--out-dir", str(tmp_path)]) == 2
    bad.write_text("- just\n- a list\n")
    assert cli.main(["train", str(dataset_path), "--config", str(bad), "--out-dir", str(tmp_path)]) == 2


def test_train_unreadable_dataset(tmp_path):
    junk = tmp_path / "junk.cnld"
    junk.write_bytes(b"not a dataset")
    assert cli.main(["train", str(junk), "--out-dir", str(tmp_path / "o")]) == 3
    assert cli.main(["train", str(tmp_path / "missing"), "--out-dir", str(tmp_path / "o")]) == 3


def test_train_nonfinite_exit(dataset_path, tmp_path):
    assert _train(dataset_path, tmp_path / "n", "--lr", "1e30") == 4


def test_eval_replays_training_metrics(dataset_path, tmp_path, capsys):
    assert _train(dataset_path, tmp_path / "r") == 0
    final = json.loads((tmp_path / "r" / "summary.json").read_text())["final"]
    out = tmp_path / "m.json"
    assert cli.main(["eval", str(tmp_path / "r" / "checkpoint.json"), str(dataset_path), "--out", str(out)]) == 0
    metrics = json.loads(out.read_text())
    for key in ("top1", "many", "medium", "few"):
        assert metrics[key] == final[key]


def test_eval_missing_files(dataset_path, tmp_path):
    assert cli.main(["eval", str(tmp_path / "nope.json"), str(dataset_path)]) == 3


def test_gradcheck_passes_and_forced_failure(capsys):
    assert cli.main(["gradcheck", "--instances", "2"]) == 0
    table = capsys.readouterr().out
    assert table.count("PASS") == 5
    assert cli.main(["gradcheck", "--instances", "2", "--tol", "1e-12"]) == 1


def test_gradcheck_seed_is_deterministic(capsys):
    cli.main(["gradcheck", "--instances", "2", "--seed", "5"])
    a = capsys.readouterr().out
    cli.main(["gradcheck", "--instances", "2", "--seed", "5"])
    b = capsys.readouterr().out
    cli.main(["gradcheck", "--instances", "2", "--seed", "6"])
    assert a == b != capsys.readouterr().out
