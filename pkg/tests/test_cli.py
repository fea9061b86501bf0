import csv
import json

import numpy as np
import pytest

from critforge.cli import main
from critforge.data import load_dataset
from critforge.synth import campaign_config, scaled_campaign

TRAIN_CFG = {
    "model": {"conv3d": [[3, 2, 4]], "conv2d": [[3, 2, 4]], "head_width": 8, "head_layers": 1},
    "train": {"max_epochs": 3, "batch_size": 32},
}


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "gen.json").write_text(json.dumps(campaign_config(scaled_campaign(0.0))))
    (d / "train.json").write_text(json.dumps(TRAIN_CFG))
    assert main(["generate", "--config", str(d / "gen.json"), "--seed", "4", "--out", str(d / "data")]) == 0
    return d


@pytest.fixture(scope="module")
def run_dir(workdir):
    out = workdir / "run"
    rc = main(["train", "--data", str(workdir / "data"), "--split", "cycle", "--seed", "7",
               "--out", str(out), "--config", str(workdir / "train.json")])
    assert rc == 0
    return out


@pytest.mark.parametrize("sub", ["generate", "interp", "train", "eval", "predict"])
def test_help_exits_zero(sub, capsys):
    with pytest.raises(SystemExit) as e:
        main([sub, "--help"])
    assert e.value.code == 0
    assert "default" in capsys.readouterr().out


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as e:
        main(["train", "--data", "x", "--split", "nonsense", "--out", "y"])
    assert e.value.code == 1
    assert "usage" in capsys.readouterr().err
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 1


def test_missing_data_exits_two(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none"), "--split", "random",
                 "--out", str(tmp_path / "r")]) == 2


def test_generate_is_byte_identical(workdir, tmp_path):
    main(["generate", "--config", str(workdir / "gen.json"), "--seed", "4", "--out", str(tmp_path)])
    for f in (workdir / "data").iterdir():
        assert (tmp_path / f.name).read_bytes() == f.read_bytes(), f.name
    assert len(load_dataset(tmp_path)) == 120


def test_train_writes_reports(run_dir):
    for name in ("history.csv", "predictions.csv", "metrics.csv", "loss_curves.svg",
                 "predictions.svg", "model/manifest.json"):
        assert (run_dir / name).is_file(), name
    with open(run_dir / "metrics.csv") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["partition", "mse", "r2"]
    assert [r[0] for r in rows[1:]] == ["train", "val", "test"]
    with open(run_dir / "predictions.csv") as f:
        preds = list(csv.DictReader(f))
    assert {int(r["cycle_id"]) for r in preds} == {22}


def test_eval_and_predict(run_dir, workdir, tmp_path, capsys):
    assert main(["eval", "--model", str(run_dir / "model"), "--data", str(workdir / "data"),
                 "--partition", "test", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "metrics.csv") as f:
        evaluated = list(csv.reader(f))[1]
    with open(run_dir / "metrics.csv") as f:
        trained = list(csv.reader(f))[3]
    assert evaluated == trained
    capsys.readouterr()
    assert main(["predict", "--model", str(run_dir / "model"), "--record", str(workdir / "data"),
                 "--index", "0"]) == 0
    text = capsys.readouterr().out.strip()
    assert len(text.split(".")[1]) == 6
    assert 0.95 < float(text) < 1.05
    assert main(["predict", "--model", str(run_dir / "model"), "--record", str(workdir / "data"),
                 "--index", "999"]) == 1


def test_interp_writes_volume(workdir, tmp_path):
    readings = np.random.default_rng(0).uniform(0.5, 1.5, (43, 4))
    with open(tmp_path / "r.csv", "w") as f:
        f.write("d1,d2,d3,d4\n")
        for row in readings:
            f.write(",".join(repr(float(v)) for v in row) + "\n")
    out = tmp_path / "vol"
    assert main(["interp", "--readings", str(tmp_path / "r.csv"), "--layout", str(workdir / "data"),
                 "--out", str(out)]) == 0
    vol = np.fromfile(out / "volume.f64", dtype="<f8").reshape(25, 30, 30)
    assert np.all(vol >= 0) and vol.max() > 0
    (tmp_path / "bad.csv").write_text("1,2,3\n")
    assert main(["interp", "--readings", str(tmp_path / "bad.csv"), "--layout", str(workdir / "data"),
                 "--out", str(out)]) == 2


def test_thread_cap_must_be_integer(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("CRIT_FORGE_THREADS", "many")
    assert main(["generate", "--config", str(workdir / "gen.json"), "--out", str(tmp_path)]) == 1
    monkeypatch.setenv("CRIT_FORGE_THREADS", "1")
    assert main(["generate", "--config", str(workdir / "gen.json"), "--out", str(tmp_path)]) == 0
