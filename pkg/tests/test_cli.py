import csv
import json

import numpy as np
import pytest

from conftest import make_data
from fairmtl.cli import build_parser, config_from_args, main, read_config_file
from fairmtl.dataset import save_internal_csv
from fairmtl.solver import read_params


@pytest.fixture
def snap(tmp_path, rng):
    X = rng.normal(size=(150, 2))
    groups = np.where(X[:, 1] + 0.5 * rng.normal(size=150) > 0, 2, 1)
    y = np.where(X[:, 0] + 0.4 * rng.normal(size=150) > 0, 1, -1)
    data = make_data(X, groups, y, np.arange(150) % 3 == 0)
    save_internal_csv(data.train(), tmp_path / "train.csv")
    save_internal_csv(data.test(), tmp_path / "test.csv")
    return tmp_path


def _common(path):
    return ["--dataset", "internal", "--data-path", str(path), "--n-folds", "3"]


def test_config_file(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# desk run\nmethod = ITL\ngroup-specific-prediction = yes\n"
                    "rho = 0.5  # fixed\nmax_depth = none\n")
    values = read_config_file(path)
    assert values == {"method": "ITL", "group_specific_prediction": True, "rho": 0.5,
                      "max_depth": None}
    args = build_parser().parse_args(["run", "--config", str(path), "--rho", "2"])
    cfg = config_from_args(args)
    assert cfg.method == "ITL" and cfg.rho == 2.0 and cfg.group_specific_prediction
    path.write_text("colour = blue\n")
    with pytest.raises(ValueError, match="unknown option"):
        read_config_file(path)
    path.write_text("method\n")
    with pytest.raises(ValueError, match="key = value"):
        read_config_file(path)


def test_run_and_report(snap, tmp_path, capsys):
    out, params, cv = tmp_path / "r.csv", tmp_path / "p.txt", tmp_path / "cv.csv"
    argv = ["run", *_common(snap), "--method", "STL", "--out", str(out),
            "--params-out", str(params), "--cv-out", str(cv)]
    assert main(argv) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 1 and rows[0]["method"] == "STL"
    assert read_params(params.read_text()).k == 2
    assert sum(int(r["chosen"]) for r in csv.DictReader(cv.open())) == 1
    first = out.read_bytes()
    assert main(argv) == 0
    assert out.read_bytes() == first
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    assert "P(text)" in capsys.readouterr().out


def test_run_json(snap, tmp_path):
    out = tmp_path / "r.json"
    assert main(["run", *_common(snap), "--rho", "0.1", "--group-specific-prediction",
                 "--fairness-target", "EOd", "--out", str(out)]) == 0
    rec = json.loads(out.read_text())[0]
    assert rec["D"] == 1 and rec["F"] == "EOd" and rec["train_violation"] <= 1e-8


def test_train_and_cv(snap, tmp_path, capsys):
    with pytest.raises(SystemExit):
        main(["train", *_common(snap)])
    params = tmp_path / "p.txt"
    assert main(["train", *_common(snap), "--rho", "0.1", "--params-out", str(params)]) == 0
    assert json.loads(capsys.readouterr().out)["rho"] == 0.1
    assert params.exists()
    out = tmp_path / "cv.csv"
    assert main(["cv", *_common(snap), "--method", "STL", "--out", str(out)]) == 0
    assert len(list(csv.DictReader(out.open()))) == 13


def test_sweep_and_predict(snap, tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert main(["sweep-lambda", *_common(snap), "--rho", "0.1", "--lam-values", "0,0.5,1",
                 "--out", str(out)]) == 0
    assert [r["lambda"] for r in csv.DictReader(out.open())] == ["0.0", "0.5", "1.0"]
    cm, forest = tmp_path / "cm.csv", tmp_path / "forest.txt"
    assert main(["predict-sensitive", *_common(snap), "--n-trees", "5", "--out", str(cm),
                 "--predictor-out", str(forest)]) == 0
    body = [list(map(float, r[1:])) for r in list(csv.reader(cm.open()))[1:]]
    assert sum(map(sum, body)) == pytest.approx(100.0, abs=0.1)
    assert "accuracy" in capsys.readouterr().err
    assert forest.read_text().startswith("{")


def test_prepare(snap, tmp_path, capsys):
    out = tmp_path / "snap"
    assert main(["prepare", *_common(snap), "--out", str(out)]) == 0
    stats = json.loads(capsys.readouterr().out)
    assert stats["n"] == 150 and len(stats["groups"]) == 2
    assert (out / "train.csv").exists() and (out / "test.csv").exists()


def test_errors_exit_2(snap, tmp_path):
    assert main(["run", "--dataset", "internal", "--data-path", str(tmp_path / "none")]) == 2
    assert main(["run", *_common(snap), "--method", "ITL"]) == 2
