from __future__ import annotations

import json
import math

import numpy as np
import pytest

from relagg import cli
from relagg.errors import ConfigError, DataError
from relagg.harness import (
    METHODS, EvalReport, ExperimentConfig, configs_from_dict, emit_report, load_config, load_split,
    render_table, reports_from_jsonl, reports_to_jsonl, run_experiment, run_suite,
)


def write_dataset(root, n_users=30, n_items=15, seed=0):
    """Random ml-100k style files; users with even ids are female and like low item ids."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    for u in range(1, n_users + 1):
        start = rng.integers(0, 1000)
        for it in rng.choice(n_items, size=rng.integers(2, 9), replace=False):
            likes = (it < n_items // 2) == (u % 2 == 0)
            rating = int(rng.integers(4, 6) if rng.random() < (0.8 if likes else 0.3) else rng.integers(1, 4))
            lines.append(f"{u}\t{it + 1}\t{rating}\t{start + rng.integers(0, 200)}")
    (root / "u.data").write_text("\n".join(lines) + "\n")
    (root / "u.user").write_text("".join(f"{u}|30|{'F' if u % 2 == 0 else 'M'}|x|0\n"
                                         for u in range(1, n_users + 1)))
    return root


@pytest.fixture
def data_dir(tmp_path):
    return write_dataset(tmp_path / "data")


def config(data_dir, method, **kw):
    return ExperimentConfig(ratings=str(data_dir / "u.data"), labels=str(data_dir / "u.user"),
                            method=method, rating_cutoff_ts=900, label_cutoff_ts=600, **kw)


def test_predict_half(data_dir):
    r = run_experiment(config(data_dir, "predict-half"))
    assert r.mse == 0.25 and r.log_loss == 1.0
    assert r.n_test == len(load_split(config(data_dir, "predict-half")).test_users) > 0


@pytest.mark.parametrize("method", sorted(METHODS))
def test_test_labels_read_only_by_metrics(data_dir, method):
    cfg = config(data_dir, method)
    split = load_split(cfg)
    r = run_experiment(cfg, split)
    assert split.test_labels.access_log == ["metrics"]
    assert 0 <= r.mse <= 1 and r.log_loss >= 0


def test_paper_stopping_is_logged(data_dir):
    cfg = config(data_dir, "count-sigmoid", paper_stopping=True)
    split = load_split(cfg)
    r = run_experiment(cfg, split)
    assert split.test_labels.access_log == ["paper-stopping", "metrics"]
    assert r.paper_stopping


@pytest.mark.parametrize("method", ["rlr-dropout", "nb-limited", "mf-stacked"])
def test_deterministic(data_dir, method):
    a = run_experiment(config(data_dir, method, seed=3)).to_dict()
    b = run_experiment(config(data_dir, method, seed=3)).to_dict()
    a.pop("wall_seconds"), b.pop("wall_seconds")
    assert json.dumps(a, sort_keys=True, default=str) == json.dumps(b, sort_keys=True, default=str)


def test_p1_cv_matches_hand_computation(tmp_path):
    # A, B (F) and C (M) rate item x early; C also rates y; T arrives later and rates y
    (tmp_path / "u.data").write_text("A\tx\t5\t1\nB\tx\t2\t2\nC\tx\t4\t3\nC\ty\t1\t3\nT\ty\t5\t10\n")
    (tmp_path / "u.user").write_text("A|1|F|x|0\nB|1|F|x|0\nC|1|M|x|0\nT|1|F|x|0\n")
    cfg = ExperimentConfig(ratings=str(tmp_path / "u.data"), labels=str(tmp_path / "u.user"), method="p1",
                           rating_cutoff_ts=20, label_cutoff_ts=5, cv_folds=3,
                           grid={"pseudo_count": [0.5, 5, 50]})
    r = run_experiment(cfg)
    # held-out A or B: x has 1 F of 2 raters, p = 1/2 for any c (1 bit each);
    # held-out C (M): x has 2 F of 2, y none, p = (c+2)/(2c+2), loss -log2(c/(2c+2))
    expected = [(2 + math.log2(6)) / 3, (2 + math.log2(12 / 5)) / 3, (2 + math.log2(102 / 50)) / 3]
    assert r.cv_scores == pytest.approx(expected)
    assert r.hyperparameters == {"pseudo_count": 50}
    # T (F) rated y, whose only labelled rater is C (M): p = 50/101
    assert r.n_test == 1 and r.mse == pytest.approx((51 / 101) ** 2)


def test_emit_formats(tmp_path):
    rep = EvalReport("p1", 0.2073, 0.86849, {"pseudo_count": 100.0}, 171, 0, 1.5)
    table = emit_report(rep, None, "table")
    assert "0.207" in table and "0.868" in table and "Movies as a dataset (P1)" in table
    out = tmp_path / "r.jsonl"
    emit_report([rep, rep], out, "json")
    back = reports_from_jsonl(out.read_text(encoding="utf-8"))
    assert back == [rep, rep]
    assert out.read_text().count("\n") == 2
    assert list(json.loads(reports_to_jsonl([rep]))) == list(rep.to_dict())
    assert render_table([]).splitlines()[0].startswith("Method")
    assert len(render_table([]).splitlines()) == 2
    with pytest.raises(ConfigError):
        emit_report(rep, None, "xml")


def test_suite_isolates_errors(data_dir):
    good = config(data_dir, "train-average")
    bad = ExperimentConfig(ratings=str(data_dir / "missing"), labels=str(data_dir / "u.user"),
                           method="p2", rating_cutoff_ts=900, label_cutoff_ts=600)
    res = run_suite([good, bad, config(data_dir, "predict-half")])
    assert [r.method for r in res.reports] == ["train-average", "predict-half"]
    assert len(res.errors) == 1 and res.errors[0]["type"] == "DataError"
    assert "[ingest]" in res.errors[0]["error"]
    assert len(res.table().splitlines()) == 4
    with pytest.raises(ConfigError):
        run_suite([])


def test_config_validation(data_dir):
    with pytest.raises(ConfigError):
        config(data_dir, "no-such-method")
    with pytest.raises(ConfigError):
        ExperimentConfig(ratings="a", labels="b", method="p1", rating_cutoff_ts=5, label_cutoff_ts=9)
    with pytest.raises(ConfigError):
        config(data_dir, "p1", grid={"pseudo_count": []})
    with pytest.raises(ConfigError):
        configs_from_dict({"dataset": {"ratings": "a", "labels": "b"}, "experiments": [{"method": "p1", "x": 1}]})
    with pytest.raises(ConfigError):
        configs_from_dict({"experiments": []})


def test_load_config_paths(tmp_path, data_dir, monkeypatch):
    monkeypatch.setenv("MYDATA", str(data_dir))
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"dataset": {"ratings": "$MYDATA/u.data", "labels": "data/u.user",
                                         "rating_cutoff_ts": 900, "label_cutoff_ts": 600},
                             "seed": 4, "experiments": [{"method": "p2", "grid": {"pseudo_count": [1, 2]}}]}))
    (cfg,) = load_config(p, seed=9)
    assert cfg.ratings == str(data_dir / "u.data") and cfg.labels == str(tmp_path / "data" / "u.user")
    assert cfg.seed == 9 and cfg.grid == {"pseudo_count": [1, 2]}
    monkeypatch.delenv("MYDATA")
    with pytest.raises(ConfigError, match="environment"):
        load_config(p)


def test_fraction_split(data_dir):
    cfg = ExperimentConfig(ratings=str(data_dir / "u.data"), labels=str(data_dir / "u.user"),
                           method="train-average", rating_fraction=0.6, label_fraction=0.4)
    s = load_split(cfg)
    assert len(s.train_labels) > 0


# -- CLI -----------------------------------------------------------------------

def _write_config(tmp_path, data_dir, experiments, **extra):
    p = tmp_path / "suite.json"
    p.write_text(json.dumps({"dataset": {"ratings": str(data_dir / "u.data"), "labels": str(data_dir / "u.user"),
                                         "rating_cutoff_ts": 900, "label_cutoff_ts": 600},
                             "experiments": experiments, **extra}))
    return str(p)


def test_cli_run_and_suite(tmp_path, data_dir, capsys):
    cfg = _write_config(tmp_path, data_dir, [{"method": "train-average"},
                                             {"method": "p1", "grid": {"pseudo_count": [1, 10]}}])
    assert cli.main(["run", "--config", cfg]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["method"] == "train-average" and rep["schema_version"] == "1"

    assert cli.main(["run", "--config", cfg, "--method", "p1", "--pseudo-count", "3", "--seed", "2"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["hyperparameters"] == {"pseudo_count": 3.0} and rep["seed"] == 2 and rep["cv_scores"] is None

    out = tmp_path / "t.txt"
    assert cli.main(["suite", "--config", cfg, "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 4

    assert cli.main(["run", "--config", cfg, "--method", "count-sigmoid", "--paper-stopping",
                     "--format", "table"]) == 0
    assert "count-sigmoid" in capsys.readouterr().out


@pytest.mark.filterwarnings("ignore:overflow")
def test_cli_exit_codes(tmp_path, data_dir, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "nope.json")]) == 1
    assert cli.main(["run", "--config", _write_config(tmp_path, data_dir, [{"method": "bogus"}])]) == 1
    bad = tmp_path / "bad"
    write_dataset(bad)
    (bad / "u.data").write_text("1\t2\t3\n")
    assert cli.main(["run", "--config", _write_config(tmp_path, bad, [{"method": "p1"}])]) == 2
    cfg = _write_config(tmp_path, data_dir, [{"method": "count-sigmoid",
                                              "params": {"learning_rate": 1e308, "patience": None}}])
    assert cli.main(["run", "--config", cfg]) == 3
    # a failing suite still prints the good rows
    cfg = _write_config(tmp_path, data_dir, [{"method": "train-average"},
                                             {"method": "count-sigmoid",
                                              "params": {"learning_rate": 1e308, "patience": None}}])
    assert cli.main(["suite", "--config", cfg]) == 3
    captured = capsys.readouterr()
    assert "Training average" in captured.out and "TrainingError" in captured.err


def test_mf_grid_tuning(data_dir):
    cfg = config(data_dir, "mf-stacked", params={"mf_grid": {"latent_dim": [1, 2]}, "mf_epochs": 5})
    r = run_experiment(cfg)
    assert r.details["latent_dim"] in (1, 2)
