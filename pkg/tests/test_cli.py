# -*- coding: utf-8 -*-
"""命令行：子命令串联、退出码与诊断格式"""

import json

import numpy as np
import pandas as pd
import pytest

from mmwloc.cli import dispatch
from mmwloc.core.experiment_manager import (SUMMARY_COLUMNS, holdout_seed, run_experiment,
                                            spec_from_dict)
from mmwloc.core.neural_network import load_model


def run(capsys, *argv):
    code = dispatch([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def train_csv(tmp_path, capsys):
    path = tmp_path / "train.csv"
    code, out, _ = run(capsys, "dataset-gen", "--scenario", "rect3", "-o", path,
                       "--train-size", 60, "--seed", 3)
    assert code == 0
    assert "samples=60" in out
    return path


@pytest.fixture
def test_csv(tmp_path, capsys):
    path = tmp_path / "test.csv"
    code, _, _ = run(capsys, "dataset-gen", "--scenario", "rect3", "-o", path,
                     "--trajectories", 2, "--points", 10, "--seed", 1_000_003, "--split", "test")
    assert code == 0
    return path


class TestScenarioValidate:

    def test_rect3(self, capsys):
        code, out, _ = run(capsys, "scenario-validate", "rect3")
        assert code == 0
        assert out.splitlines()[0] == "anchors=15"

    def test_lroom_coverage(self, capsys):
        code, out, _ = run(capsys, "scenario-validate", "lroom3", "--coverage")
        assert code == 0
        lines = out.splitlines()
        assert lines[0] == "anchors=19"
        assert len(lines) == 2 + 19

    def test_missing_scenario(self, capsys, tmp_path):
        code, _, err = run(capsys, "scenario-validate", tmp_path / "missing.json")
        assert code == 1
        assert err.strip().splitlines()[-1].startswith("error: file_not_found:")

    def test_invalid_scenario(self, capsys, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"room": {"vertices": [[0, 0], [0, 5], [5, 5], [5, 0]]},
                                    "aps": [[1, 1]]}), encoding="utf-8")
        code, _, err = run(capsys, "scenario-validate", path)
        assert code == 1
        assert err.strip().splitlines()[-1].startswith("error: scenario_geometry:")


class TestUsage:

    def test_unknown_subcommand(self, capsys):
        assert run(capsys, "frobnicate")[0] == 2

    def test_missing_required(self, capsys):
        assert run(capsys, "train", "-i", "x.csv")[0] == 2

    def test_bad_choice(self, capsys):
        assert run(capsys, "eval", "-i", "a", "-o", "b", "--algo", "svm")[0] == 2


class TestDatasetGen:

    def test_default_shape(self, capsys, tmp_path):
        path = tmp_path / "d.csv"
        code, out, _ = run(capsys, "dataset-gen", "--scenario", "rect3", "-o", path)
        assert code == 0
        frame = pd.read_csv(path)
        assert len(frame) == 900
        assert frame["traj"].nunique() == 30

    def test_byte_identical_rerun(self, capsys, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for path in (a, b):
            assert run(capsys, "dataset-gen", "--scenario", "rect3", "-o", path,
                       "--trajectories", 3, "--points", 10, "--seed", 9)[0] == 0
        assert a.read_bytes() == b.read_bytes()

    def test_jobs_do_not_change_output(self, capsys, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        run(capsys, "dataset-gen", "--scenario", "rect3", "-o", a, "--trajectories", 4,
            "--points", 10, "--jobs", 1)
        run(capsys, "dataset-gen", "--scenario", "rect3", "-o", b, "--trajectories", 4,
            "--points", 10, "--jobs", 3)
        assert a.read_bytes() == b.read_bytes()

    def test_negative_sigma(self, capsys, tmp_path):
        code, _, err = run(capsys, "dataset-gen", "--scenario", "rect3", "-o", tmp_path / "d.csv",
                           "--sigma-deg", -1)
        assert code == 1
        assert err.strip().splitlines()[-1].startswith("error: config:")


class TestPipeline:

    def test_label_then_train_then_eval(self, capsys, tmp_path, train_csv, test_csv):
        labeled = tmp_path / "labeled.csv"
        code, out, _ = run(capsys, "label", "-i", train_csv, "-o", labeled)
        assert code == 0 and "samples=" in out
        frame = pd.read_csv(labeled)
        assert set(frame["label_source"]) == {"geometric"}

        model = tmp_path / "model.json"
        history = tmp_path / "history.csv"
        code, out, _ = run(capsys, "train", "-i", labeled, "-o", model, "--history", history,
                           "--max-epochs", 5, "--seed", 3)
        assert code == 0
        assert out.startswith("dims=14x10x5x2")
        assert load_model(model).metadata["label_source"] == "geometric"
        assert len(pd.read_csv(history)) >= 1

        summary = tmp_path / "summary.csv"
        cdf = tmp_path / "cdf.csv"
        code, _, _ = run(capsys, "eval", "-i", test_csv, "-o", summary, "--model", model,
                         "--cdf", cdf)
        assert code == 0
        row = pd.read_csv(summary)
        assert list(row.columns) == SUMMARY_COLUMNS
        assert row["config"].iloc[0] == f"rect3_s5_nn_geometric_n{len(frame)}"
        assert row["n"].iloc[0] == 20
        assert pd.read_csv(cdf)["fraction"].iloc[-1] == 1.0

    def test_predict(self, capsys, tmp_path, train_csv, test_csv):
        model = tmp_path / "model.json"
        assert run(capsys, "train", "-i", train_csv, "-o", model, "--max-epochs", 2)[0] == 0
        out_path = tmp_path / "pred.csv"
        code, out, _ = run(capsys, "predict", "--model", model, "-i", test_csv, "-o", out_path)
        assert code == 0
        frame = pd.read_csv(out_path)
        assert list(frame.columns) == ["traj", "step", "est_x", "est_y"]
        assert len(frame) == 20

    def test_geo_eval(self, capsys, tmp_path, test_csv):
        summary = tmp_path / "summary.csv"
        code, _, _ = run(capsys, "eval", "-i", test_csv, "-o", summary, "--algo", "geo")
        assert code == 0
        assert pd.read_csv(summary)["config"].iloc[0] == "rect3_s5_geo_none_n0"

    def test_nn_eval_needs_model(self, capsys, tmp_path, test_csv):
        code, _, err = run(capsys, "eval", "-i", test_csv, "-o", tmp_path / "s.csv")
        assert code == 1
        assert "error: config:" in err

    def test_roster_mismatch(self, capsys, tmp_path, train_csv):
        model = tmp_path / "model.json"
        assert run(capsys, "train", "-i", train_csv, "-o", model, "--max-epochs", 1)[0] == 0
        other = tmp_path / "rect4.csv"
        run(capsys, "dataset-gen", "--scenario", "rect4", "-o", other, "--trajectories", 1,
            "--points", 5)
        code, _, err = run(capsys, "predict", "--model", model, "-i", other, "-o",
                           tmp_path / "p.csv")
        assert code == 1
        assert "error: model_format:" in err

    def test_missing_input(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "-i", tmp_path / "nope.csv", "-o", tmp_path / "m.json")
        assert code == 1
        assert err.strip().splitlines()[-1].startswith("error: file_not_found:")

    def test_tune_then_train_reproduces_model(self, capsys, tmp_path, train_csv):
        config = tmp_path / "grid.json"
        config.write_text(json.dumps({
            "tuning": {"node_factors": [0.7], "dropouts": [0.0, 0.05],
                       "learning_rates": [0.002, 0.006]},
            "training": {"max_epochs": 4},
        }), encoding="utf-8")
        best = tmp_path / "best.json"
        tuned = tmp_path / "tuned.json"
        leaderboard = tmp_path / "leaderboard.csv"
        code, _, _ = run(capsys, "tune", "-i", train_csv, "-o", best, "--config", config,
                         "--model-out", tuned, "--leaderboard", leaderboard, "--seed", 2)
        assert code == 0
        assert len(pd.read_csv(leaderboard)) == 4

        retrained = tmp_path / "retrained.json"
        assert run(capsys, "train", "-i", train_csv, "-o", retrained, "--config", best)[0] == 0
        a, b = load_model(tuned), load_model(retrained)
        for p, q in zip(a.parameters, b.parameters):
            np.testing.assert_array_equal(p, q)


def test_experiment_command(capsys, tmp_path):
    spec = tmp_path / "tiny.json"
    spec.write_text(json.dumps({
        "scenario": "rect3", "sigmas_deg": [5], "algorithms": ["geo"],
        "test_trajectories": 2, "test_points": 5, "seeds": [0],
    }), encoding="utf-8")
    out_dir = tmp_path / "report"
    code, out, _ = run(capsys, "experiment", spec, "-o", out_dir)
    assert code == 0
    assert "configurations=1" in out
    assert (out_dir / "summary.csv").is_file()
    assert (out_dir / "cdf_rect3_s5_geo_none_n0.csv").is_file()


def test_pipeline_matches_experiment(capsys, tmp_path):
    settings = {"train": {"max_epochs": 6, "patience": 3}, "geoloc": {"label_window": 3}}
    spec = spec_from_dict({
        "scenario": "rect3", "sigmas_deg": [5], "algorithms": ["nn"],
        "label_sources": ["geometric"], "train_sizes": [60], "test_trajectories": 3,
        "test_points": 10, "seeds": [0], **settings,
    })
    record = run_experiment(spec).records_for("rect3_s5_nn_geometric_n60")[0]

    config = tmp_path / "config.json"
    config.write_text(json.dumps({"training": settings["train"],
                                  "geoloc": settings["geoloc"]}), encoding="utf-8")
    train_csv, labeled, model = tmp_path / "train.csv", tmp_path / "labeled.csv", tmp_path / "m.json"
    test_csv, summary = tmp_path / "test.csv", tmp_path / "summary.csv"
    steps = [
        ("dataset-gen", "--scenario", "rect3", "-o", train_csv, "--train-size", 60,
         "--seed", 0, "--split", "train"),
        ("label", "-i", train_csv, "-o", labeled, "--config", config),
        ("train", "-i", labeled, "-o", model, "--config", config, "--seed", 0),
        ("dataset-gen", "--scenario", "rect3", "-o", test_csv, "--trajectories", 3,
         "--points", 10, "--seed", holdout_seed(0), "--split", "test"),
        ("eval", "-i", test_csv, "-o", summary, "--model", model),
    ]
    for argv in steps:
        assert run(capsys, *argv)[0] == 0, argv[0]

    row = pd.read_csv(summary).iloc[0]
    for name, value in record.summary.to_dict().items():
        assert row[name] == pytest.approx(value, rel=1e-12, abs=1e-12), name
