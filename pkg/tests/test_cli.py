import json

import pandas as pd
import pytest

from shiftwell.cli import main
from shiftwell.io import sha256_file
from shiftwell.schema import LABELS


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["synth", "--seed", "0", "--out", str(data)]) == 0
    assert main(["features", "--data", str(data)]) == 0
    config = root / "config.json"
    config.write_text(json.dumps({"epochs": 5, "patience": 3}))
    grid = root / "grid.json"
    grid.write_text(json.dumps([{"learning_rate": 0.005}, {"learning_rate": 0.01}]))
    return root, data, config, grid


def test_synth_and_features_outputs(workspace):
    _, data, _, _ = workspace
    for name in ("hr", "steps", "sleep", "survey", "participants", "labels", "ground_truth",
                 "calibration", "features"):
        assert (data / f"{name}.csv").exists()
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seeds"] == {"seed": 0}
    labels = str(data / "labels.csv")
    assert manifest["outputs"][labels] == sha256_file(labels)
    assert (data / "features.csv.manifest.json").exists()


def test_compare(workspace, capsys):
    root, data, _, _ = workspace
    out = root / "compare.csv"
    assert main(["compare", "--features", str(data / "features.csv"),
                 "--participants", str(data / "participants.csv"), "--out", str(out)]) == 0
    assert "hr_mean" in capsys.readouterr().out
    report = pd.read_csv(out)
    assert report.loc[report["feature"] == "hr_mean", "p_value"].iloc[0] < 0.05
    assert out.with_suffix(".txt").exists()


def test_train_predict_analyze(workspace):
    root, data, config, _ = workspace
    model = root / "model.bin"
    assert main(["train", "--data", str(data), "--config", str(config), "--task", "binary",
                 "--out", str(model)]) == 0
    assert (root / "model_training.csv").exists()
    preds = root / "preds.csv"
    assert main(["predict", "--model", str(model), "--features", str(data / "features.csv"),
                 "--participants", str(data / "participants.csv"), "--out", str(preds)]) == 0
    frame = pd.read_csv(preds)
    assert set(frame["stress"]) <= {"low", "high"}
    p = frame[["stress_p_low", "stress_p_high"]].sum(axis=1)
    assert (abs(p - 1) < 1e-9).all()
    report = root / "importance.csv"
    assert main(["analyze", "--model", str(model), "--features", str(data / "features.csv"),
                 "--out", str(report)]) == 0
    imp = pd.read_csv(report)
    assert len(imp) == 40 and imp["rank"].tolist() == list(range(1, 41))
    assert (root / "importance_correlations.csv").exists()
    assert (root / "importance.csv.manifest.json").exists()


def test_train_single_label_variant_needs_label(workspace, capsys):
    root, data, config, _ = workspace
    code = main(["train", "--data", str(data), "--config", str(config), "--variant", "nn",
                 "--out", str(root / "nn.bin")])
    assert code == 2
    assert "error[usage]" in capsys.readouterr().err
    assert main(["train", "--data", str(data), "--config", str(config), "--variant", "nn",
                 "--label", "stress", "--out", str(root / "nn.bin")]) == 0


def test_evaluate_writes_reports_and_is_byte_identical(workspace):
    root, data, config, grid = workspace
    outs = []
    for name in ("eval_a", "eval_b"):
        out = root / name
        argv = ["evaluate", "--data", str(data), "--config", str(config), "--grid", str(grid),
                "--variants", "mtml", "--tasks", "regression", "--repetitions", "2",
                "--folds", "2", "--seed", "4", "--out", str(out)]
        assert main(argv) == 0
        outs.append(out)
    for name in ("metrics.csv", "significance.csv", "repetitions.csv"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    metrics = pd.read_csv(outs[0] / "metrics.csv")
    assert set(metrics["variant"]) == {"mtml", "baseline"}
    assert len(metrics) == 2 * len(LABELS)
    assert (outs[0] / "manifest.json").exists()


def test_unknown_flag_is_usage_error(capsys):
    assert main(["synth", "--out", "x", "--bogus"]) == 2
    assert "error[usage]" in capsys.readouterr().err
    assert main([]) == 2


def test_help_lists_every_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["evaluate", "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in ("--data", "--features", "--seed", "--config", "--variants", "--tasks", "--grid",
                 "--repetitions", "--folds", "--level", "--jobs", "--no-baseline", "--out"):
        assert flag in text


def test_wrong_feature_columns_is_data_error(workspace, tmp_path, capsys):
    _, data, _, _ = workspace
    bad = tmp_path / "features.csv"
    pd.read_csv(data / "features.csv").drop(columns=["sleep_efficiency"]).to_csv(bad, index=False)
    code = main(["compare", "--features", str(bad), "--participants",
                 str(data / "participants.csv"), "--out", str(tmp_path / "c.csv")])
    assert code == 3
    err = capsys.readouterr().err
    assert "error[data]" in err and "sleep_efficiency" in err
    assert not (tmp_path / "c.csv").exists()


def test_bad_config_is_config_error(workspace, tmp_path, capsys):
    _, data, _, _ = workspace
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"learning_rate": -1}))
    assert main(["train", "--data", str(data), "--config", str(cfg),
                 "--out", str(tmp_path / "m.bin")]) == 4
    assert "error[config]" in capsys.readouterr().err


def test_missing_input_directory_is_data_error(tmp_path):
    assert main(["features", "--data", str(tmp_path / "nowhere")]) == 3
