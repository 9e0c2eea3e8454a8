import json
import os

import pandas as pd
import pytest

from cellprog.main import EXIT_OK, EXIT_VALIDATION, build_parser, cmd_run, load_run_config


def run(out, *argv):
    return cmd_run([*argv, "--out", str(out)])


def read(out, *parts):
    with open(os.path.join(out, *parts), encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture
def synth_run(tmp_path):
    """A small noiseless LFP run: 2 cycles, one row per 30 s"""
    out = tmp_path / "run"
    code = run(out, "synth", "--chemistry", "lfp", "--cycles", "2", "--decimation", "300", "--noiseless", "--seed", "7")
    assert code == EXIT_OK
    return out


def test_synth_writes_data_and_truth(synth_run):
    frame = pd.read_csv(os.path.join(synth_run, "data", "synth.csv"))
    assert list(frame.columns[:7]) == ["cell_id", "cycle", "step", "time", "current_a", "voltage_v", "capacity_ah"]
    assert sorted(frame["cell_id"].unique()) == ["LFP-0.2C-0.5C", "LFP-0.5C-0.9C", "LFP-1C-1.3C", "LFP-1.5C-1.6C"]
    truth = read(synth_run, "data", "synth_truth.json")
    assert truth["seed"] == 7
    assert truth["noise_sigma_v"] == 0.0
    assert len(truth["half_cycles"]) == 4 * 2 * 2


def test_manifest_records_command_and_outputs(synth_run):
    manifest = read(synth_run, "manifest_synth.json")
    assert manifest["command"] == "synth"
    assert manifest["seed"] == 7
    assert manifest["config"]["synth"]["cycles"] == 2
    assert "data/synth.csv" in manifest["outputs"]
    assert not os.path.exists(os.path.join(synth_run, "error.json"))


def test_synth_is_reproducible(tmp_path):
    args = ("synth", "--cycles", "1", "--decimation", "300", "--seed", "3")
    assert run(tmp_path / "a", *args) == EXIT_OK
    assert run(tmp_path / "b", *args) == EXIT_OK
    with open(tmp_path / "a" / "data" / "synth.csv", "rb") as a, open(tmp_path / "b" / "data" / "synth.csv", "rb") as b:
        assert a.read() == b.read()


def test_missing_input_is_a_validation_error(tmp_path):
    missing = str(tmp_path / "missing.csv")
    code = run(tmp_path / "out", "dca", "--input", missing)
    assert code == EXIT_VALIDATION
    error = read(tmp_path / "out", "error.json")
    assert error["stage"] == "dca"
    assert error["error_type"] == "InvalidPath"
    assert error["path"] == missing


def test_bad_arguments_exit_with_validation_code(tmp_path):
    assert cmd_run(["frobnicate"]) == EXIT_VALIDATION
    assert run(tmp_path, "synth", "--cycles", "0") == EXIT_VALIDATION
    assert run(tmp_path, "synth", "--chemistry", "unobtainium") == EXIT_VALIDATION
    assert run(tmp_path, "dca", "--window", "10") == EXIT_VALIDATION


def test_config_file_is_overridden_by_flags(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 5, "synth": {"cycles": 4, "decimation": 50}, "analysis": {"fraction": 0.2}}))
    args = build_parser().parse_args(["synth", "--config", str(path), "--cycles", "9"])
    config = load_run_config(args)
    assert config.seed == 5
    assert config.synth.cycles == 9
    assert config.synth.decimation == 50
    assert config.analysis.fraction == 0.2


def test_analysis_pipeline(synth_run):
    assert run(synth_run, "dca") == EXIT_OK
    index = read(synth_run, "dca", "index.json")
    assert len(index) == 16
    for entry in index:
        assert os.path.exists(os.path.join(synth_run, "dca", entry["file"]))
        assert 0.5 < entry["soh"] < 1.1

    assert run(synth_run, "peaks") == EXIT_OK
    charge = read(synth_run, "peaks", "trend_CHG.json")
    assert charge["chemistry"] == "LiFePO4"
    assert "A" in charge["series"]
    assert os.path.exists(os.path.join(synth_run, "peaks", "trend_DCH.json"))

    assert run(synth_run, "report") == EXIT_OK
    assert os.path.exists(os.path.join(synth_run, "report", "capacity_summary.csv"))
    assert os.path.exists(os.path.join(synth_run, "report", "trend_CHG_A.csv"))
    assert os.path.exists(os.path.join(synth_run, "report", "trend_CHG_A.svg"))
    for command in ("dca", "peaks", "report"):
        assert read(synth_run, f"manifest_{command}.json")["command"] == command


def test_peaks_without_dca_fails_cleanly(synth_run):
    assert run(synth_run, "peaks") == EXIT_VALIDATION
    assert read(synth_run, "error.json")["stage"] == "peaks"


def test_train_eval_report(synth_run, tmp_path):
    small = tmp_path / "small.json"
    small.write_text(json.dumps({"train": {"conv_filters": 4, "lstm_units": 4, "epochs": 2, "row_stride": 10}}))
    assert run(synth_run, "train", "--config", str(small)) == EXIT_OK
    reports = read(synth_run, "reports", "train_EkfCnnLstm.json")
    checkpoints = sorted(os.listdir(os.path.join(synth_run, "models", "EkfCnnLstm")))
    assert checkpoints == sorted(f"{regime}.npz" for regime in reports)
    for report in reports.values():
        assert len(report["train_loss"]) == 2

    assert run(synth_run, "eval", "--config", str(small)) == EXIT_OK
    evaluation = read(synth_run, "reports", "eval_EkfCnnLstm.json")
    assert sorted(evaluation) == sorted(reports)
    for scores in evaluation.values():
        assert set(scores) == {"teacher_forced", "autoregressive"}

    assert run(synth_run, "report") == EXIT_OK
    assert os.path.exists(os.path.join(synth_run, "report", "loss_EkfCnnLstm.svg"))


def test_error_record_removed_after_success(synth_run):
    assert run(synth_run, "dca", "--input", str(synth_run / "nope.csv")) == EXIT_VALIDATION
    assert os.path.exists(os.path.join(synth_run, "error.json"))
    assert run(synth_run, "dca") == EXIT_OK
    assert not os.path.exists(os.path.join(synth_run, "error.json"))
