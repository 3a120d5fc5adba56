import json
import os

import numpy as np
import pytest

from quadtrack.backbone import load_weights, save_weights
from quadtrack.harness import report
from quadtrack.harness.cli import main, read_sequence_spec
from quadtrack.metrics import MetricReport
from quadtrack.tracker import build_model


def _write_spec(path, **overrides):
    values = dict(seed=5, num_objects=2, num_frames=4, height=64, width=64,
                  size_min=14, size_max=18)
    values.update(overrides)
    with open(path, "w") as f:
        for key, val in values.items():
            f.write(f"{key} = {val}\n")
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A simulated sequence plus saved (untrained) weights, shared per module."""
    root = tmp_path_factory.mktemp("cli")
    spec = _write_spec(root / "spec.txt")
    seq_dir = str(root / "seq")
    assert main(["simulate", "--spec", spec, "--out", seq_dir]) == 0
    weights_path = str(root / "weights.qtw")
    save_weights(build_model(0).weights, weights_path)
    return root, seq_dir, weights_path


# ---------------------------------------------------------------- parsing


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["selftest", "--frobnicate"])
    assert err.value.code == 2


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as err:
        main(["transcode"])
    assert err.value.code == 2


def test_spec_file_errors(tmp_path):
    path = tmp_path / "spec.txt"
    path.write_text("colour = 3\n")
    with pytest.raises(ValueError, match="line 1: unknown key 'colour'"):
        read_sequence_spec(str(path))
    path.write_text("seed 3\n")
    with pytest.raises(ValueError, match="line 1: expected key = value"):
        read_sequence_spec(str(path))
    path.write_text("occlude_obj = 0\n")
    with pytest.raises(ValueError, match="occlusion needs all of"):
        read_sequence_spec(str(path))


def test_spec_file_defaults_and_comments(tmp_path):
    path = tmp_path / "spec.txt"
    path.write_text("# a comment\nseed = 9\n\nnum_frames = 3\n")
    spec = read_sequence_spec(str(path))
    assert spec["seed"] == 9 and spec["num_frames"] == 3
    assert spec["height"] == 96 and spec["occlude_obj"] is None


# ---------------------------------------------------------------- commands


def test_simulate_writes_sequence_dir(pipeline):
    _, seq_dir, _ = pipeline
    assert os.path.isfile(os.path.join(seq_dir, "meta.txt"))
    assert os.path.isfile(os.path.join(seq_dir, "gt.csv"))
    assert len(os.listdir(os.path.join(seq_dir, "frames"))) == 4
    assert os.path.isdir(os.path.join(seq_dir, "masks"))


def test_track_missing_weights_exits_1_naming_path(pipeline, capsys):
    _, seq_dir, _ = pipeline
    missing = "/nowhere/w.qtw"
    code = main(["track", "--task", "sot", "--seq", seq_dir,
                 "--weights", missing, "--out", "/tmp/unused-out"])
    assert code == 1
    assert missing in capsys.readouterr().err


def test_track_and_eval_sot(pipeline, tmp_path, capsys):
    _, seq_dir, weights = pipeline
    res = str(tmp_path / "res")
    rep = str(tmp_path / "rep")
    assert main(["track", "--task", "sot", "--seq", seq_dir,
                 "--weights", weights, "--out", res]) == 0
    assert os.path.isfile(os.path.join(res, "results.csv"))
    assert main(["eval", "--task", "sot", "--seq", seq_dir, "--results", res,
                 "--out", rep, "--deterministic"]) == 0
    out = capsys.readouterr().out
    assert "auc=" in out
    for name in ("report.txt", "report.json", "per_frame.csv",
                 "success_curve.png", "iou_per_frame.png"):
        assert os.path.isfile(os.path.join(rep, name)), name
    payload = json.loads(open(os.path.join(rep, "report.json")).read())
    assert payload["task"] == "sot"
    assert "auc" in payload["metrics"]
    lines = open(os.path.join(rep, "per_frame.csv")).read().splitlines()
    assert lines[0] == "frame,iou"
    assert len(lines) == 1 + 3  # frames 2..4 scored


def test_track_and_eval_mot(pipeline, tmp_path):
    _, seq_dir, weights = pipeline
    res = str(tmp_path / "res")
    rep = str(tmp_path / "rep")
    assert main(["track", "--task", "mot", "--seq", seq_dir,
                 "--weights", weights, "--out", res]) == 0
    assert main(["eval", "--task", "mot", "--seq", seq_dir, "--results", res,
                 "--out", rep, "--deterministic"]) == 0
    text = open(os.path.join(rep, "report.txt")).read()
    assert "task = mot" in text and "mota = " in text
    assert os.path.isfile(os.path.join(rep, "error_counts.png"))


def test_eval_deterministic_flag_controls_timestamp(pipeline, tmp_path):
    _, seq_dir, weights = pipeline
    res = str(tmp_path / "res")
    assert main(["track", "--task", "sot", "--seq", seq_dir,
                 "--weights", weights, "--out", res]) == 0
    rep_a, rep_b, rep_c = (str(tmp_path / n) for n in ("a", "b", "c"))
    for rep in (rep_a, rep_b):
        assert main(["eval", "--task", "sot", "--seq", seq_dir, "--results", res,
                     "--out", rep, "--deterministic"]) == 0
    for name in sorted(os.listdir(rep_a)):
        with open(os.path.join(rep_a, name), "rb") as fa:
            with open(os.path.join(rep_b, name), "rb") as fb:
                assert fa.read() == fb.read(), name
    assert main(["eval", "--task", "sot", "--seq", seq_dir, "--results", res,
                 "--out", rep_c]) == 0
    assert "generated = " in open(os.path.join(rep_c, "report.txt")).read()
    assert "generated" not in open(os.path.join(rep_a, "report.txt")).read()


def test_train_toy_writes_artifacts(tmp_path):
    out = str(tmp_path / "train")
    assert main(["train-toy", "--out", out, "--steps", "4", "--stage2-steps", "2",
                 "--frames", "2", "--size", "64", "--singles", "1", "--multis", "1",
                 "--size-min", "14", "--size-max", "18", "--seed", "3"]) == 0
    weights, meta = load_weights(os.path.join(out, "weights.qtw"))
    assert meta["seed"] == 3 and meta["stage1_steps"] == 4
    assert all(np.all(np.isfinite(w)) for w in weights.values())
    assert os.path.isfile(os.path.join(out, "config.txt"))
    assert os.path.isfile(os.path.join(out, "loss.csv"))
    assert os.path.isfile(os.path.join(out, "loss_curve.png"))


def test_selftest_passes_and_writes_lines(tmp_path, capsys):
    out = str(tmp_path / "selftest.txt")
    assert main(["selftest", "--out", out]) == 0
    stdout = capsys.readouterr().out
    assert "PASS correspondence rows are stochastic" in stdout
    assert "FAIL" not in stdout
    assert open(out).read() == stdout


# ---------------------------------------------------------------- report


def test_per_frame_table_oracle():
    rep = MetricReport(
        task="vos",
        metrics={"j": 0.5, "f": 0.5, "jf": 0.5},
        curves={"j_per_frame": [0.25, 0.75], "f_per_frame": [1.0, 0.0]},
    )
    assert report.per_frame_table(rep) == (
        "frame,f,j\n1,1.000000,0.250000\n2,0.000000,0.750000\n"
    )


def test_per_frame_table_uses_frames_curve():
    rep = MetricReport(
        task="mot",
        metrics={"mota": 1.0},
        curves={"frames": [3, 7], "fp_per_frame": [0.0, 1.0]},
    )
    assert report.per_frame_table(rep) == "frame,fp\n3,0.000000\n7,1.000000\n"


def test_per_frame_table_rejects_ragged_curves():
    rep = MetricReport(task="sot", metrics={}, curves={"a_per_frame": [1.0],
                                                       "b_per_frame": [1.0, 2.0]})
    with pytest.raises(ValueError, match="length differs"):
        report.per_frame_table(rep)


def test_report_text_timestamp_is_optional():
    rep = MetricReport(task="sot", metrics={"auc": 0.5})
    assert "generated" not in report.report_text(rep)
    assert report.report_text(rep, "2026-01-01T00:00:00").endswith(
        "generated = 2026-01-01T00:00:00\n"
    )


def test_write_report_rejects_unknown_task(tmp_path):
    rep = MetricReport(task="pose", metrics={})
    with pytest.raises(ValueError, match="no report layout"):
        report.write_report(rep, str(tmp_path))
