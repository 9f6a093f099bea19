from __future__ import annotations

import json

import pytest

from patterncloth import io
from patterncloth.board import generate_board
from patterncloth.cli import main
from patterncloth.pipeline import ConfigError, config_from_dict, load_config, run_pipeline, stage_seed

SMALL = {"scene": {"rows": 14, "cols": 14, "n_frames": 3}, "metrics": {"n_pairs": 100}}


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigError, match="bogus"):
        config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="scene"):
        config_from_dict({"scene": {"rows": 10, "colz": 3}})


def test_missing_camera_file_is_reported(tmp_path):
    with pytest.raises(ConfigError, match="cameras"):
        config_from_dict({"paths": {"cameras": "nowhere.json"}}, tmp_path)


def test_bad_scene_kind():
    with pytest.raises(ConfigError):
        config_from_dict({"scene": {"kind": "cape"}})


def test_stage_seeds_are_stable_and_distinct():
    assert stage_seed(0, "noise") == stage_seed(0, "noise")
    assert stage_seed(0, "noise") != stage_seed(0, "ransac")
    assert stage_seed(0, "noise") != stage_seed(1, "noise")


def test_pipeline_writes_artifacts_and_report(tmp_path):
    res = run_pipeline(config_from_dict(SMALL), tmp_path / "run")
    assert res.status == 0
    for name in ("board.txt", "cameras.json", "template.obj", "report.json", "manifest.json"):
        assert (tmp_path / "run" / name).exists()
    agg = res.report["alignment"]["aggregate"]
    assert agg["mean_euclidean_mm"] < 1.0
    assert len(list((tmp_path / "run" / "aligned").glob("*.obj"))) == 3


def test_worker_count_does_not_change_outputs(tmp_path):
    a = run_pipeline(config_from_dict(SMALL), tmp_path / "a", workers=1)
    b = run_pipeline(config_from_dict(SMALL), tmp_path / "b", workers=2)
    assert a.manifest["artifacts"] == b.manifest["artifacts"]


def test_seed_changes_outputs(tmp_path):
    a = run_pipeline(config_from_dict({**SMALL, "stages": {"align": False, "metrics": False}}), tmp_path / "a")
    b = run_pipeline(config_from_dict({**SMALL, "seed": 1, "stages": {"align": False, "metrics": False}}), tmp_path / "b")
    assert a.manifest["artifacts"]["board.txt"] != b.manifest["artifacts"]["board.txt"]


def test_cli_board_round_trip(tmp_path, capsys):
    assert main(["board", "gen", "--rows", "12", "--cols", "15", "-o", str(tmp_path / "b.txt")]) == 0
    assert main(["board", "verify", str(tmp_path / "b.txt")]) == 0
    assert io.load_board(tmp_path / "b.txt").cells.shape == (12, 15)


def test_cli_reports_config_errors(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": True}))
    assert main(["pipeline", "run", "--config", str(cfg)]) == 2
    assert "bogus" in capsys.readouterr().err
    cfg.write_text("{nope")
    assert main(["pipeline", "run", "--config", str(cfg)]) == 2


def test_cli_reports_malformed_inputs(tmp_path, capsys):
    io.save_board(generate_board(8, 8, seed=0), tmp_path / "b.txt")
    (tmp_path / "det").mkdir()
    (tmp_path / "det" / "frame_0000.txt").write_text("0 0 center x y 1 -\n")
    args = ["--board", str(tmp_path / "b.txt"), "-o", str(tmp_path / "r")]
    assert main(["register", "--detections", str(tmp_path / "det")] + args) == 2
    assert "frame_0000.txt:1" in capsys.readouterr().err
    assert main(["register", "--detections", str(tmp_path / "missing")] + args) == 2
    assert "not a directory" in capsys.readouterr().err


def test_cli_pipeline_run(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**SMALL, "stages": {"align": False, "metrics": False}}))
    assert main(["pipeline", "run", "--config", str(cfg), "-o", str(tmp_path / "out")]) == 0
    assert (tmp_path / "out" / "manifest.json").exists()
    assert load_config(cfg).scene.rows == 14
