from __future__ import annotations

import re
import subprocess
import sys

import numpy as np
import pytest

from ftaed import cli
from ftaed import pipeline as pl
from ftaed.config import SCHEMA, PipelineConfig, load_config, parse_config_text
from ftaed.data import SensorGrid
from ftaed.detection import REPORT_FIELDS, read_metrics_report
from ftaed.errors import ConfigError

SMALL_CFG = """\
# tiny corridor so the whole pipeline runs in seconds
seed = 3
synth.n_milemarkers = 8
synth.n_lanes = 2
synth.n_days = 3
synth.train_days = 2
synth.validation_days = 1
synth.n_incidents = 2
split.train = 2
split.validation = 1
split.excluded = 0
model.hidden_dim = 8
model.latent_dim = 4
train.max_epochs = 3
train.patience = 2
"""


# -- config -----------------------------------------------------------------


def test_defaults_cover_schema():
    cfg = PipelineConfig()
    assert set(cfg.values) == set(SCHEMA)
    assert cfg["split.train"] == 14 and cfg["eval.target_fpr"] == 0.05


def test_parse_text():
    cfg = parse_config_text("seed = 9  # comment\nmodel.architecture=stg_rgcn\nmask.include_manual_anomalies=yes\n", env={})
    assert cfg["seed"] == 9 and cfg["model.architecture"] == "stg_rgcn"
    assert cfg["mask.include_manual_anomalies"] is True
    assert cfg["model.hidden_dim"] is None


@pytest.mark.parametrize(
    "text",
    ["nope.key = 1", "seed = abc", "model.architecture = lstm", "just words", "eval.target_fpr = 2", "data.day_end_hour = 1"],
)
def test_bad_config(text):
    with pytest.raises(ConfigError):
        parse_config_text(text, env={})


def test_seed_env_override():
    assert parse_config_text("seed = 1", env={"FTAED_SEED": "42"})["seed"] == 42
    assert parse_config_text("seed = 1", env={})["seed"] == 1


def test_dump_round_trip(tmp_path):
    cfg = parse_config_text(SMALL_CFG, env={})
    (tmp_path / "c.cfg").write_text(cfg.dump())
    assert load_config(tmp_path / "c.cfg", env={}).values == cfg.values


def test_model_config_overrides():
    cfg = parse_config_text("model.architecture = stg_gat\nmodel.dropout = 0.2", env={})
    m = pl.model_config(cfg)
    assert m.architecture.value == "stg_gat" and m.dropout == 0.2 and m.gat_heads == 4
    assert pl.model_config(cfg, "mlp").latent_dim == 2


# -- CLI --------------------------------------------------------------------


@pytest.mark.parametrize("command", ["synth", "ingest", "impute", "train", "calibrate", "detect", "evaluate", "heatmap"])
def test_help(command, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main([command, "--help"])
    assert exc.value.code == 0
    assert "--workdir" in capsys.readouterr().out


def test_unknown_command(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate"])
    assert exc.value.code == 2


def test_bad_config_exit_code(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("nope = 1\n")
    assert cli.main(["synth", "--config", str(tmp_path / "bad.cfg"), "--workdir", str(tmp_path / "w")]) == 2
    assert "configuration error" in capsys.readouterr().err


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "ftaed", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "evaluate" in out.stdout


def run(args, workdir, cfg_path):
    return cli.main([*args, "--workdir", str(workdir), "--config", str(cfg_path)])


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "small.cfg"
    cfg_path.write_text(SMALL_CFG)
    work = root / "work"
    codes = {}
    codes["synth"] = run(["synth"], work, cfg_path)
    codes["train"] = run(["train", "--model", "gcn", "--quiet"], work, cfg_path)
    codes["detect_early"] = run(["detect"], work, cfg_path)
    codes["evaluate"] = run(["evaluate", "--target-fpr", "0.05"], work, cfg_path)
    codes["detect"] = run(["detect"], work, cfg_path)
    codes["heatmap"] = run(["heatmap", "--lane", "1"], work, cfg_path)
    return work, cfg_path, codes


def test_pipeline_produces_metrics(pipeline_run):
    work, _, codes = pipeline_run
    assert codes["synth"] == codes["train"] == codes["evaluate"] == codes["detect"] == 0
    metrics = read_metrics_report(work / pl.METRICS)
    assert set(REPORT_FIELDS) <= set(metrics)
    assert 0 <= metrics["miss_pct"] <= 100 and 0 <= metrics["auc"] <= 1
    for name in (pl.SENSORS, pl.INCIDENTS, pl.DAYS, pl.TRUTH, pl.GRID, pl.IMPUTED, pl.MODEL, pl.LOSS_HISTORY, pl.THRESHOLDS, pl.ROC):
        assert (work / name).exists(), name
    comments = [l for l in (work / pl.METRICS).read_text().splitlines() if l.startswith("#")]
    assert any("gcn" in l for l in comments)


def test_detect_before_calibrate(pipeline_run, tmp_path, capsys):
    work, cfg_path, codes = pipeline_run
    assert codes["detect_early"] == 1
    # reproduce in a fresh copy without thresholds to capture the diagnostic
    fresh = tmp_path / "w"
    fresh.mkdir()
    for name in (pl.IMPUTED, pl.INCIDENTS, pl.DAYS, pl.MODEL, pl.NORMALIZATION):
        (fresh / name).write_bytes((work / name).read_bytes())
    capsys.readouterr()
    assert run(["detect"], fresh, cfg_path) != 0
    assert "MissingThreshold" in capsys.readouterr().err


def test_detections_written(pipeline_run):
    work, _, _ = pipeline_run
    lines = (work / pl.DETECTIONS).read_text().splitlines()
    assert lines[0] == "time_unix,node_id,milemarker,lane,error,threshold"


def test_heatmap_svg(pipeline_run):
    work, _, codes = pipeline_run
    assert codes["heatmap"] == 0
    grid = SensorGrid.load(work / pl.IMPUTED)
    svg = next(work.glob("heatmap_lane1_*.svg")).read_text()
    cells = svg.split('<g id="cells"')[1].split("</g>")[0]
    flags = svg.split('<g id="flags">')[1].split("</g>")[0]
    n_times = len(grid.day_rows(grid.days[-1]))
    assert cells.count("<rect") == n_times * grid.n_milemarkers
    assert "<circle" not in cells
    # detect and heatmap both run at detect.alpha, so markers equal lane-1 detections on that day
    day_times = set(grid.times[grid.day_rows(grid.days[-1])].tolist())
    rows = [l.split(",") for l in (work / pl.DETECTIONS).read_text().splitlines()[1:]]
    expected = sum(1 for r in rows if r[3] == "1" and int(r[0]) in day_times)
    assert flags.count("<circle") == expected


def test_heatmap_markers_match_detections(tmp_path):
    grid_times = np.arange(4) * 30
    g = SensorGrid(grid_times, np.array([70.0, 69.5]), 1, np.full((4, 2, 3), 50.0), np.zeros((4, 2, 3), bool),
                   np.zeros(4, int), ("2023-10-02",))
    flags = np.zeros((4, 2), bool)
    flags[1, 0] = flags[3, 1] = True
    svg = cli.render_heatmap(g, 1, "2023-10-02", flags)
    assert svg.count("<rect") == 8 and svg.count("<circle") == 2


def test_resume_is_byte_identical(pipeline_run, tmp_path):
    work, cfg_path, _ = pipeline_run
    again = tmp_path / "again"
    assert run(["synth"], again, cfg_path) == 0
    assert run(["ingest"], again, cfg_path) == 0
    assert run(["impute"], again, cfg_path) == 0
    for name in (pl.SENSORS, pl.INCIDENTS, pl.DAYS, pl.GRID, pl.IMPUTED):
        assert (again / name).read_bytes() == (work / name).read_bytes(), name
    assert run(["train", "--quiet"], again, cfg_path) == 0
    assert (again / pl.MODEL).read_bytes() == (work / pl.MODEL).read_bytes()
    assert run(["calibrate"], again, cfg_path) == 0
    assert (again / pl.THRESHOLDS).read_bytes() == (work / pl.THRESHOLDS).read_bytes()


def test_train_clears_stale_thresholds(pipeline_run, tmp_path):
    work, cfg_path, _ = pipeline_run
    w = tmp_path / "w"
    w.mkdir()
    for name in (pl.IMPUTED, pl.INCIDENTS, pl.DAYS, pl.THRESHOLDS):
        (w / name).write_bytes((work / name).read_bytes())
    assert run(["train", "--quiet", "--epochs", "2"], w, cfg_path) == 0
    assert not (w / pl.THRESHOLDS).exists()


def test_missing_inputs_exit_one(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text(SMALL_CFG)
    assert run(["impute"], tmp_path / "empty", cfg) == 1
    assert run(["calibrate"], tmp_path / "empty", cfg) == 1
    err = capsys.readouterr().err
    assert re.search(r"not found", err)
