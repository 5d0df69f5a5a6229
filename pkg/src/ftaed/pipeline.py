"""Stage functions shared by the CLI and the end-to-end tests.

A work directory holds one file per stage artifact, so stages can be rerun
independently and their outputs diffed.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .data import (
    DatasetSplit,
    IncidentLog,
    NormalizationStats,
    SensorGrid,
    TrainingMask,
    assemble_grid,
    build_training_mask,
    fit_normalization,
    grid_to_readings,
    parse_day_assignment,
    parse_incident_log,
    parse_sensor_csv,
    split_days,
    write_day_assignment,
    write_incident_log,
    write_sensor_csv,
)
from .detection import (
    detect_from_errors,
    evaluate_events,
    label_timesteps,
    pick_alpha_for_fpr,
    roc_auc,
    time_scores,
)
from .errors import ConfigError
from .imputation import AsmParams, asm_impute, local_average_impute
from .models import AutoencoderModel, ModelConfig, default_config
from .synthetic import GroundTruth, InjectedIncident, SynthConfig, generate_nominal, inject_incidents, random_incidents
from .training import (
    ThresholdVector,
    TrainConfig,
    TrainResult,
    node_errors,
    reconstruction_mse,
    train_model,
)

log = logging.getLogger(__name__)

SENSORS = "sensors.csv"
INCIDENTS = "incidents.csv"
DAYS = "days.csv"
TRUTH = "truth.csv"
GRID = "grid.npz"
IMPUTED = "imputed.npz"
NORMALIZATION = "normalization.txt"
MODEL = "model.ftm"
LOSS_HISTORY = "loss_history.csv"
THRESHOLDS = "thresholds.csv"
DETECTIONS = "detections.csv"
METRICS = "metrics.txt"
ROC = "roc.csv"


# ---------------------------------------------------------------------------
# Synthetic scenario


@dataclass
class Scenario:
    grid: SensorGrid
    log: IncidentLog
    truth: list[GroundTruth]
    incidents: list[InjectedIncident]
    split: DatasetSplit


def synth_config(cfg: PipelineConfig) -> SynthConfig:
    s = cfg.section("synth")
    return SynthConfig(
        n_milemarkers=s["n_milemarkers"],
        n_lanes=s["n_lanes"],
        n_days=s["n_days"],
        steps_per_day=s["steps_per_day"],
        start_hour=cfg["data.day_start_hour"],
        first_day=s["first_day"],
        free_speed=s["free_speed"],
        congested_speed=s["congested_speed"],
        rush_start_hour=s["rush_start_hour"],
        rush_end_hour=s["rush_end_hour"],
        wave_speed=s["wave_speed"],
        noise_std=s["noise_std"],
        missing_fraction=s["missing_fraction"],
        seed=cfg["seed"],
        tz=cfg["data.tz"],
    )


def build_scenario(
    config: SynthConfig,
    n_train: int,
    n_validation: int,
    n_incidents: int,
    delay_range_s: tuple[int, int] = (300, 720),
    seed: int = 0,
) -> Scenario:
    """Nominal days split chronologically; half the incidents (rounded up) land on validation days.

    The rest go on training days, where the crash masks keep them out of training.
    """
    grid, _ = generate_nominal(config)
    split = split_days(grid, n_train, n_validation, len(grid.days) - n_train - n_validation)
    n_val = n_incidents if not split.train else math.ceil(n_incidents / 2)
    incidents = []
    if n_val and split.validation:
        incidents += random_incidents(grid, n_val, list(split.validation), seed=seed + 1, delay_range_s=delay_range_s)
    if n_incidents - n_val:
        incidents += random_incidents(grid, n_incidents - n_val, list(split.train), seed=seed + 2, delay_range_s=delay_range_s)
    grid, incident_log, truth = inject_incidents(grid, incidents, config.free_speed)
    return Scenario(grid, incident_log, truth, incidents, split)


def scenario_from_config(cfg: PipelineConfig) -> Scenario:
    return build_scenario(
        synth_config(cfg),
        cfg["synth.train_days"],
        cfg["synth.validation_days"],
        cfg["synth.n_incidents"],
        (cfg["synth.delay_min_s"], cfg["synth.delay_max_s"]),
        seed=cfg["seed"],
    )


def write_truth(path, truth: list[GroundTruth]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true_time_unix", "report_time_unix", "milemarker", "lane"])
        for g in truth:
            w.writerow([g.true_time, g.report_time, repr(g.milemarker), g.lane])


def write_scenario(scenario: Scenario, workdir) -> None:
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    write_sensor_csv(workdir / SENSORS, grid_to_readings(scenario.grid))
    write_incident_log(workdir / INCIDENTS, scenario.log)
    write_day_assignment(workdir / DAYS, scenario.split)
    write_truth(workdir / TRUTH, scenario.truth)


# ---------------------------------------------------------------------------
# Ingestion, imputation, preparation


def ingest(sensor_path, cfg: PipelineConfig) -> SensorGrid:
    readings = parse_sensor_csv(sensor_path)
    return assemble_grid(readings, (cfg["data.day_start_hour"], cfg["data.day_end_hour"]), cfg["data.tz"])


def asm_params(cfg: PipelineConfig) -> AsmParams:
    a = cfg.section("asm")
    a.pop("smooth_observed")
    return AsmParams(**a)


def impute(grid: SensorGrid, cfg: PipelineConfig) -> SensorGrid:
    grid = asm_impute(grid, asm_params(cfg), smooth_observed=cfg["asm.smooth_observed"])
    return local_average_impute(grid, (cfg["impute.radius_cells"], cfg["impute.radius_steps"]))


@dataclass
class Prepared:
    """Imputed, normalized grid with its split and masks."""

    grid: SensorGrid
    stats: NormalizationStats
    split: DatasetSplit
    mask: TrainingMask
    train_rows: np.ndarray  # boolean per row
    val_rows: np.ndarray

    @property
    def train_mask(self) -> np.ndarray:
        return self.mask.usable & self.train_rows

    @property
    def val_mask(self) -> np.ndarray:
        return self.mask.usable & self.val_rows


def resolve_split(grid: SensorGrid, cfg: PipelineConfig, assignment_path=None) -> DatasetSplit:
    path = assignment_path or cfg["split.assignment"] or None
    assignment = parse_day_assignment(path) if path else None
    return split_days(grid, cfg["split.train"], cfg["split.validation"], cfg["split.excluded"], assignment)


def prepare(
    grid: SensorGrid,
    incident_log: IncidentLog,
    split: DatasetSplit,
    cfg: PipelineConfig | None = None,
    stats: NormalizationStats | None = None,
) -> Prepared:
    cfg = cfg or PipelineConfig()
    mask = build_training_mask(
        incident_log,
        grid,
        include_manual_anomalies=cfg["mask.include_manual_anomalies"],
        excluded_days=split.excluded,
        crash_pre_s=cfg["mask.crash_pre_s"],
        impact_s=cfg["mask.impact_s"],
    )
    train_rows = split.rows(grid, "train")
    stats = stats or fit_normalization(grid, mask.usable & train_rows)
    return Prepared(stats.apply_grid(grid), stats, split, mask, train_rows, split.rows(grid, "validation"))


def save_normalization(path, stats: NormalizationStats) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in stats.to_dict().items():
            fh.write(f"{k}={v!r}\n")


def load_normalization(path) -> NormalizationStats:
    with open(path, encoding="utf-8") as fh:
        d = dict(line.strip().split("=", 1) for line in fh if line.strip())
    return NormalizationStats.from_dict(d)


# ---------------------------------------------------------------------------
# Training


def model_config(cfg: PipelineConfig, architecture: str | None = None) -> ModelConfig:
    overrides = cfg.section("model")
    arch = architecture or overrides.pop("architecture")
    overrides.pop("architecture", None)
    if cfg["train.learning_rate"] is not None:
        overrides["learning_rate"] = cfg["train.learning_rate"]
    return default_config(arch, **overrides)


def train_config(cfg: PipelineConfig, model_cfg: ModelConfig) -> TrainConfig:
    if cfg["train.patience"] >= cfg["train.max_epochs"]:
        raise ConfigError("train.patience", "must be smaller than train.max_epochs")
    return TrainConfig(
        learning_rate=model_cfg.learning_rate,
        batch_size=cfg["train.batch_size"],
        max_epochs=cfg["train.max_epochs"],
        patience=cfg["train.patience"],
        seed=cfg["seed"],
    )


def train(prep: Prepared, cfg: PipelineConfig, architecture: str | None = None, progress=None) -> TrainResult:
    mc = model_config(cfg, architecture)
    model = AutoencoderModel(mc, prep.grid.n_milemarkers, prep.grid.n_lanes, seed=cfg["seed"])
    val = prep.val_mask if prep.val_mask.any() else None
    return train_model(model, prep.grid, prep.train_mask, train_config(cfg, mc), val_mask=val, progress=progress)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class SweepRow:
    target_fpr: float
    alpha: float
    fpr: float
    fdr: float
    miss_pct: float
    delay_mean: float
    delay_std: float


def evaluate(
    model: AutoencoderModel,
    prep: Prepared,
    incident_log: IncidentLog,
    thresholds: ThresholdVector,
    cfg: PipelineConfig | None = None,
    target_fpr: float | None = None,
    errors: np.ndarray | None = None,
) -> tuple[dict, list[SweepRow], object]:
    """Pick alpha on validation days for the target FPR and score the crashes.

    Returns the metrics dict (report fields), one sweep row per configured FPR
    target and the validation ROC curve. ``errors`` may carry precomputed
    ``node_errors`` for every row.
    """
    cfg = cfg or PipelineConfig()
    target = cfg["eval.target_fpr"] if target_fpr is None else target_fpr
    grid = prep.grid
    if errors is None:
        errors = node_errors(model, grid, per_feature=thresholds.per_feature)
    val = np.flatnonzero(prep.val_rows)
    scores = time_scores(errors[val], thresholds)
    labels = label_timesteps(
        incident_log, grid.times[val], cfg["eval.label_pre_s"], cfg["eval.label_post_s"], cfg["eval.manual_excluded"]
    )
    curve = roc_auc(scores, labels)
    if cfg["eval.event_days"] == "validation":
        event_rows = val
    else:
        event_rows = np.arange(grid.n_times)

    def score_at(t: float) -> SweepRow:
        alpha, fpr = pick_alpha_for_fpr(curve, t)
        fdr = float(curve.fdr[np.flatnonzero(curve.alpha == alpha)[0]])
        det = detect_from_errors(grid.times[event_rows], errors[event_rows], thresholds, alpha)
        ev = evaluate_events(det, incident_log, cfg["eval.match_window_s"])
        return SweepRow(t, alpha, fpr, fdr, ev.miss_pct, ev.delay_mean, ev.delay_std)

    main = score_at(target)
    metrics = {
        "reporting_delay_mean": main.delay_mean,
        "reporting_delay_std": main.delay_std,
        "miss_pct": main.miss_pct,
        "recon_mse": reconstruction_mse(model, grid, prep.val_mask if prep.val_mask.any() else prep.train_mask),
        "auc": curve.auc,
        "fpr_achieved": main.fpr,
        "fdr_achieved": main.fdr,
        "alpha": main.alpha,
    }
    sweep = [score_at(t) for t in cfg.fpr_sweep()]
    return metrics, sweep, curve


def report_lines(architecture: str, metrics: dict, sweep: list[SweepRow]) -> list[str]:
    """Human-readable tables: one results row and an FPR sweep."""
    lines = [
        "model | reporting delay (min) | miss % | recon MSE | AUC",
        f"{architecture} | {metrics['reporting_delay_mean']:.2f} +/- {metrics['reporting_delay_std']:.2f} | "
        f"{metrics['miss_pct']:.2f} | {metrics['recon_mse']:.4f} | {metrics['auc']:.3f}",
        "",
        "target FPR | alpha | FPR | FDR | reporting delay (min) | miss %",
    ]
    for r in sweep:
        lines.append(
            f"{r.target_fpr:.2%} | {r.alpha:.4g} | {r.fpr:.4f} | {r.fdr:.4f} | "
            f"{r.delay_mean:.2f} +/- {r.delay_std:.2f} | {r.miss_pct:.2f}"
        )
    return lines


def write_roc(path, curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["alpha", "fpr", "tpr", "fdr"])
        for row in zip(curve.alpha, curve.fpr, curve.tpr, curve.fdr):
            w.writerow([f"{x:.10g}" for x in row])


def load_incidents(path) -> IncidentLog:
    return parse_incident_log(path) if Path(path).exists() else IncidentLog()
