"""Global ``key=value`` pipeline configuration.

Every key has a default; unknown keys and unparsable values are rejected before
any stage runs. An empty value for a ``model.*``/``train.learning_rate`` key
means "use the architecture default".
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

from .errors import ConfigError

SEED_ENV = "FTAED_SEED"

# key -> (type, default)
SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    # ingestion and splits
    "data.day_start_hour": (float, 4.0),
    "data.day_end_hour": (float, 12.0),
    "data.tz": (str, "America/Chicago"),
    "split.train": (int, 14),
    "split.validation": (int, 5),
    "split.excluded": (int, 1),
    "split.assignment": (str, ""),
    "mask.include_manual_anomalies": (bool, False),
    "mask.crash_pre_s": (int, 1800),
    "mask.impact_s": (int, 7200),
    # imputation
    "asm.sigma_miles": (float, 0.37),
    "asm.tau_s": (float, 66.0),
    "asm.c_free_mph": (float, 50.0),
    "asm.c_cong_mph": (float, -9.3),
    "asm.v_crit_mph": (float, 37.0),
    "asm.delta_v_mph": (float, 12.4),
    "asm.smooth_observed": (bool, False),
    "impute.radius_cells": (int, 1),
    "impute.radius_steps": (int, 2),
    # model and training
    "model.architecture": (str, "gcn"),
    "model.hidden_dim": (int, None),
    "model.latent_dim": (int, None),
    "model.n_layers": (int, None),
    "model.dropout": (float, None),
    "model.gat_heads": (int, None),
    "model.timesteps": (int, None),
    "model.activation": (str, None),
    "model.gat_self_loops": (bool, None),
    "model.rgcn_learned_norm": (bool, None),
    "train.learning_rate": (float, None),
    "train.batch_size": (int, 32),
    "train.max_epochs": (int, 100),
    "train.patience": (int, 10),
    # detection and evaluation
    "detect.alpha": (float, 1.0),
    "detect.per_feature": (bool, False),
    "eval.match_window_s": (int, 900),
    "eval.label_pre_s": (int, 900),
    "eval.label_post_s": (int, 7200),
    "eval.manual_excluded": (bool, True),
    "eval.target_fpr": (float, 0.05),
    "eval.fpr_sweep": (str, "0.01,0.05,0.10"),
    "eval.event_days": (str, "all"),
    # synthetic scenario
    "synth.n_milemarkers": (int, 49),
    "synth.n_lanes": (int, 4),
    "synth.n_days": (int, 6),
    "synth.steps_per_day": (int, 960),
    "synth.first_day": (str, "2023-10-02"),
    "synth.free_speed": (float, 65.0),
    "synth.congested_speed": (float, 22.0),
    "synth.rush_start_hour": (float, 6.0),
    "synth.rush_end_hour": (float, 9.0),
    "synth.wave_speed": (float, -12.0),
    "synth.noise_std": (float, 1.5),
    "synth.missing_fraction": (float, 0.005),
    "synth.train_days": (int, 4),
    "synth.validation_days": (int, 2),
    "synth.n_incidents": (int, 8),
    "synth.delay_min_s": (int, 300),
    "synth.delay_max_s": (int, 720),
}

CHOICES = {
    "model.architecture": ("mlp", "gcn", "stg_gcn", "stg_gat", "stg_rgcn"),
    "model.activation": ("relu", "tanh", "sigmoid", "identity", None),
    "eval.event_days": ("all", "validation"),
}


def _parse(key: str, kind: type, text: str):
    text = text.strip()
    if text == "" and SCHEMA[key][1] is None:
        return None
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        return text if kind is str else kind(text)
    except ValueError:
        raise ConfigError(key, f"cannot parse {text!r} as {kind.__name__}") from None


@dataclass
class PipelineConfig:
    values: dict = field(default_factory=lambda: {k: d for k, (_, d) in SCHEMA.items()})

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError(key)
        return self.values[key]

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(key)
        kind = SCHEMA[key][0]
        if isinstance(value, str):
            value = _parse(key, kind, value)
        if key in CHOICES and value not in CHOICES[key]:
            raise ConfigError(key, f"must be one of {[c for c in CHOICES[key] if c]}")
        self.values[key] = value

    def section(self, prefix: str) -> dict:
        """Entries under ``prefix.`` that are set (not None), keyed without the prefix."""
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".") and v is not None}

    def validate(self) -> None:
        if self["split.train"] < 0 or self["split.validation"] < 0 or self["split.excluded"] < 0:
            raise ConfigError("split.train", "day counts must be non-negative")
        if not self["data.day_start_hour"] < self["data.day_end_hour"]:
            raise ConfigError("data.day_end_hour", "must exceed data.day_start_hour")
        if not 0 <= self["eval.target_fpr"] <= 1:
            raise ConfigError("eval.target_fpr", "must lie in [0, 1]")
        try:
            self.fpr_sweep()
        except ValueError:
            raise ConfigError("eval.fpr_sweep", "expected comma-separated numbers") from None
        if self["synth.delay_min_s"] > self["synth.delay_max_s"]:
            raise ConfigError("synth.delay_max_s", "must be >= synth.delay_min_s")

    def fpr_sweep(self) -> list[float]:
        return [float(x) for x in self["eval.fpr_sweep"].split(",") if x.strip()]

    def dump(self) -> str:
        lines = []
        for k in SCHEMA:
            v = self.values[k]
            lines.append(f"{k}={'' if v is None else str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str, env: dict | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {line_no} is not key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        cfg.set(key, value)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        cfg.set("seed", env[SEED_ENV])
    cfg.validate()
    return cfg


def load_config(path=None, env: dict | None = None) -> PipelineConfig:
    if path is None:
        return parse_config_text("", env)
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read(), env)
