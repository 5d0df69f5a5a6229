"""``ftaed`` command line: synth, ingest, impute, train, calibrate, detect, evaluate, heatmap.

Every stage reads and writes files in ``--workdir``. Exit status is 0 on
success, 1 for pipeline errors and 2 for usage or configuration errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .config import load_config
from .data import SensorGrid, write_incident_log
from .detection import detect_from_errors, write_detections, write_metrics_report
from .errors import ConfigError, FtaedError, MissingThreshold
from .models import AutoencoderModel
from .training import ThresholdVector, calibrate_thresholds, node_errors

log = logging.getLogger("ftaed")

ARCHITECTURES = ("mlp", "gcn", "stg_gcn", "stg_gat", "stg_rgcn")


class StageError(FtaedError):
    pass


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise StageError(f"{path} not found; {hint}")
    return path


# ---------------------------------------------------------------------------
# Stages


def cmd_synth(args, cfg) -> None:
    scenario = pl.scenario_from_config(cfg)
    pl.write_scenario(scenario, args.workdir)
    print(f"wrote {len(scenario.grid.days)} days, {len(scenario.log)} crashes to {args.workdir}")


def _ingest(args, cfg) -> SensorGrid:
    sensors = Path(args.sensors) if getattr(args, "sensors", None) else args.workdir / pl.SENSORS
    grid = pl.ingest(_need(sensors, "run `ftaed synth` or pass --sensors"), cfg)
    grid.save(args.workdir / pl.GRID)
    incidents = getattr(args, "incidents", None)
    if incidents and Path(incidents).resolve() != (args.workdir / pl.INCIDENTS).resolve():
        write_incident_log(args.workdir / pl.INCIDENTS, pl.load_incidents(incidents))
    return grid


def cmd_ingest(args, cfg) -> None:
    args.workdir.mkdir(parents=True, exist_ok=True)
    grid = _ingest(args, cfg)
    print(f"grid {grid.n_times} times x {grid.n_nodes} nodes, {int(grid.missing.any(axis=2).sum())} missing node-times")


def _imputed(args, cfg) -> SensorGrid:
    path = args.workdir / pl.IMPUTED
    if path.exists():
        return SensorGrid.load(path)
    grid_path = args.workdir / pl.GRID
    grid = SensorGrid.load(grid_path) if grid_path.exists() else _ingest(args, cfg)
    out = pl.impute(grid, cfg)
    out.save(path)
    return out


def cmd_impute(args, cfg) -> None:
    grid_path = _need(args.workdir / pl.GRID, "run `ftaed ingest` first")
    grid = SensorGrid.load(grid_path)
    out = pl.impute(grid, cfg)
    out.save(args.workdir / pl.IMPUTED)
    print(f"imputed {int(grid.missing.sum())} cells; local averaging paths {out.meta['local_average']}")


def _prepared(args, cfg, fit: bool) -> pl.Prepared:
    grid = _imputed(args, cfg)
    incident_log = pl.load_incidents(args.workdir / pl.INCIDENTS)
    days = args.workdir / pl.DAYS
    split = pl.resolve_split(grid, cfg, days if days.exists() and not cfg["split.assignment"] else None)
    stats = None if fit else pl.load_normalization(_need(args.workdir / pl.NORMALIZATION, "run `ftaed train` first"))
    return pl.prepare(grid, incident_log, split, cfg, stats)


def cmd_train(args, cfg) -> None:
    if args.epochs is not None:
        cfg.set("train.max_epochs", args.epochs)
        cfg.set("train.patience", min(cfg["train.patience"], args.epochs - 1))
    args.workdir.mkdir(parents=True, exist_ok=True)
    prep = _prepared(args, cfg, fit=True)
    pl.save_normalization(args.workdir / pl.NORMALIZATION, prep.stats)

    def progress(epoch, tr, va):
        print(f"epoch {epoch}: train {tr:.6f} val {va:.6f}", flush=True)

    result = pl.train(prep, cfg, args.model, progress=None if args.quiet else progress)
    result.model.save(args.workdir / pl.MODEL)
    result.write_history(args.workdir / pl.LOSS_HISTORY)
    stale = args.workdir / pl.THRESHOLDS
    if stale.exists():
        stale.unlink()
    print(f"best epoch {result.best_epoch}; model saved to {args.workdir / pl.MODEL}")


def _model(args) -> AutoencoderModel:
    return AutoencoderModel.load(_need(args.workdir / pl.MODEL, "run `ftaed train` first"))


def _calibrate(args, cfg, model, prep) -> ThresholdVector:
    thr = calibrate_thresholds(model, prep.grid, prep.train_mask, per_feature=cfg["detect.per_feature"])
    thr.save(args.workdir / pl.THRESHOLDS)
    return thr


def cmd_calibrate(args, cfg) -> None:
    model = _model(args)
    thr = _calibrate(args, cfg, model, _prepared(args, cfg, fit=False))
    print(f"thresholds for {len(thr.T)} nodes: min {thr.T.min():.4g}, max {thr.T.max():.4g}")


def _thresholds(args) -> ThresholdVector:
    path = args.workdir / pl.THRESHOLDS
    if not path.exists():
        raise MissingThreshold(f"{path} not found; run `ftaed calibrate` first")
    return ThresholdVector.load(path)


def cmd_detect(args, cfg) -> None:
    thr = _thresholds(args)
    model = _model(args)
    prep = _prepared(args, cfg, fit=False)
    alpha = cfg["detect.alpha"] if args.alpha is None else args.alpha
    errors = node_errors(model, prep.grid, per_feature=thr.per_feature)
    result = detect_from_errors(prep.grid.times, errors, thr, alpha)
    n = write_detections(args.workdir / pl.DETECTIONS, result, prep.grid)
    print(f"{n} flagged node-times at {int(result.any_flag.sum())} time steps (alpha={alpha})")


def cmd_evaluate(args, cfg) -> None:
    model = _model(args)
    prep = _prepared(args, cfg, fit=False)
    path = args.workdir / pl.THRESHOLDS
    thr = ThresholdVector.load(path) if path.exists() else _calibrate(args, cfg, model, prep)
    target = cfg["eval.target_fpr"] if args.target_fpr is None else args.target_fpr
    incident_log = pl.load_incidents(args.workdir / pl.INCIDENTS)
    metrics, sweep, curve = pl.evaluate(model, prep, incident_log, thr, cfg, target)
    lines = pl.report_lines(model.config.architecture.value, metrics, sweep)
    write_metrics_report(args.workdir / pl.METRICS, metrics, lines)
    pl.write_roc(args.workdir / pl.ROC, curve)
    print("\n".join(lines))


# ---------------------------------------------------------------------------
# Heatmap


def _speed_color(v: float, lo: float = 0.0, hi: float = 70.0) -> str:
    """Red (slow) through yellow to green (fast)."""
    x = min(max((v - lo) / (hi - lo), 0.0), 1.0)
    if x < 0.5:
        r, g = 215, int(48 + (223 - 48) * x * 2)
    else:
        r, g = int(215 - (215 - 26) * (x - 0.5) * 2), int(223 - (223 - 150) * (x - 0.5) * 2)
    return f"#{r:02x}{g:02x}40"


def render_heatmap(grid: SensorGrid, lane: int, day, flags: np.ndarray | None = None, cell_w=1.0, cell_h=6.0) -> str:
    """Time-space speed diagram for one lane and day; flagged cells get a black marker.

    Time runs left to right, milemarkers top (upstream) to bottom. ``grid``
    holds speeds in mph; ``flags`` is ``[n_times, n_nodes]``.
    """
    rows = grid.day_rows(day)
    nodes = np.arange(lane - 1, grid.n_nodes, grid.n_lanes)
    speed = grid.values[np.ix_(rows, nodes, [0])][..., 0]
    margin_l, margin_t = 60, 30
    width = margin_l + cell_w * len(rows) + 10
    height = margin_t + cell_h * len(nodes) + 30
    day_name = grid.days[day] if isinstance(day, int) else day
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:g}" height="{height:g}" '
        f'viewBox="0 0 {width:g} {height:g}">',
        f'<text x="{margin_l}" y="18" font-size="12">lane {lane}, {day_name}: speed (mph)</text>',
        '<g id="cells" shape-rendering="crispEdges">',
    ]
    for m, mm in enumerate(grid.milemarkers):
        y = margin_t + m * cell_h
        for t in range(len(rows)):
            v = speed[t, m]
            fill = "#bbbbbb" if np.isnan(v) else _speed_color(float(v))
            out.append(
                f'<rect x="{margin_l + t * cell_w:g}" y="{y:g}" width="{cell_w:g}" height="{cell_h:g}" fill="{fill}"/>'
            )
    out.append("</g>")
    for m, mm in enumerate(grid.milemarkers):
        if m % 4 == 0:
            out.append(f'<text x="4" y="{margin_t + (m + 0.8) * cell_h:g}" font-size="8">{mm:g}</text>')
    out.append('<g id="flags">')
    if flags is not None:
        sub = flags[np.ix_(rows, nodes)]
        for t, m in zip(*np.nonzero(sub)):
            cx = margin_l + (t + 0.5) * cell_w
            cy = margin_t + (m + 0.5) * cell_h
            out.append(f'<circle cx="{cx:g}" cy="{cy:g}" r="{cell_h / 3:g}" fill="black"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_heatmap(args, cfg) -> None:
    grid = _imputed(args, cfg)
    if not 1 <= args.lane <= grid.n_lanes:
        raise StageError(f"--lane must lie in 1..{grid.n_lanes}")
    day = args.day or grid.days[-1]
    if day not in grid.days:
        raise StageError(f"day {day} not in grid ({grid.days[0]} .. {grid.days[-1]})")
    flags = None
    if (args.workdir / pl.THRESHOLDS).exists() and (args.workdir / pl.MODEL).exists():
        thr = _thresholds(args)
        model = _model(args)
        prep = _prepared(args, cfg, fit=False)
        alpha = cfg["detect.alpha"] if args.alpha is None else args.alpha
        rows = grid.day_rows(day)
        errors = node_errors(model, prep.grid, rows, per_feature=thr.per_feature)
        flags = detect_from_errors(grid.times, errors, thr, alpha).flags
    out = Path(args.output) if args.output else args.workdir / f"heatmap_lane{args.lane}_{day}.svg"
    out.write_text(render_heatmap(grid, args.lane, day, flags), encoding="utf-8")
    print(f"wrote {out}")


# ---------------------------------------------------------------------------
# Entry point


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", type=Path, default=Path("ftaed_work"), help="stage artifact directory")
    common.add_argument("--config", default=None, help="key=value configuration file")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="ftaed", description="Lane-level freeway anomaly detection pipeline.", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("synth", parents=[common], formatter_class=fmt, help="write a synthetic scenario as CSV")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", parents=[common], formatter_class=fmt, help="validate sensor CSV into a grid archive")
    p.add_argument("--sensors", default=None, help="sensor CSV (default: <workdir>/sensors.csv)")
    p.add_argument("--incidents", default=None, help="incident CSV to copy into the workdir")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("impute", parents=[common], formatter_class=fmt, help="fill missing cells (ASM + local averaging)")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train an autoencoder")
    p.add_argument("--model", choices=ARCHITECTURES, default="gcn", help="architecture")
    p.add_argument("--epochs", type=int, default=None, help="override train.max_epochs")
    p.add_argument("--quiet", action="store_true", help="suppress per-epoch output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", parents=[common], formatter_class=fmt, help="per-node thresholds from training errors")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("detect", parents=[common], formatter_class=fmt, help="flag node-times above alpha * T")
    p.add_argument("--alpha", type=float, default=None, help="threshold multiplier (default: detect.alpha)")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", parents=[common], formatter_class=fmt, help="metrics report at a target FPR")
    p.add_argument("--target-fpr", type=float, default=None, help="validation FPR target (default: eval.target_fpr)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("heatmap", parents=[common], formatter_class=fmt, help="time-space SVG for one lane")
    p.add_argument("--lane", type=int, default=1, help="lane number (1 = HOV)")
    p.add_argument("--day", default=None, help="YYYY-MM-DD (default: last day)")
    p.add_argument("--alpha", type=float, default=None, help="threshold multiplier for flag markers")
    p.add_argument("--output", default=None, help="SVG path (default: <workdir>/heatmap_lane<n>_<day>.svg)")
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"ftaed: configuration error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"ftaed: cannot read config: {exc}", file=sys.stderr)
        return 2
    try:
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"ftaed {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except FtaedError as exc:
        print(f"ftaed {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"ftaed {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
