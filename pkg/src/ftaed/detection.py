"""Threshold detection, reporting-delay evaluation, ROC/AUC and FPR-targeted alpha selection."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .data import Incident, IncidentLog, SensorGrid
from .errors import DegenerateLabels, MissingThreshold, UnattainableTarget
from .training import ThresholdVector, node_errors

MATCH_WINDOW_S = 15 * 60
LABEL_PRE_S = 15 * 60
LABEL_POST_S = 2 * 3600

POSITIVE, NEGATIVE, EXCLUDED = 1, 0, -1


@dataclass
class DetectionResult:
    """Node-level flags ``e_i(t) > alpha * T[i]`` and their per-time OR.

    Rows that were not evaluated (no full window, or not requested) have NaN
    errors and are never flagged.
    """

    times: np.ndarray
    errors: np.ndarray
    thresholds: ThresholdVector
    alpha: float

    def __post_init__(self):
        self.evaluated = ~np.isnan(self.errors).reshape(len(self.times), -1).any(axis=1)
        limit = self.alpha * self.thresholds.T
        with np.errstate(invalid="ignore"):
            flags = np.nan_to_num(self.errors, nan=-np.inf) > limit
        if flags.ndim == 3:
            flags = flags.any(axis=2)
        self.flags = flags
        self.any_flag = flags.any(axis=1)

    @property
    def detection_times(self) -> np.ndarray:
        return self.times[self.any_flag]


def detect_from_errors(times, errors, thresholds: ThresholdVector | None, alpha: float | None = None) -> DetectionResult:
    if thresholds is None:
        raise MissingThreshold("thresholds have not been calibrated")
    errors = np.asarray(errors, dtype=np.float64)
    if thresholds.T.shape != errors.shape[1:]:
        raise MissingThreshold(f"threshold shape {thresholds.T.shape} does not match errors {errors.shape[1:]}")
    alpha = thresholds.alpha if alpha is None else alpha
    return DetectionResult(np.asarray(times), errors, thresholds, float(alpha))


def detect_anomalies(model, grid: SensorGrid, thresholds: ThresholdVector | None, alpha: float | None = None, rows=None) -> DetectionResult:
    if thresholds is None:
        raise MissingThreshold("thresholds have not been calibrated")
    errors = node_errors(model, grid, rows, per_feature=thresholds.per_feature)
    return detect_from_errors(grid.times, errors, thresholds, alpha)


# ---------------------------------------------------------------------------
# Reporting delay


@dataclass
class CrashMatch:
    report_time: int
    detected_time: int | None
    truncated: bool = False

    @property
    def missed(self) -> bool:
        return self.detected_time is None

    @property
    def rrd_minutes(self) -> float | None:
        if self.detected_time is None:
            return None
        return (self.detected_time - self.report_time) / 60.0


@dataclass
class EventEvaluation:
    matches: list[CrashMatch] = field(default_factory=list)

    @property
    def delays(self) -> np.ndarray:
        return np.array([m.rrd_minutes for m in self.matches if not m.missed])

    @property
    def delay_mean(self) -> float:
        d = self.delays
        return float(d.mean()) if d.size else float("nan")

    @property
    def delay_std(self) -> float:
        d = self.delays
        return float(d.std()) if d.size else float("nan")

    @property
    def miss_pct(self) -> float:
        if not self.matches:
            return float("nan")
        return 100.0 * sum(m.missed for m in self.matches) / len(self.matches)

    @property
    def detected_pct(self) -> float:
        return 100.0 - self.miss_pct


def evaluate_events(
    result: DetectionResult, log: IncidentLog | list[Incident], match_window_s: int = MATCH_WINDOW_S
) -> EventEvaluation:
    """Match each crash to the earliest any-node detection within ``report +/- window``.

    Location is ignored. Only crashes reported inside the evaluated time span
    are scored; ``truncated`` marks windows that run past evaluated rows.
    """
    times = result.times[result.evaluated]
    hits = result.times[result.any_flag]
    out = EventEvaluation()
    if times.size == 0:
        return out
    crashes = [r for r in log if r.kind == "crash"]
    for rec in crashes:
        t = rec.report_time_unix
        if t < times.min() or t > times.max():
            continue
        lo, hi = t - match_window_s, t + match_window_s
        inside = times[(times >= lo) & (times <= hi)]
        truncated = inside.size == 0 or inside.min() > lo + 30 or inside.max() < hi - 30
        cand = hits[(hits >= lo) & (hits <= hi)]
        out.matches.append(CrashMatch(t, int(cand.min()) if cand.size else None, bool(truncated)))
    return out


# ---------------------------------------------------------------------------
# Time-level labels and ROC


def label_timesteps(
    log: IncidentLog | list[Incident],
    times,
    pre_s: int = LABEL_PRE_S,
    post_s: int = LABEL_POST_S,
    manual_excluded: bool = True,
) -> np.ndarray:
    """``1`` within ``[report - 15 min, report + 2 h]`` of a crash, ``-1`` inside a manual window, else ``0``.

    With ``manual_excluded=False`` manual windows count as positives instead.
    """
    times = np.asarray(times, dtype=np.int64)
    labels = np.full(times.shape, NEGATIVE, dtype=np.int8)
    manual = np.zeros(times.shape, dtype=bool)
    for rec in log:
        t = rec.report_time_unix
        if rec.kind == "crash":
            labels[(times >= t - pre_s) & (times <= t + post_s)] = POSITIVE
        else:
            manual |= (times >= t) & (times <= t + post_s)
    labels[manual & (labels != POSITIVE)] = EXCLUDED if manual_excluded else POSITIVE
    return labels


def time_scores(errors: np.ndarray, thresholds: ThresholdVector) -> np.ndarray:
    """``max_i e_i(t) / T[i]`` per row (NaN rows stay NaN)."""
    T = thresholds.T
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(T > 0, errors / np.where(T > 0, T, 1.0), np.where(errors > 0, np.inf, 0.0))
    ratio = np.where(np.isnan(errors), np.nan, ratio)
    ratio = ratio.reshape(len(ratio), -1)
    out = np.full(len(ratio), np.nan)
    ok = ~np.isnan(ratio).any(axis=1)
    out[ok] = ratio[ok].max(axis=1)
    return out


@dataclass
class RocCurve:
    alpha: np.ndarray  # descending
    fpr: np.ndarray
    tpr: np.ndarray
    fdr: np.ndarray
    auc: float


def roc_auc(scores, labels) -> RocCurve:
    """Sweep alpha over the distinct scores; a time is predicted anomalous when ``score > alpha``.

    Excluded (``-1``) and NaN-scored times are dropped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    keep = (labels != EXCLUDED) & ~np.isnan(scores)
    s, y = scores[keep], labels[keep] == POSITIVE
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise DegenerateLabels(f"need positives and negatives, got {n_pos}/{n_neg}")
    distinct = np.unique(s)[::-1]
    floor = 0.0 if distinct[-1] > 0 else np.nextafter(distinct[-1], -np.inf)
    alphas = np.r_[distinct, floor]
    # counts of scores strictly above each alpha
    pos_sorted = np.sort(s[y])
    neg_sorted = np.sort(s[~y])
    tp = n_pos - np.searchsorted(pos_sorted, alphas, side="right")
    fp = n_neg - np.searchsorted(neg_sorted, alphas, side="right")
    tpr = tp / n_pos
    fpr = fp / n_neg
    fdr = np.where(tp + fp > 0, fp / np.maximum(tp + fp, 1), 0.0)
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(alphas, fpr, tpr, fdr, auc)


def pick_alpha_for_fpr(curve: RocCurve, target: float) -> tuple[float, float]:
    """Smallest alpha on the curve whose FPR does not exceed ``target``; returns ``(alpha, fpr)``."""
    ok = np.flatnonzero(curve.fpr <= target + 1e-12)
    if ok.size == 0:
        raise UnattainableTarget(f"no alpha reaches FPR <= {target}")
    i = ok[np.argmin(curve.alpha[ok])]
    return float(curve.alpha[i]), float(curve.fpr[i])


# ---------------------------------------------------------------------------
# Reports


REPORT_FIELDS = (
    "reporting_delay_mean",
    "reporting_delay_std",
    "miss_pct",
    "recon_mse",
    "auc",
    "fpr_achieved",
    "fdr_achieved",
    "alpha",
)


def write_metrics_report(path, metrics: dict, extra_lines=()) -> None:
    missing = [k for k in REPORT_FIELDS if k not in metrics]
    if missing:
        raise KeyError(f"metrics report lacks {missing}")
    with open(path, "w", encoding="utf-8") as fh:
        for k in REPORT_FIELDS:
            fh.write(f"{k}={metrics[k]:.6g}\n")
        for line in extra_lines:
            fh.write(f"# {line}\n")


def read_metrics_report(path) -> dict[str, float]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                k, v = line.split("=", 1)
                out[k] = float(v)
    return out


def write_detections(path, result: DetectionResult, grid: SensorGrid) -> int:
    """One row per flagged (time, node); returns the row count."""
    limit = result.alpha * result.thresholds.T
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time_unix", "node_id", "milemarker", "lane", "error", "threshold"])
        for r, node in zip(*np.nonzero(result.flags)):
            err = result.errors[r, node]
            thr = limit[node]
            if np.ndim(err):
                err, thr = float(np.max(err)), float(np.max(thr))
            mm = grid.milemarkers[node // grid.n_lanes]
            w.writerow([int(result.times[r]), int(node), repr(float(mm)), node % grid.n_lanes + 1, f"{err:.8g}", f"{thr:.8g}"])
            n += 1
    return n
