from __future__ import annotations

import csv
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftaed.data import Incident, IncidentLog, SensorGrid
from ftaed.detection import (
    EXCLUDED,
    NEGATIVE,
    POSITIVE,
    REPORT_FIELDS,
    detect_anomalies,
    detect_from_errors,
    evaluate_events,
    label_timesteps,
    pick_alpha_for_fpr,
    read_metrics_report,
    roc_auc,
    time_scores,
    write_detections,
    write_metrics_report,
)
from ftaed.errors import DegenerateLabels, MissingThreshold, UnattainableTarget
from ftaed.training import ThresholdVector

DT = 30


def brute_force_auc(scores, labels):
    """Concordant-pair count over every (positive, negative) pair, ties count half."""
    pos = [s for s, y in zip(scores, labels) if y == POSITIVE]
    neg = [s for s, y in zip(scores, labels) if y == NEGATIVE]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def linear_scan_alpha(scores, labels, target):
    """Try every candidate alpha in ascending order; first with FPR <= target wins."""
    s = np.asarray(scores, float)
    y = np.asarray(labels)
    neg = s[y == NEGATIVE]
    candidates = sorted(set(s.tolist()) | {0.0})
    for a in candidates:
        fpr = np.mean(neg > a)
        if fpr <= target:
            return a, fpr
    raise AssertionError("unreachable: the max score always gives FPR 0")


def crash(t):
    return Incident(t, 70.0, "crash")


def timeline(n, start=0):
    return start + DT * np.arange(n)


def result_with_hits(times, hit_times):
    errors = np.isin(times, hit_times).astype(float)[:, None] * 2.0
    return detect_from_errors(times, errors, ThresholdVector(np.array([1.0])))


# -- flags ------------------------------------------------------------------


def test_zero_error_no_flags():
    res = detect_from_errors(timeline(10), np.zeros((10, 4)), ThresholdVector(np.full(4, 0.01)))
    assert not res.flags.any() and not res.any_flag.any()


def test_single_node_flagged():
    res = detect_from_errors([0], [[0.09]], ThresholdVector(np.array([0.05])), 1.0)
    assert res.flags[0, 0]


def test_equality_not_flagged():
    res = detect_from_errors([0, 30], [[0.1], [0.1000001]], ThresholdVector(np.array([0.2]), alpha=0.5))
    assert not res.flags[0, 0] and res.flags[1, 0]


def test_missing_thresholds():
    with pytest.raises(MissingThreshold):
        detect_from_errors([0], [[0.1]], None)
    with pytest.raises(MissingThreshold):
        detect_anomalies(None, None, None)
    with pytest.raises(MissingThreshold):
        detect_from_errors([0], [[0.1, 0.2]], ThresholdVector(np.array([1.0])))


def test_any_flag_is_or_over_nodes():
    rng = np.random.default_rng(0)
    errs = rng.uniform(0, 1, (50, 8))
    res = detect_from_errors(timeline(50), errs, ThresholdVector(np.full(8, 1.0)), alpha=0.9)
    np.testing.assert_array_equal(res.any_flag, (errs > 0.9).any(axis=1))


def test_nan_rows_never_flagged():
    errs = np.array([[np.nan, np.nan], [5.0, 0.0]])
    res = detect_from_errors([0, 30], errs, ThresholdVector(np.array([1.0, 1.0])))
    assert list(res.any_flag) == [False, True] and list(res.evaluated) == [False, True]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 3), st.floats(0.1, 3))
def test_flags_nested_in_alpha(seed, a1, a2):
    lo, hi = sorted((a1, a2))
    rng = np.random.default_rng(seed)
    errs = rng.exponential(1, (40, 5))
    thr = ThresholdVector(rng.uniform(0.5, 2, 5))
    f_hi = detect_from_errors(timeline(40), errs, thr, hi).flags
    f_lo = detect_from_errors(timeline(40), errs, thr, lo).flags
    assert np.all(f_lo[f_hi])


# -- reporting delay --------------------------------------------------------


def test_detection_five_minutes_early():
    t = timeline(200)
    report = int(t[100])
    ev = evaluate_events(result_with_hits(t, [report - 300]), [crash(report)])
    assert ev.matches[0].rrd_minutes == -5.0
    assert ev.delay_mean == -5.0


def test_one_of_four_missed():
    t = timeline(2000)
    reports = [int(t[i]) for i in (200, 600, 1000, 1400)]
    hits = [reports[0] + 60, reports[1] - 120, reports[2]]
    ev = evaluate_events(result_with_hits(t, hits), IncidentLog(tuple(crash(r) for r in reports)))
    assert ev.miss_pct == 25.0
    assert sum(m.missed for m in ev.matches) == 1
    np.testing.assert_allclose(sorted(ev.delays), [-2.0, 0.0, 1.0])
    assert ev.delay_std == pytest.approx(np.std([-2.0, 0.0, 1.0]))


def test_early_detection_clamps_to_window():
    t = timeline(400)
    report = int(t[200])
    hits = t[(t >= report - 17 * 60) & (t <= report + 600)]
    ev = evaluate_events(result_with_hits(t, hits), [crash(report)])
    assert ev.matches[0].rrd_minutes == -15.0


def test_manual_records_not_scored():
    t = timeline(200)
    log = IncidentLog((crash(int(t[50])), Incident(int(t[150]), None, "manual")))
    ev = evaluate_events(result_with_hits(t, []), log)
    assert len(ev.matches) == 1 and ev.miss_pct == 100.0


def test_truncated_window_marked():
    t = timeline(100)
    ev = evaluate_events(result_with_hits(t, []), [crash(int(t[5])), crash(int(t[60]))])
    assert [m.truncated for m in ev.matches] == [True, False]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rrd_bounded_by_window(seed):
    rng = np.random.default_rng(seed)
    t = timeline(600)
    reports = rng.choice(t[40:-40], 3, replace=False)
    hits = rng.choice(t, 30, replace=False)
    ev = evaluate_events(result_with_hits(t, hits), [crash(int(r)) for r in reports])
    for m in ev.matches:
        assert m.missed == (m.rrd_minutes is None)
        if not m.missed:
            assert abs(m.rrd_minutes) <= 15.0


# -- labels -----------------------------------------------------------------


def test_label_examples():
    report = 10_000
    log = IncidentLog((crash(report), Incident(50_000, None, "manual")))
    times = [report - 600, report + 3 * 3600, 50_000 + 60, report + 7200, report + 7230]
    assert list(label_timesteps(log, times)) == [POSITIVE, NEGATIVE, EXCLUDED, POSITIVE, NEGATIVE]
    assert label_timesteps(log, [50_060], manual_excluded=False)[0] == POSITIVE


def test_crash_beats_manual():
    log = IncidentLog((crash(1000), Incident(900, None, "manual")))
    assert label_timesteps(log, [1200])[0] == POSITIVE


# -- ROC --------------------------------------------------------------------


def test_perfect_separation():
    curve = roc_auc([0.1, 0.2, 0.3, 2.0, 3.0], [0, 0, 0, 1, 1])
    assert curve.auc == 1.0


def test_permuted_labels_auc_half():
    rng = np.random.default_rng(0)
    scores = rng.exponential(1, 400)
    labels = (rng.random(400) < 0.3).astype(int)
    aucs = [roc_auc(scores, rng.permutation(labels)).auc for _ in range(10_000)]
    assert abs(np.mean(aucs) - 0.5) <= 0.02


def test_six_point_brute_force():
    scores = [0.9, 0.4, 0.4, 0.7, 0.2, 0.4]
    labels = [1, 0, 1, 0, 0, 1]
    assert roc_auc(scores, labels).auc == pytest.approx(brute_force_auc(scores, labels), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_auc_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 40))
    scores = np.round(rng.exponential(1, n), 1)  # rounding forces ties
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    assert roc_auc(scores, labels).auc == pytest.approx(brute_force_auc(scores, labels), abs=1e-9)


def test_curve_monotone_and_endpoints():
    rng = np.random.default_rng(1)
    scores = rng.exponential(1, 200) + 0.01
    labels = rng.integers(0, 2, 200)
    c = roc_auc(scores, labels)
    assert np.all(np.diff(c.alpha) < 0)
    assert np.all(np.diff(c.fpr) >= 0) and np.all(np.diff(c.tpr) >= 0)
    assert (c.fpr[0], c.tpr[0]) == (0.0, 0.0)
    assert (c.fpr[-1], c.tpr[-1]) == (1.0, 1.0) and c.alpha[-1] == 0.0


def test_excluded_and_nan_dropped():
    full = roc_auc([0.1, 0.9, 5.0, np.nan], [0, 1, EXCLUDED, 0])
    assert full.auc == 1.0


def test_degenerate_labels():
    with pytest.raises(DegenerateLabels):
        roc_auc([0.1, 0.2], [0, 0])
    with pytest.raises(DegenerateLabels):
        roc_auc([0.1, 0.2], [1, EXCLUDED])


def test_time_scores():
    errs = np.array([[0.2, 0.6], [np.nan, 0.1], [0.0, 0.0]])
    s = time_scores(errs, ThresholdVector(np.array([0.4, 0.3])))
    np.testing.assert_allclose(s[[0, 2]], [2.0, 0.0])
    assert np.isnan(s[1])


# -- alpha selection --------------------------------------------------------


@pytest.mark.parametrize("target", [0.0, 0.01, 0.05, 0.1, 0.5, 1.0])
@pytest.mark.parametrize("seed", range(5))
def test_pick_alpha_matches_linear_scan(seed, target):
    rng = np.random.default_rng(seed)
    scores = np.round(rng.exponential(1, 300), 2) + 0.01
    labels = (rng.random(300) < 0.2).astype(int)
    alpha, fpr = pick_alpha_for_fpr(roc_auc(scores, labels), target)
    assert (alpha, fpr) == pytest.approx(linear_scan_alpha(scores, labels, target))


def test_target_zero_above_all_negatives():
    scores = np.array([0.5, 0.7, 0.9, 1.5, 2.0])
    labels = [0, 0, 0, 1, 1]
    alpha, fpr = pick_alpha_for_fpr(roc_auc(scores, labels), 0.0)
    assert fpr == 0.0 and alpha >= 0.9


def test_target_one_smallest_alpha():
    alpha, fpr = pick_alpha_for_fpr(roc_auc([0.5, 0.7, 2.0], [0, 0, 1]), 1.0)
    assert alpha == 0.0 and fpr == 1.0


def test_unattainable_target():
    with pytest.raises(UnattainableTarget):
        pick_alpha_for_fpr(roc_auc([0.5, 2.0], [0, 1]), -0.1)


def test_alpha_monotone_in_target():
    rng = np.random.default_rng(3)
    scores = rng.exponential(1, 500)
    curve = roc_auc(scores, rng.integers(0, 2, 500))
    alphas = [pick_alpha_for_fpr(curve, t)[0] for t in (0.01, 0.05, 0.1, 0.3)]
    assert alphas == sorted(alphas, reverse=True)


# -- reports ----------------------------------------------------------------


def test_metrics_report_round_trip(tmp_path):
    metrics = {k: float(i) + 0.25 for i, k in enumerate(REPORT_FIELDS)}
    write_metrics_report(tmp_path / "m.txt", metrics, ["note"])
    assert read_metrics_report(tmp_path / "m.txt") == metrics
    assert (tmp_path / "m.txt").read_text().splitlines()[-1] == "# note"
    with pytest.raises(KeyError):
        write_metrics_report(tmp_path / "x.txt", {"auc": 0.5})


def test_detections_csv(tmp_path):
    times = timeline(3)
    mms = np.array([70.0, 69.5])
    g = SensorGrid(times, mms, 2, np.zeros((3, 4, 3)), np.zeros((3, 4, 3), bool), np.zeros(3, int), ("2023-10-02",))
    errs = np.zeros((3, 4))
    errs[1, 3] = 5.0
    errs[2, 0] = 2.0
    res = detect_from_errors(times, errs, ThresholdVector(np.ones(4)))
    assert write_detections(tmp_path / "d.csv", res, g) == 2
    with open(tmp_path / "d.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["time_unix", "node_id", "milemarker", "lane", "error", "threshold"]
    assert rows[1][:4] == ["30", "3", "69.5", "2"] and rows[2][:4] == ["60", "0", "70.0", "1"]
