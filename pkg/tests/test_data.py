from __future__ import annotations

import logging
from datetime import date, datetime
from zoneinfo import ZoneInfo

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftaed.data import (
    Incident,
    IncidentLog,
    SensorGrid,
    SensorReading,
    assemble_grid,
    build_training_mask,
    fit_normalization,
    parse_day_assignment,
    parse_incident_log,
    parse_sensor_csv,
    split_days,
    write_day_assignment,
    write_incident_log,
    write_sensor_csv,
)
from ftaed.errors import (
    DegenerateFeature,
    EmptyInput,
    InconsistentCadence,
    MalformedRow,
    MissingHeader,
    OutOfRangeValue,
    SplitOverflow,
    UnknownKind,
)

HEADER = "time_unix,milemarker,lane,speed,volume,occupancy\n"
CHI = ZoneInfo("America/Chicago")


def local(y, m, d, hh, mm=0):
    return int(datetime(y, m, d, hh, mm, tzinfo=CHI).timestamp())


def write(tmp_path, text, name="s.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# -- parse_sensor_csv -------------------------------------------------------


def test_parse_full_row(tmp_path):
    (r,) = parse_sensor_csv(write(tmp_path, HEADER + "1696500000,63.4,1,62.5,18,4.2\n"))
    assert (r.time_unix, r.milemarker, r.lane) == (1696500000, 63.4, 1)
    assert (r.speed, r.volume, r.occupancy) == (62.5, 18.0, 4.2)


def test_parse_empty_fields_are_missing(tmp_path):
    (r,) = parse_sensor_csv(write(tmp_path, HEADER + "1696500000,63.4,1,,,\n"))
    assert r.speed is None and r.volume is None and r.occupancy is None


def test_parse_lane_out_of_range(tmp_path):
    with pytest.raises(OutOfRangeValue) as exc:
        parse_sensor_csv(write(tmp_path, HEADER + "1696500000,63.4,9,60,1,1\n"))
    assert exc.value.field == "lane" and exc.value.line == 2


@pytest.mark.parametrize(
    "row, field",
    [("1,63.4,1,121,1,1", "speed"), ("1,63.4,1,60,-1,1", "volume"), ("1,63.4,1,60,1,101", "occupancy")],
)
def test_parse_value_ranges(tmp_path, row, field):
    with pytest.raises(OutOfRangeValue) as exc:
        parse_sensor_csv(write(tmp_path, HEADER + row + "\n"))
    assert exc.value.field == field


def test_parse_missing_header(tmp_path):
    with pytest.raises(MissingHeader):
        parse_sensor_csv(write(tmp_path, "time,mm,lane,speed,volume,occupancy\n1,2,1,3,4,5\n"))


def test_parse_malformed_row_reports_line(tmp_path):
    with pytest.raises(MalformedRow) as exc:
        parse_sensor_csv(write(tmp_path, HEADER + "1,63.4,1,60,1,1\n2,63.4,1,abc,1,1\n"))
    assert exc.value.line == 3
    with pytest.raises(MalformedRow):
        parse_sensor_csv(write(tmp_path, HEADER + "1,63.4,1,60\n"))


def test_parse_preserves_row_order(tmp_path):
    rows = parse_sensor_csv(write(tmp_path, HEADER + "30,1.0,2,1,1,1\n0,1.0,1,2,2,2\n"))
    assert [r.time_unix for r in rows] == [30, 0]


# -- incident log -----------------------------------------------------------


def test_incident_single_crash(tmp_path):
    log = parse_incident_log(write(tmp_path, "report_time_unix,milemarker,kind\n1696500271,63.4,crash\n"))
    assert log.records == (Incident(1696500271, 63.4, "crash"),)


def test_incident_sorted_and_optional_milemarker(tmp_path):
    text = "report_time_unix,milemarker,kind\n200,,manual\n100,60.0,crash\n"
    log = parse_incident_log(write(tmp_path, text))
    assert [r.report_time_unix for r in log] == [100, 200]
    assert log.records[1].milemarker is None
    assert len(log.crashes) == 1 and len(log.manual) == 1


def test_incident_unknown_kind(tmp_path):
    with pytest.raises(UnknownKind):
        parse_incident_log(write(tmp_path, "report_time_unix,milemarker,kind\n1696500271,63.4,weather\n"))


def test_incident_header_required(tmp_path):
    with pytest.raises(MissingHeader):
        parse_incident_log(write(tmp_path, "time,mm,kind\n"))


# -- round trips (property) -------------------------------------------------

opt = lambda s: st.one_of(st.none(), s)
readings = st.lists(
    st.builds(
        SensorReading,
        time_unix=st.integers(0, 2**40),
        milemarker=st.floats(0, 500, allow_nan=False),
        lane=st.integers(1, 4),
        speed=opt(st.floats(0, 120, allow_nan=False)),
        volume=opt(st.floats(0, 1e4, allow_nan=False)),
        occupancy=opt(st.floats(0, 100, allow_nan=False)),
    ),
    max_size=20,
)


@settings(max_examples=60, deadline=None)
@given(readings)
def test_sensor_csv_round_trip(tmp_path_factory, rs):
    p = tmp_path_factory.mktemp("rt") / "s.csv"
    write_sensor_csv(p, rs)
    first = parse_sensor_csv(p)
    assert first == rs
    write_sensor_csv(p, first)
    assert parse_sensor_csv(p) == first


@settings(max_examples=40, deadline=None)
@given(
    st.lists(
        st.builds(
            Incident,
            report_time_unix=st.integers(0, 2**40),
            milemarker=opt(st.floats(0, 500, allow_nan=False)),
            kind=st.sampled_from(["crash", "manual"]),
        ),
        max_size=10,
    )
)
def test_incident_round_trip(tmp_path_factory, recs):
    p = tmp_path_factory.mktemp("rt") / "i.csv"
    log = IncidentLog(tuple(recs))
    write_incident_log(p, log)
    assert parse_incident_log(p) == log


# -- assemble_grid ----------------------------------------------------------


def test_assemble_counts_missing():
    t0 = 1696500000
    rs = [
        SensorReading(t0, 60.0, 1, 50, 5, 10),
        SensorReading(t0, 59.5, 1, 51, 5, 10),
        SensorReading(t0 + 30, 60.0, 1, 52, 5, 10),
        SensorReading(t0 + 60, 60.0, 1, 53, 5, 10),
        SensorReading(t0 + 60, 59.5, 1, 54, 5, 10),
    ]
    g = assemble_grid(rs, day_window=None)
    assert g.values.shape == (3, 2, 3)
    assert int(g.missing.all(axis=2).sum()) == 1
    assert g.missing[1, 1].all()


def test_assemble_feature_order_and_node_ids():
    t0 = 1696500000
    g = assemble_grid([SensorReading(t0, 63.4, 2, 62.5, 18, 4.2), SensorReading(t0, 64.0, 1, 1, 1, 1)], None)
    # milemarker descending: 64.0 first, then 63.4
    assert list(g.milemarkers) == [64.0, 63.4]
    assert g.node_id(1, 2) == 3
    np.testing.assert_array_equal(g.values[0, 3], [62.5, 4.2, 18])


def test_assemble_cadence_error():
    t0 = 1696500000
    with pytest.raises(InconsistentCadence):
        assemble_grid([SensorReading(t0, 1.0, 1, 1, 1, 1), SensorReading(t0 + 31, 1.0, 1, 1, 1, 1)], None)
    with pytest.raises(InconsistentCadence):
        assemble_grid([SensorReading(local(2023, 10, 5, 5), 1.0, 1, 1, 1, 1), SensorReading(local(2023, 10, 5, 5) + 31, 1.0, 1, 1, 1, 1)])


def test_assemble_empty():
    with pytest.raises(EmptyInput):
        assemble_grid([])


def test_assemble_full_day_node_times():
    start = local(2023, 10, 5, 4)
    mms = 71.0 - 0.375 * np.arange(49)
    rs = [
        SensorReading(start + 30 * t, float(mm), lane, 60.0, 10.0, 5.0)
        for t in range(960)
        for mm in mms
        for lane in range(1, 5)
    ]
    g = assemble_grid(rs)
    oracle = len({(r.time_unix, r.milemarker, r.lane) for r in rs})
    assert g.n_times * g.n_nodes == oracle == 188_160
    assert g.n_times == 960 and g.n_nodes == 196
    assert np.all(np.diff(g.times) == 30)
    assert not g.missing.any()


def test_assemble_day_window_drops_outside_and_fills():
    d = local(2023, 10, 5, 4)
    rs = [SensorReading(d + 30 * 5, 1.0, 1, 10, 1, 1), SensorReading(local(2023, 10, 5, 13), 1.0, 1, 10, 1, 1)]
    g = assemble_grid(rs)
    assert g.n_times == 960 and g.days == ("2023-10-05",)
    assert g.meta["dropped_outside_window"] == 1
    assert int((~g.missing[..., 0]).sum()) == 1 and not g.missing[5, 0, 0]


def test_assemble_duplicates_last_wins(caplog):
    t0 = 1696500000
    rs = [SensorReading(t0, 1.0, 1, 10, 1, 1), SensorReading(t0, 1.0, 1, 20, 2, 2)]
    with caplog.at_level(logging.WARNING):
        g = assemble_grid(rs, None)
    assert g.values[0, 0, 0] == 20 and g.meta["duplicates"] == 1
    assert "duplicate" in caplog.text


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_grid_indexing_property(data):
    n_mm = data.draw(st.integers(1, 4))
    n_lanes = data.draw(st.integers(1, 4))
    n_t = data.draw(st.integers(1, 6))
    cells = data.draw(
        st.lists(st.tuples(st.integers(0, n_t - 1), st.integers(0, n_mm - 1), st.integers(1, n_lanes)), min_size=1, unique=True)
    )
    t0 = 1696500000
    mms = [70.0 - m for m in range(n_mm)]
    rs = [SensorReading(t0 + 30 * t, mms[m], lane, float(t + m + lane), float(lane), float(m)) for t, m, lane in cells]
    g = assemble_grid(rs, None, n_lanes=n_lanes)
    for r in rs:
        ti = int((r.time_unix - g.times[0]) // 30)
        mi = list(g.milemarkers).index(r.milemarker)
        np.testing.assert_array_equal(g.values[ti, g.node_id(mi, r.lane)], [r.speed, r.occupancy, r.volume])


def test_grid_arrays_are_immutable_copies():
    v = np.zeros((1, 1, 3))
    g = SensorGrid([0], [1.0], 1, v, np.zeros_like(v, dtype=bool), [0], ("d",))
    v[0, 0, 0] = 5
    assert g.values[0, 0, 0] == 0
    with pytest.raises(ValueError):
        g.values[0, 0, 0] = 1


def test_grid_save_load(tmp_path):
    v = np.arange(6, dtype=float).reshape(2, 1, 3)
    v[1, 0, 2] = np.nan
    g = SensorGrid([0, 30], [1.0], 1, v, np.isnan(v), [0, 0], ("2023-10-05",))
    g.save(tmp_path / "g.npz")
    h = SensorGrid.load(tmp_path / "g.npz")
    np.testing.assert_array_equal(h.values, g.values)
    assert h.days == g.days and (h.missing == g.missing).all()


# -- normalization ----------------------------------------------------------


def _grid_from(values):
    v = np.asarray(values, dtype=float)
    return SensorGrid(np.arange(len(v)) * 30, [1.0], 1, v[:, None, :], np.isnan(v)[:, None, :], np.zeros(len(v)), ("d",))


def test_minmax_example():
    g = _grid_from([[20, 0, 1], [80, 10, 3]])
    s = fit_normalization(g, np.ones(2, bool))
    assert (s.minimum[0], s.maximum[0]) == (20, 80)
    assert s.apply(np.array([50.0, 0, 1]))[0] == 0.5
    assert s.apply(np.array([90.0, 0, 1]))[0] == pytest.approx(7 / 6)


def test_minmax_degenerate():
    with pytest.raises(DegenerateFeature) as exc:
        fit_normalization(_grid_from([[20, 0, 1], [80, 0, 3]]), np.ones(2, bool))
    assert exc.value.feature == "occupancy"


def test_minmax_uses_masked_rows_only():
    g = _grid_from([[20, 0, 1], [80, 10, 3], [200, 50, 9]])
    s = fit_normalization(g, np.array([True, True, False]))
    assert s.maximum[0] == 80


@settings(max_examples=100, deadline=None)
@given(
    st.floats(-1e3, 1e3),
    st.floats(1e-3, 1e3),
    st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=1, max_size=10),
)
def test_normalization_inverse(lo, width, xs):
    g = _grid_from([[lo, lo, lo], [lo + width] * 3])
    s = fit_normalization(g, np.ones(2, bool))
    x = np.array(xs)[:, None] * np.ones(3)
    back = s.inverse(s.apply(x))
    assert np.all(np.abs(back - x) <= 1e-6 * np.maximum(np.abs(x), 1.0))


def test_normalization_dict_round_trip():
    s = fit_normalization(_grid_from([[20, 0, 1], [80, 10, 3]]), np.ones(2, bool))
    t = type(s).from_dict(s.to_dict())
    np.testing.assert_array_equal(t.minimum, s.minimum)
    np.testing.assert_array_equal(t.maximum, s.maximum)


# -- masks ------------------------------------------------------------------


def _day_grid(day=date(2023, 10, 5)):
    start = local(day.year, day.month, day.day, 4)
    n = 960
    v = np.ones((n, 1, 3))
    return SensorGrid(start + 30 * np.arange(n), [1.0], 1, v, np.zeros_like(v, bool), np.zeros(n), (day.isoformat(),))


def _masked_span(g, mask):
    off = g.times[~mask.usable]
    return off.min(), off.max()


def test_crash_window_mask():
    g = _day_grid()
    m = build_training_mask(IncidentLog((Incident(local(2023, 10, 5, 8), None, "crash"),)), g)
    assert _masked_span(g, m) == (local(2023, 10, 5, 7, 30), local(2023, 10, 5, 10))
    assert [iv.tag for iv in m.intervals] == ["crash_window"]


def test_manual_window_mask():
    g = _day_grid()
    m = build_training_mask(IncidentLog((Incident(local(2023, 10, 5, 8), None, "manual"),)), g)
    assert _masked_span(g, m) == (local(2023, 10, 5, 8), local(2023, 10, 5, 10))


def test_include_manual_masks_only_crashes():
    g = _day_grid()
    log = IncidentLog((Incident(local(2023, 10, 5, 5), None, "manual"), Incident(local(2023, 10, 5, 9), None, "crash")))
    m = build_training_mask(log, g, include_manual_anomalies=True)
    assert [iv.tag for iv in m.intervals] == ["crash_window"]
    assert _masked_span(g, m) == (local(2023, 10, 5, 8, 30), local(2023, 10, 5, 11))
    strict = build_training_mask(log, g)
    assert np.all(m.usable >= strict.usable) and (m.usable != strict.usable).any()


def test_excluded_day_mask():
    g = _day_grid()
    m = build_training_mask(IncidentLog(), g, excluded_days=["2023-10-05"])
    assert not m.usable.any() and m.intervals[0].tag == "excluded_day"


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8 * 3600), st.sampled_from(["crash", "manual"])), max_size=5), st.integers(0, 8 * 3600), st.sampled_from(["crash", "manual"]))
def test_mask_monotone(existing, extra_t, extra_kind):
    g = _day_grid()
    t0 = int(g.times[0])
    base = [Incident(t0 + t, None, k) for t, k in existing]
    before = build_training_mask(IncidentLog(tuple(base)), g).usable
    after = build_training_mask(IncidentLog(tuple(base + [Incident(t0 + extra_t, None, extra_kind)])), g).usable
    assert not np.any(after & ~before)


# -- splits -----------------------------------------------------------------

DAYS20 = [f"2023-10-{d:02d}" for d in range(2, 22)]


def test_split_20_days():
    s = split_days(DAYS20, 14, 5, 1)
    sets = [set(s.train), set(s.validation), set(s.excluded)]
    assert [len(x) for x in sets] == [14, 5, 1]
    assert set().union(*sets) == set(DAYS20)
    assert not (sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2])


def test_split_overflow():
    with pytest.raises(SplitOverflow):
        split_days(DAYS20[:3], 14, 5, 1)


def test_split_synthetic_proportional():
    s = split_days(DAYS20[:6], 4, 2, 0)
    assert len(s.train) == 4 and len(s.validation) == 2 and s.excluded == ()


def test_split_from_assignment_file(tmp_path):
    p = tmp_path / "days.csv"
    p.write_text("# roles\n2023-10-03,val\n2023-10-02,train\n2023-10-04,excluded\n2023-10-05,train\n")
    roles = parse_day_assignment(p)
    s = split_days(DAYS20[:4], assignment=roles)
    assert s.train == ("2023-10-02", "2023-10-05") and s.validation == ("2023-10-03",) and s.excluded == ("2023-10-04",)
    write_day_assignment(tmp_path / "out.csv", s)
    assert split_days(DAYS20[:4], assignment=parse_day_assignment(tmp_path / "out.csv")) == s


def test_assignment_rejects_bad_role(tmp_path):
    p = tmp_path / "days.csv"
    p.write_text("2023-10-03,test\n")
    with pytest.raises(MalformedRow):
        parse_day_assignment(p)
