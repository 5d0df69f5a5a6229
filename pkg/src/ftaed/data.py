"""Sensor/incident ingestion, the dense measurement grid, normalization and training masks."""
from __future__ import annotations

import csv
import io
import logging
import zipfile
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from typing import Iterable, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .errors import (
    DegenerateFeature,
    EmptyInput,
    InconsistentCadence,
    MalformedRow,
    MissingHeader,
    OutOfRangeValue,
    SplitOverflow,
    UnknownKind,
)

log = logging.getLogger(__name__)

FEATURES = ("speed", "occupancy", "volume")
CADENCE_S = 30
SENSOR_HEADER = ["time_unix", "milemarker", "lane", "speed", "volume", "occupancy"]
INCIDENT_HEADER = ["report_time_unix", "milemarker", "kind"]
INCIDENT_KINDS = ("crash", "manual")
DEFAULT_TZ = "America/Chicago"
DEFAULT_DAY_WINDOW = (4, 12)
MAX_LANES = 4


@dataclass(frozen=True)
class SensorReading:
    time_unix: int
    milemarker: float
    lane: int
    speed: float | None = None
    volume: float | None = None
    occupancy: float | None = None


@dataclass(frozen=True)
class Incident:
    report_time_unix: int
    milemarker: float | None
    kind: str


@dataclass(frozen=True)
class IncidentLog:
    records: tuple[Incident, ...] = ()

    def __post_init__(self):
        object.__setattr__(
            self, "records", tuple(sorted(self.records, key=lambda r: r.report_time_unix))
        )

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def crashes(self) -> list[Incident]:
        return [r for r in self.records if r.kind == "crash"]

    @property
    def manual(self) -> list[Incident]:
        return [r for r in self.records if r.kind == "manual"]


# ---------------------------------------------------------------------------
# CSV parsing


def _opt_float(text: str, name: str, line: int) -> float | None:
    text = text.strip()
    if text == "":
        return None
    try:
        value = float(text)
    except ValueError:
        raise MalformedRow(line, f"{name} is not a number: {text!r}") from None
    if not np.isfinite(value):
        raise MalformedRow(line, f"{name} is not finite")
    return value


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def parse_sensor_csv(path) -> list[SensorReading]:
    """Read a sensor CSV; empty fields become ``None``. Row order is preserved."""
    readings = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SENSOR_HEADER:
            raise MissingHeader(f"expected header {','.join(SENSOR_HEADER)}, got {header}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(SENSOR_HEADER):
                raise MalformedRow(line, f"expected 6 fields, got {len(row)}")
            try:
                t = int(row[0])
            except ValueError:
                raise MalformedRow(line, f"time_unix is not an integer: {row[0]!r}") from None
            mm = _opt_float(row[1], "milemarker", line)
            if mm is None:
                raise MalformedRow(line, "milemarker is required")
            try:
                lane = int(row[2])
            except ValueError:
                raise MalformedRow(line, f"lane is not an integer: {row[2]!r}") from None
            if not 1 <= lane <= MAX_LANES:
                raise OutOfRangeValue("lane", line, lane)
            speed = _opt_float(row[3], "speed", line)
            volume = _opt_float(row[4], "volume", line)
            occupancy = _opt_float(row[5], "occupancy", line)
            if speed is not None and not 0 <= speed <= 120:
                raise OutOfRangeValue("speed", line, speed)
            if volume is not None and volume < 0:
                raise OutOfRangeValue("volume", line, volume)
            if occupancy is not None and not 0 <= occupancy <= 100:
                raise OutOfRangeValue("occupancy", line, occupancy)
            readings.append(SensorReading(t, mm, lane, speed, volume, occupancy))
    return readings


def write_sensor_csv(path, readings: Iterable[SensorReading]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SENSOR_HEADER)
        for r in readings:
            writer.writerow(
                [r.time_unix, _fmt(r.milemarker), r.lane, _fmt(r.speed), _fmt(r.volume), _fmt(r.occupancy)]
            )


def parse_incident_log(path) -> IncidentLog:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != INCIDENT_HEADER:
            raise MissingHeader(f"expected header {','.join(INCIDENT_HEADER)}, got {header}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise MalformedRow(line, f"expected 3 fields, got {len(row)}")
            try:
                t = int(row[0])
            except ValueError:
                raise MalformedRow(line, f"report_time_unix is not an integer: {row[0]!r}") from None
            mm = _opt_float(row[1], "milemarker", line)
            kind = row[2].strip()
            if kind not in INCIDENT_KINDS:
                raise UnknownKind(kind, line)
            records.append(Incident(t, mm, kind))
    return IncidentLog(tuple(records))


def write_incident_log(path, incidents: IncidentLog) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INCIDENT_HEADER)
        for r in incidents:
            writer.writerow([r.report_time_unix, _fmt(r.milemarker), r.kind])


# ---------------------------------------------------------------------------
# Dense grid


@dataclass
class SensorGrid:
    """Dense ``[time, node, feature]`` array of measurements.

    Nodes are ordered milemarker-descending (direction of travel), then lane
    ascending, so ``node_id = mm_index * n_lanes + (lane - 1)``. Missing cells
    hold NaN and are flagged in ``missing``. ``day_index`` maps each time row to
    an entry of ``days``; rows of one day are contiguous and 30 s apart.
    """

    times: np.ndarray
    milemarkers: np.ndarray
    n_lanes: int
    values: np.ndarray
    missing: np.ndarray
    day_index: np.ndarray
    days: tuple[str, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.array(self.times, dtype=np.int64)
        self.milemarkers = np.asarray(self.milemarkers, dtype=np.float64)
        self.values = np.array(self.values, dtype=np.float64)
        self.missing = np.array(self.missing, dtype=bool)
        self.day_index = np.array(self.day_index, dtype=np.int64)
        self.days = tuple(self.days)
        n = len(self.milemarkers) * self.n_lanes
        if self.values.shape != (len(self.times), n, 3) or self.missing.shape != self.values.shape:
            raise ValueError(f"grid arrays have inconsistent shapes {self.values.shape}")
        for arr in (self.times, self.milemarkers, self.values, self.missing, self.day_index):
            arr.flags.writeable = False

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def n_milemarkers(self) -> int:
        return len(self.milemarkers)

    @property
    def n_nodes(self) -> int:
        return self.n_milemarkers * self.n_lanes

    def node_id(self, mm_index: int, lane: int) -> int:
        return mm_index * self.n_lanes + (lane - 1)

    @property
    def node_ids(self) -> list[tuple[float, int]]:
        return [(float(mm), lane) for mm in self.milemarkers for lane in range(1, self.n_lanes + 1)]

    def day_rows(self, day: int | str) -> np.ndarray:
        if isinstance(day, str):
            day = self.days.index(day)
        return np.flatnonzero(self.day_index == day)

    def replace(self, values=None, missing=None, meta=None) -> "SensorGrid":
        return SensorGrid(
            self.times,
            self.milemarkers,
            self.n_lanes,
            self.values if values is None else values,
            self.missing if missing is None else missing,
            self.day_index,
            self.days,
            {**self.meta, **(meta or {})},
        )

    def save(self, path) -> None:
        """Write an ``.npz`` archive; entries carry a fixed timestamp so reruns are byte-identical."""
        arrays = {
            "times": self.times,
            "milemarkers": self.milemarkers,
            "n_lanes": np.int64(self.n_lanes),
            "values": self.values,
            "missing": self.missing,
            "day_index": self.day_index,
            "days": np.array(self.days, dtype=str),
        }
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            for name, arr in arrays.items():
                info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
                info.compress_type = zipfile.ZIP_DEFLATED
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.asanyarray(arr), allow_pickle=False)
                zf.writestr(info, buf.getvalue())

    @classmethod
    def load(cls, path) -> "SensorGrid":
        with np.load(path) as z:
            return cls(
                z["times"],
                z["milemarkers"],
                int(z["n_lanes"]),
                z["values"],
                z["missing"],
                z["day_index"],
                tuple(str(d) for d in z["days"]),
            )


def _day_start(day: date, hour: float, tz: ZoneInfo) -> int:
    local = datetime(day.year, day.month, day.day, tzinfo=tz) + timedelta(hours=hour)
    return int(local.timestamp())


def local_date(time_unix: int, tz: str = DEFAULT_TZ) -> date:
    return datetime.fromtimestamp(int(time_unix), ZoneInfo(tz)).date()


def assemble_grid(
    readings: Sequence[SensorReading],
    day_window: tuple[float, float] | None = DEFAULT_DAY_WINDOW,
    tz: str = DEFAULT_TZ,
    n_lanes: int | None = None,
) -> SensorGrid:
    """Place readings on a dense 30 s grid.

    With a ``day_window`` of ``(start_hour, end_hour)`` every local day that has
    readings gets the full window (960 ticks for 4:00-12:00); readings outside
    it are dropped. ``day_window=None`` spans the observed times as one segment.
    Duplicate cells keep the last reading.
    """
    if not readings:
        raise EmptyInput("no sensor readings")
    zone = ZoneInfo(tz)
    t = np.array([r.time_unix for r in readings], dtype=np.int64)
    mms = np.array([r.milemarker for r in readings], dtype=np.float64)
    lanes = np.array([r.lane for r in readings], dtype=np.int64)
    feats = np.array(
        [[np.nan if v is None else v for v in (r.speed, r.occupancy, r.volume)] for r in readings],
        dtype=np.float64,
    )

    milemarkers = np.unique(mms)[::-1]
    n_lanes = int(lanes.max()) if n_lanes is None else n_lanes
    if lanes.max() > n_lanes:
        raise OutOfRangeValue("lane", None, int(lanes.max()))

    if day_window is None:
        t0 = int(t.min())
        if np.any((t - t0) % CADENCE_S):
            raise InconsistentCadence("timestamps are not aligned to 30 s ticks")
        n_ticks = int((t.max() - t0) // CADENCE_S) + 1
        starts = [t0]
        day_names = [local_date(t0, tz).isoformat()]
        row = (t - t0) // CADENCE_S
        keep = np.ones(len(t), dtype=bool)
    else:
        start_h, end_h = day_window
        n_ticks = int(round((end_h - start_h) * 3600 / CADENCE_S))
        local_days = sorted({datetime.fromtimestamp(int(x), zone).date() for x in np.unique(t)})
        starts_by_day = {d: _day_start(d, start_h, zone) for d in local_days}
        reading_day = np.array(
            [starts_by_day[datetime.fromtimestamp(int(x), zone).date()] for x in t], dtype=np.int64
        )
        offset = t - reading_day
        keep = (offset >= 0) & (offset < n_ticks * CADENCE_S)
        if np.any(offset[keep] % CADENCE_S):
            raise InconsistentCadence("timestamps are not aligned to 30 s ticks")
        used = sorted({d for d, s in starts_by_day.items() if np.any(keep & (reading_day == s))})
        if not used:
            raise EmptyInput("no readings inside the day window")
        starts = [starts_by_day[d] for d in used]
        day_names = [d.isoformat() for d in used]
        day_pos = {s: i for i, s in enumerate(starts)}
        row = np.array(
            [day_pos.get(int(s), 0) * n_ticks for s in reading_day], dtype=np.int64
        ) + offset // CADENCE_S

    times = np.concatenate([s + CADENCE_S * np.arange(n_ticks) for s in starts])
    day_index = np.repeat(np.arange(len(starts)), n_ticks)
    n_nodes = len(milemarkers) * n_lanes
    mm_pos = {float(m): i for i, m in enumerate(milemarkers)}

    values = np.full((len(times), n_nodes, 3), np.nan)
    filled = np.zeros((len(times), n_nodes), dtype=bool)
    duplicates = 0
    for i in np.flatnonzero(keep):
        node = mm_pos[float(mms[i])] * n_lanes + int(lanes[i]) - 1
        r = int(row[i])
        if filled[r, node]:
            duplicates += 1
        filled[r, node] = True
        values[r, node] = feats[i]
    if duplicates:
        log.warning("%d duplicate readings resolved last-wins", duplicates)
    meta = {"duplicates": duplicates, "dropped_outside_window": int((~keep).sum())}
    return SensorGrid(times, milemarkers, n_lanes, values, np.isnan(values), day_index, tuple(day_names), meta)


def grid_to_readings(grid: SensorGrid) -> list[SensorReading]:
    out = []
    lanes = grid.n_lanes
    for r, t in enumerate(grid.times):
        for node in range(grid.n_nodes):
            if grid.missing[r, node].all():
                continue
            v = grid.values[r, node]
            speed, occ, vol = (None if np.isnan(x) else float(x) for x in v)
            out.append(
                SensorReading(int(t), float(grid.milemarkers[node // lanes]), node % lanes + 1, speed, vol, occ)
            )
    return out


# ---------------------------------------------------------------------------
# Normalization


@dataclass(frozen=True)
class NormalizationStats:
    minimum: np.ndarray
    maximum: np.ndarray

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.minimum) / (self.maximum - self.minimum)

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * (self.maximum - self.minimum) + self.minimum

    def apply_grid(self, grid: SensorGrid) -> SensorGrid:
        return grid.replace(values=self.apply(grid.values), meta={"normalized": True})

    def to_dict(self) -> dict:
        return {f"{name}.{k}": float(getattr(self, k)[i]) for i, name in enumerate(FEATURES) for k in ("minimum", "maximum")}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        lo = np.array([float(d[f"{n}.minimum"]) for n in FEATURES])
        hi = np.array([float(d[f"{n}.maximum"]) for n in FEATURES])
        return cls(lo, hi)


def fit_normalization(grid: SensorGrid, mask: "TrainingMask | np.ndarray") -> NormalizationStats:
    """Per-feature min-max over non-missing, masked-in cells. No clamping is applied later."""
    usable = mask.usable if isinstance(mask, TrainingMask) else np.asarray(mask, dtype=bool)
    sub = grid.values[usable]
    lo, hi = np.empty(3), np.empty(3)
    for f, name in enumerate(FEATURES):
        col = sub[..., f]
        col = col[~np.isnan(col)]
        if col.size == 0 or col.max() == col.min():
            raise DegenerateFeature(name)
        lo[f], hi[f] = col.min(), col.max()
    return NormalizationStats(lo, hi)


# ---------------------------------------------------------------------------
# Training masks and day splits

CRASH_PRE_S = 30 * 60
IMPACT_S = 2 * 3600


@dataclass(frozen=True)
class MaskedInterval:
    start: int
    end: int
    tag: str  # crash_window | manual_window | excluded_day


@dataclass
class TrainingMask:
    """Per grid row: ``True`` when the row may be used for training."""

    usable: np.ndarray
    intervals: list[MaskedInterval]

    def __and__(self, other: np.ndarray) -> "TrainingMask":
        return TrainingMask(self.usable & np.asarray(other, dtype=bool), self.intervals)


def build_training_mask(
    log: IncidentLog,
    grid: SensorGrid,
    include_manual_anomalies: bool = False,
    excluded_days: Iterable[str] = (),
    crash_pre_s: int = CRASH_PRE_S,
    impact_s: int = IMPACT_S,
) -> TrainingMask:
    """Mask out crash windows ``[t-30min, t+2h]``, manual windows ``[t, t+2h]`` and excluded days.

    ``include_manual_anomalies`` keeps the manual windows in the training data.
    """
    intervals = []
    for rec in log:
        if rec.kind == "crash":
            intervals.append(MaskedInterval(rec.report_time_unix - crash_pre_s, rec.report_time_unix + impact_s, "crash_window"))
        elif not include_manual_anomalies:
            intervals.append(MaskedInterval(rec.report_time_unix, rec.report_time_unix + impact_s, "manual_window"))
    usable = np.ones(grid.n_times, dtype=bool)
    for iv in intervals:
        usable &= ~((grid.times >= iv.start) & (grid.times <= iv.end))
    for day in excluded_days:
        rows = grid.day_rows(day)
        if rows.size:
            usable[rows] = False
            intervals.append(MaskedInterval(int(grid.times[rows[0]]), int(grid.times[rows[-1]]), "excluded_day"))
    return TrainingMask(usable, intervals)


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    excluded: tuple[str, ...]

    def rows(self, grid: SensorGrid, which: str) -> np.ndarray:
        """Boolean row selector for the ``train``/``validation``/``excluded`` days."""
        wanted = {grid.days.index(d) for d in getattr(self, which) if d in grid.days}
        return np.isin(grid.day_index, sorted(wanted))


def parse_day_assignment(path) -> dict[str, str]:
    roles = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if len(parts) != 2 or parts[1] not in ("train", "val", "excluded"):
                raise MalformedRow(line_no, f"expected YYYY-MM-DD,<train|val|excluded>, got {line!r}")
            date.fromisoformat(parts[0])
            roles[parts[0]] = parts[1]
    return roles


def write_day_assignment(path, split: DatasetSplit) -> None:
    rows = [(d, "train") for d in split.train] + [(d, "val") for d in split.validation]
    rows += [(d, "excluded") for d in split.excluded]
    with open(path, "w", encoding="utf-8") as fh:
        for d, role in sorted(rows):
            fh.write(f"{d},{role}\n")


def split_days(
    days: Sequence[str] | SensorGrid,
    train: int = 14,
    validation: int = 5,
    excluded: int = 1,
    assignment: dict[str, str] | None = None,
) -> DatasetSplit:
    """Assign whole days to train/validation/excluded.

    An explicit ``assignment`` (see :func:`parse_day_assignment`) wins; otherwise
    days are taken chronologically: train first, then validation, then excluded.
    """
    if isinstance(days, SensorGrid):
        days = days.days
    days = sorted(days)
    if assignment is not None:
        pick = lambda role: tuple(d for d in days if assignment.get(d) == role)
        return DatasetSplit(pick("train"), pick("val"), pick("excluded"))
    need = train + validation + excluded
    if len(days) < need:
        raise SplitOverflow(f"{len(days)} days available, split needs {need}")
    return DatasetSplit(
        tuple(days[:train]),
        tuple(days[train : train + validation]),
        tuple(days[train + validation : need]),
    )
