"""Desk-scale synthetic freeway scenarios: recurring rush-hour queues plus injected crashes.

Milemarkers decrease in the direction of travel. The morning queue forms at the
downstream end of the corridor and its tail grows upstream at ``wave_speed``;
stop-and-go bands inside it travel upstream at the same speed. Crashes carve
a triangular low-speed region that spreads upstream from the epicenter.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from zoneinfo import ZoneInfo

import numpy as np

from .data import CADENCE_S, DEFAULT_TZ, Incident, IncidentLog, SensorGrid
from .errors import OutOfBounds

Q_MAX = 20.0  # vehicles per 30 s at the volume peak


@dataclass(frozen=True)
class SynthConfig:
    n_milemarkers: int = 49
    n_lanes: int = 4
    n_days: int = 6
    steps_per_day: int = 960
    start_hour: float = 4.0
    first_day: str = "2023-10-02"
    upstream_milemarker: float = 71.0
    spacing_miles: float = 0.375
    free_speed: float = 65.0
    congested_speed: float = 22.0
    rush_start_hour: float = 6.0
    rush_end_hour: float = 9.0
    wave_speed: float = -12.0
    wave_amplitude: float = 5.0
    wave_period_s: float = 600.0
    max_queue_fraction: float = 0.45
    noise_std: float = 1.5
    missing_fraction: float = 0.0
    seed: int = 0
    tz: str = DEFAULT_TZ

    def __post_init__(self):
        if not self.free_speed > self.congested_speed > 0:
            raise ValueError("need free_speed > congested_speed > 0")
        if self.steps_per_day < 1:
            raise ValueError("steps_per_day must be at least 1")
        if self.wave_speed >= 0:
            raise ValueError("wave_speed must be negative (upstream propagation)")

    @property
    def milemarkers(self) -> np.ndarray:
        return self.upstream_milemarker - self.spacing_miles * np.arange(self.n_milemarkers)

    def day_names(self) -> list[str]:
        d = date.fromisoformat(self.first_day)
        out = []
        while len(out) < self.n_days:
            if d.weekday() < 5:
                out.append(d.isoformat())
            d += timedelta(days=1)
        return out


@dataclass(frozen=True)
class InjectedIncident:
    true_time: int
    milemarker: float
    lane: int
    severity: float
    duration_s: float = 1200.0
    backprop_speed: float = -12.0
    report_delay_s: int = 0

    def __post_init__(self):
        if not 0 <= self.severity <= 1:
            raise ValueError("severity must lie in [0, 1]")
        if self.report_delay_s < 0:
            raise ValueError("report_delay_s must be non-negative")
        if self.backprop_speed >= 0:
            raise ValueError("backprop_speed must be negative")

    @property
    def report_time(self) -> int:
        return int(self.true_time + self.report_delay_s)


@dataclass(frozen=True)
class GroundTruth:
    true_time: int
    report_time: int
    milemarker: float
    lane: int
    rows: tuple[int, ...] = field(default=(), compare=False)


def occupancy_from_speed(v, free_speed):
    return np.clip(100.0 * (1.0 - v / free_speed), 0.0, 100.0)


def volume_from_speed(v, free_speed):
    r = np.clip(v / free_speed, 0.0, 1.0)
    return Q_MAX * 4.0 * r * (1.0 - r)


def _day_starts(cfg: SynthConfig) -> list[int]:
    zone = ZoneInfo(cfg.tz)
    out = []
    for name in cfg.day_names():
        d = date.fromisoformat(name)
        local = datetime(d.year, d.month, d.day, tzinfo=zone) + timedelta(hours=cfg.start_hour)
        out.append(int(local.timestamp()))
    return out


def _nominal_day(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Noise-free speeds ``[steps, milemarkers]`` for one day."""
    t = cfg.start_hour * 3600 + CADENCE_S * np.arange(cfg.steps_per_day)
    dist = cfg.milemarkers - cfg.milemarkers[-1]  # miles upstream of the downstream end
    speed = np.full((cfg.steps_per_day, cfg.n_milemarkers), cfg.free_speed)
    rush = (cfg.rush_end_hour - cfg.rush_start_hour) * 3600
    if rush <= 0:
        return speed
    length = cfg.spacing_miles * (cfg.n_milemarkers - 1)
    extent = length * cfg.max_queue_fraction * rng.uniform(0.6, 1.0)
    c = abs(cfg.wave_speed) / 3600.0  # miles per second
    onset = cfg.rush_start_hour * 3600 + rng.uniform(-600, 600)
    grow = min(extent / c, rush / 3)
    extent = grow * c
    release = cfg.rush_end_hour * 3600 - grow + rng.uniform(-600, 0)
    tail = np.clip(np.minimum((t - onset) * c, extent), 0, None)
    tail = np.where(t > release, np.clip(extent - (t - release) * c, 0, None), tail)
    tail = np.where(t < onset, 0.0, tail)
    # smooth edge of width ~0.3 mi at the queue tail
    inside = 0.5 * (1 - np.tanh((dist[None, :] - tail[:, None]) / 0.15))
    inside = np.where(tail[:, None] > 0, inside, 0.0)
    phase = rng.uniform(0, 2 * np.pi)
    # stop-and-go bands travel upstream with the queue; they only raise speed above congested_speed
    bands = 0.5 * cfg.wave_amplitude * (1 + np.sin(
        2 * np.pi * (t[:, None] + dist[None, :] / c) / cfg.wave_period_s + phase
    ))
    congested = cfg.congested_speed + bands
    return speed + inside * (congested - speed)


def generate_nominal(cfg: SynthConfig) -> tuple[SensorGrid, IncidentLog]:
    """Deterministic (per seed) nominal grid and an empty incident log."""
    rng = np.random.default_rng(cfg.seed)
    starts = _day_starts(cfg)
    n_nodes = cfg.n_milemarkers * cfg.n_lanes
    days = []
    for _ in starts:
        base = _nominal_day(cfg, rng)
        # lanes share free flow; higher-numbered lanes congest slightly less deeply
        lane_scale = 1.0 - 0.04 * np.arange(cfg.n_lanes)
        v = cfg.free_speed - (cfg.free_speed - base[:, :, None]) * lane_scale[None, None, :]
        v = v.reshape(cfg.steps_per_day, n_nodes)
        occ = occupancy_from_speed(v, cfg.free_speed)
        vol = volume_from_speed(v, cfg.free_speed)
        scale = cfg.noise_std
        v = np.clip(v + rng.normal(0, scale, v.shape), 0, 120)
        occ = np.clip(occ + rng.normal(0, scale * 100 / cfg.free_speed * 0.5, occ.shape), 0, 100)
        vol = np.clip(vol + rng.normal(0, scale * Q_MAX / cfg.free_speed * 2, vol.shape), 0, None)
        days.append(np.stack([v, occ, vol], axis=-1))
    values = np.concatenate(days, axis=0)
    missing = np.zeros(values.shape, dtype=bool)
    if cfg.missing_fraction > 0:
        cells = rng.random(values.shape[:2]) < cfg.missing_fraction
        missing[cells] = True
        values[missing] = np.nan
    times = np.concatenate([s + CADENCE_S * np.arange(cfg.steps_per_day) for s in starts])
    day_index = np.repeat(np.arange(len(starts)), cfg.steps_per_day)
    meta = {"free_speed": cfg.free_speed, "synthetic": True}
    grid = SensorGrid(times, cfg.milemarkers, cfg.n_lanes, values, missing, day_index, tuple(cfg.day_names()), meta)
    return grid, IncidentLog()


def incident_factor(grid: SensorGrid, inc: InjectedIncident) -> np.ndarray:
    """Speed drop fraction ``severity * decay`` per ``[time, node]`` (0 outside the triangle)."""
    mm_ix = int(np.argmin(np.abs(grid.milemarkers - inc.milemarker)))
    upstream = grid.milemarkers - grid.milemarkers[mm_ix]  # miles upstream of the epicenter
    c = abs(inc.backprop_speed) / 3600.0
    dt = (grid.times - inc.true_time).astype(np.float64)
    D = inc.duration_s
    # tail grows upstream at c for 2D; the recovery front leaves the epicenter at D and moves at 2c
    tail = np.where(dt <= 2 * D, dt * c, -1.0)
    head = np.where(dt <= D, 0.0, (dt - D) * 2 * c)
    same_day = grid.day_index == grid.day_index[np.argmin(np.abs(grid.times - inc.true_time))]
    active = (dt >= 0) & same_day
    u = upstream[None, :]
    inside = active[:, None] & (u >= head[:, None] - 1e-9) & (u <= tail[:, None] + 1e-9)
    reach = max(2 * D * c, 1e-9)
    decay = np.where(inside, 1.0 - 0.5 * np.clip(u / reach, 0, 1), 0.0)
    lane_w = np.where(np.arange(grid.n_lanes) + 1 == inc.lane, 1.0, 0.85)
    factor = inc.severity * decay[:, :, None] * lane_w[None, None, :]
    return factor.reshape(grid.n_times, grid.n_nodes)


def inject_incidents(
    grid: SensorGrid, incidents: list[InjectedIncident], free_speed: float | None = None
) -> tuple[SensorGrid, IncidentLog, list[GroundTruth]]:
    """Apply each incident's triangular speed drop; report crashes at ``true_time + report_delay``.

    Occupancy and volume of affected cells move with the speed change; cells
    outside every triangle are untouched.
    """
    free_speed = free_speed or grid.meta.get("free_speed", 65.0)
    values = np.array(grid.values)
    truth, records = [], []
    lo_mm, hi_mm = grid.milemarkers.min(), grid.milemarkers.max()
    for inc in incidents:
        if not (grid.times[0] <= inc.true_time <= grid.times[-1]) or not lo_mm - 1e-9 <= inc.milemarker <= hi_mm + 1e-9:
            raise OutOfBounds(f"incident at t={inc.true_time}, mm={inc.milemarker} lies outside the grid")
        if not 1 <= inc.lane <= grid.n_lanes:
            raise OutOfBounds(f"incident lane {inc.lane} outside 1..{grid.n_lanes}")
        f = incident_factor(grid, inc)
        hit = f > 0
        v_old = values[..., 0]
        v_new = np.where(hit, v_old * (1.0 - f), v_old)
        occ = values[..., 1] + occupancy_from_speed(v_new, free_speed) - occupancy_from_speed(v_old, free_speed)
        vol = values[..., 2] + volume_from_speed(v_new, free_speed) - volume_from_speed(v_old, free_speed)
        values[..., 0] = v_new
        values[..., 1] = np.where(hit, np.clip(occ, 0, 100), values[..., 1])
        values[..., 2] = np.where(hit, np.clip(vol, 0, None), values[..., 2])
        rows = tuple(int(r) for r in np.flatnonzero(hit.any(axis=1)))
        records.append(Incident(inc.report_time, float(inc.milemarker), "crash"))
        truth.append(GroundTruth(int(inc.true_time), inc.report_time, float(inc.milemarker), inc.lane, rows))
    out = grid.replace(values=np.where(grid.missing, np.nan, values))
    return out, IncidentLog(tuple(records)), truth


def random_incidents(
    grid: SensorGrid,
    n: int,
    days: list[str],
    seed: int = 0,
    delay_range_s: tuple[int, int] = (300, 720),
    severity_range: tuple[float, float] = (0.6, 0.85),
    duration_range_s: tuple[float, float] = (900.0, 1500.0),
    backprop_speed: float = -12.0,
    upstream_fraction: float = 0.5,
    min_gap_s: int = 5400,
) -> list[InjectedIncident]:
    """Spread ``n`` crashes over ``days``, in the upstream part of the corridor.

    Crashes on one day are at least ``min_gap_s`` apart so their impact windows
    do not overlap.
    """
    rng = np.random.default_rng(seed)
    out = []
    per_day = [n // len(days) + (1 if i < n % len(days) else 0) for i in range(len(days))]
    n_up = max(1, int(len(grid.milemarkers) * upstream_fraction))
    for day, count in zip(days, per_day):
        rows = grid.day_rows(day)
        t0, t1 = int(grid.times[rows[0]]) + 1800, int(grid.times[rows[-1]]) - 2700
        span = t1 - t0
        if count and span < (count - 1) * min_gap_s:
            raise OutOfBounds(f"cannot fit {count} incidents {min_gap_s}s apart on {day}")
        slack = span - (count - 1) * min_gap_s
        offsets = np.sort(rng.uniform(0, slack, count)) + np.arange(count) * min_gap_s
        for off in offsets:
            t = t0 + int(off) // CADENCE_S * CADENCE_S
            out.append(
                InjectedIncident(
                    true_time=t,
                    milemarker=float(grid.milemarkers[rng.integers(2, n_up)]),
                    lane=int(rng.integers(1, grid.n_lanes + 1)),
                    severity=float(rng.uniform(*severity_range)),
                    duration_s=float(rng.uniform(*duration_range_s)),
                    backprop_speed=backprop_speed,
                    report_delay_s=int(rng.integers(delay_range_s[0], delay_range_s[1] + 1)),
                )
            )
    return out
