"""Gap filling: adaptive smoothing (ASM) for speed, local averaging for occupancy and volume.

ASM blends two kernel-smoothed fields, one propagating downstream at the
free-flow characteristic speed and one upstream at the congested wave speed.
Space is measured in the direction of travel (toward lower milemarkers).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import CADENCE_S, SensorGrid
from .errors import IsolatedCell

log = logging.getLogger(__name__)

SPEED, OCCUPANCY, VOLUME = 0, 1, 2


@dataclass(frozen=True)
class AsmParams:
    sigma_miles: float = 0.37
    tau_s: float = 66.0
    c_free_mph: float = 50.0
    c_cong_mph: float = -9.3
    v_crit_mph: float = 37.0
    delta_v_mph: float = 12.4
    radius_miles: float | None = None  # default 3 sigma
    radius_s: float | None = None  # default 3 tau

    def __post_init__(self):
        if min(self.sigma_miles, self.tau_s, self.delta_v_mph) <= 0:
            raise ValueError("sigma, tau and delta_v must be positive")
        if not self.c_free_mph > 0 > self.c_cong_mph:
            raise ValueError("need c_free > 0 > c_cong")

    @property
    def space_radius(self) -> float:
        return 3 * self.sigma_miles if self.radius_miles is None else self.radius_miles

    @property
    def time_radius(self) -> float:
        return 3 * self.tau_s if self.radius_s is None else self.radius_s

    @classmethod
    def isotropic(cls, base: "AsmParams | None" = None) -> "AsmParams":
        """Same kernel with no characteristic shift, for comparison."""
        base = base or cls()
        return cls(base.sigma_miles, base.tau_s, np.inf, -np.inf, base.v_crit_mph, base.delta_v_mph,
                   base.radius_miles, base.radius_s)


def _smoothed_field(v, obs, x, c_mph, p: AsmParams):
    """Kernel-weighted mean along the characteristic ``dt = dx / c``; returns (value, weight sum)."""
    n_t, n_x = v.shape
    num = np.zeros((n_t, n_x))
    den = np.zeros((n_t, n_x))
    vals = np.where(obs, v, 0.0)
    w_obs = obs.astype(np.float64)
    for i in range(n_x):
        for j in range(n_x):
            dx = x[i] - x[j]
            if abs(dx) > p.space_radius:
                continue
            shift = 0.0 if np.isinf(c_mph) else dx / c_mph * 3600.0
            lo = int(np.ceil((shift - p.time_radius) / CADENCE_S))
            hi = int(np.floor((shift + p.time_radius) / CADENCE_S))
            for k in range(lo, hi + 1):
                if abs(k) >= n_t:
                    continue
                w = np.exp(-abs(dx) / p.sigma_miles - abs(k * CADENCE_S - shift) / p.tau_s)
                # target row t takes observation row t - k
                if k >= 0:
                    num[k:, i] += w * vals[: n_t - k, j]
                    den[k:, i] += w * w_obs[: n_t - k, j]
                else:
                    num[:k, i] += w * vals[-k:, j]
                    den[:k, i] += w * w_obs[-k:, j]
    return num, den


def _asm_block(v, obs, x, p: AsmParams):
    """ASM estimate for every cell of one lane-day block; NaN where no data is in reach."""
    ref = np.max(v[obs]) if obs.any() else 0.0
    dev = np.where(obs, v - ref, 0.0)
    nf, df = _smoothed_field(dev, obs, x, p.c_free_mph, p)
    nc, dc = _smoothed_field(dev, obs, x, p.c_cong_mph, p)
    with np.errstate(invalid="ignore", divide="ignore"):
        v_free = ref + nf / df
        v_cong = ref + nc / dc
    v_free = np.where(df > 0, v_free, v_cong)
    v_cong = np.where(dc > 0, v_cong, v_free)
    w = 0.5 * (1 + np.tanh((p.v_crit_mph - np.minimum(v_free, v_cong)) / p.delta_v_mph))
    return v_free + w * (v_cong - v_free)


def _day_node_fallback(values, missing, grid: SensorGrid, feature: int, rows, node):
    col = values[rows, node, feature]
    have = col[~missing[rows, node, feature]]
    if have.size:
        return float(have.mean())
    lane_nodes = np.arange(node % grid.n_lanes, grid.n_nodes, grid.n_lanes)
    pool = values[rows][:, lane_nodes, feature]
    pool = pool[~np.isnan(pool)]
    if pool.size:
        return float(pool.mean())
    pool = values[..., feature][~missing[..., feature]]
    return float(pool.mean()) if pool.size else 0.0


def asm_impute(
    grid: SensorGrid, params: AsmParams | None = None, smooth_observed: bool = False, strict: bool = False
) -> SensorGrid:
    """Fill the speed channel with ASM.

    Observed cells are kept verbatim unless ``smooth_observed``. Cells with no
    observation in reach fall back to the day-node mean and are listed in
    ``meta["isolated_speed_cells"]`` as ``(time_unix, node_id)``; with
    ``strict`` they raise :class:`IsolatedCell` instead.
    """
    p = params or AsmParams()
    values = np.array(grid.values)
    missing = np.array(grid.missing)
    x = -grid.milemarkers
    isolated = []
    for d in range(len(grid.days)):
        rows = grid.day_rows(d)
        for lane in range(grid.n_lanes):
            nodes = np.arange(lane, grid.n_nodes, grid.n_lanes)
            block = values[np.ix_(rows, nodes, [SPEED])][..., 0]
            obs = ~missing[np.ix_(rows, nodes, [SPEED])][..., 0]
            est = _asm_block(block, obs, x, p)
            target = np.ones_like(obs) if smooth_observed else ~obs
            for r, c in zip(*np.nonzero(target & np.isnan(est))):
                node = int(nodes[c])
                est[r, c] = _day_node_fallback(grid.values, grid.missing, grid, SPEED, rows, node)
                isolated.append((int(grid.times[rows[r]]), node))
            block = np.where(target, est, block)
            values[np.ix_(rows, nodes, [SPEED])] = block[..., None]
    missing[..., SPEED] = False
    if isolated and strict:
        raise IsolatedCell(isolated)
    if isolated:
        log.warning("%d speed cells had no observations in reach; used day-node means", len(isolated))
    return grid.replace(values=values, missing=missing, meta={"isolated_speed_cells": isolated})


def _box(a, radius_t, radius_x):
    kernel = np.ones((2 * radius_t + 1, 2 * radius_x + 1))
    return ndimage.convolve(a, kernel, mode="constant", cval=0.0)


def local_average_impute(
    grid: SensorGrid, radius: tuple[int, int] = (1, 2), features=(OCCUPANCY, VOLUME)
) -> SensorGrid:
    """Fill each missing cell with the mean of observed neighbors in a box.

    ``radius`` is ``(milemarker cells, time steps)``. The same lane is used
    first; if it has nothing in the box, all lanes in the box; then the
    day-node mean. Counts of each path go to ``meta["local_average"]``.
    """
    r_x, r_t = radius
    values = np.array(grid.values)
    missing = np.array(grid.missing)
    stats = {"same_lane": 0, "all_lanes": 0, "day_node_mean": 0}
    fallback_cells = []
    for f in features:
        for d in range(len(grid.days)):
            rows = grid.day_rows(d)
            day = values[rows, :, f].reshape(len(rows), grid.n_milemarkers, grid.n_lanes)
            obs = ~missing[rows, :, f].reshape(day.shape)
            if not (~obs).any():
                continue
            ref = np.max(day[obs]) if obs.any() else 0.0
            dev = np.where(obs, day - ref, 0.0)
            out = day.copy()
            all_num = sum(_box(dev[..., l], r_t, r_x) for l in range(grid.n_lanes))
            all_den = sum(_box(obs[..., l].astype(float), r_t, r_x) for l in range(grid.n_lanes))
            for lane in range(grid.n_lanes):
                num = _box(dev[..., lane], r_t, r_x)
                den = _box(obs[..., lane].astype(float), r_t, r_x)
                gap = ~obs[..., lane]
                same = gap & (den > 0)
                other = gap & (den == 0) & (all_den > 0)
                col = out[..., lane]
                col[same] = ref + num[same] / den[same]
                col[other] = ref + all_num[other] / all_den[other]
                stats["same_lane"] += int(same.sum())
                stats["all_lanes"] += int(other.sum())
                for t, m in zip(*np.nonzero(gap & (den == 0) & (all_den == 0))):
                    node = m * grid.n_lanes + lane
                    col[t, m] = _day_node_fallback(grid.values, grid.missing, grid, f, rows, node)
                    stats["day_node_mean"] += 1
                    fallback_cells.append((int(grid.times[rows[t]]), int(node), int(f)))
            values[rows, :, f] = out.reshape(len(rows), grid.n_nodes)
        missing[..., f] = False
    return grid.replace(
        values=values, missing=missing, meta={"local_average": stats, "local_average_fallback_cells": fallback_cells}
    )


def impute_grid(grid: SensorGrid, asm: AsmParams | None = None, radius: tuple[int, int] = (1, 2)) -> SensorGrid:
    return local_average_impute(asm_impute(grid, asm), radius)
