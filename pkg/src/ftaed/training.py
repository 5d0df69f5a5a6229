"""Autoencoder training on anomaly-free windows and per-node threshold calibration."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SensorGrid, TrainingMask
from .errors import DivergedLoss, EmptyTrainingSet, ShapeMismatch
from .models import AutoencoderModel

log = logging.getLogger(__name__)

INFERENCE_BLOCK = 64


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params: list[Tensor], grads, state: AdamState, lr: float):
    """One bias-corrected Adam update, applied in place. Returns ``(params, state)``."""
    if isinstance(grads, dict):
        grads = [grads[p] for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.data.shape or m.shape != p.data.shape:
            raise ShapeMismatch("adam_step", p.data.shape, g.shape)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)
    return params, state


# ---------------------------------------------------------------------------
# Windows


def valid_rows(grid: SensorGrid, usable: np.ndarray | TrainingMask, timesteps: int) -> np.ndarray:
    """Rows whose whole ``timesteps + 1`` window is usable and inside one day."""
    usable = usable.usable if isinstance(usable, TrainingMask) else np.asarray(usable, dtype=bool)
    ok = usable.copy()
    for lag in range(1, timesteps + 1):
        prev = np.zeros_like(ok)
        prev[lag:] = usable[:-lag] & (grid.day_index[lag:] == grid.day_index[:-lag])
        ok &= prev
    complete = ~np.isnan(grid.values).any(axis=(1, 2))
    for lag in range(timesteps + 1):
        shifted = np.zeros_like(ok)
        shifted[lag:] = complete[: len(complete) - lag]
        ok &= shifted
    return np.flatnonzero(ok)


def _has_window(grid: SensorGrid, timesteps: int) -> np.ndarray:
    return valid_rows(grid, np.ones(grid.n_times, dtype=bool), timesteps)


def _batch_input(values: np.ndarray, rows: np.ndarray, timesteps: int) -> np.ndarray:
    idx = rows[:, None] + np.arange(-timesteps, 1)[None, :]
    return values[idx].reshape(-1, values.shape[-1]).astype(np.float32)


def node_errors(model: AutoencoderModel, grid: SensorGrid, rows=None, per_feature: bool = False) -> np.ndarray:
    """Per-node error ``e_i(t)``: squared reconstruction error summed over the 3 features.

    Returns ``[n_times, n_base]`` (``[n_times, n_base, 3]`` with ``per_feature``)
    with NaN for rows not requested or without a full window. Rows are evaluated in fixed absolute blocks so a row's error never
    depends on which other rows were requested.
    """
    k = model.config.timesteps
    have = _has_window(grid, k)
    if rows is not None:
        wanted = np.zeros(grid.n_times, dtype=bool)
        wanted[np.asarray(rows, dtype=np.int64)] = True
    else:
        wanted = np.ones(grid.n_times, dtype=bool)
    shape = (grid.n_times, model.n_base, 3) if per_feature else (grid.n_times, model.n_base)
    out = np.full(shape, np.nan)
    if have.size == 0:
        return out
    blocks = have // INFERENCE_BLOCK
    for b in np.unique(blocks[wanted[have]]):
        block_rows = have[blocks == b]
        batch = len(block_rows)
        x = _batch_input(grid.values, block_rows, k)
        recon = model.forward(Tensor(x), batch=batch).data
        cur = model.current_rows(batch).idx
        diff = recon[cur].astype(np.float64) - x[cur]
        sq = (diff * diff).reshape(batch, model.n_base, 3)
        out[block_rows] = sq if per_feature else sq.sum(axis=2)
    out[~wanted] = np.nan
    return out


def reconstruction_mse(model: AutoencoderModel, grid: SensorGrid, usable) -> float:
    """Mean per-node error over usable windows (the training objective without dropout)."""
    rows = valid_rows(grid, usable, model.config.timesteps)
    if rows.size == 0:
        raise EmptyTrainingSet("no usable windows")
    return float(np.mean(node_errors(model, grid, rows)[rows]))


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainResult:
    model: AutoencoderModel
    history: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = 0
    train_rows: np.ndarray | None = None

    def write_history(self, path) -> None:
        write_loss_history(path, self.history)


def write_loss_history(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_mse", "val_mse"])
        for epoch, tr, va in history:
            w.writerow([epoch, f"{tr:.8g}", f"{va:.8g}"])


def train_model(
    model: AutoencoderModel,
    grid: SensorGrid,
    train_mask,
    config: TrainConfig,
    val_mask=None,
    progress=None,
) -> TrainResult:
    """Minimize the per-node reconstruction error over usable training windows.

    ``grid`` must be imputed and normalized. Windows never straddle masked rows
    or day boundaries. The returned model carries the parameters of the epoch
    with the lowest validation error (training error when no validation mask).
    """
    k = model.config.timesteps
    rows = valid_rows(grid, train_mask, k)
    if rows.size == 0:
        raise EmptyTrainingSet("no usable training windows")
    val_rows = valid_rows(grid, val_mask, k) if val_mask is not None else np.empty(0, np.int64)

    rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng([config.seed, 1])
    params = model.parameters()
    state = AdamState.like(params)
    history = []
    best, best_epoch, stale = np.inf, 0, 0
    best_params = [p.data.copy() for p in params]

    for epoch in range(1, config.max_epochs + 1):
        order = rows[rng.permutation(rows.size)]
        total, seen = 0.0, 0
        for start in range(0, order.size, config.batch_size):
            chunk = np.sort(order[start : start + config.batch_size])
            x = _batch_input(grid.values, chunk, k)
            with ad.Tape() as tape:
                loss = model.loss(x, len(chunk), training=True, rng=drop_rng)
            value = loss.item()
            if not np.isfinite(value):
                raise DivergedLoss(f"non-finite loss at epoch {epoch}")
            grads = tape.backward(loss, wrt=params)
            adam_step(params, grads, state, config.learning_rate)
            total += value * len(chunk)
            seen += len(chunk)
        train_mse = total / seen
        if val_rows.size:
            val_mse = float(np.mean(node_errors(model, grid, val_rows)[val_rows]))
        else:
            val_mse = train_mse
        history.append((epoch, train_mse, val_mse))
        if progress:
            progress(epoch, train_mse, val_mse)
        log.info("epoch %d train %.6f val %.6f", epoch, train_mse, val_mse)
        if val_mse < best:
            best, best_epoch, stale = val_mse, epoch, 0
            best_params = [p.data.copy() for p in params]
        else:
            stale += 1
            if stale >= config.patience:
                break

    for p, saved in zip(params, best_params):
        p.data = saved
    return TrainResult(model, history, best_epoch, rows)


# ---------------------------------------------------------------------------
# Thresholds


@dataclass
class ThresholdVector:
    T: np.ndarray
    alpha: float = 1.0

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64)
        if np.any(self.T < 0):
            raise ValueError("thresholds must be non-negative")

    @property
    def effective(self) -> np.ndarray:
        return self.alpha * self.T

    @property
    def per_feature(self) -> bool:
        return self.T.ndim == 2

    def save(self, path) -> None:
        cols = "threshold_speed,threshold_occupancy,threshold_volume" if self.per_feature else "threshold"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# alpha={self.alpha!r}\nnode_id,{cols}\n")
            for i, t in enumerate(self.T):
                vals = ",".join(repr(float(x)) for x in np.atleast_1d(t))
                fh.write(f"{i},{vals}\n")

    @classmethod
    def load(cls, path) -> "ThresholdVector":
        with open(path, encoding="utf-8") as fh:
            alpha = float(fh.readline().split("=", 1)[1])
            per_feature = fh.readline().count(",") > 1
            T = [[float(x) for x in line.split(",")[1:]] for line in fh if line.strip()]
        T = np.array(T)
        return cls(T if per_feature else T[:, 0], alpha)


def calibrate_thresholds(model: AutoencoderModel, grid: SensorGrid, mask, per_feature: bool = False) -> ThresholdVector:
    """``T[i]`` = largest training error of node ``i``, so alpha = 1 flags no training sample.

    With ``per_feature`` each node gets one threshold per feature.
    """
    rows = valid_rows(grid, mask, model.config.timesteps)
    if rows.size == 0:
        raise EmptyTrainingSet("no usable windows for calibration")
    errors = node_errors(model, grid, rows, per_feature)[rows]
    return ThresholdVector(errors.max(axis=0), 1.0)
