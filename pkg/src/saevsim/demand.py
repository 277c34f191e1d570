"""Trip demand: event streams, grid binning, generation, forecasting.

Demand lives on the analysis grid as counts per (30-min bin, cell).
Events can be loaded from CSV or generated from a per-bin intensity
field with independent Poisson draws per (bin, cell); generation is a
pure function of (intensity, seed), and each (bin, cell) pair has its
own RNG substream so a window extraction matches the full horizon.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .roadnet import CellIndex, GridSpec, RoadNetwork, node_to_cell

_STREAM_DEMAND = 2

DEFAULT_BIN_MINUTES = 30
RECENT_WINDOW_BINS = 8          # 4 hours of 30-min bins
DAYS_PER_WEEK = 7


@dataclass(frozen=True)
class DemandEvent:
    """One trip request: desired departure time and OD nodes."""

    time_min: float
    origin: int
    dest: int


def load_events_csv(path) -> list[DemandEvent]:
    events = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            events.append(DemandEvent(float(rec["time_min"]),
                                      int(rec["origin_node"]),
                                      int(rec["dest_node"])))
    events.sort(key=lambda e: e.time_min)
    return events


def save_events_csv(events, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time_min", "origin_node", "dest_node"])
        for e in events:
            w.writerow([repr(e.time_min), e.origin, e.dest])


def load_intensity(path) -> np.ndarray:
    """Read a demand intensity JSON file into a (bins, rows, cols) array."""
    with open(path) as fh:
        raw = json.load(fh)
    bins, rows, cols = int(raw["bins"]), int(raw["rows"]), int(raw["cols"])
    rates = np.asarray(raw["rates"], dtype=float)
    if rates.size != bins * rows * cols:
        raise ValueError("intensity rates length does not match bins*rows*cols")
    rates = rates.reshape(bins, rows, cols)
    if np.any(rates < 0) or not np.all(np.isfinite(rates)):
        raise ValueError("intensity rates must be finite and non-negative")
    return rates


def save_intensity(rates: np.ndarray, path):
    rates = np.asarray(rates, dtype=float)
    doc = {"bins": rates.shape[0], "rows": rates.shape[1],
           "cols": rates.shape[2], "rates": rates.ravel().tolist()}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def bin_demand(events, grid: GridSpec, net: RoadNetwork,
               bin_minutes: int = DEFAULT_BIN_MINUTES,
               horizon_bins: int | None = None) -> np.ndarray:
    """Count events per (bin, origin cell); returns (bins, rows, cols).

    Bins are half-open, so an event exactly on a boundary falls in the
    later bin.  Negative event times are rejected.
    """
    if horizon_bins is None:
        latest = max((e.time_min for e in events), default=0.0)
        horizon_bins = int(latest // bin_minutes) + 1
    counts = np.zeros((horizon_bins, grid.rows, grid.cols), dtype=np.int64)
    for e in events:
        if e.time_min < 0:
            raise ValueError("event time must be non-negative")
        b = int(e.time_min // bin_minutes)
        if b >= horizon_bins:
            raise ValueError("event time beyond requested horizon")
        cell = node_to_cell(grid, net, e.origin)
        r, c = divmod(cell, grid.cols)
        counts[b, r, c] += 1
    return counts


def generate_demand(intensity: np.ndarray, horizon_bins: int,
                    cells: CellIndex, seed: int,
                    od_matrix: np.ndarray | None = None,
                    bin_minutes: int = DEFAULT_BIN_MINUTES,
                    first_bin: int = 0) -> list[DemandEvent]:
    """Draw Poisson demand events for bins [first_bin, first_bin+horizon).

    The intensity array (B, rows, cols) holds expected counts per bin
    and cell; horizons longer than B cycle through it.  Origins are
    uniform among the cell's nodes; destinations are uniform over all
    other nodes unless an od_matrix (n_cells x n_cells row weights)
    redirects them to a destination cell first.
    """
    intensity = np.asarray(intensity, dtype=float)
    grid = cells.grid
    if intensity.shape[1:] != (grid.rows, grid.cols):
        raise ValueError("intensity grid shape mismatch")
    n_nodes = cells.net.n_nodes
    all_nodes = np.arange(n_nodes)
    events: list[DemandEvent] = []
    for b in range(first_bin, first_bin + horizon_bins):
        rates = intensity[b % intensity.shape[0]].ravel()
        for cell in np.flatnonzero(rates > 0):
            nodes = cells.cell_nodes[cell]
            if len(nodes) == 0:
                raise ValueError(f"cell {cell} has positive rate but no nodes")
            rng = np.random.default_rng([_STREAM_DEMAND, int(seed), b, int(cell)])
            k = rng.poisson(rates[cell])
            if k == 0:
                continue
            times = bin_minutes * (b + rng.random(k))
            origins = nodes[rng.integers(0, len(nodes), size=k)]
            for t, o in zip(times, origins):
                d = _draw_destination(rng, int(o), cell, cells, all_nodes, od_matrix)
                events.append(DemandEvent(float(t), int(o), d))
    events.sort(key=lambda e: e.time_min)
    return events


def _draw_destination(rng, origin, origin_cell, cells, all_nodes, od_matrix):
    if od_matrix is None:
        d = int(rng.integers(0, len(all_nodes) - 1))
        return d if d < origin else d + 1
    weights = np.asarray(od_matrix[origin_cell], dtype=float)
    total = weights.sum()
    if total <= 0:
        raise ValueError("od matrix row has no positive weight")
    dest_cell = int(rng.choice(len(weights), p=weights / total))
    nodes = [n for n in cells.cell_nodes[dest_cell] if n != origin]
    if not nodes:
        nodes = [n for n in all_nodes if n != origin]
    return int(nodes[rng.integers(0, len(nodes))])


def load_od_matrix(path) -> np.ndarray:
    with open(path) as fh:
        raw = json.load(fh)
    n = int(raw["rows"]) * int(raw["cols"])
    mat = np.asarray(raw["matrix"], dtype=float).reshape(n, n)
    if np.any(mat < 0):
        raise ValueError("od matrix weights must be non-negative")
    return mat


# ======================================================================
# Baseline forecaster
# ======================================================================

@dataclass
class BaselineModel:
    """Seasonal-mean demand predictor blended with a recent-bin mean.

    means has shape (7, day_length_bins, rows, cols): one seasonal slice
    per (day of week, bin of day).  Weekday slots absent from the
    history fall back to the all-day mean of that bin of day.
    """

    means: np.ndarray
    alpha: float
    day_length_bins: int

    def slot(self, target_bin: int) -> tuple[int, int]:
        day = target_bin // self.day_length_bins
        return day % DAYS_PER_WEEK, target_bin % self.day_length_bins


def fit_baseline(history: np.ndarray, day_length_bins: int = 48,
                 alpha: float = 0.5) -> BaselineModel:
    """Fit seasonal means from a (bins, rows, cols) history tensor.

    The history must cover a whole number of days (at least one).
    """
    history = np.asarray(history, dtype=float)
    n_bins = history.shape[0]
    if n_bins == 0 or n_bins % day_length_bins != 0:
        raise ValueError("history must cover whole days")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    n_days = n_bins // day_length_bins
    daily = history.reshape(n_days, day_length_bins, *history.shape[1:])
    # all-day fallback per bin of day
    fallback = daily.mean(axis=0)
    means = np.broadcast_to(
        fallback, (DAYS_PER_WEEK,) + fallback.shape).copy()
    for dow in range(DAYS_PER_WEEK):
        rows = daily[dow::DAYS_PER_WEEK]
        if len(rows):
            means[dow] = rows.mean(axis=0)
    return BaselineModel(means=means, alpha=alpha,
                         day_length_bins=day_length_bins)


def predict_demand(model: BaselineModel, recent: np.ndarray,
                   target_bin: int) -> np.ndarray:
    """Per-cell expected counts for one future bin.

    recent must hold exactly the last 8 observed bins (zeros are fine
    for bins before the scenario start).
    """
    recent = np.asarray(recent, dtype=float)
    if recent.shape[0] != RECENT_WINDOW_BINS:
        raise ValueError(f"recent window must have {RECENT_WINDOW_BINS} bins")
    if recent.shape[1:] != model.means.shape[2:]:
        raise ValueError("recent window grid shape mismatch")
    dow, bod = model.slot(target_bin)
    seasonal = model.means[dow, bod]
    return model.alpha * recent.mean(axis=0) + (1.0 - model.alpha) * seasonal


def forecast_rmse(pred: np.ndarray, actual: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


def forecast_mape(pred: np.ndarray, actual: np.ndarray) -> float:
    """Mean absolute percentage error over cells with nonzero actuals."""
    pred = np.asarray(pred, dtype=float)
    actual = np.asarray(actual, dtype=float)
    mask = actual != 0
    if not mask.any():
        return math.nan
    return float(np.mean(np.abs((pred[mask] - actual[mask]) / actual[mask])))
