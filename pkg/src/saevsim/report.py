"""Artifact writers: canonical JSON, delimited tables, and figures.

Every writer here is deterministic — keys are sorted, no clocks are
consulted — so rerunning a command over the same inputs reproduces the
same bytes.  Figures are rendered with the Agg backend straight to
files, sitting next to the JSON/CSV they illustrate.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from pathlib import Path

import numpy as np

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)


# ======================================================================
# serialization
# ======================================================================

def jsonable(obj):
    """Recursively coerce simulation objects into JSON-safe values."""
    if obj is None or isinstance(obj, (bool, int, str)):
        return obj
    if isinstance(obj, float):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, Path):
        return str(obj)
    if hasattr(obj, "to_jsonable"):
        return jsonable(obj.to_jsonable())
    if hasattr(obj, "to_dict"):
        return jsonable(obj.to_dict())
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: jsonable(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, set)):
        return [jsonable(v) for v in obj]
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(jsonable(obj), fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([jsonable(v) if isinstance(v, (np.integer, np.floating))
                             else v for v in row])
    return path


def write_report_csv(path, report) -> Path:
    """Scalar report fields as metric,value rows."""
    rows = []
    for f in dataclasses.fields(report):
        val = getattr(report, f.name)
        if isinstance(val, (int, float, str, np.integer, np.floating)):
            rows.append((f.name, jsonable(val)))
    return write_csv(path, ("metric", "value"), rows)


def write_event_log_csv(path, log) -> Path:
    return write_csv(path, ("time_min", "event", "vehicle", "node", "detail"),
                     [(f"{t:.6f}", e, v, n, d) for t, e, v, n, d in log])


def write_trace_csv(path, trace) -> Path:
    rows = [(r["phase"], r["step"], r["evals"], f"{r['best']:.9f}",
             *[f"{v:.9f}" for v in r["x"]]) for r in trace]
    width = max((len(r["x"]) for r in trace), default=0)
    header = ("phase", "step", "evals", "best_wait_min",
              *[f"x{i}" for i in range(width)])
    return write_csv(path, header, rows)


def write_sensitivity_csv(path, rows) -> Path:
    out = [(r.label, f"{r.mean_wait:.6f}", f"{r.std_wait:.6f}",
            ";".join(f"{w:.6f}" for w in r.waits)) for r in rows]
    return write_csv(path, ("policy", "mean_wait_min", "std_wait_min",
                            "per_seed_waits"), out)


# ======================================================================
# figures
# ======================================================================

def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return path


def fig_wait_histogram(report, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    waits = report.waits or [0.0]
    ax.hist(waits, bins=30, color="#4878a8", edgecolor="white")
    ax.axvline(report.mean_wait_min, color="#c23b22", linestyle="--",
               label=f"mean {report.mean_wait_min:.2f} min")
    ax.set_xlabel("wait [min]")
    ax.set_ylabel("served requests")
    ax.set_title(f"Wait distribution — {report.strategy}, seed {report.seed}")
    ax.legend()
    return _save(fig, path)


def fig_wait_by_bin(report, path, bin_minutes: float = 30.0) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    if report.waits:
        times = np.asarray(report.request_times)
        waits = np.asarray(report.waits)
        bins = ((times - report.start_min) // bin_minutes).astype(int)
        uniq = np.unique(bins)
        means = [waits[bins == b].mean() for b in uniq]
        hours = (report.start_min + (uniq + 0.5) * bin_minutes) / 60.0
        ax.plot(hours, means, marker="o", ms=3, color="#4878a8")
    ax.set_xlabel("hour of day")
    ax.set_ylabel("mean wait [min]")
    ax.set_title("Mean wait per half-hour window")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def fig_search_trace(trace, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    evals = [r["evals"] for r in trace]
    best = [r["best"] for r in trace]
    ax.step(evals, best, where="post", color="#4878a8")
    ax.set_xlabel("objective evaluations")
    ax.set_ylabel("best wait [min]")
    ax.set_title("Search convergence")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def fig_sensitivity(rows, path) -> Path:
    fig, ax = plt.subplots(figsize=(6.5, 4))
    labels = [r.label for r in rows]
    means = [r.mean_wait for r in rows]
    errs = [r.std_wait / max(1, len(r.waits)) ** 0.5 for r in rows]
    ax.bar(range(len(rows)), means, yerr=errs, capsize=4, color="#4878a8")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel("mean effective wait [min]")
    ax.set_title("Scoring-term sensitivity")
    return _save(fig, path)


def fig_station_map(net, station_nodes, path, grid=None) -> Path:
    fig, ax = plt.subplots(figsize=(7, 5))
    for a, b in zip(net.seg_a, net.seg_b):
        ax.plot([net.node_x[a], net.node_x[b]],
                [net.node_y[a], net.node_y[b]],
                color="#bbbbbb", lw=0.6, zorder=1)
    ax.scatter(net.node_x, net.node_y, s=4, color="#666666", zorder=2)
    sx = [net.node_x[n] for n in station_nodes]
    sy = [net.node_y[n] for n in station_nodes]
    ax.scatter(sx, sy, s=90, marker="*", color="#c23b22", zorder=3,
               label="charging station")
    if grid is not None:
        for r in range(grid.rows + 1):
            y = grid.origin_y + r * grid.cell_size_m
            ax.plot([grid.origin_x, grid.origin_x + grid.cols * grid.cell_size_m],
                    [y, y], color="#88aadd", lw=0.4, alpha=0.6, zorder=0)
        for c in range(grid.cols + 1):
            x = grid.origin_x + c * grid.cell_size_m
            ax.plot([x, x], [grid.origin_y,
                             grid.origin_y + grid.rows * grid.cell_size_m],
                    color="#88aadd", lw=0.4, alpha=0.6, zorder=0)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title("Network and charging stations")
    ax.legend(loc="upper right")
    return _save(fig, path)


def fig_prediction_scatter(truth, preds, path, names=None) -> Path:
    truth = np.atleast_2d(np.asarray(truth, dtype=float))
    preds = np.atleast_2d(np.asarray(preds, dtype=float))
    k = truth.shape[1]
    fig, axes = plt.subplots(1, k, figsize=(3.2 * k, 3.4), squeeze=False)
    for i, ax in enumerate(axes[0]):
        ax.scatter(truth[:, i], preds[:, i], s=14, color="#4878a8", alpha=0.7)
        span = [min(truth[:, i].min(), preds[:, i].min()),
                max(truth[:, i].max(), preds[:, i].max())]
        ax.plot(span, span, color="#999999", lw=0.8)
        ax.set_xlabel("tuned")
        ax.set_ylabel("predicted" if i == 0 else "")
        ax.set_title(names[i] if names else f"param {i}")
    fig.suptitle("Window-parameter predictor, held-out windows")
    return _save(fig, path)


def fig_function_shapes(params, path, o_max: float = 3.0) -> Path:
    from .relocation import eval_modeling_function
    o = np.linspace(0.0, o_max, 241)
    f1 = [eval_modeling_function(params.f1_type, params.f1_params, v) for v in o]
    f2 = [eval_modeling_function(params.f2_type, params.f2_params, v) for v in o]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(o, f1, label=f"f1 ({params.f1_type}) — distance weight",
            color="#4878a8")
    ax.plot(o, f2, label=f"f2 ({params.f2_type}) — surplus weight",
            color="#c23b22")
    ax.set_xlabel("input")
    ax.set_ylabel("weight")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title("Tuned shape functions")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)
