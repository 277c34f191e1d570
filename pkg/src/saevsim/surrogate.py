"""Window-parameter predictor: fleet state in, shape parameters out.

Tuning the relocation shape functions for every half-hour window by
simulation is far too slow to do online, so this module learns the
mapping offline.  A fixed 42-number summary of the pre-window fleet
snapshot (pooled demand forecast, vehicle state mix, charge levels,
charger pressure, time of day/week) feeds a small nearest-neighbour
regressor over log-transformed parameter targets.  The fitted model is
one JSON file and plugs into the simulator as a ``params_provider``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .relocation import FUNCTION_BOUNDS, ModelingParams

_STREAM_FIT = 7
_LOG_EPS = 1e-6

STATE_ORDER = ("idle", "in_service", "charging", "relocating", "to_charger")
POOL_ROWS = 5
POOL_COLS = 5
FEATURE_DIM = POOL_ROWS * POOL_COLS + 1 + len(STATE_ORDER) + 5 + 2 + 4


# ======================================================================
# features
# ======================================================================

def _pool(grid2d: np.ndarray) -> np.ndarray:
    """Block-sum a rows x cols grid down to POOL_ROWS x POOL_COLS."""
    rows = np.array([c.sum(axis=0) for c in
                     np.array_split(grid2d, POOL_ROWS, axis=0)])
    cols = np.array([c.sum(axis=1) for c in
                     np.array_split(rows, POOL_COLS, axis=1)]).T
    return cols


def extract_features(snapshot: dict, minutes_per_day: float = 1440.0
                     ) -> np.ndarray:
    """42 numbers summarizing one pre-window fleet snapshot."""
    recent = np.asarray(snapshot["observed_recent"], dtype=float)
    rows, cols = recent.shape[1], recent.shape[2]
    forecast = np.asarray(snapshot["forecast"], dtype=float).reshape(rows, cols)
    pooled = _pool(forecast).ravel()

    counts = dict.fromkeys(STATE_ORDER, 0)
    socs = []
    for v in snapshot["vehicles"]:
        counts[v["state"]] = counts.get(v["state"], 0) + 1
        socs.append(float(v["soc"]))
    socs = np.asarray(socs) if socs else np.zeros(1)
    soc_stats = [socs.mean(), socs.min(),
                 *np.percentile(socs, [25, 50, 75])]

    now = float(snapshot["sim_time"])
    free_at = np.asarray([t for s in snapshot["stations"]
                          for t in s["free_at"]], dtype=float)
    if free_at.size:
        busy_frac = float((free_at > now).mean())
        minutes_to_free = float(np.maximum(free_at - now, 0.0).mean())
    else:
        busy_frac, minutes_to_free = 0.0, 0.0

    day_frac = (now % minutes_per_day) / minutes_per_day
    week_frac = ((now // minutes_per_day) % 7) / 7.0
    clock = [math.sin(2 * math.pi * day_frac), math.cos(2 * math.pi * day_frac),
             math.sin(2 * math.pi * week_frac), math.cos(2 * math.pi * week_frac)]

    feats = np.concatenate([
        pooled, [forecast.sum()],
        [counts[s] for s in STATE_ORDER],
        soc_stats, [busy_frac, minutes_to_free], clock])
    assert feats.shape == (FEATURE_DIM,)
    return feats.astype(float)


# ======================================================================
# scaling + nearest-neighbour regression
# ======================================================================

@dataclass
class MinMaxScaler:
    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "MinMaxScaler":
        X = np.asarray(X, dtype=float)
        return cls(lo=X.min(axis=0), hi=X.max(axis=0))

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        span = self.hi - self.lo
        out = np.zeros_like(X)
        live = span > 0              # constant features map to 0
        out[:, live] = (X[:, live] - self.lo[live]) / span[live]
        return out


def _knn_predict(train_x: np.ndarray, train_y: np.ndarray,
                 query: np.ndarray, k: int,
                 aggregate: str = "mean") -> np.ndarray:
    """Combine the k nearest rows: inverse-distance mean, or median.

    The median is the robust choice when targets carry heavy-tailed
    optimization noise (a couple of wild neighbors cannot move it).
    """
    d = np.linalg.norm(train_x - query[None, :], axis=1)
    k = min(k, len(d))
    idx = np.argsort(d, kind="stable")[:k]
    dk = d[idx]
    if dk[0] < 1e-12:               # exact hit: return that row outright
        return train_y[idx[0]].copy()
    if aggregate == "median":
        return np.median(train_y[idx], axis=0)
    w = 1.0 / dk
    return (w[:, None] * train_y[idx]).sum(axis=0) / w.sum()


def _ridge_fit(train_x: np.ndarray, train_y: np.ndarray,
               alpha: float) -> tuple[np.ndarray, np.ndarray]:
    """L2-penalized least squares per target column, intercept unpenalized."""
    x_mean = train_x.mean(axis=0)
    y_mean = train_y.mean(axis=0)
    xc = train_x - x_mean
    yc = train_y - y_mean
    dim = train_x.shape[1]
    coef = np.linalg.solve(xc.T @ xc + alpha * np.eye(dim), xc.T @ yc)
    intercept = y_mean - x_mean @ coef
    return coef, intercept


@dataclass
class SurrogateModel:
    """Fitted predictor plus everything needed to reuse it.

    Two learners share the artifact: "knn" (inverse-distance average of
    the nearest training rows, the default) and "ridge" (L2-regularized
    linear map from scaled features to log-targets).
    """

    k: int
    f1_type: str
    f2_type: str
    scaler: MinMaxScaler
    train_x: np.ndarray             # scaled features
    train_y: np.ndarray             # ln(param + eps) targets
    learner: str = "knn"
    aggregate: str = "mean"
    alpha: float = 1.0
    coef: Optional[np.ndarray] = None
    intercept: Optional[np.ndarray] = None
    metrics: dict = field(default_factory=dict)
    config_digest: str = ""
    tool_version: str = ""

    @property
    def bounds(self) -> np.ndarray:
        return np.asarray(list(FUNCTION_BOUNDS[self.f1_type])
                          + list(FUNCTION_BOUNDS[self.f2_type]), dtype=float)

    def predict_vector(self, features: np.ndarray) -> np.ndarray:
        q = self.scaler.transform(features)[0]
        if self.learner == "ridge":
            ln = q @ self.coef + self.intercept
        else:
            ln = _knn_predict(self.train_x, self.train_y, q, self.k,
                              self.aggregate)
        raw = np.exp(ln) - _LOG_EPS
        b = self.bounds
        return np.clip(raw, b[:, 0], b[:, 1])

    def to_jsonable(self) -> dict:
        return {"k": self.k, "f1_type": self.f1_type, "f2_type": self.f2_type,
                "scaler": {"lo": self.scaler.lo.tolist(),
                           "hi": self.scaler.hi.tolist()},
                "train_x": self.train_x.tolist(),
                "train_y": self.train_y.tolist(),
                "learner": self.learner, "aggregate": self.aggregate,
                "alpha": self.alpha,
                "coef": None if self.coef is None else self.coef.tolist(),
                "intercept": (None if self.intercept is None
                              else self.intercept.tolist()),
                "metrics": self.metrics,
                "config_digest": self.config_digest,
                "tool_version": self.tool_version}

    @classmethod
    def from_jsonable(cls, d: dict) -> "SurrogateModel":
        return cls(k=int(d["k"]), f1_type=d["f1_type"], f2_type=d["f2_type"],
                   scaler=MinMaxScaler(
                       lo=np.asarray(d["scaler"]["lo"], dtype=float),
                       hi=np.asarray(d["scaler"]["hi"], dtype=float)),
                   train_x=np.asarray(d["train_x"], dtype=float),
                   train_y=np.asarray(d["train_y"], dtype=float),
                   learner=d.get("learner", "knn"),
                   aggregate=d.get("aggregate", "mean"),
                   alpha=float(d.get("alpha", 1.0)),
                   coef=(None if d.get("coef") is None
                         else np.asarray(d["coef"], dtype=float)),
                   intercept=(None if d.get("intercept") is None
                              else np.asarray(d["intercept"], dtype=float)),
                   metrics=d.get("metrics", {}),
                   config_digest=d.get("config_digest", ""),
                   tool_version=d.get("tool_version", ""))


def save_model(model: SurrogateModel, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model.to_jsonable(), fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> SurrogateModel:
    with open(path, encoding="utf-8") as fh:
        return SurrogateModel.from_jsonable(json.load(fh))


# ======================================================================
# fitting
# ======================================================================

def train_surrogate(records: Sequence, k: int = 5, train_frac: float = 0.8,
                    seed: int = 0, learner: str = "knn",
                    aggregate: str = "mean", alpha: float = 1.0,
                    f1_type: str = "exp_gauss", f2_type: str = "exp_gauss",
                    config_digest: str = "",
                    tool_version: str = "") -> SurrogateModel:
    """Fit the predictor on tuned-window records; holds out a test split.

    Degenerate (zero-demand) windows are dropped, the split is seeded,
    scaling is fitted on the training split only, and held-out errors
    are measured back in original parameter space.  learner "knn" keeps
    the training rows and combines neighbors by inverse-distance mean or,
    with aggregate="median", by the componentwise median (robust to
    noisy targets); "ridge" fits an L2-penalized linear map (strength
    alpha) from scaled features to log-targets.
    """
    if learner not in ("knn", "ridge"):
        raise ValueError(f"unknown learner {learner!r}")
    if aggregate not in ("mean", "median"):
        raise ValueError(f"unknown aggregate {aggregate!r}")
    usable = [r for r in records if not r.degenerate]
    if len(usable) < 2:
        raise ValueError("need at least two non-degenerate records")
    X = np.array([extract_features(r.snapshot) for r in usable])
    Y = np.log(np.array([r.target for r in usable], dtype=float) + _LOG_EPS)

    rng = np.random.default_rng([_STREAM_FIT, int(seed)])
    order = rng.permutation(len(usable))
    n_train = max(1, min(len(usable) - 1, int(round(train_frac * len(usable)))))
    tr, te = order[:n_train], order[n_train:]

    scaler = MinMaxScaler.fit(X[tr])
    model = SurrogateModel(k=k, f1_type=f1_type, f2_type=f2_type,
                           scaler=scaler,
                           train_x=scaler.transform(X[tr]),
                           train_y=Y[tr],
                           learner=learner, aggregate=aggregate,
                           alpha=float(alpha),
                           config_digest=config_digest,
                           tool_version=tool_version)
    if learner == "ridge":
        model.coef, model.intercept = _ridge_fit(model.train_x, model.train_y,
                                                 float(alpha))

    truth = np.exp(Y[te]) - _LOG_EPS
    preds = np.array([model.predict_vector(X[i]) for i in te])
    err = preds - truth
    model.metrics = {
        "n_train": int(n_train), "n_test": int(len(te)),
        "n_degenerate_dropped": int(len(records) - len(usable)),
        "rmse": [float(v) for v in np.sqrt((err ** 2).mean(axis=0))],
        "mae": [float(v) for v in np.abs(err).mean(axis=0)],
        "rmse_all": float(np.sqrt((err ** 2).mean())),
        "mae_all": float(np.abs(err).mean()),
    }
    return model


# ======================================================================
# plugging into the simulator
# ======================================================================

def predict_params(model: SurrogateModel, snapshot: dict) -> ModelingParams:
    """Parameters for the window that the given snapshot precedes."""
    vec = model.predict_vector(extract_features(snapshot))
    k = len(FUNCTION_BOUNDS[model.f1_type])
    return ModelingParams(f1_type=model.f1_type,
                          f1_params=tuple(float(v) for v in vec[:k]),
                          f2_type=model.f2_type,
                          f2_params=tuple(float(v) for v in vec[k:]))


def snapshot_params_provider(model: SurrogateModel):
    """Adapter: FleetSnapshot -> ModelingParams, for Relocation strategies."""
    def provider(snapshot) -> ModelingParams:
        return predict_params(model, snapshot.to_jsonable())
    return provider
