"""Idle-vehicle relocation: scoring of candidate cells and selection.

A vehicle choosing where to wait scores every candidate cell by the
product of three factors: normalized demand forecast (P1), a decreasing
function of network distance (P2), and a decreasing function of the
vehicle excess already assigned to the cell (P3).  The shape functions
f1 and f2 come from a small family with box-bounded parameters so they
can be tuned per scenario or per time window.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

# Parameter boxes per function type: tuples of (low, high) per parameter.
FUNCTION_BOUNDS = {
    "linear": ((0.0, 15.0),),
    "concave": ((0.0, 10.0), (1.0, 10.0)),
    "exp_gauss": ((0.0, 5.0), (0.0, 5.0)),
}


def eval_modeling_function(ftype: str, params, o) -> float:
    """Evaluate one shape function at argument o >= 0.

    linear:    max(0, 1 - x1*o)
    concave:   max(0, 1 - x1*o**x2)
    exp_gauss: exp(-x1*o**x2)

    Values are clamped into [0, 1]; all three are non-increasing in o
    for in-bound parameters.
    """
    if o < 0:
        raise ValueError("function argument must be non-negative")
    bounds = FUNCTION_BOUNDS.get(ftype)
    if bounds is None:
        raise ValueError(f"unknown function type {ftype!r}")
    if len(params) != len(bounds):
        raise ValueError(f"{ftype} takes {len(bounds)} parameters")
    if ftype == "linear":
        v = 1.0 - params[0] * o
    elif ftype == "concave":
        v = 1.0 - params[0] * o ** params[1]
    else:
        v = math.exp(-params[0] * o ** params[1])
    return min(1.0, max(0.0, v))


@dataclass(frozen=True)
class ModelingParams:
    """Shape functions for distance (f1) and vehicle excess (f2)."""

    f1_type: str = "exp_gauss"
    f1_params: tuple = (0.1, 1.5)
    f2_type: str = "exp_gauss"
    f2_params: tuple = (3.0, 2.7)

    def __post_init__(self):
        for ftype, params in ((self.f1_type, self.f1_params),
                              (self.f2_type, self.f2_params)):
            bounds = FUNCTION_BOUNDS.get(ftype)
            if bounds is None:
                raise ValueError(f"unknown function type {ftype!r}")
            if len(params) != len(bounds):
                raise ValueError(f"{ftype} takes {len(bounds)} parameters")
            for v, (lo, hi) in zip(params, bounds):
                if not lo <= v <= hi:
                    raise ValueError(
                        f"{ftype} parameter {v} outside [{lo}, {hi}]")
        object.__setattr__(self, "f1_params", tuple(float(v) for v in self.f1_params))
        object.__setattr__(self, "f2_params", tuple(float(v) for v in self.f2_params))

    def f1(self, o: float) -> float:
        return eval_modeling_function(self.f1_type, self.f1_params, o)

    def f2(self, o: float) -> float:
        return eval_modeling_function(self.f2_type, self.f2_params, o)

    def to_dict(self) -> dict:
        return {"f1": {"type": self.f1_type, "params": list(self.f1_params)},
                "f2": {"type": self.f2_type, "params": list(self.f2_params)}}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelingParams":
        return cls(f1_type=d["f1"]["type"], f1_params=tuple(d["f1"]["params"]),
                   f2_type=d["f2"]["type"], f2_params=tuple(d["f2"]["params"]))


def load_params(path) -> ModelingParams:
    with open(path) as fh:
        return ModelingParams.from_dict(json.load(fh))


def save_params(params: ModelingParams, path):
    with open(path, "w") as fh:
        json.dump(params.to_dict(), fh, indent=2, sort_keys=True)


@dataclass(frozen=True)
class SelectionMask:
    """Which selection factors participate; disabled ones act as 1."""

    use_p2: bool = True
    use_p3: bool = True

    @property
    def label(self) -> str:
        parts = ["P1"] + (["P2"] if self.use_p2 else []) \
            + (["P3"] if self.use_p3 else [])
        return "*".join(parts)


@dataclass(frozen=True)
class CandidateScore:
    cell: int
    p1: float
    p2: float
    p3: float

    @property
    def product(self) -> float:
        return self.p1 * self.p2 * self.p3


def vehicle_excess(cell: int, assigned: np.ndarray, forecast: np.ndarray) -> float:
    """Assigned idle supply minus forecast demand for one cell.

    assigned counts vehicles currently committed to the cell; forecast
    is the flattened per-cell expected demand of the active bin.
    """
    return float(assigned[cell]) - float(forecast[cell])


def selection_scores(distances_km: np.ndarray, candidates: np.ndarray,
                     forecast: np.ndarray, assigned: np.ndarray,
                     params: ModelingParams,
                     mask: SelectionMask = SelectionMask()) -> list[CandidateScore]:
    """Score candidate cells for one vehicle.

    distances_km[c] is the network distance from the vehicle to cell
    c's anchor.  forecast and assigned are flattened per-cell arrays.
    P1 normalizes the forecast over the candidate set, so candidates
    need positive total forecast; an empty candidate set yields [].
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(candidates) == 0:
        return []
    total = float(np.sum(forecast[candidates]))
    if total <= 0:
        raise ValueError("candidate cells must carry positive forecast")
    scores = []
    for c in candidates:
        c = int(c)
        p1 = float(forecast[c]) / total
        p2 = params.f1(float(distances_km[c])) if mask.use_p2 else 1.0
        if mask.use_p3:
            excess = vehicle_excess(c, assigned, forecast)
            p3 = params.f2(excess) if excess > 0 else 1.0
        else:
            p3 = 1.0
        scores.append(CandidateScore(cell=c, p1=p1, p2=p2, p3=p3))
    return scores


def select_destination(scores: list[CandidateScore]) -> int:
    """Cell with the highest score product; ties go to the lowest index."""
    if not scores:
        raise ValueError("no candidate cells to select from")
    best = scores[0]
    for s in scores[1:]:
        if s.product > best.product or (s.product == best.product
                                        and s.cell < best.cell):
            best = s
    return best.cell


def function_value_table(params: ModelingParams, o_values) -> list[dict]:
    """Tabulate f1 and f2 over a list of arguments."""
    return [{"o": float(o), "f1": params.f1(float(o)), "f2": params.f2(float(o))}
            for o in o_values]
