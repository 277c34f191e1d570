"""System design: battery sizing, cost model, charging-station siting.

A fleet design is five integers: number of charging stations, chargers
per station, vehicles, and battery cells in series and parallel.  The
battery pack determines range and charging time; unit costs turn the
design into capital and maintenance figures.  Station locations come
from a p-median solve over the road network at uniform speed, i.e. on
pure segment lengths.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, asdict

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _sp_dijkstra

from .roadnet import RoadNetwork


@dataclass(frozen=True)
class CostConstants:
    """Unit costs and powertrain calibration constants.

    cell_energy_kwh is the usable energy of one battery cell; range is
    eta_km_per_kwh times pack capacity.  Charger maintenance defaults to
    the per-charger annual figure consistent with the cost tables; set
    charger_maintenance=5000.0 for the alternative rounded figure.
    """

    battery_per_kwh: float = 236.0
    autonomy_module: float = 10_000.0
    motor: float = 1_665.0
    other_vehicle: float = 6_000.0
    charger_install: float = 22_626.0
    charger_maintenance: float = 5_500.0
    cell_energy_kwh: float = 0.12578
    eta_km_per_kwh: float = 6.6
    charge_power_kw: float = 48.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CostConstants":
        return cls(**d)


def load_constants(path) -> CostConstants:
    with open(path) as fh:
        return CostConstants.from_dict(json.load(fh))


def save_constants(constants: CostConstants, path):
    with open(path, "w") as fh:
        json.dump(constants.to_dict(), fh, indent=2, sort_keys=True)


@dataclass(frozen=True)
class SystemDesign:
    """Integer design vector for one fleet system."""

    n_cs: int
    n_charger: int
    n_saev: int
    n_series: int
    n_parallel: int = 1

    def __post_init__(self):
        for name, v in asdict(self).items():
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SystemDesign":
        return cls(**{k: int(v) for k, v in d.items()})

    def astuple(self) -> tuple:
        return (self.n_cs, self.n_charger, self.n_saev,
                self.n_series, self.n_parallel)


@dataclass(frozen=True)
class VehiclePerf:
    """Derived per-vehicle performance figures."""

    capacity_kwh: float
    range_km: float
    charge_minutes: float      # time from the trigger level to full


def battery_capacity(n_series: int, n_parallel: int,
                     constants: CostConstants = CostConstants()) -> float:
    """Pack capacity in kWh for a series/parallel cell layout."""
    return n_series * n_parallel * constants.cell_energy_kwh


def charging_minutes(capacity_kwh: float, fraction: float,
                     constants: CostConstants = CostConstants()) -> float:
    """Minutes to recharge the given fraction of pack capacity."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("charged fraction must lie in [0, 1]")
    return fraction * capacity_kwh / constants.charge_power_kw * 60.0


def vehicle_perf(design: SystemDesign,
                 constants: CostConstants = CostConstants(),
                 soc_trigger: float = 0.15) -> VehiclePerf:
    cap = battery_capacity(design.n_series, design.n_parallel, constants)
    return VehiclePerf(
        capacity_kwh=cap,
        range_km=constants.eta_km_per_kwh * cap,
        charge_minutes=charging_minutes(cap, 1.0 - soc_trigger, constants),
    )


@dataclass(frozen=True)
class CostBreakdown:
    fleet: float
    cs_install: float
    cs_maintenance: float

    @property
    def total(self) -> float:
        return self.fleet + self.cs_install + self.cs_maintenance

    def to_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


def system_cost(design: SystemDesign,
                constants: CostConstants = CostConstants()) -> CostBreakdown:
    """Capital and maintenance cost of a design, in dollars."""
    cap = battery_capacity(design.n_series, design.n_parallel, constants)
    per_vehicle = (constants.battery_per_kwh * cap + constants.autonomy_module
                   + constants.motor + constants.other_vehicle)
    chargers = design.n_cs * design.n_charger
    return CostBreakdown(
        fleet=design.n_saev * per_vehicle,
        cs_install=chargers * constants.charger_install,
        cs_maintenance=chargers * constants.charger_maintenance,
    )


# ======================================================================
# p-median station siting
# ======================================================================

EXACT_ENUMERATION_CAP = 2_000_000   # max candidate subsets for method="exact"


def length_shortest_paths(net: RoadNetwork) -> np.ndarray:
    """All-pairs shortest path lengths in km on pure segment length."""
    n = net.n_nodes
    # keep the shortest segment when a node pair is joined by several
    best: dict[tuple[int, int], float] = {}
    for sid in range(net.n_segments):
        a, b = int(net.seg_a[sid]), int(net.seg_b[sid])
        km = net.seg_length_m[sid] / 1000.0
        for key in ((a, b), (b, a)):
            if key not in best or km < best[key]:
                best[key] = km
    rows = [k[0] for k in best]
    cols = [k[1] for k in best]
    data = [best[k] for k in best]
    graph = csr_matrix((data, (rows, cols)), shape=(n, n))
    return _sp_dijkstra(graph, directed=True)


def _pmedian_cost(dist: np.ndarray, weights: np.ndarray, facilities) -> float:
    return float(weights @ dist[:, list(facilities)].min(axis=1))


def pmedian(net: RoadNetwork, weights: np.ndarray, p: int,
            candidates=None, method: str = "auto") -> tuple[list[int], float]:
    """Weighted p-median on the road network.

    Returns (sorted facility nodes, total weighted distance).  method
    "exact" enumerates candidate subsets (refusing instances above
    EXACT_ENUMERATION_CAP); "interchange" runs a deterministic greedy
    start plus vertex-substitution descent; "auto" picks exact when the
    instance is small enough.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (net.n_nodes,):
        raise ValueError("one weight per node required")
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("weights must be non-negative with positive total")
    if candidates is None:
        candidates = list(range(net.n_nodes))
    candidates = sorted(set(int(c) for c in candidates))
    if not 1 <= p <= len(candidates):
        raise ValueError("p must lie in [1, number of candidates]")
    dist = length_shortest_paths(net)

    n_subsets = math.comb(len(candidates), p)
    if method == "auto":
        method = "exact" if n_subsets <= EXACT_ENUMERATION_CAP else "interchange"
    if method == "exact":
        if n_subsets > EXACT_ENUMERATION_CAP:
            raise ValueError("instance too large for exact enumeration")
        best, best_cost = None, math.inf
        for combo in itertools.combinations(candidates, p):
            cost = _pmedian_cost(dist, weights, combo)
            if cost < best_cost:
                best, best_cost = combo, cost
        return sorted(best), best_cost
    if method != "interchange":
        raise ValueError(f"unknown p-median method {method!r}")
    return _pmedian_interchange(dist, weights, p, candidates)


def _pmedian_interchange(dist, weights, p, candidates):
    # greedy construction: repeatedly add the facility with the best
    # marginal cost, ties to the lowest node id
    chosen: list[int] = []
    cover = np.full(dist.shape[0], math.inf)
    for _ in range(p):
        best_c, best_cost = None, math.inf
        for c in candidates:
            if c in chosen:
                continue
            cost = float(weights @ np.minimum(cover, dist[:, c]))
            if cost < best_cost - 1e-12:
                best_c, best_cost = c, cost
        chosen.append(best_c)
        cover = np.minimum(cover, dist[:, best_c])
    chosen = sorted(chosen)
    cost = _pmedian_cost(dist, weights, chosen)
    # vertex substitution descent: first strictly improving swap, scan
    # order fixed for determinism
    improved = True
    while improved:
        improved = False
        for i, out in enumerate(list(chosen)):
            for inc in candidates:
                if inc in chosen:
                    continue
                trial = sorted(chosen[:i] + chosen[i + 1:] + [inc])
                trial_cost = _pmedian_cost(dist, weights, trial)
                if trial_cost < cost - 1e-12:
                    chosen, cost = trial, trial_cost
                    improved = True
                    break
            if improved:
                break
    return chosen, cost


def station_plan(net: RoadNetwork, weights: np.ndarray, p_values,
                 candidates=None, method: str = "auto") -> dict[int, list[int]]:
    """Solve the siting problem for each requested station count."""
    return {int(p): pmedian(net, weights, int(p), candidates, method)[0]
            for p in p_values}


def save_station_plan(plan: dict[int, list[int]], path):
    with open(path, "w") as fh:
        json.dump({str(p): list(map(int, nodes)) for p, nodes in plan.items()},
                  fh, indent=2, sort_keys=True)


def load_station_plan(path) -> dict[int, list[int]]:
    with open(path) as fh:
        raw = json.load(fh)
    return {int(p): [int(n) for n in nodes] for p, nodes in raw.items()}
