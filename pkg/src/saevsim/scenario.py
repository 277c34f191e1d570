"""Scenario assembly: config files, bundled example city, digests.

A scenario JSON file references the network, traffic, demand and cost
inputs by relative path and carries the design, strategy and run
settings inline.  write_example_scenario() emits a fully self-contained
directory for a synthetic 200-node city so every command can run
offline out of the box.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .demand import (bin_demand, fit_baseline, load_events_csv, load_intensity,
                     load_od_matrix, save_intensity)
from .design import (CostConstants, SystemDesign, load_constants,
                     load_station_plan, save_constants, save_station_plan,
                     station_plan, vehicle_perf)
from .fleetsim import RandomMotion, Relocation, Scenario, Strategy
from .relocation import ModelingParams, SelectionMask
from .roadnet import (CellIndex, GridSpec, RoadNetwork, Router,
                      bundled_traffic_profile, load_network,
                      load_traffic_profile, save_network)

_STREAM_CITY = 5


def config_digest(config: dict) -> str:
    """Stable short hash of a JSON-serializable config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class ScenarioBundle:
    """A loaded scenario plus the strategy and bookkeeping it came with."""

    scenario: Scenario
    strategy: Strategy
    seed: int
    config: dict

    @property
    def digest(self) -> str:
        return config_digest(self.config)


def build_scenario(net: RoadNetwork, grid: GridSpec, design: SystemDesign,
                   station_nodes, profile=None, constants=None,
                   intensity=None, fixed_events=None, od_matrix=None,
                   forecast_kind: str = "intensity", baseline_model=None,
                   soc_trigger: float = 0.15, duration_min: float = 1440.0,
                   bin_minutes: int = 30,
                   traffic_mode: str = "uniform", traffic_seed: int = 0,
                   config: dict | None = None) -> Scenario:
    """Programmatic scenario constructor used by tests and the CLI."""
    profile = profile if profile is not None else bundled_traffic_profile()
    constants = constants if constants is not None else CostConstants()
    cells = CellIndex(net, grid)
    router = Router(net, profile, mode=traffic_mode, seed=traffic_seed)
    return Scenario(
        net=net, profile=profile, grid=grid, cells=cells, router=router,
        design=design, constants=constants,
        perf=vehicle_perf(design, constants, soc_trigger),
        station_nodes=list(station_nodes),
        intensity=intensity, fixed_events=fixed_events, od_matrix=od_matrix,
        forecast_kind=forecast_kind, baseline_model=baseline_model,
        soc_trigger=soc_trigger, duration_min=duration_min,
        bin_minutes=bin_minutes, config=config or {})


def _strategy_from_config(raw: dict, base: Path) -> Strategy:
    kind = raw.get("kind", "relocation")
    if kind == "random_motion":
        return RandomMotion()
    if kind != "relocation":
        raise ValueError(f"unknown strategy kind {kind!r}")
    params_raw = raw.get("params")
    if isinstance(params_raw, str):
        with open(base / params_raw) as fh:
            params = ModelingParams.from_dict(json.load(fh))
    elif isinstance(params_raw, dict):
        params = ModelingParams.from_dict(params_raw)
    else:
        params = ModelingParams()
    mask_raw = raw.get("mask", {})
    mask = SelectionMask(use_p2=bool(mask_raw.get("use_p2", True)),
                         use_p3=bool(mask_raw.get("use_p3", True)))
    provider = None
    model_path = raw.get("model")
    if model_path:
        from .surrogate import load_model, snapshot_params_provider
        provider = snapshot_params_provider(load_model(base / model_path))
    return Relocation(params=params, mask=mask, params_provider=provider)


def load_scenario(path) -> ScenarioBundle:
    """Load a scenario JSON file and everything it references."""
    path = Path(path)
    base = path.parent
    with open(path) as fh:
        raw = json.load(fh)

    net = load_network(base / raw["network"])
    traffic_ref = raw.get("traffic")
    profile = (load_traffic_profile(base / traffic_ref) if traffic_ref
               else bundled_traffic_profile())
    grid = GridSpec.from_dict(raw.get("grid", {}))
    constants = (load_constants(base / raw["constants"])
                 if raw.get("constants") else CostConstants())
    design = SystemDesign.from_dict(raw["design"])

    stations_raw = raw.get("stations", {})
    if "nodes" in stations_raw:
        station_nodes = [int(n) for n in stations_raw["nodes"]]
    elif "plan" in stations_raw:
        plan = load_station_plan(base / stations_raw["plan"])
        if design.n_cs not in plan:
            raise ValueError(f"station plan has no entry for p={design.n_cs}")
        station_nodes = plan[design.n_cs]
    else:
        raise ValueError("scenario needs stations.nodes or stations.plan")

    demand_raw = raw.get("demand", {})
    intensity = fixed_events = None
    if "intensity" in demand_raw:
        intensity = load_intensity(base / demand_raw["intensity"])
    elif "events" in demand_raw:
        fixed_events = load_events_csv(base / demand_raw["events"])
    else:
        raise ValueError("scenario needs demand.intensity or demand.events")
    od_matrix = (load_od_matrix(base / demand_raw["od_matrix"])
                 if demand_raw.get("od_matrix") else None)

    forecast_raw = raw.get("forecast", {"kind": "intensity"})
    forecast_kind = forecast_raw.get("kind", "intensity")
    baseline_model = None
    if forecast_kind == "baseline":
        hist_events = load_events_csv(base / forecast_raw["history_events"])
        bins_per_day = int(1440 // raw.get("bin_minutes", 30))
        days = int(forecast_raw.get("history_days", 1))
        hist = bin_demand(hist_events, grid, net,
                          bin_minutes=raw.get("bin_minutes", 30),
                          horizon_bins=days * bins_per_day)
        baseline_model = fit_baseline(hist, day_length_bins=bins_per_day,
                                      alpha=float(forecast_raw.get("alpha", 0.5)))

    scenario = build_scenario(
        net=net, grid=grid, design=design, station_nodes=station_nodes,
        profile=profile, constants=constants, intensity=intensity,
        fixed_events=fixed_events, od_matrix=od_matrix,
        forecast_kind=forecast_kind, baseline_model=baseline_model,
        soc_trigger=float(raw.get("soc_trigger", 0.15)),
        duration_min=float(raw.get("duration_min", 1440.0)),
        bin_minutes=int(raw.get("bin_minutes", 30)),
        traffic_mode=raw.get("traffic_mode", "uniform"),
        traffic_seed=int(raw.get("traffic_seed", 0)),
        config=raw)
    strategy = _strategy_from_config(raw.get("strategy", {}), base)
    return ScenarioBundle(scenario=scenario, strategy=strategy,
                          seed=int(raw.get("seed", 0)), config=raw)


# ======================================================================
# Bundled synthetic city
# ======================================================================

CITY_GRID = GridSpec(origin_x=0.0, origin_y=0.0, cell_size_m=700.0,
                     rows=5, cols=10)


def synthetic_city(seed: int = 7) -> RoadNetwork:
    """A 200-node street grid, about 7 km by 3.5 km, lightly irregular."""
    rng = np.random.default_rng([_STREAM_CITY, int(seed)])
    ncol, nrow, pitch = 20, 10, 350.0
    xs = np.empty(ncol * nrow)
    ys = np.empty(ncol * nrow)
    for j in range(nrow):
        for i in range(ncol):
            nid = j * ncol + i
            xs[nid] = 175.0 + pitch * i + rng.uniform(-90, 90)
            ys[nid] = 175.0 + pitch * j + rng.uniform(-90, 90)

    def nid(i, j):
        return j * ncol + i

    edges: list[tuple[int, int]] = []
    for j in range(nrow):
        for i in range(ncol):
            if i + 1 < ncol:
                edges.append((nid(i, j), nid(i + 1, j)))
            if j + 1 < nrow:
                edges.append((nid(i, j), nid(i, j + 1)))
    # diagonal shortcuts
    for _ in range(24):
        i = int(rng.integers(0, ncol - 1))
        j = int(rng.integers(0, nrow - 1))
        a, b = (nid(i, j), nid(i + 1, j + 1)) if rng.random() < 0.5 \
            else (nid(i + 1, j), nid(i, j + 1))
        if (a, b) not in edges and (b, a) not in edges:
            edges.append((a, b))
    # thin out some streets while preserving connectivity
    order = rng.permutation(len(edges))
    removed = 0
    for k in order:
        if removed >= 45:
            break
        trial = [e for m, e in enumerate(edges) if e is not None and m != k]
        if _edges_connected(trial, ncol * nrow):
            edges[k] = None
            removed += 1
    edges = [e for e in edges if e is not None]

    lengths = []
    for a, b in edges:
        d = math.hypot(xs[a] - xs[b], ys[a] - ys[b])
        lengths.append(d * rng.uniform(1.02, 1.25))
    return RoadNetwork(node_x=xs, node_y=ys,
                       seg_a=[e[0] for e in edges],
                       seg_b=[e[1] for e in edges],
                       seg_length_m=lengths)


def _edges_connected(edges, n) -> bool:
    adj = [[] for _ in range(n)]
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)
    seen = [False] * n
    seen[0] = True
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    return all(seen)


def synthetic_intensity(grid: GridSpec = CITY_GRID, bins_per_day: int = 48,
                        total_per_day: float = 1000.0) -> np.ndarray:
    """Expected request counts per (bin, cell) with moving hotspots.

    Mornings load the east residential side, evenings the west business
    side and the center; nights are sparse.  Every cell keeps a small
    floor so the forecast never empties.
    """
    rows, cols = grid.rows, grid.cols
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")

    def blob(row, col, sigma):
        return np.exp(-(((rr - row) ** 2 + (cc - col) ** 2)
                        / (2.0 * sigma ** 2)))

    business = blob(2.0, 2.0, 1.3)
    residential = blob(2.0, 7.5, 1.4)
    center = blob(2.2, 4.8, 1.6)
    spread = blob(2.0, 4.5, 4.0)

    out = np.zeros((bins_per_day, rows, cols))
    for b in range(bins_per_day):
        h = (b + 0.5) * 24.0 / bins_per_day
        morning = math.exp(-((h - 8.0) / 1.6) ** 2)
        evening = math.exp(-((h - 18.5) / 1.8) ** 2)
        midday = math.exp(-((h - 13.0) / 2.5) ** 2)
        out[b] = (0.05 * spread
                  + 1.00 * morning * residential
                  + 0.85 * evening * business
                  + 0.50 * evening * center
                  + 0.45 * midday * center)
    out += 0.003 * out.sum() / (bins_per_day * rows * cols)
    out *= total_per_day / out.sum()
    return out


def example_station_weights(net: RoadNetwork, grid: GridSpec,
                            intensity: np.ndarray) -> np.ndarray:
    """Node weights for siting: cell demand split over the cell's nodes."""
    cells = CellIndex(net, grid)
    per_cell = intensity.sum(axis=0).ravel()
    w = np.zeros(net.n_nodes)
    for c in range(grid.n_cells):
        nodes = cells.cell_nodes[c]
        if len(nodes) and per_cell[c] > 0:
            w[nodes] = per_cell[c] / len(nodes)
    return w


def write_example_scenario(out_dir, seed: int = 7,
                           total_per_day: float = 1000.0,
                           design: SystemDesign | None = None,
                           max_stations: int = 8) -> Path:
    """Emit the bundled city as a self-contained scenario directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = synthetic_city(seed)
    grid = CITY_GRID
    intensity = synthetic_intensity(grid, total_per_day=total_per_day)
    design = design or SystemDesign(n_cs=4, n_charger=2, n_saev=30,
                                    n_series=139, n_parallel=1)

    save_network(net, out / "network.json")
    save_intensity(intensity, out / "intensity.json")
    save_constants(CostConstants(), out / "costs.json")
    from importlib.resources import files
    (out / "hourly_traffic.csv").write_text(
        (files("saevsim.data") / "hourly_traffic.csv").read_text())

    weights = example_station_weights(net, grid, intensity)
    plan = station_plan(net, weights, range(1, max_stations + 1),
                        method="interchange")
    save_station_plan(plan, out / "stations.json")

    config = {
        "network": "network.json",
        "traffic": "hourly_traffic.csv",
        "traffic_mode": "uniform",
        "grid": grid.to_dict(),
        "demand": {"intensity": "intensity.json"},
        "constants": "costs.json",
        "stations": {"plan": "stations.json"},
        "design": design.to_dict(),
        "strategy": {"kind": "relocation",
                     "params": ModelingParams().to_dict(),
                     "mask": {"use_p2": True, "use_p3": True}},
        "forecast": {"kind": "intensity"},
        "soc_trigger": 0.15,
        "bin_minutes": 30,
        "duration_min": 1440.0,
        "seed": 42,
        "tool_version": __version__,
    }
    with open(out / "scenario.json", "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
    return out / "scenario.json"
