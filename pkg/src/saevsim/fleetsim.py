"""Discrete-event simulation of a shared autonomous electric fleet.

Vehicles serve trip requests on the road network, relocate while idle
according to a pluggable strategy, and recharge at stations when their
state of charge falls to the trigger level.  The engine is a classic
event-heap simulation; every run is a deterministic function of
(scenario, strategy, seed), which the optimizers rely on for common
random numbers.

Time is in minutes from scenario start.  The event order at equal
timestamps is fixed: vehicle arrivals and charge completions first,
then the demand-forecast refresh, then new requests.
"""

from __future__ import annotations

import bisect
import copy
import heapq
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional

import numpy as np

from . import demand as demand_mod
from .demand import DemandEvent, predict_demand
from .design import CostConstants, SystemDesign, VehiclePerf
from .relocation import (ModelingParams, SelectionMask, select_destination,
                         selection_scores)
from .roadnet import CellIndex, GridSpec, RoadNetwork, Router, TrafficProfile

_STREAM_INIT = 3
_STREAM_MOTION = 4

# event priorities at equal timestamps
_PRIO_ARRIVE = 0
_PRIO_REFRESH = 1
_PRIO_REQUEST = 2


class VehicleState(Enum):
    IDLE = "idle"
    IN_SERVICE = "in_service"
    CHARGING = "charging"
    RELOCATING = "relocating"
    TO_CHARGER = "to_charger"


# Legal state transitions; the event log audit in the tests checks that
# a run never leaves this set.  Low-battery vehicles may head to a
# charger from any non-charging activity.
ALLOWED_TRANSITIONS = {
    (VehicleState.IDLE, VehicleState.RELOCATING),
    (VehicleState.RELOCATING, VehicleState.IDLE),
    (VehicleState.IDLE, VehicleState.IN_SERVICE),
    (VehicleState.RELOCATING, VehicleState.IN_SERVICE),
    (VehicleState.IN_SERVICE, VehicleState.IDLE),
    (VehicleState.IN_SERVICE, VehicleState.TO_CHARGER),
    (VehicleState.IDLE, VehicleState.TO_CHARGER),
    (VehicleState.RELOCATING, VehicleState.TO_CHARGER),
    (VehicleState.TO_CHARGER, VehicleState.CHARGING),
    (VehicleState.CHARGING, VehicleState.IDLE),
}


@dataclass
class Route:
    """A vehicle's committed movement with per-node schedule.

    nodes[i] is reached at absolute minute times[i] after covering
    dists[i] km since the route began at start_min.  Positions before
    times[0] interpolate linearly toward nodes[0], which also covers
    routes resumed from a mid-edge position.
    """

    start_min: float
    nodes: list[int]
    times: list[float]
    dists: list[float]
    purpose: str                # pickup | service | reloc | station

    @property
    def end_min(self) -> float:
        return self.times[-1]

    @property
    def end_node(self) -> int:
        return self.nodes[-1]

    @property
    def total_km(self) -> float:
        return self.dists[-1]

    def dist_at(self, t: float) -> float:
        """Kilometers covered since route start, piecewise linear."""
        if t >= self.times[-1]:
            return self.dists[-1]
        if t <= self.start_min:
            return 0.0
        i = bisect.bisect_right(self.times, t)
        t0 = self.start_min if i == 0 else self.times[i - 1]
        d0 = 0.0 if i == 0 else self.dists[i - 1]
        span = self.times[i] - t0
        if span <= 0:
            return d0
        return d0 + (self.dists[i] - d0) * (t - t0) / span

    def ahead_at(self, t: float) -> tuple[int, float, float]:
        """(next node, minutes to it, km to it) for an en-route vehicle."""
        if t >= self.times[-1]:
            return self.nodes[-1], 0.0, 0.0
        i = bisect.bisect_right(self.times, t)
        return self.nodes[i], self.times[i] - t, self.dists[i] - self.dist_at(t)

    def remainder(self, t: float) -> tuple[list[int], list[float], list[float]]:
        """Schedule from position at t onward, distances re-zeroed."""
        if t >= self.times[-1]:
            return [self.nodes[-1]], [self.times[-1]], [0.0]
        i = bisect.bisect_right(self.times, t)
        base = self.dist_at(t)
        return (self.nodes[i:], self.times[i:],
                [d - base for d in self.dists[i:]])


@dataclass
class Trip:
    origin: int
    dest: int
    request_idx: int = -1
    pickup_done: bool = False


@dataclass
class ChargePlan:
    station: int                # index into the station list
    charger: int
    arrive_min: float
    start_min: float
    end_min: float
    soc_at_start: float


@dataclass
class Vehicle:
    vid: int
    node: int
    soc: float
    state: VehicleState = VehicleState.IDLE
    route: Optional[Route] = None
    trip: Optional[Trip] = None
    charge: Optional[ChargePlan] = None
    relocation_cell: int = -1   # -1 when not committed to a cell
    busy_until: float = 0.0
    epoch: int = 0              # bumps when pending events become stale


@dataclass
class Station:
    node: int
    free_at: list[float]        # per charger: minute when it frees


@dataclass
class Strategy:
    """Base marker; use RandomMotion or Relocation."""

    label = "none"


@dataclass
class RandomMotion(Strategy):
    """Idle vehicles head to uniformly random reachable nodes."""

    label = "random_motion"


@dataclass
class Relocation(Strategy):
    """Forecast-driven selection with tunable shape functions.

    params_provider, when set, is called at every forecast refresh with
    the pre-decision fleet snapshot and must return the ModelingParams
    to use for the coming window.
    """

    params: ModelingParams = field(default_factory=ModelingParams)
    mask: SelectionMask = field(default_factory=SelectionMask)
    params_provider: Optional[Callable] = None
    label = "relocation"


# ======================================================================
# Scenario
# ======================================================================

@dataclass
class Scenario:
    """Everything a simulation run needs besides strategy and seed."""

    net: RoadNetwork
    profile: TrafficProfile
    grid: GridSpec
    cells: CellIndex
    router: Router
    design: SystemDesign
    constants: CostConstants
    perf: VehiclePerf
    station_nodes: list[int]
    intensity: Optional[np.ndarray] = None      # (B, rows, cols)
    fixed_events: Optional[list[DemandEvent]] = None
    od_matrix: Optional[np.ndarray] = None
    forecast_kind: str = "intensity"            # intensity | perfect | baseline
    baseline_model: Optional[demand_mod.BaselineModel] = None
    soc_trigger: float = 0.15
    bin_minutes: int = 30
    duration_min: float = 1440.0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.intensity is None and self.fixed_events is None:
            raise ValueError("scenario needs an intensity field or fixed events")
        if self.forecast_kind == "intensity" and self.intensity is None:
            self.forecast_kind = "perfect"  # no rate table to forecast from
        if not self.station_nodes:
            raise ValueError("scenario needs at least one charging station")
        if self.forecast_kind == "baseline" and self.baseline_model is None:
            raise ValueError("baseline forecasts need a fitted model")
        if not 0.0 < self.soc_trigger < 1.0:
            raise ValueError("soc trigger must lie in (0, 1)")

    def events_for(self, seed: int, start_min: float,
                   duration_min: float) -> list[DemandEvent]:
        """Demand events in [start, start+duration), deterministic per seed."""
        end = start_min + duration_min
        if self.fixed_events is not None:
            return [e for e in self.fixed_events if start_min <= e.time_min < end]
        first = int(start_min // self.bin_minutes)
        last = int(math.ceil(end / self.bin_minutes))
        events = demand_mod.generate_demand(
            self.intensity, last - first, self.cells, seed,
            od_matrix=self.od_matrix, bin_minutes=self.bin_minutes,
            first_bin=first)
        return [e for e in events if start_min <= e.time_min < end]


def feasible_soc(soc: float, range_km: float, pickup_km: float,
                 service_km: float, charger_km: float) -> bool:
    """Can a vehicle cover pickup, trip and the ride to a charger after."""
    return soc * range_km >= pickup_km + service_km + charger_km


def charger_choice(options: list[tuple[float, float, int, int]],
                   now: float) -> int:
    """Pick a charger among (travel_min, free_at, station_node, charger_idx).

    A free charger anywhere wins over any busy one; among free chargers
    the nearest station is chosen, among busy ones the least
    travel-plus-remaining-occupancy.  Ties break to the lower station
    node, then charger index.  Returns the option index.
    """
    if not options:
        raise ValueError("no chargers to choose from")
    free = [(t, s, c, i) for i, (t, f, s, c) in enumerate(options)
            if f <= now + 1e-9]
    if free:
        return min(free)[3]
    busy = [(t + (f - now), s, c, i) for i, (t, f, s, c) in enumerate(options)]
    return min(busy)[3]


# ======================================================================
# Snapshots
# ======================================================================

@dataclass
class VehicleSnap:
    vid: int
    state: str
    node: int
    soc: float
    busy_until: float
    relocation_cell: int = -1
    route_nodes: Optional[list[int]] = None
    route_times: Optional[list[float]] = None
    route_dists: Optional[list[float]] = None
    purpose: Optional[str] = None
    trip_origin: Optional[int] = None
    trip_dest: Optional[int] = None
    pickup_done: bool = False
    charge_station: Optional[int] = None
    charge_charger: Optional[int] = None
    charge_start: Optional[float] = None
    charge_end: Optional[float] = None


@dataclass
class FleetSnapshot:
    """Full dynamic state at one instant, enough to resume a run."""

    sim_time: float
    bin_index: int
    vehicles: list[VehicleSnap]
    stations: list[Station]
    queue: list[tuple[float, int, int]]         # (time, origin, dest)
    observed_recent: np.ndarray                 # (8, rows, cols)
    current_bin_counts: np.ndarray              # (rows, cols)
    forecast: np.ndarray                        # flat per-cell expected counts
    motion_rng_state: Optional[dict] = None

    def to_jsonable(self) -> dict:
        return {
            "sim_time": self.sim_time,
            "bin_index": self.bin_index,
            "vehicles": [vars(v).copy() for v in self.vehicles],
            "stations": [{"node": s.node, "free_at": list(s.free_at)}
                         for s in self.stations],
            "queue": [list(q) for q in self.queue],
            "observed_recent": self.observed_recent.tolist(),
            "current_bin_counts": self.current_bin_counts.tolist(),
            "forecast": self.forecast.tolist(),
            "motion_rng_state": self.motion_rng_state,
        }

    @classmethod
    def from_jsonable(cls, d: dict) -> "FleetSnapshot":
        return cls(
            sim_time=float(d["sim_time"]),
            bin_index=int(d["bin_index"]),
            vehicles=[VehicleSnap(**v) for v in d["vehicles"]],
            stations=[Station(node=int(s["node"]),
                              free_at=[float(x) for x in s["free_at"]])
                      for s in d["stations"]],
            queue=[tuple(q) for q in d["queue"]],
            observed_recent=np.asarray(d["observed_recent"], dtype=float),
            current_bin_counts=np.asarray(d["current_bin_counts"], dtype=float),
            forecast=np.asarray(d["forecast"], dtype=float),
            motion_rng_state=d.get("motion_rng_state"),
        )


# ======================================================================
# Report
# ======================================================================

@dataclass
class SimulationReport:
    seed: int
    strategy: str
    start_min: float
    duration_min: float
    requests_total: int
    served: int
    queued_at_end: int
    carried_in: int
    carried_in_served: int
    mean_wait_min: float
    max_wait_min: float
    effective_mean_wait_min: float
    total_vehicle_km: float
    charging_sessions: int
    utilization: dict
    waits: list
    request_times: list
    config_digest: str = ""
    tool_version: str = ""

    def to_dict(self) -> dict:
        return {k: v for k, v in vars(self).items()}


@dataclass
class SimulationResult:
    report: SimulationReport
    log: list
    charge_sessions: list
    final_snapshot: Optional[FleetSnapshot] = None


# ======================================================================
# Engine
# ======================================================================

class Simulation:
    """One simulation run; see run_simulation for the plain-call wrapper."""

    def __init__(self, scenario: Scenario, strategy: Strategy, seed: int = 0,
                 start_min: float = 0.0, duration_min: Optional[float] = None,
                 initial_state: Optional[FleetSnapshot] = None,
                 record_log: bool = True):
        self.scn = scenario
        self.strategy = strategy
        self.seed = int(seed)
        self.start_min = float(start_min)
        self.duration_min = float(duration_min if duration_min is not None
                                  else scenario.duration_min)
        self.end_min = self.start_min + self.duration_min
        self.record_log = record_log
        self.router = scenario.router
        self.grid = scenario.grid
        self.cells = scenario.cells
        self.perf = scenario.perf
        self.n_cells = self.grid.n_cells
        self.bin_minutes = scenario.bin_minutes
        self.first_bin = int(self.start_min // self.bin_minutes)

        self.now = self.start_min
        self.heap: list = []
        self._seq = 0
        self.log: list = []
        self.charge_sessions: list = []
        self.assigned = np.zeros(self.n_cells, dtype=np.int64)
        self.total_vehicle_km = 0.0
        self.soc_clamps = 0
        self._state_minutes = {s: 0.0 for s in VehicleState}
        self._last_transition: list[float] = []
        self._window_params: Optional[ModelingParams] = None

        self._motion_rng = np.random.default_rng([_STREAM_MOTION, self.seed])

        # demand for this horizon plus any queue carried in from a snapshot
        window_events = scenario.events_for(self.seed, self.start_min,
                                            self.duration_min)
        carried = list(initial_state.queue) if initial_state else []
        self.events: list[DemandEvent] = (
            [DemandEvent(t, o, d) for t, o, d in carried] + window_events)
        self.carried_in = len(carried)
        n_ev = len(self.events)
        self.wait_min = np.full(n_ev, np.nan)
        self.served_flag = np.zeros(n_ev, dtype=bool)
        self.pending: list[int] = list(range(self.carried_in))

        if scenario.forecast_kind == "perfect":
            self._perfect_counts = demand_mod.bin_demand(
                window_events, self.grid, scenario.net, self.bin_minutes,
                horizon_bins=int(math.ceil(self.end_min / self.bin_minutes)))
        else:
            self._perfect_counts = None

        if initial_state is None:
            self._init_fresh()
            self.observed_recent = np.zeros(
                (demand_mod.RECENT_WINDOW_BINS, self.grid.rows, self.grid.cols))
            self.current_bin_counts = np.zeros((self.grid.rows, self.grid.cols))
            self.forecast_flat = np.zeros(self.n_cells)
        else:
            self._init_resume(initial_state)

        self._last_transition = [self.start_min] * len(self.vehicles)

        for idx in range(self.carried_in, n_ev):
            self._push(self.events[idx].time_min, _PRIO_REQUEST, ("request", idx))
        t = self.first_bin * self.bin_minutes
        if t < self.start_min:
            t += self.bin_minutes
        while t < self.end_min:
            self._push(t, _PRIO_REFRESH,
                       ("refresh", int(t // self.bin_minutes)))
            t += self.bin_minutes

    # ------------------------------------------------------------------
    # initialization
    # ------------------------------------------------------------------

    def _init_fresh(self):
        rng = np.random.default_rng([_STREAM_INIT, self.seed])
        n = self.scn.design.n_saev
        nodes = rng.integers(0, self.scn.net.n_nodes, size=n)
        socs = rng.uniform(0.5, 1.0, size=n)
        self.vehicles = [
            Vehicle(vid=i, node=int(nodes[i]), soc=float(socs[i]),
                    busy_until=self.start_min)
            for i in range(n)]
        self.stations = [Station(node=int(s),
                                 free_at=[self.start_min] * self.scn.design.n_charger)
                         for s in sorted(self.scn.station_nodes)]

    def _init_resume(self, snap: FleetSnapshot):
        self.stations = [Station(node=s.node, free_at=list(s.free_at))
                         for s in snap.stations]
        self.vehicles = []
        for vs in snap.vehicles:
            v = Vehicle(vid=vs.vid, node=vs.node, soc=vs.soc,
                        state=VehicleState(vs.state),
                        relocation_cell=vs.relocation_cell,
                        busy_until=vs.busy_until)
            if vs.route_nodes:
                v.route = Route(start_min=self.start_min,
                                nodes=list(vs.route_nodes),
                                times=list(vs.route_times),
                                dists=list(vs.route_dists),
                                purpose=vs.purpose)
                self._push(v.route.end_min, _PRIO_ARRIVE,
                           ("arrive", v.vid, v.epoch))
            if vs.trip_origin is not None:
                v.trip = Trip(origin=vs.trip_origin, dest=vs.trip_dest,
                              pickup_done=vs.pickup_done)
            if vs.charge_station is not None:
                v.charge = ChargePlan(
                    station=vs.charge_station, charger=vs.charge_charger,
                    arrive_min=self.start_min, start_min=vs.charge_start,
                    end_min=vs.charge_end, soc_at_start=vs.soc)
                if v.state is VehicleState.CHARGING:
                    self._push(vs.charge_end, _PRIO_ARRIVE,
                               ("charge_done", v.vid, v.epoch))
            if v.state in (VehicleState.IDLE, VehicleState.RELOCATING) \
                    and v.relocation_cell >= 0:
                self.assigned[v.relocation_cell] += 1
            self.vehicles.append(v)
        self.observed_recent = snap.observed_recent.copy()
        self.current_bin_counts = snap.current_bin_counts.copy()
        self.forecast_flat = snap.forecast.copy()
        if snap.motion_rng_state is not None:
            self._motion_rng.bit_generator.state = snap.motion_rng_state

    # ------------------------------------------------------------------
    # small helpers
    # ------------------------------------------------------------------

    def _push(self, t: float, prio: int, payload: tuple):
        self._seq += 1
        heapq.heappush(self.heap, (t, prio, self._seq, payload))

    def _log(self, etype: str, vid: int, node: int, detail: str = ""):
        if self.record_log:
            self.log.append((self.now, etype, vid, node, detail))

    def _hour(self, t: Optional[float] = None) -> int:
        return int((self.now if t is None else t) // 60) % 24

    def _set_state(self, v: Vehicle, new: VehicleState):
        old = v.state
        if old is new:
            return
        if (old, new) not in ALLOWED_TRANSITIONS:
            raise RuntimeError(f"illegal transition {old.value}->{new.value}")
        self._state_minutes[old] += self.now - self._last_transition[v.vid]
        self._last_transition[v.vid] = self.now
        v.state = new
        self._log("state", v.vid, v.node, f"{old.value}>{new.value}")

    def current_soc(self, v: Vehicle, t: Optional[float] = None) -> float:
        t = self.now if t is None else t
        if v.route is not None:
            return max(0.0, v.soc - v.route.dist_at(t) / self.perf.range_km)
        if v.state is VehicleState.CHARGING and v.charge is not None:
            c = v.charge
            if t <= c.start_min:
                return v.soc
            dur = c.end_min - c.start_min
            if dur <= 0 or t >= c.end_min:
                return 1.0
            return v.soc + (1.0 - v.soc) * (t - c.start_min) / dur
        return v.soc

    def _position(self, v: Vehicle) -> tuple[int, float, float]:
        """(next reachable node, minutes to it, km to it)."""
        if v.route is None:
            return v.node, 0.0, 0.0
        return v.route.ahead_at(self.now)

    def _finish_route(self, v: Vehicle):
        """Apply SOC and odometer effects of the completed route."""
        r = v.route
        if r is None:
            return
        v.soc = v.soc - r.total_km / self.perf.range_km
        if v.soc < 0:
            v.soc = 0.0
            self.soc_clamps += 1
        self.total_vehicle_km += r.total_km
        v.node = r.end_node
        v.route = None

    def _cancel_route(self, v: Vehicle):
        """Abandon the current route mid-way, settling SOC and position."""
        r = v.route
        if r is None:
            return
        covered = r.dist_at(self.now)
        v.soc = max(0.0, v.soc - covered / self.perf.range_km)
        self.total_vehicle_km += covered
        v.route = None
        v.epoch += 1

    def _make_route(self, v: Vehicle, dest: int, purpose: str) -> Route:
        """Route from the vehicle's current position to a node."""
        h = self._hour()
        if v.route is None:
            nodes, times, dists = self.router.leg(v.node, dest, h)
            route = Route(start_min=self.now,
                          nodes=nodes[1:] or [v.node],
                          times=[self.now + dt for dt in times[1:]] or [self.now],
                          dists=dists[1:] or [0.0],
                          purpose=purpose)
            return route
        fwd, rem_t, rem_km = v.route.ahead_at(self.now)
        self._cancel_route(v)
        v.node = fwd
        nodes, times, dists = self.router.leg(fwd, dest, h)
        return Route(start_min=self.now,
                     nodes=[fwd] + nodes[1:],
                     times=[self.now + rem_t] + [self.now + rem_t + dt
                                                 for dt in times[1:]],
                     dists=[rem_km] + [rem_km + dk for dk in dists[1:]],
                     purpose=purpose)

    def _start_route(self, v: Vehicle, route: Route):
        v.route = route
        self._push(route.end_min, _PRIO_ARRIVE, ("arrive", v.vid, v.epoch))

    def _charger_km_vector(self, hour: int) -> np.ndarray:
        """Min km from every node to a station, along time-shortest paths."""
        key = ("cskm", hour)
        cached = getattr(self, "_cache", None)
        if cached is None:
            self._cache = {}
        if key not in self._cache:
            dmat = self.router._hour_data(hour)[1]
            cols = [s.node for s in self.stations]
            self._cache[key] = dmat[:, cols].min(axis=1)
        return self._cache[key]

    # ------------------------------------------------------------------
    # forecasting
    # ------------------------------------------------------------------

    def _forecast_for(self, bin_index: int, recent: np.ndarray) -> np.ndarray:
        kind = self.scn.forecast_kind
        if kind == "intensity":
            rates = self.scn.intensity[bin_index % self.scn.intensity.shape[0]]
            return rates.ravel().astype(float)
        if kind == "perfect":
            if bin_index < self._perfect_counts.shape[0]:
                return self._perfect_counts[bin_index].ravel().astype(float)
            return np.zeros(self.n_cells)
        return predict_demand(self.scn.baseline_model, recent,
                              bin_index).ravel()

    def _rolled_recent(self) -> np.ndarray:
        return np.concatenate([self.observed_recent[1:],
                               self.current_bin_counts[None]], axis=0)

    # ------------------------------------------------------------------
    # snapshot / resume
    # ------------------------------------------------------------------

    def capture(self, next_bin: Optional[int] = None) -> FleetSnapshot:
        """Pre-decision snapshot, as the refresh at bin ``next_bin`` will see it."""
        if next_bin is None:
            next_bin = self.now // self.bin_minutes
        next_bin = int(next_bin)
        recent = self._rolled_recent()
        forecast = self._forecast_for(next_bin, recent)
        snaps = []
        for v in self.vehicles:
            vs = VehicleSnap(vid=v.vid, state=v.state.value, node=v.node,
                             soc=self.current_soc(v), busy_until=v.busy_until,
                             relocation_cell=v.relocation_cell)
            if v.route is not None:
                nodes, times, dists = v.route.remainder(self.now)
                vs.route_nodes, vs.route_times, vs.route_dists = nodes, times, dists
                vs.purpose = v.route.purpose
                vs.node = nodes[0]
            if v.trip is not None:
                vs.trip_origin = v.trip.origin
                vs.trip_dest = v.trip.dest
                vs.pickup_done = v.trip.pickup_done
            if v.charge is not None and v.state in (VehicleState.TO_CHARGER,
                                                    VehicleState.CHARGING):
                vs.charge_station = v.charge.station
                vs.charge_charger = v.charge.charger
                vs.charge_start = v.charge.start_min
                vs.charge_end = v.charge.end_min
                if v.state is VehicleState.CHARGING:
                    vs.soc = v.soc   # linear fill resumes from arrival level
            snaps.append(vs)
        queue = [(self.events[i].time_min, self.events[i].origin,
                  self.events[i].dest) for i in self.pending]
        return FleetSnapshot(
            sim_time=self.now, bin_index=int(next_bin), vehicles=snaps,
            stations=[Station(node=s.node, free_at=list(s.free_at))
                      for s in self.stations],
            queue=queue, observed_recent=recent.copy(),
            current_bin_counts=np.zeros_like(self.current_bin_counts),
            forecast=forecast,
            motion_rng_state=copy.deepcopy(self._motion_rng.bit_generator.state),
        )

    # ------------------------------------------------------------------
    # event handlers
    # ------------------------------------------------------------------

    def run_to_min(self, t: float):
        """Process every event strictly before minute t."""
        t = min(t, self.end_min)
        while self.heap and self.heap[0][0] < t:
            when, _, _, payload = heapq.heappop(self.heap)
            self.now = when
            kind = payload[0]
            if kind == "arrive":
                self._on_arrive(payload[1], payload[2])
            elif kind == "charge_done":
                self._on_charge_done(payload[1], payload[2])
            elif kind == "refresh":
                self._on_refresh(payload[1])
            else:
                self._on_request(payload[1])
        self.now = t

    def run(self) -> "Simulation":
        self.run_to_min(self.end_min)
        return self

    def _on_request(self, idx: int):
        e = self.events[idx]
        cell = self.cells.node_cell[e.origin]
        r, c = divmod(int(cell), self.grid.cols)
        self.current_bin_counts[r, c] += 1
        self._log("request", -1, e.origin, f"dest={e.dest}")
        if not self._try_assign(idx):
            self.pending.append(idx)
            self._log("queue", -1, e.origin, f"idx={idx}")

    def _try_assign(self, idx: int) -> bool:
        e = self.events[idx]
        h = self._hour()
        tmat = self.router._hour_data(h)[0]
        dmat = self.router._hour_data(h)[1]
        cs_km = self._charger_km_vector(h)
        service_km = dmat[e.origin, e.dest]
        charger_km = cs_km[e.dest]
        best_t, best_v = math.inf, None
        for v in self.vehicles:
            if v.state not in (VehicleState.IDLE, VehicleState.RELOCATING):
                continue
            fwd, rem_t, rem_km = self._position(v)
            pickup_t = rem_t + tmat[fwd, e.origin]
            pickup_km = rem_km + dmat[fwd, e.origin]
            if not feasible_soc(self.current_soc(v), self.perf.range_km,
                                pickup_km, service_km, charger_km):
                continue
            if pickup_t < best_t:
                best_t, best_v = pickup_t, v
        if best_v is None:
            return False
        v = best_v
        if v.relocation_cell >= 0:
            self.assigned[v.relocation_cell] -= 1
            v.relocation_cell = -1
        was_moving = v.route is not None
        self._set_state(v, VehicleState.IN_SERVICE)
        v.trip = Trip(origin=e.origin, dest=e.dest, request_idx=idx)
        if was_moving:
            self._log("divert", v.vid, v.node, f"req={idx}")
        at_origin = not was_moving and v.node == e.origin
        route = None if at_origin else self._make_route(v, e.origin, "pickup")
        pickup_at = self.now if at_origin else route.end_min
        self.wait_min[idx] = pickup_at - e.time_min
        self.served_flag[idx] = True
        self._log("assign", v.vid, v.node,
                  f"req={idx} wait={pickup_at - e.time_min:.3f}")
        # rough service-end estimate until pickup confirms it
        v.busy_until = float(pickup_at + tmat[e.origin, e.dest])
        if at_origin:
            self._pickup(v)
        else:
            self._start_route(v, route)
        return True

    def _pickup(self, v: Vehicle):
        v.trip.pickup_done = True
        self._log("pickup", v.vid, v.node, f"dest={v.trip.dest}")
        if v.node == v.trip.dest:
            self._dropoff(v)
            return
        route = self._make_route(v, v.trip.dest, "service")
        v.busy_until = route.end_min
        self._start_route(v, route)

    def _dropoff(self, v: Vehicle):
        self._log("dropoff", v.vid, v.node, "")
        v.trip = None
        v.busy_until = self.now
        if v.soc <= self.scn.soc_trigger:
            self._send_to_charger(v)
        else:
            self._enter_idle(v)

    def _on_arrive(self, vid: int, epoch: int):
        v = self.vehicles[vid]
        if v.epoch != epoch or v.route is None:
            return
        purpose = v.route.purpose
        self._finish_route(v)
        if purpose == "pickup":
            self._pickup(v)
        elif purpose == "service":
            self._dropoff(v)
        elif purpose == "reloc":
            self._log("reloc_arrive", v.vid, v.node, "")
            if v.soc <= self.scn.soc_trigger:
                self._send_to_charger(v)
            else:
                self._set_state(v, VehicleState.IDLE)
                v.busy_until = self.now
                self._drain_queue()
        else:  # station
            self._arrive_station(v)

    def _arrive_station(self, v: Vehicle):
        plan = v.charge
        self._set_state(v, VehicleState.CHARGING)
        # charge duration reflects the SOC actually carried to the plug
        dur = ((1.0 - v.soc) * self.perf.capacity_kwh
               / self.scn.constants.charge_power_kw * 60.0)
        start = plan.start_min
        plan.end_min = start + dur
        plan.soc_at_start = v.soc
        st = self.stations[plan.station]
        # the reservation made at dispatch already blocked this slot; never
        # shorten it here, later bookings may have stacked behind it
        st.free_at[plan.charger] = max(st.free_at[plan.charger], plan.end_min)
        v.busy_until = plan.end_min
        self.charge_sessions.append({
            "vehicle": v.vid, "station": plan.station, "node": st.node,
            "charger": plan.charger, "arrive": self.now,
            "start": start, "end": plan.end_min})
        self._log("charge_start", v.vid, st.node,
                  f"st={plan.station} ch={plan.charger} "
                  f"start={start:.3f} end={plan.end_min:.3f}")
        self._push(plan.end_min, _PRIO_ARRIVE, ("charge_done", v.vid, v.epoch))

    def _on_charge_done(self, vid: int, epoch: int):
        v = self.vehicles[vid]
        if v.epoch != epoch or v.state is not VehicleState.CHARGING:
            return
        v.soc = 1.0
        v.charge = None
        v.busy_until = self.now
        self._log("charge_done", v.vid, v.node, "")
        self._set_state(v, VehicleState.IDLE)
        self._drain_queue()
        if v.state is VehicleState.IDLE:
            self._choose_idle_move(v)

    def _send_to_charger(self, v: Vehicle):
        h = self._hour()
        fwd, rem_t, rem_km = self._position(v)
        tmat = self.router._hour_data(h)[0]
        dmat = self.router._hour_data(h)[1]
        soc_now = self.current_soc(v)
        options = []
        meta = []
        for si, st in enumerate(self.stations):
            travel_t = rem_t + tmat[fwd, st.node]
            travel_km = rem_km + dmat[fwd, st.node]
            if travel_km > soc_now * self.perf.range_km + 1e-9:
                continue
            for ci, free in enumerate(st.free_at):
                options.append((float(travel_t), float(free), st.node, ci))
                meta.append((si, ci, float(travel_km)))
        if not options:
            # nothing reachable: head to the nearest station regardless
            si = int(np.argmin([dmat[fwd, st.node] for st in self.stations]))
            st = self.stations[si]
            for ci, free in enumerate(st.free_at):
                options.append((float(rem_t + tmat[fwd, st.node]), float(free),
                                st.node, ci))
                meta.append((si, ci, float(rem_km + dmat[fwd, st.node])))
        pick = charger_choice(options, self.now)
        si, ci, travel_km = meta[pick]
        st = self.stations[si]
        travel_t = options[pick][0]
        if v.relocation_cell >= 0:
            self.assigned[v.relocation_cell] -= 1
            v.relocation_cell = -1
        arrive = self.now + travel_t
        start = max(arrive, st.free_at[ci])
        v.charge = ChargePlan(station=si, charger=ci, arrive_min=arrive,
                              start_min=start, end_min=start,
                              soc_at_start=0.0)
        # reserve the charger now; the end time firms up on arrival using
        # a worst-case-free estimate so later assignments stack after it
        est_soc = max(0.0, soc_now - travel_km / self.perf.range_km)
        est_dur = ((1.0 - est_soc) * self.perf.capacity_kwh
                   / self.scn.constants.charge_power_kw * 60.0)
        st.free_at[ci] = start + est_dur
        self._set_state(v, VehicleState.TO_CHARGER)
        self._log("to_charger", v.vid, fwd, f"st={si} ch={ci}")
        v.busy_until = start + est_dur
        if travel_t <= 0 and v.route is None and v.node == st.node:
            self._arrive_station(v)
        else:
            self._start_route(v, self._make_route(v, st.node, "station"))

    def _enter_idle(self, v: Vehicle):
        self._set_state(v, VehicleState.IDLE)
        self._drain_queue()
        if v.state is VehicleState.IDLE:
            self._choose_idle_move(v)

    def _drain_queue(self):
        i = 0
        while i < len(self.pending):
            if self._try_assign(self.pending[i]):
                self.pending.pop(i)
            else:
                i += 1

    # ------------------------------------------------------------------
    # relocation decisions
    # ------------------------------------------------------------------

    def _choose_idle_move(self, v: Vehicle):
        """Pick and commit a waiting position for an idle vehicle."""
        if isinstance(self.strategy, RandomMotion):
            self._random_move(v)
        elif isinstance(self.strategy, Relocation):
            self._relocation_move(v)

    def _random_move(self, v: Vehicle):
        h = self._hour()
        fwd, rem_t, rem_km = self._position(v)
        soc_now = self.current_soc(v)
        dmat = self.router._hour_data(h)[1]
        cs_km = self._charger_km_vector(h)
        reach = (rem_km + dmat[fwd] + cs_km) <= soc_now * self.perf.range_km
        reach[fwd] = False
        choices = np.flatnonzero(reach)
        if len(choices) == 0:
            self._park(v)
            return
        dest = int(choices[self._motion_rng.integers(0, len(choices))])
        self._commit_move(v, dest, -1)

    def _relocation_move(self, v: Vehicle):
        params, mask = self._active_params()
        h = self._hour()
        fwd, rem_t, rem_km = self._position(v)
        soc_now = self.current_soc(v)
        dvec = rem_km + self.router._hour_data(h)[1][fwd]
        cs_km = self._charger_km_vector(h)
        forecast = self.forecast_flat
        anchors = self.cells.anchor
        cand = np.flatnonzero((forecast > 0) & (anchors >= 0))
        if len(cand):
            need = dvec[anchors[cand]] + cs_km[anchors[cand]]
            cand = cand[need <= soc_now * self.perf.range_km]
        if len(cand) == 0:
            self._park(v)
            return
        prev = v.relocation_cell
        if prev >= 0:
            self.assigned[prev] -= 1
            v.relocation_cell = -1
        dist_by_cell = np.zeros(self.n_cells)
        dist_by_cell[cand] = dvec[anchors[cand]]
        scores = selection_scores(dist_by_cell, cand, forecast,
                                  self.assigned, params, mask)
        cell = select_destination(scores)
        self._commit_move(v, int(anchors[cell]), cell)

    def _commit_move(self, v: Vehicle, dest: int, cell: int):
        if cell >= 0:
            v.relocation_cell = cell
            self.assigned[cell] += 1
        cur_node = v.node if v.route is None else None
        if v.route is None and dest == v.node:
            # already in place: stay parked, keep the commitment
            v.busy_until = self.now
            return
        if v.route is not None and v.route.end_node == dest:
            return            # keep the current route
        route = self._make_route(v, dest, "reloc")
        if v.state is VehicleState.IDLE:
            self._set_state(v, VehicleState.RELOCATING)
        self._log("reloc_start", v.vid,
                  cur_node if cur_node is not None else v.node,
                  f"dest={dest} cell={cell}")
        v.busy_until = route.end_min
        self._start_route(v, route)

    def _park(self, v: Vehicle):
        if v.relocation_cell >= 0:
            self.assigned[v.relocation_cell] -= 1
            v.relocation_cell = -1
        if v.route is not None:
            return              # keep moving; nowhere better to go
        if v.state is VehicleState.RELOCATING:
            self._set_state(v, VehicleState.IDLE)
        v.busy_until = self.now
        self._log("park", v.vid, v.node, "")

    def _active_params(self) -> tuple[ModelingParams, SelectionMask]:
        s = self.strategy
        params = self._window_params if self._window_params is not None else s.params
        return params, s.mask

    def set_window_params(self, params: Optional[ModelingParams]):
        """Override strategy parameters from the next decision onward."""
        self._window_params = params

    def _on_refresh(self, bin_index: int):
        if bin_index > self.first_bin:
            self.observed_recent = self._rolled_recent()
            self.current_bin_counts = np.zeros_like(self.current_bin_counts)
        self.forecast_flat = self._forecast_for(bin_index, self.observed_recent)
        self._log("refresh", -1, -1, f"bin={bin_index}")
        if isinstance(self.strategy, Relocation) \
                and self.strategy.params_provider is not None:
            snap = self.capture(next_bin=bin_index)
            self._window_params = self.strategy.params_provider(snap)
        for v in self.vehicles:
            if v.state is VehicleState.IDLE:
                if self.current_soc(v) <= self.scn.soc_trigger:
                    self._send_to_charger(v)
                else:
                    self._choose_idle_move(v)
            elif v.state is VehicleState.RELOCATING:
                if self.current_soc(v) <= self.scn.soc_trigger:
                    self._send_to_charger(v)
                else:
                    self._choose_idle_move(v)

    # ------------------------------------------------------------------
    # wrap-up
    # ------------------------------------------------------------------

    def finish(self, config_digest: str = "", tool_version: str = "",
               measure_until: Optional[float] = None) -> SimulationResult:
        """Close the books and summarize.

        measure_until limits request statistics to arrivals strictly before
        that minute while the simulation itself still ran to end_min; this is
        how a short decision window is scored without losing the settle time
        its last requests need to be picked up.
        """
        self.now = self.end_min
        for v in self.vehicles:
            self._state_minutes[v.state] += self.now - self._last_transition[v.vid]
            self._last_transition[v.vid] = self.now
            if v.route is not None:
                self.total_vehicle_km += v.route.dist_at(self.now)
        cutoff = self.end_min if measure_until is None else float(measure_until)
        idx = np.array([i for i in range(self.carried_in, len(self.events))
                        if self.events[i].time_min < cutoff], dtype=int)
        waits = self.wait_min[idx] if idx.size else np.zeros(0)
        flags = self.served_flag[idx] if idx.size else np.zeros(0, dtype=bool)
        served_waits = waits[flags]
        total = int(idx.size)
        served = int(flags.sum())
        queued = [i for i in self.pending
                  if i >= self.carried_in and self.events[i].time_min < cutoff]
        censored = [self.end_min - self.events[i].time_min for i in queued]
        eff_n = served + len(censored)
        eff = ((served_waits.sum() + sum(censored)) / eff_n) if eff_n else 0.0
        denom = len(self.vehicles) * self.duration_min
        util = {s.value: (m / denom if denom else 0.0)
                for s, m in self._state_minutes.items()}
        report = SimulationReport(
            seed=self.seed,
            strategy=self.strategy.label,
            start_min=self.start_min,
            duration_min=self.duration_min,
            requests_total=total,
            served=served,
            queued_at_end=len(queued),
            carried_in=self.carried_in,
            carried_in_served=int(self.served_flag[:self.carried_in].sum()),
            mean_wait_min=float(served_waits.mean()) if served else 0.0,
            max_wait_min=float(served_waits.max()) if served else 0.0,
            effective_mean_wait_min=float(eff),
            total_vehicle_km=float(self.total_vehicle_km),
            charging_sessions=len(self.charge_sessions),
            utilization=util,
            waits=[float(w) for w in served_waits],
            request_times=[float(self.events[i].time_min)
                           for i in idx if self.served_flag[i]],
            config_digest=config_digest,
            tool_version=tool_version,
        )
        return SimulationResult(report=report, log=self.log,
                                charge_sessions=self.charge_sessions)


def run_simulation(scenario: Scenario, strategy: Strategy, seed: int = 0,
                   start_min: float = 0.0,
                   duration_min: Optional[float] = None,
                   initial_state: Optional[FleetSnapshot] = None,
                   record_log: bool = True,
                   config_digest: str = "",
                   tool_version: str = "",
                   measure_until: Optional[float] = None) -> SimulationResult:
    """Run one scenario to completion and summarize it."""
    sim = Simulation(scenario, strategy, seed=seed, start_min=start_min,
                     duration_min=duration_min, initial_state=initial_state,
                     record_log=record_log)
    sim.run()
    return sim.finish(config_digest=config_digest, tool_version=tool_version,
                      measure_until=measure_until)
