"""Road network model: graph loading, hourly speeds, routing, grid binning.

The network is an undirected graph of nodes with planar coordinates and
segments with physical lengths.  Travel times are time dependent: each
segment gets a speed per hour of day, either the hourly city average
(uniform mode) or a per-segment draw from an hourly speed-band
distribution (sampled mode).  Shortest paths minimize travel time with
the hour frozen at departure.
"""

from __future__ import annotations

import csv
import heapq
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra as _sp_dijkstra

# Speed-band midpoints (km/h) for the four traffic categories 0-30,
# 30-60, 60-90 and 90-120 km/h.
BAND_SPEEDS_KMH = (15.0, 45.0, 75.0, 105.0)

# RNG sub-stream tag so traffic draws never collide with other streams
# seeded from the same master seed.
_STREAM_TRAFFIC = 1


# ======================================================================
# Network
# ======================================================================

@dataclass
class RoadNetwork:
    """Undirected road graph with node coordinates in meters."""

    node_x: np.ndarray          # (n,) float
    node_y: np.ndarray          # (n,) float
    seg_a: np.ndarray           # (m,) int, endpoint node ids
    seg_b: np.ndarray           # (m,) int
    seg_length_m: np.ndarray    # (m,) float, > 0
    adj: list[list[tuple[int, int]]] = field(repr=False, default=None)

    def __post_init__(self):
        self.node_x = np.asarray(self.node_x, dtype=float)
        self.node_y = np.asarray(self.node_y, dtype=float)
        self.seg_a = np.asarray(self.seg_a, dtype=np.int64)
        self.seg_b = np.asarray(self.seg_b, dtype=np.int64)
        self.seg_length_m = np.asarray(self.seg_length_m, dtype=float)
        self._validate()
        if self.adj is None:
            self.adj = self._build_adjacency()

    @property
    def n_nodes(self) -> int:
        return len(self.node_x)

    @property
    def n_segments(self) -> int:
        return len(self.seg_a)

    def _validate(self):
        n = self.n_nodes
        if n == 0:
            raise ValueError("network has no nodes")
        if np.any(self.seg_length_m <= 0):
            raise ValueError("segment lengths must be positive")
        for arr in (self.seg_a, self.seg_b):
            if len(arr) and (arr.min() < 0 or arr.max() >= n):
                raise ValueError("segment endpoint references unknown node")
        if np.any(self.seg_a == self.seg_b):
            raise ValueError("self-loop segments are not allowed")
        if not self._connected():
            raise ValueError("network is not connected")

    def _build_adjacency(self):
        adj: list[list[tuple[int, int]]] = [[] for _ in range(self.n_nodes)]
        for sid in range(self.n_segments):
            a, b = int(self.seg_a[sid]), int(self.seg_b[sid])
            adj[a].append((b, sid))
            adj[b].append((a, sid))
        return adj

    def _connected(self) -> bool:
        n = self.n_nodes
        if n == 1:
            return True
        adj = self._build_adjacency()
        seen = np.zeros(n, dtype=bool)
        stack = [0]
        seen[0] = True
        while stack:
            u = stack.pop()
            for v, _ in adj[u]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(v)
        return bool(seen.all())


def load_network(path) -> RoadNetwork:
    """Read a network JSON file.

    Expected shape: {"nodes": [{"id", "x", "y"}, ...],
    "segments": [{"id", "a", "b", "length_m"}, ...]} with node ids
    forming the contiguous range 0..n-1.
    """
    with open(path) as fh:
        raw = json.load(fh)
    nodes = sorted(raw["nodes"], key=lambda d: d["id"])
    ids = [d["id"] for d in nodes]
    if ids != list(range(len(ids))):
        raise ValueError("node ids must be contiguous integers starting at 0")
    segs = sorted(raw["segments"], key=lambda d: d["id"])
    return RoadNetwork(
        node_x=[d["x"] for d in nodes],
        node_y=[d["y"] for d in nodes],
        seg_a=[d["a"] for d in segs],
        seg_b=[d["b"] for d in segs],
        seg_length_m=[d["length_m"] for d in segs],
    )


def save_network(net: RoadNetwork, path):
    doc = {
        "nodes": [
            {"id": i, "x": float(net.node_x[i]), "y": float(net.node_y[i])}
            for i in range(net.n_nodes)
        ],
        "segments": [
            {"id": s, "a": int(net.seg_a[s]), "b": int(net.seg_b[s]),
             "length_m": float(net.seg_length_m[s])}
            for s in range(net.n_segments)
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


# ======================================================================
# Traffic profile
# ======================================================================

@dataclass
class TrafficProfile:
    """Hourly speed model: average speed plus a 4-band speed distribution."""

    avg_kmh: np.ndarray      # (24,)
    band_probs: np.ndarray   # (24, 4), rows sum to 1
    city_avg_kmh: float = 35.8

    def __post_init__(self):
        self.avg_kmh = np.asarray(self.avg_kmh, dtype=float)
        self.band_probs = np.asarray(self.band_probs, dtype=float)
        if self.avg_kmh.shape != (24,) or self.band_probs.shape != (24, 4):
            raise ValueError("traffic profile needs 24 hourly rows")
        if np.any(self.avg_kmh <= 0):
            raise ValueError("average speeds must be positive")
        if np.any(self.band_probs < 0):
            raise ValueError("band probabilities must be non-negative")
        sums = self.band_probs.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValueError("band probabilities must sum to 1 per hour")
        # cumulative edges for inverse-CDF sampling
        self._cum = np.cumsum(self.band_probs, axis=1)


def load_traffic_profile(path) -> TrafficProfile:
    """Read the hourly traffic CSV (hour,p0_30,p30_60,p60_90,p90_120,avg_kmh).

    Band columns may be percentages or fractions; rows are normalized by
    their own total.
    """
    rows = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            h = int(rec["hour"])
            probs = [float(rec[k]) for k in ("p0_30", "p30_60", "p60_90", "p90_120")]
            rows[h] = (probs, float(rec["avg_kmh"]))
    if sorted(rows) != list(range(24)):
        raise ValueError("traffic profile must cover hours 0..23")
    probs = np.array([rows[h][0] for h in range(24)], dtype=float)
    total = probs.sum(axis=1, keepdims=True)
    if np.any(total <= 0):
        raise ValueError("band probabilities must have positive total")
    return TrafficProfile(
        avg_kmh=np.array([rows[h][1] for h in range(24)]),
        band_probs=probs / total,
    )


def bundled_traffic_profile() -> TrafficProfile:
    """Default hourly traffic table shipped with the package."""
    from importlib.resources import files

    return load_traffic_profile(files("saevsim.data") / "hourly_traffic.csv")


def segment_speed(profile: TrafficProfile, segment_id: int, hour: int,
                  mode: str = "uniform", seed: int = 0) -> float:
    """Speed of one segment during one hour of day, km/h.

    uniform mode returns the hourly average for every segment.  sampled
    mode draws a speed band per (segment, hour) from the hourly band
    distribution; the draw depends only on (seed, segment, hour), so
    repeated queries agree.
    """
    hour = int(hour) % 24
    if mode == "uniform":
        return float(profile.avg_kmh[hour])
    if mode != "sampled":
        raise ValueError(f"unknown traffic mode {mode!r}")
    rng = np.random.default_rng([_STREAM_TRAFFIC, int(seed), int(segment_id), hour])
    u = rng.random()
    band = int(np.searchsorted(profile._cum[hour], u, side="right"))
    band = min(band, 3)
    return BAND_SPEEDS_KMH[band]


def edge_time_minutes(length_m: float, speed_kmh: float) -> float:
    """Traversal time of one segment in minutes."""
    return length_m / 1000.0 / speed_kmh * 60.0


# ======================================================================
# Shortest paths
# ======================================================================

def shortest_time_path(net: RoadNetwork, profile: TrafficProfile,
                       frm: int, to: int, hour: int,
                       mode: str = "uniform", seed: int = 0):
    """Minimum-travel-time path between two nodes at a given hour.

    The hour is frozen at departure for the whole path.  Returns
    (path_nodes, travel_time_min, distance_km); the travel time is the
    plain left-to-right sum of segment times along the returned path.
    """
    n = net.n_nodes
    if not (0 <= frm < n and 0 <= to < n):
        raise ValueError("endpoint not in network")
    if frm == to:
        return [frm], 0.0, 0.0
    hour = int(hour) % 24
    dist = [math.inf] * n
    pred = [-1] * n
    dist[frm] = 0.0
    heap = [(0.0, frm)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        if u == to:
            break
        for v, sid in net.adj[u]:
            w = edge_time_minutes(
                net.seg_length_m[sid],
                segment_speed(profile, sid, hour, mode, seed))
            nd = d + w
            if nd < dist[v]:
                dist[v] = nd
                pred[v] = u
                heapq.heappush(heap, (nd, v))
    if dist[to] == math.inf:
        raise ValueError("no path between endpoints")
    path = [to]
    while path[-1] != frm:
        path.append(pred[path[-1]])
    path.reverse()
    # Re-sum along the path so the reported time is exactly the sum of
    # its segment times.
    t = 0.0
    dist_km = 0.0
    for a, b in zip(path, path[1:]):
        sid = _segment_between(net, a, b, profile, hour, mode, seed)
        t += edge_time_minutes(net.seg_length_m[sid],
                               segment_speed(profile, sid, hour, mode, seed))
        dist_km += net.seg_length_m[sid] / 1000.0
    return path, t, dist_km


def _segment_between(net, a, b, profile, hour, mode, seed) -> int:
    """Fastest segment joining two adjacent nodes (parallel edges allowed)."""
    best, best_t = -1, math.inf
    for v, sid in net.adj[a]:
        if v != b:
            continue
        t = edge_time_minutes(net.seg_length_m[sid],
                              segment_speed(profile, sid, hour, mode, seed))
        if t < best_t:
            best, best_t = sid, t
    if best < 0:
        raise ValueError(f"nodes {a} and {b} are not adjacent")
    return best


class Router:
    """Cached all-pairs travel times per hour of day.

    Matrices are built lazily per hour with scipy's Dijkstra; distances
    are accumulated along the minimum-time shortest-path tree, not along
    minimum-length paths.  All products are deterministic functions of
    (network, profile, mode, seed).
    """

    def __init__(self, net: RoadNetwork, profile: TrafficProfile,
                 mode: str = "uniform", seed: int = 0):
        self.net = net
        self.profile = profile
        self.mode = mode
        self.seed = int(seed)
        self._hours: dict[int, tuple] = {}
        # per-hour per-segment traversal minutes, filled lazily
        self._seg_minutes: dict[int, np.ndarray] = {}

    # pickling drops the caches; they rebuild lazily in the new process
    def __getstate__(self):
        state = self.__dict__.copy()
        state["_hours"] = {}
        state["_seg_minutes"] = {}
        return state

    def segment_minutes(self, hour: int) -> np.ndarray:
        hour = int(hour) % 24
        got = self._seg_minutes.get(hour)
        if got is None:
            net = self.net
            speeds = np.array([
                segment_speed(self.profile, sid, hour, self.mode, self.seed)
                for sid in range(net.n_segments)])
            got = net.seg_length_m / 1000.0 / speeds * 60.0
            self._seg_minutes[hour] = got
        return got

    def _build_hour(self, hour: int):
        net = self.net
        n = net.n_nodes
        w = self.segment_minutes(hour)
        # collapse parallel edges to the fastest one
        best: dict[tuple[int, int], int] = {}
        for sid in range(net.n_segments):
            a, b = int(net.seg_a[sid]), int(net.seg_b[sid])
            key = (a, b) if a < b else (b, a)
            cur = best.get(key)
            if cur is None or w[sid] < w[cur]:
                best[key] = sid
        rows, cols, data = [], [], []
        edge_km: dict[tuple[int, int], float] = {}
        edge_min: dict[tuple[int, int], float] = {}
        for (a, b), sid in best.items():
            rows += [a, b]
            cols += [b, a]
            data += [w[sid], w[sid]]
            km = net.seg_length_m[sid] / 1000.0
            edge_km[(a, b)] = edge_km[(b, a)] = km
            edge_min[(a, b)] = edge_min[(b, a)] = float(w[sid])
        graph = csr_matrix((data, (rows, cols)), shape=(n, n))
        tmat, preds = _sp_dijkstra(graph, directed=True, return_predecessors=True)
        # distance along each time-shortest path, by visiting nodes in
        # time order and extending from predecessors
        dmat = np.zeros((n, n))
        order = np.argsort(tmat, axis=1)
        for s in range(n):
            drow = dmat[s]
            prow = preds[s]
            for v in order[s]:
                p = prow[v]
                if p < 0:
                    continue
                drow[v] = drow[p] + edge_km[(int(p), int(v))]
        self._hours[hour] = (tmat, dmat, preds, edge_km, edge_min)

    def _hour_data(self, hour: int):
        hour = int(hour) % 24
        if hour not in self._hours:
            self._build_hour(hour)
        return self._hours[hour]

    def time(self, u: int, v: int, hour: int) -> float:
        return float(self._hour_data(hour)[0][u, v])

    def times_from(self, u: int, hour: int) -> np.ndarray:
        return self._hour_data(hour)[0][u]

    def times_to(self, v: int, hour: int) -> np.ndarray:
        # undirected graph: column equals reversed direction
        return self._hour_data(hour)[0][:, v]

    def dist_km(self, u: int, v: int, hour: int) -> float:
        return float(self._hour_data(hour)[1][u, v])

    def dists_from(self, u: int, hour: int) -> np.ndarray:
        return self._hour_data(hour)[1][u]

    def path(self, u: int, v: int, hour: int) -> list[int]:
        preds = self._hour_data(hour)[2]
        if u == v:
            return [u]
        seq = [v]
        while seq[-1] != u:
            p = int(preds[u, seq[-1]])
            if p < 0:
                raise ValueError("no path between endpoints")
            seq.append(p)
        seq.reverse()
        return seq

    def leg(self, u: int, v: int, hour: int):
        """Path with per-node cumulative arrival minutes and km offsets."""
        data = self._hour_data(hour)
        edge_km, edge_min = data[3], data[4]
        nodes = self.path(u, v, hour)
        times = [0.0]
        dists = [0.0]
        for a, b in zip(nodes, nodes[1:]):
            times.append(times[-1] + edge_min[(a, b)])
            dists.append(dists[-1] + edge_km[(a, b)])
        return nodes, times, dists

    def edge_minutes(self, a: int, b: int, hour: int) -> float:
        return self._hour_data(hour)[4][(a, b)]

    def edge_kilometers(self, a: int, b: int, hour: int) -> float:
        return self._hour_data(hour)[3][(a, b)]


# ======================================================================
# Grid binning
# ======================================================================

@dataclass(frozen=True)
class GridSpec:
    """Uniform analysis grid over the plane, row-major cell indexing."""

    origin_x: float = 0.0
    origin_y: float = 0.0
    cell_size_m: float = 700.0
    rows: int = 50
    cols: int = 50

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def cell_of_xy(self, x: float, y: float) -> int:
        """Cell index for a point; points outside clamp to the border."""
        col = int(math.floor((x - self.origin_x) / self.cell_size_m))
        row = int(math.floor((y - self.origin_y) / self.cell_size_m))
        col = min(max(col, 0), self.cols - 1)
        row = min(max(row, 0), self.rows - 1)
        return row * self.cols + col

    def centroid(self, cell: int) -> tuple[float, float]:
        row, col = divmod(cell, self.cols)
        return (self.origin_x + (col + 0.5) * self.cell_size_m,
                self.origin_y + (row + 0.5) * self.cell_size_m)

    def to_dict(self) -> dict:
        return {"origin": [self.origin_x, self.origin_y],
                "cell_size_m": self.cell_size_m,
                "rows": self.rows, "cols": self.cols}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        ox, oy = d.get("origin", [0.0, 0.0])
        return cls(origin_x=ox, origin_y=oy,
                   cell_size_m=d.get("cell_size_m", 700.0),
                   rows=d.get("rows", 50), cols=d.get("cols", 50))


def node_to_cell(grid: GridSpec, net: RoadNetwork, node_id: int) -> int:
    return grid.cell_of_xy(float(net.node_x[node_id]), float(net.node_y[node_id]))


class CellIndex:
    """Precomputed node/cell correspondence for one network and grid.

    anchor[c] is the cell's node closest to the cell centroid (-1 for
    cells without nodes); ties break to the lowest node id.
    """

    def __init__(self, net: RoadNetwork, grid: GridSpec):
        self.net = net
        self.grid = grid
        self.node_cell = np.array(
            [node_to_cell(grid, net, i) for i in range(net.n_nodes)],
            dtype=np.int64)
        self.cell_nodes: list[np.ndarray] = [
            np.flatnonzero(self.node_cell == c) for c in range(grid.n_cells)]
        anchors = np.full(grid.n_cells, -1, dtype=np.int64)
        for c in range(grid.n_cells):
            nodes = self.cell_nodes[c]
            if len(nodes) == 0:
                continue
            cx, cy = grid.centroid(c)
            d2 = (net.node_x[nodes] - cx) ** 2 + (net.node_y[nodes] - cy) ** 2
            anchors[c] = nodes[int(np.argmin(d2))]
        self.anchor = anchors
