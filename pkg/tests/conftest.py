"""Shared fixtures: tiny hand-checkable networks and the bundled city."""

import math

import numpy as np
import pytest

from saevsim.design import SystemDesign, pmedian
from saevsim.roadnet import GridSpec, RoadNetwork, TrafficProfile
from saevsim.scenario import (CITY_GRID, build_scenario,
                              example_station_weights, synthetic_city,
                              synthetic_intensity)


def flat_profile(kmh: float = 40.0) -> TrafficProfile:
    """Constant speed all day, so travel times are length/speed exactly."""
    return TrafficProfile(avg_kmh=np.full(24, kmh),
                          band_probs=np.tile([0.0, 1.0, 0.0, 0.0], (24, 1)))


def random_profile(rng) -> TrafficProfile:
    avg = rng.uniform(15.0, 80.0, 24)
    probs = rng.random((24, 4)) + 0.05
    return TrafficProfile(avg_kmh=avg,
                          band_probs=probs / probs.sum(axis=1, keepdims=True))


def random_network(rng, n_nodes: int, extra_edges: int | None = None,
                   box: float = 4000.0) -> RoadNetwork:
    """Random connected graph with continuous segment lengths."""
    xs = rng.uniform(0.0, box, n_nodes)
    ys = rng.uniform(0.0, box, n_nodes)
    seg_a, seg_b, have = [], [], set()
    for i in range(1, n_nodes):          # random spanning tree
        j = int(rng.integers(0, i))
        seg_a.append(j)
        seg_b.append(i)
        have.add((j, i))
    extra = n_nodes if extra_edges is None else extra_edges
    tries = 0
    while extra > 0 and tries < 50 * n_nodes:
        tries += 1
        i, j = (int(v) for v in rng.integers(0, n_nodes, 2))
        key = (min(i, j), max(i, j))
        if i == j or key in have:
            continue
        have.add(key)
        seg_a.append(key[0])
        seg_b.append(key[1])
        extra -= 1
    lengths = [math.hypot(xs[i] - xs[j], ys[i] - ys[j])
               * float(rng.uniform(1.0, 1.4)) + 1.0
               for i, j in zip(seg_a, seg_b)]
    return RoadNetwork(node_x=xs, node_y=ys, seg_a=seg_a, seg_b=seg_b,
                       seg_length_m=lengths)


def square_net(side_m: float = 1000.0) -> RoadNetwork:
    """Four corners of a square, connected along the edges.

        2 --- 3
        |     |
        0 --- 1
    """
    return RoadNetwork(node_x=[0.0, side_m, 0.0, side_m],
                       node_y=[0.0, 0.0, side_m, side_m],
                       seg_a=[0, 0, 1, 2],
                       seg_b=[1, 2, 3, 3],
                       seg_length_m=[side_m] * 4)


def city_scenario(duration_min: float = 1440.0, n_saev: int = 30,
                  total_per_day: float = 1000.0, n_cs: int = 4,
                  n_charger: int = 2, n_series: int = 139,
                  forecast_kind: str = "intensity"):
    """The bundled 200-node city wired up the same way the CLI does it."""
    net = synthetic_city()
    intensity = synthetic_intensity(CITY_GRID, total_per_day=total_per_day)
    weights = example_station_weights(net, CITY_GRID, intensity)
    stations, _ = pmedian(net, weights, n_cs, method="interchange")
    design = SystemDesign(n_cs=n_cs, n_charger=n_charger, n_saev=n_saev,
                          n_series=n_series, n_parallel=1)
    return build_scenario(net=net, grid=CITY_GRID, design=design,
                          station_nodes=stations, intensity=intensity,
                          forecast_kind=forecast_kind,
                          duration_min=duration_min)


@pytest.fixture(scope="session")
def city_net():
    return synthetic_city()


@pytest.fixture(scope="session")
def city_day():
    """Session-scoped full-day scenario; Router caches warm up once."""
    return city_scenario()


@pytest.fixture(scope="session")
def city_short():
    """Four-hour variant for faster end-to-end checks."""
    return city_scenario(duration_min=240.0)
