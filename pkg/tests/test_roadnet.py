"""Road network, traffic model, routing and grid binning."""

import math

import numpy as np
import pytest

from saevsim.roadnet import (BAND_SPEEDS_KMH, CellIndex, GridSpec,
                             RoadNetwork, Router, bundled_traffic_profile,
                             edge_time_minutes, node_to_cell, segment_speed,
                             shortest_time_path)

from conftest import flat_profile, random_network, random_profile, square_net


# ======================================================================
# oracle: Floyd-Warshall over the same per-hour edge weights
# ======================================================================

def floyd_warshall_time(net, profile, frm, to, hour, mode="uniform", seed=0):
    """All-pairs shortest times, then the path time re-summed left to right.

    Independent of the Dijkstra implementation: dense O(n^3) relaxation
    with next-hop reconstruction.
    """
    n = net.n_nodes
    t = np.full((n, n), np.inf)
    np.fill_diagonal(t, 0.0)
    nxt = np.full((n, n), -1, dtype=int)
    for a in range(n):
        for b, sid in net.adj[a]:
            w = edge_time_minutes(net.seg_length_m[sid],
                                  segment_speed(profile, sid, hour, mode, seed))
            if w < t[a, b]:
                t[a, b] = w
                nxt[a, b] = b
    for k in range(n):
        for i in range(n):
            for j in range(n):
                if t[i, k] + t[k, j] < t[i, j]:
                    t[i, j] = t[i, k] + t[k, j]
                    nxt[i, j] = nxt[i, k]
    if frm == to:
        return [frm], 0.0
    if nxt[frm, to] < 0:
        raise ValueError("disconnected")
    path = [frm]
    while path[-1] != to:
        path.append(int(nxt[path[-1], to]))
    total = 0.0
    for a, b in zip(path, path[1:]):
        w = min(edge_time_minutes(net.seg_length_m[sid],
                                  segment_speed(profile, sid, hour, mode, seed))
                for v, sid in net.adj[a] if v == b)
        total += w
    return path, total


class TestNetworkValidation:
    def test_rejects_nonpositive_length(self):
        with pytest.raises(ValueError):
            RoadNetwork(node_x=[0, 1], node_y=[0, 0],
                        seg_a=[0], seg_b=[1], seg_length_m=[0.0])

    def test_rejects_self_loop(self):
        with pytest.raises(ValueError):
            RoadNetwork(node_x=[0, 1], node_y=[0, 0],
                        seg_a=[0], seg_b=[0], seg_length_m=[5.0])

    def test_rejects_bad_endpoint(self):
        with pytest.raises(ValueError):
            RoadNetwork(node_x=[0, 1], node_y=[0, 0],
                        seg_a=[0], seg_b=[2], seg_length_m=[5.0])

    def test_rejects_disconnected(self):
        with pytest.raises(ValueError):
            RoadNetwork(node_x=[0, 1, 5, 6], node_y=[0, 0, 0, 0],
                        seg_a=[0, 2], seg_b=[1, 3],
                        seg_length_m=[1.0, 1.0])

    def test_adjacency_is_symmetric(self):
        net = square_net()
        assert any(v == 1 for v, _ in net.adj[0])
        assert any(v == 0 for v, _ in net.adj[1])


class TestTrafficModel:
    def test_uniform_mode_returns_hourly_average(self):
        prof = bundled_traffic_profile()
        for hour in (0, 7, 18, 23):
            assert segment_speed(prof, 3, hour, "uniform", 0) \
                == prof.avg_kmh[hour]

    def test_sampled_mode_is_deterministic_per_segment_hour(self):
        prof = bundled_traffic_profile()
        a = segment_speed(prof, 12, 8, "sampled", 99)
        b = segment_speed(prof, 12, 8, "sampled", 99)
        assert a == b
        assert a in BAND_SPEEDS_KMH

    def test_sampled_mode_matches_band_frequencies(self):
        prof = bundled_traffic_profile()
        hour = 18   # heavy congestion hour: ~74% in the slowest band
        draws = np.array([segment_speed(prof, sid, hour, "sampled", 7)
                          for sid in range(20000)])
        freqs = [np.mean(draws == s) for s in BAND_SPEEDS_KMH]
        assert np.allclose(freqs, prof.band_probs[hour], atol=0.02)

    def test_edge_time_minutes(self):
        # 2 km at 40 km/h is 3 minutes
        assert edge_time_minutes(2000.0, 40.0) == pytest.approx(3.0)


class TestShortestTimePath:
    def test_square_hand_case(self):
        net = square_net(1000.0)
        prof = flat_profile(60.0)   # 1 km at 60 km/h = 1 min per side
        path, t, km = shortest_time_path(net, prof, 0, 3, hour=10)
        assert t == pytest.approx(2.0)
        assert km == pytest.approx(2.0)
        assert path in ([0, 1, 3], [0, 2, 3])

    def test_same_node(self):
        net = square_net()
        path, t, km = shortest_time_path(net, flat_profile(), 2, 2, 0)
        assert path == [2] and t == 0.0 and km == 0.0

    def test_agrees_with_floyd_warshall_on_random_graphs(self):
        """Exact equality against an independent dense solver."""
        rng = np.random.default_rng(1234)
        checked = 0
        for trial in range(100):
            n = int(rng.integers(5, 31))
            net = random_network(rng, n)
            prof = random_profile(rng)
            mode = "sampled" if trial % 2 else "uniform"
            hour = int(rng.integers(0, 24))
            seed = int(rng.integers(0, 10000))
            for _ in range(4):
                frm, to = (int(v) for v in rng.integers(0, n, 2))
                _, t_fast, _ = shortest_time_path(net, prof, frm, to, hour,
                                                  mode=mode, seed=seed)
                if frm == to:
                    assert t_fast == 0.0
                    continue
                _, t_ref = floyd_warshall_time(net, prof, frm, to, hour,
                                               mode=mode, seed=seed)
                assert t_fast == t_ref, \
                    f"trial {trial}: {t_fast!r} != {t_ref!r}"
                checked += 1
        assert checked > 300


class TestRouter:
    def test_matrix_matches_single_source(self):
        rng = np.random.default_rng(5)
        net = random_network(rng, 20)
        prof = random_profile(rng)
        router = Router(net, prof, mode="sampled", seed=3)
        for frm, to in [(0, 7), (3, 19), (11, 2)]:
            _, t_ref, _ = shortest_time_path(net, prof, frm, to, hour=9,
                                             mode="sampled", seed=3)
            assert router.time(frm, to, 9) == pytest.approx(t_ref, abs=1e-9)

    def test_distance_follows_time_shortest_path(self):
        rng = np.random.default_rng(6)
        net = random_network(rng, 18)
        prof = random_profile(rng)
        router = Router(net, prof)
        for frm, to in [(0, 9), (4, 17)]:
            path, _, km = shortest_time_path(net, prof, frm, to, hour=14)
            assert router.dist_km(frm, to, 14) == pytest.approx(km, abs=1e-9)
            assert router.path(frm, to, 14) == path

    def test_leg_cumulative_profile(self):
        rng = np.random.default_rng(7)
        net = random_network(rng, 15)
        prof = random_profile(rng)
        router = Router(net, prof)
        nodes, times, dists = router.leg(2, 11, hour=8)
        assert nodes[0] == 2 and nodes[-1] == 11
        assert times[0] == 0.0 and dists[0] == 0.0
        assert all(b > a for a, b in zip(times, times[1:]))
        assert times[-1] == pytest.approx(router.time(2, 11, 8), abs=1e-9)
        assert dists[-1] == pytest.approx(router.dist_km(2, 11, 8), abs=1e-9)

    def test_pickles_without_caches(self):
        import pickle
        rng = np.random.default_rng(8)
        net = random_network(rng, 12)
        router = Router(net, flat_profile())
        router.time(0, 5, 3)    # warm a cache entry
        clone = pickle.loads(pickle.dumps(router))
        assert clone.time(0, 5, 3) == router.time(0, 5, 3)


class TestGridBinning:
    def test_cell_of_xy_examples(self):
        grid = GridSpec(origin_x=0.0, origin_y=0.0, cell_size_m=100.0,
                        rows=3, cols=4)
        assert grid.cell_of_xy(0.0, 0.0) == 0
        assert grid.cell_of_xy(350.0, 250.0) == 11    # last cell
        assert grid.cell_of_xy(150.0, 0.0) == 1
        assert grid.cell_of_xy(0.0, 150.0) == 4       # row-major

    def test_boundary_is_half_open(self):
        grid = GridSpec(0.0, 0.0, 100.0, rows=3, cols=4)
        assert grid.cell_of_xy(100.0, 0.0) == 1
        assert grid.cell_of_xy(99.999, 0.0) == 0

    def test_out_of_extent_clamps(self):
        grid = GridSpec(0.0, 0.0, 100.0, rows=3, cols=4)
        assert grid.cell_of_xy(-50.0, -50.0) == 0
        assert grid.cell_of_xy(1e6, 1e6) == 11
        assert grid.cell_of_xy(1e6, 0.0) == 3

    def test_node_to_cell_and_index(self):
        net = square_net(1000.0)
        grid = GridSpec(0.0, 0.0, 600.0, rows=2, cols=2)
        # corners: (0,0), (1000,0), (0,1000), (1000,1000)
        assert node_to_cell(grid, net, 0) == 0
        assert node_to_cell(grid, net, 1) == 1
        assert node_to_cell(grid, net, 2) == 2
        assert node_to_cell(grid, net, 3) == 3
        idx = CellIndex(net, grid)
        assert [list(v) for v in idx.cell_nodes] == [[0], [1], [2], [3]]
        assert list(idx.node_cell) == [0, 1, 2, 3]

    def test_anchor_is_node_nearest_centroid(self):
        net = RoadNetwork(node_x=[10.0, 90.0, 55.0],
                          node_y=[10.0, 10.0, 45.0],
                          seg_a=[0, 1], seg_b=[2, 2],
                          seg_length_m=[60.0, 50.0])
        grid = GridSpec(0.0, 0.0, 100.0, rows=1, cols=1)
        idx = CellIndex(net, grid)
        # centroid (50, 50): node 2 at (55, 45) is nearest
        assert idx.anchor[0] == 2

    def test_anchor_of_empty_cell_is_minus_one(self):
        net = square_net(90.0)
        grid = GridSpec(0.0, 0.0, 100.0, rows=1, cols=2)
        idx = CellIndex(net, grid)
        assert idx.anchor[1] == -1


class TestBundledProfile:
    def test_covers_all_hours_and_normalizes(self):
        prof = bundled_traffic_profile()
        assert prof.avg_kmh.shape == (24,)
        assert np.allclose(prof.band_probs.sum(axis=1), 1.0)
        # evening peak is slower than free-flow night hours
        assert prof.avg_kmh[18] < prof.avg_kmh[3]
