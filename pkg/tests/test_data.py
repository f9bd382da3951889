import math

import numpy as np
import pytest

from pathinfer.data import (GpsConfig, GpsMappingConfig, PlanarConfig, Query, edge_click_features,
                            generate_gps, generate_planar, group_by_horizon, knn_graph,
                            load_coords, load_gps_traces, load_navigation_paths,
                            map_gps_to_distribution, read_trajectories, save_dataset,
                            write_coords, write_gps_traces, write_trajectories)
from pathinfer.errors import ConfigError, DataError
from pathinfer.graph import Graph, PathSample, path_edges

SMALL = PlanarConfig(n_points=150, knn=6, n_trajectories=30, observations_per_traj=3, horizon=2)


def test_planar_is_reproducible(tmp_path):
    for name in ("a", "b"):
        g, samples, pts = generate_planar(SMALL, return_positions=True)
        save_dataset(tmp_path / name, g, samples, pts, 0.2, 0)
    for f in ("nodes.tsv", "edges.tsv", "train.jsonl", "test.jsonl", "coords.tsv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_planar_default_scale_degrees():
    g, samples = generate_planar(PlanarConfig(n_trajectories=5))
    assert g.n == 500
    assert g.out_degree.min() >= 10
    assert np.median(g.out_degree) >= 10
    assert np.all(g.reverse_edge >= 0)
    assert g.node_features.shape == (500, 2)  # degrees only, no positions


def test_planar_paths_are_adjacent():
    g, samples = generate_planar(SMALL)
    assert len(samples) == 30
    for s in samples:
        full = s.prefix_path.nodes + s.true_suffix.nodes
        path_edges(g, full)
        assert all(a != c for a, c in zip(full, full[2:]))  # no immediate reversal
        assert [o.argmax() for o in s.trajectory.observations] == [full[i] for i in s.trajectory.indices]
        assert s.true_target.argmax() == full[-1]
        assert len(s.true_suffix) == SMALL.horizon


def test_planar_config_validation():
    with pytest.raises(ConfigError):
        PlanarConfig(n_points=5, knn=5)
    with pytest.raises(ConfigError):
        PlanarConfig(horizon=0)


def test_knn_union_symmetrization():
    pts = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
    g = knn_graph(pts, 1)
    # 0 and 1 pick each other, 2 picks 1
    assert sorted(g.edges) == [(0, 1), (1, 0), (1, 2), (2, 1)]


def test_gps_mapping_examples():
    coords = np.array([[0.0, 0.0], [2.0, 0.0], [10.0, 10.0]])
    t = map_gps_to_distribution([[0.0, 0.0]], coords, GpsMappingConfig(k_nearest=1))
    assert t.last.entries == {0: 1.0}
    t = map_gps_to_distribution([[1.0, 0.0]], coords, GpsMappingConfig(k_nearest=2))
    assert t.last[0] == pytest.approx(0.5) and t.last[1] == pytest.approx(0.5)


def test_gps_mapping_filters_close_points():
    coords = np.random.default_rng(0).random((20, 2)) * 100
    pts = [[0.0, 0.0], [10.0, 0.0], [60.0, 0.0], [70.0, 0.0], [200.0, 0.0]]
    t = map_gps_to_distribution(pts, coords, GpsMappingConfig(k_nearest=5, min_separation=50))
    assert t.indices == (0, 2, 4)
    assert all(abs(o.total() - 1) <= 1e-12 for o in t.observations)
    with pytest.raises(DataError):
        map_gps_to_distribution(np.zeros((0, 2)), coords, GpsMappingConfig())


def test_gps_dataset_labels_follow_the_route():
    cfg = GpsConfig(grid_rows=6, grid_cols=6, n_routes=25, min_route_distance=300)
    g, samples, coords = generate_gps(cfg)
    assert coords.shape == (g.n, 2)
    assert np.all(g.reverse_edge >= 0)
    for s in samples:
        path_edges(g, s.prefix_path.nodes + s.true_suffix.nodes)
        assert s.trajectory.indices[-1] == len(s.prefix_path) - 1
        assert len(s.trajectory) <= cfg.observations_per_traj


def test_gps_reproducible():
    cfg = GpsConfig(grid_rows=5, grid_cols=5, n_routes=10, min_route_distance=200, seed=3)
    a, b = generate_gps(cfg), generate_gps(cfg)
    assert a[0].edges == b[0].edges
    assert [s.true_suffix for s in a[1]] == [s.true_suffix for s in b[1]]


def nav_graph():
    pairs = [(i, i + 1) for i in range(7)]
    return Graph(8, sorted(set(pairs) | {(v, u) for u, v in pairs}))


def test_navigation_paths(tmp_path):
    g = nav_graph()
    f = tmp_path / "paths.txt"
    f.write_text("0 1 2 3 4\n0 1 2 3 4 5 6\n\n1 2 3\n2 3 4 5 6\n")
    samples = load_navigation_paths(f, g)
    assert [s.horizon for s in samples] == [1, 3, 1]
    assert samples[1].true_suffix == PathSample([4, 5, 6])
    assert samples[1].true_target.entries == {6: 1.0}
    assert len(samples[0].trajectory) == 4
    groups = group_by_horizon(samples)
    assert sum(len(v) for v in groups.values()) == len(samples)
    assert list(groups) == [1, 3]


def test_navigation_rejects_non_adjacent_hop(tmp_path):
    f = tmp_path / "paths.txt"
    f.write_text("0 1 2 3 4\n0 1 3 4 5\n")
    with pytest.raises(DataError, match=":2:"):
        load_navigation_paths(f, nav_graph())


def test_click_features():
    g = nav_graph()
    paths = [PathSample([0, 1, 2]), PathSample([0, 1]), PathSample([2, 1, 0, 1])]
    h = edge_click_features(paths, g)
    col = h.edge_features[:, -1]
    assert col[g.edge_id(0, 1)] == pytest.approx(math.log(4))
    assert col[g.edge_id(5, 6)] == 0.0
    again = edge_click_features(paths[::-1], g)
    assert np.array_equal(again.edge_features, h.edge_features)


def test_trajectory_file_round_trip(tmp_path):
    g, samples = generate_planar(SMALL)
    write_trajectories(tmp_path / "t.jsonl", samples)
    back = read_trajectories(tmp_path / "t.jsonl", g)
    assert len(back) == len(samples)
    for a, b in zip(samples, back):
        assert a.trajectory == b.trajectory
        assert (a.true_suffix, a.true_target, a.prefix_path, a.horizon) == \
               (b.true_suffix, b.true_target, b.prefix_path, b.horizon)


def test_unlabeled_record_becomes_query(tmp_path):
    g = nav_graph()
    f = tmp_path / "q.jsonl"
    f.write_text('{"observations": [[[0, 0.5], [1, 0.5]]], "indices": [3]}\n')
    with pytest.raises(DataError):
        read_trajectories(f, g)
    (q,) = read_trajectories(f, g, horizon=2)
    assert isinstance(q, Query) and q.horizon == 2 and q.trajectory.indices == (3,)


def test_bad_record_reports_line(tmp_path):
    f = tmp_path / "bad.jsonl"
    f.write_text('{"observations": [[[0, 1.0]]], "horizon": 1, "suffix": [1]}\n'
                 '{"observations": [[[0, 0.7]]], "horizon": 1, "suffix": [1]}\n')
    with pytest.raises(DataError, match=":2:"):
        read_trajectories(f, nav_graph())


def test_coords_and_traces_round_trip(tmp_path):
    coords = np.array([[0.5, 1.25], [3.0, -2.0]])
    write_coords(tmp_path / "c.tsv", coords)
    assert np.array_equal(load_coords(tmp_path / "c.tsv", 2), coords)
    rows = [(0, 1.0, 2.0), (0, 3.0, 4.0), (1, 5.0, 6.0)]
    write_gps_traces(tmp_path / "t.tsv", rows)
    traces = load_gps_traces(tmp_path / "t.tsv")
    assert traces["0"].tolist() == [[1.0, 2.0], [3.0, 4.0]]
    with pytest.raises(DataError):
        load_coords(tmp_path / "c.tsv", 3)
