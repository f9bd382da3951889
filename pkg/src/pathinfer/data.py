"""Synthetic datasets, GPS mapping, navigation-path ingestion and trajectory files."""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra
from scipy.spatial import cKDTree

from .errors import AdjacencyError, ConfigError, DataError
from .graph import (Graph, NodeDistribution, PathSample, Trajectory, degree_features, dirac,
                    path_edges, write_graph)
from .training import TrainSample

MAX_RETRIES = 100
GPS_EPS = 1e-6


@dataclass
class Query:
    """Unlabeled trajectory with the horizon to predict."""
    trajectory: Trajectory
    horizon: int
    prefix_path: PathSample | None = None
    true_suffix = None
    true_target = None


# ---------------------------------------------------------------- planar straight lines

@dataclass
class PlanarConfig:
    n_points: int = 500
    knn: int = 10
    n_trajectories: int = 400
    observations_per_traj: int = 5
    horizon: int = 3
    seed: int = 0
    subsample_every: int = 3
    step_length: float = 0.005
    min_segment: float = 0.5

    def __post_init__(self):
        ints = (self.n_points, self.knn, self.n_trajectories, self.observations_per_traj,
                self.horizon, self.subsample_every)
        if min(ints) < 1 or not self.step_length > 0 or self.min_segment < 0:
            raise ConfigError("planar config values must be positive")
        if self.knn >= self.n_points:
            raise ConfigError("knn must be smaller than n_points")
        if self.min_segment > math.sqrt(2):
            raise ConfigError("min_segment cannot exceed the diagonal of the unit square")


def knn_graph(points, k, node_features=None):
    """Union-symmetrized k-NN digraph: u->v and v->u whenever either picks the other."""
    points = np.asarray(points, dtype=np.float64)
    _, nbr = cKDTree(points).query(points, k=k + 1)
    pairs = set()
    for u, row in enumerate(nbr):
        for v in row[1:]:
            pairs.add((u, int(v)))
            pairs.add((int(v), u))
    edges = sorted(pairs)
    g = Graph(len(points), edges)
    feats = degree_features(g) if node_features is None else node_features
    return Graph(len(points), edges, feats, np.ones((len(edges), 1)))


def bfs_path(g: Graph, a, b):
    """Shortest hop path from ``a`` to ``b`` (smallest ids explored first), or None."""
    prev = {a: None}
    queue = deque([a])
    while queue:
        u = queue.popleft()
        if u == b:
            break
        for v in g.successors(u).tolist():
            if v not in prev:
                prev[v] = u
                queue.append(v)
    if b not in prev:
        return None
    out = [b]
    while out[-1] != a:
        out.append(prev[out[-1]])
    return out[::-1]


def _collapse(nodes):
    """Drop consecutive repeats and immediate reversals ``u, v, u``."""
    out = []
    for v in nodes:
        if out and out[-1] == v:
            continue
        if len(out) >= 2 and out[-2] == v:
            out.pop()
            continue
        out.append(v)
    return out


def segment_path(g: Graph, tree: cKDTree, a, b, step_length):
    """Node path obtained by mapping points of segment ``a -> b`` to their nearest node."""
    length = float(np.linalg.norm(b - a))
    steps = max(int(math.ceil(length / step_length)), 1)
    ts = np.linspace(0.0, 1.0, steps + 1)
    _, near = tree.query(a[None, :] + ts[:, None] * (b - a)[None, :])
    raw = _collapse(near.tolist())
    path = [raw[0]]
    for v in raw[1:]:
        if g.has_edge(path[-1], v):
            path.append(v)
        else:
            hop = bfs_path(g, path[-1], v)
            if hop is None:
                return None
            path.extend(hop[1:])
    return _collapse(path)


def generate_planar(config: PlanarConfig, return_positions=False):
    """Random points, k-NN graph and straight-line trajectories.

    Each sample observes every ``subsample_every``-th node of the mapped
    path as a dirac and must predict the next ``horizon`` nodes. Node
    positions are not part of the node features.
    """
    rng = np.random.default_rng(config.seed)
    pts = rng.random((config.n_points, 2))
    g = knn_graph(pts, config.knn)
    tree = cKDTree(pts)
    s, k, h = config.subsample_every, config.observations_per_traj, config.horizon
    need = (k - 1) * s + h + 1
    samples = []
    for _ in range(config.n_trajectories):
        for _attempt in range(MAX_RETRIES):
            a, b = rng.random(2), rng.random(2)
            if np.linalg.norm(b - a) < config.min_segment:
                continue
            path = segment_path(g, tree, a, b, config.step_length)
            if path is not None and len(path) >= need:
                break
        else:
            raise DataError(f"no usable segment after {MAX_RETRIES} draws; "
                            "lower observations_per_traj or horizon")
        path = path[:need]
        obs_idx = list(range(0, (k - 1) * s + 1, s))
        last = obs_idx[-1]
        traj = Trajectory([dirac(g, path[i]) for i in obs_idx], obs_idx)
        suffix = PathSample(path[last + 1:last + 1 + h])
        samples.append(TrainSample(traj, h, suffix, dirac(g, suffix.nodes[-1]),
                                   PathSample(path[:last + 1])))
    return (g, samples, pts) if return_positions else (g, samples)


# ---------------------------------------------------------------- GPS-like road network

@dataclass
class GpsMappingConfig:
    k_nearest: int = 5
    min_separation: float = 50.0

    def __post_init__(self):
        if self.k_nearest < 1 or self.min_separation < 0:
            raise ConfigError("k_nearest >= 1 and min_separation >= 0 required")


def map_gps_to_distribution(points, coords, config: GpsMappingConfig, indices=None, tree=None):
    """Trajectory of k-nearest-node distributions for a noisy GPS trace.

    Points closer than ``min_separation`` to the last kept point are
    dropped. Masses are proportional to ``1 / (1e-6 + distance)``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    indices = list(range(len(points))) if indices is None else list(indices)
    tree = cKDTree(coords) if tree is None else tree
    k = min(config.k_nearest, len(coords))
    kept, kept_idx = [], []
    for p, i in zip(points, indices):
        if kept and np.linalg.norm(p - kept[-1]) < config.min_separation:
            continue
        kept.append(p)
        kept_idx.append(i)
    if not kept:
        raise DataError("GPS trace is empty after filtering")
    dist, near = tree.query(np.array(kept), k=k)
    dist, near = np.reshape(dist, (len(kept), k)), np.reshape(near, (len(kept), k))
    obs = [NodeDistribution.normalized(zip(nb.tolist(), (1.0 / (GPS_EPS + d)).tolist()))
           for d, nb in zip(dist, near)]
    return Trajectory(obs, kept_idx)


@dataclass
class GpsConfig:
    grid_rows: int = 14
    grid_cols: int = 14
    spacing: float = 100.0
    jitter: float = 15.0
    drop_fraction: float = 0.15
    subdivide_fraction: float = 0.3
    arterial_every: int = 4
    arterial_speedup: float = 2.0
    n_routes: int = 400
    min_route_distance: float = 700.0
    gps_noise: float = 10.0
    observations_per_traj: int = 5
    horizon: int = 3
    seed: int = 0

    def __post_init__(self):
        if min(self.grid_rows, self.grid_cols) < 3 or self.n_routes < 1 or self.horizon < 1:
            raise ConfigError("grid needs at least 3x3 intersections, n_routes and horizon >= 1")
        if not 0 <= self.drop_fraction < 1 or not 0 <= self.subdivide_fraction <= 1:
            raise ConfigError("drop_fraction in [0, 1) and subdivide_fraction in [0, 1] required")


def _road_network(config: GpsConfig, rng):
    R, C = config.grid_rows, config.grid_cols
    xy = np.array([(c * config.spacing, r * config.spacing) for r in range(R) for c in range(C)])
    xy = xy + rng.normal(scale=config.jitter, size=xy.shape)
    roads = []  # (u, v, arterial)
    for r in range(R):
        for c in range(C):
            u = r * C + c
            if c + 1 < C:
                roads.append((u, u + 1, r % config.arterial_every == 0))
            if r + 1 < R:
                roads.append((u, u + C, c % config.arterial_every == 0))
    # drop local roads while the network stays connected
    alive = np.ones(len(roads), dtype=bool)
    for i in rng.permutation(len(roads))[:int(config.drop_fraction * len(roads))].tolist():
        if roads[i][2]:
            continue
        alive[i] = False
        a = np.array([roads[j][:2] for j in np.flatnonzero(alive)]).T
        adj = csr_matrix((np.ones(a.shape[1]), (a[0], a[1])), shape=(R * C, R * C))
        if connected_components(adj, directed=False)[0] != 1:
            alive[i] = True
    roads = [r for r, keep in zip(roads, alive) if keep]
    # split some roads with a degree-2 midpoint
    coords = [tuple(p) for p in xy]
    split = []
    for u, v, art in roads:
        if rng.random() < config.subdivide_fraction:
            mid = len(coords)
            coords.append(tuple((xy[u] + xy[v]) / 2 + rng.normal(scale=config.jitter / 3, size=2)))
            split += [(u, mid, art), (mid, v, art)]
        else:
            split.append((u, v, art))
    coords = np.array(coords)
    directed = {}
    for u, v, art in split:
        directed[u, v] = directed[v, u] = art
    edges = sorted(directed)
    length = np.array([np.linalg.norm(coords[u] - coords[v]) for u, v in edges])
    arterial = np.array([float(directed[e]) for e in edges])
    g = Graph(len(coords), edges)
    efeat = np.stack([length / length.mean(), arterial], axis=1)
    g = Graph(len(coords), edges, degree_features(g), efeat)
    cost = length / np.where(arterial > 0, config.arterial_speedup, 1.0)
    return g, coords, cost


def _route(g, cost, a, b):
    W = csr_matrix((cost, (g.src, g.dst)), shape=(g.n, g.n))
    _, pred = dijkstra(W, indices=a, return_predecessors=True)
    if pred[b] < 0:
        return None
    out = [b]
    while out[-1] != a:
        out.append(int(pred[out[-1]]))
    return out[::-1]


def generate_gps(config: GpsConfig, mapping: GpsMappingConfig | None = None,
                 return_traces=False):
    """Grid-like road network and fastest-route trips observed through noisy GPS.

    Returns ``(graph, samples, coords)`` and, with ``return_traces``, the raw
    noisy points per trip as ``(trace_id, x, y)`` rows.
    """
    mapping = mapping or GpsMappingConfig()
    rng = np.random.default_rng(config.seed)
    g, coords, cost = _road_network(config, rng)
    tree = cKDTree(coords)
    k, h = config.observations_per_traj, config.horizon
    samples, traces = [], []
    for trip in range(config.n_routes):
        for _attempt in range(MAX_RETRIES):
            a, b = rng.integers(g.n, size=2).tolist()
            if np.linalg.norm(coords[a] - coords[b]) < config.min_route_distance:
                continue
            route = _route(g, cost, a, b)
            if route is None:
                continue
            noisy = coords[route] + rng.normal(scale=config.gps_noise, size=(len(route), 2))
            traj = map_gps_to_distribution(noisy[:len(route) - h], coords, mapping, tree=tree)
            if len(traj) >= 1:
                break
        else:
            raise DataError(f"no usable route after {MAX_RETRIES} draws")
        cut = int(rng.integers(min(k, len(traj)) - 1, len(traj)))
        obs = traj.observations[max(0, cut - k + 1):cut + 1]
        idx = traj.indices[max(0, cut - k + 1):cut + 1]
        t = idx[-1]
        target = map_gps_to_distribution(noisy[t + h], coords, mapping, tree=tree).last
        samples.append(TrainSample(Trajectory(obs, idx), h, PathSample(route[t + 1:t + 1 + h]),
                                   target, PathSample(route[:t + 1])))
        traces += [(trip, float(x), float(y)) for x, y in noisy]
    out = (g, samples, coords)
    return out + (traces,) if return_traces else out


# ---------------------------------------------------------------- navigation paths

def load_navigation_paths(paths_file, g: Graph, prefix_len=4):
    """One whitespace-separated node path per line; paths shorter than 5 are skipped."""
    samples = []
    with open(paths_file, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            cells = line.split()
            if not cells:
                continue
            try:
                nodes = [g.check_node(int(c)) for c in cells]
            except (ValueError, DataError) as exc:
                raise DataError(f"{paths_file}:{line_no}: {exc}") from None
            try:
                path_edges(g, nodes)
            except AdjacencyError as exc:
                raise DataError(f"{paths_file}:{line_no}: {exc}") from None
            if len(nodes) <= prefix_len:
                continue
            prefix = nodes[:prefix_len]
            traj = Trajectory([dirac(g, v) for v in prefix])
            suffix = PathSample(nodes[prefix_len:])
            samples.append(TrainSample(traj, len(suffix), suffix, dirac(g, nodes[-1]),
                                       PathSample(prefix)))
    return samples


def group_by_horizon(samples):
    groups = {}
    for s in samples:
        groups.setdefault(s.horizon, []).append(s)
    return dict(sorted(groups.items()))


def edge_click_features(train_paths, g: Graph) -> Graph:
    """Graph with an extra edge column ``log(1 + times the link was followed)``."""
    counts = np.zeros(g.edge_count)
    for p in train_paths:
        if isinstance(p, TrainSample):
            p = list(p.prefix_path or ()) + list(p.true_suffix or ())
        for e in path_edges(g, p):
            counts[e] += 1
    return g.with_edge_features(np.column_stack([g.edge_features, np.log1p(counts)]))


# ---------------------------------------------------------------- files

def sample_to_json(s) -> dict:
    rec = {"observations": [o.to_pairs() for o in s.trajectory.observations],
           "indices": list(s.trajectory.indices), "horizon": s.horizon}
    if s.true_suffix is not None:
        rec["suffix"] = list(s.true_suffix.nodes)
    if s.true_target is not None:
        rec["target"] = s.true_target.to_pairs()
    if s.prefix_path is not None:
        rec["prefix"] = list(s.prefix_path.nodes)
    return rec


def write_trajectories(path, samples):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_json(s), sort_keys=True) + "\n")


def _distribution(pairs, g):
    return NodeDistribution([(g.check_node(int(v)), float(m)) for v, m in pairs])


def sample_from_json(rec: dict, g: Graph, horizon=None):
    obs = [_distribution(o, g) for o in rec["observations"]]
    traj = Trajectory(obs, rec.get("indices"))
    suffix = PathSample([g.check_node(int(v)) for v in rec["suffix"]]) if "suffix" in rec else None
    target = _distribution(rec["target"], g) if "target" in rec else None
    prefix = PathSample([g.check_node(int(v)) for v in rec["prefix"]]) if "prefix" in rec else None
    h = rec.get("horizon", horizon if suffix is None else len(suffix))
    if h is None:
        raise DataError("record has no horizon")
    if suffix is None and target is None:
        return Query(traj, int(h), prefix)
    return TrainSample(traj, int(h), suffix, target, prefix)


def read_trajectories(path, g: Graph, horizon=None):
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(sample_from_json(json.loads(line), g, horizon))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError, DataError) as exc:
                raise DataError(f"{path}:{line_no}: {exc}") from None
    return out


def write_coords(path, coords):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("node_id\tx\ty\n")
        for v, (x, y) in enumerate(coords):
            fh.write(f"{v}\t{float(x)!r}\t{float(y)!r}\n")


def load_coords(path, n):
    coords = np.full((n, 2), np.nan)
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            cells = line.split()
            if not cells or (line_no == 1 and cells[0] == "node_id"):
                continue
            try:
                v, x, y = int(cells[0]), float(cells[1]), float(cells[2])
            except (ValueError, IndexError):
                raise DataError(f"{path}:{line_no}: expected node_id, x, y") from None
            if not 0 <= v < n:
                raise DataError(f"{path}:{line_no}: node {v} out of range")
            coords[v] = x, y
    if np.isnan(coords).any():
        raise DataError(f"{path}: missing coordinates for node {int(np.isnan(coords[:, 0]).argmax())}")
    return coords


def write_gps_traces(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("trace_id\tx\ty\n")
        for tid, x, y in rows:
            fh.write(f"{tid}\t{x!r}\t{y!r}\n")


def load_gps_traces(path):
    traces = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            cells = line.split()
            if not cells or (line_no == 1 and cells[0] == "trace_id"):
                continue
            try:
                traces.setdefault(cells[0], []).append((float(cells[1]), float(cells[2])))
            except (ValueError, IndexError):
                raise DataError(f"{path}:{line_no}: expected trace_id, x, y") from None
    return {k: np.array(v) for k, v in traces.items()}


def split(samples, test_fraction, seed):
    """Seeded train/test split keeping the original order inside each part."""
    n = len(samples)
    n_test = int(round(test_fraction * n))
    test_ids = set(np.random.default_rng([seed, 2]).permutation(n)[:n_test].tolist())
    train = [s for i, s in enumerate(samples) if i not in test_ids]
    test = [s for i, s in enumerate(samples) if i in test_ids]
    return train, test


def save_dataset(outdir, g, samples, coords=None, test_fraction=0.2, seed=0):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    write_graph(g, outdir / "nodes.tsv", outdir / "edges.tsv")
    train, test = split(samples, test_fraction, seed)
    write_trajectories(outdir / "train.jsonl", train)
    write_trajectories(outdir / "test.jsonl", test)
    if coords is not None:
        write_coords(outdir / "coords.tsv", coords)
    return train, test
