"""Directed graphs, paths, node distributions and trajectories.

Edge ids are positional: the i-th edge handed to the constructor (or the
i-th data row of ``edges.tsv``) gets id ``i``. Every per-edge array in the
package is indexed by these ids.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import AdjacencyError, DataError, GraphLoadError

MASS_TOL = 1e-9


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


def _csr(keys, n):
    # edge ids grouped by key, ascending id inside each group
    order = np.argsort(keys, kind="stable")
    counts = np.bincount(keys, minlength=n)
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    return ptr, order.astype(np.int64)


class Graph:
    """Immutable simple digraph with node and edge feature matrices."""

    def __init__(self, node_count, edges, node_features=None, edge_features=None):
        n = int(node_count)
        if n < 0:
            raise DataError("node_count must be non-negative")
        pairs = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges,
                           dtype=np.int64).reshape(-1, 2)
        m = len(pairs)
        src, dst = pairs[:, 0].copy(), pairs[:, 1].copy()
        if m and (src.min() < 0 or dst.min() < 0 or src.max() >= n or dst.max() >= n):
            bad = int(np.flatnonzero((src < 0) | (dst < 0) | (src >= n) | (dst >= n))[0])
            raise DataError(f"edge {bad} has an endpoint outside [0, {n})")
        if m and np.any(src == dst):
            bad = int(np.flatnonzero(src == dst)[0])
            raise DataError(f"edge {bad} is a self-loop")

        lookup = {}
        for e, (u, v) in enumerate(zip(src.tolist(), dst.tolist())):
            if (u, v) in lookup:
                raise DataError(f"edge {e} duplicates edge {lookup[u, v]} ({u}->{v})")
            lookup[u, v] = e
        reverse = np.array([lookup.get((v, u), -1) for u, v in zip(src.tolist(), dst.tolist())],
                           dtype=np.int64)

        if node_features is None:
            node_features = np.zeros((n, 0))
        if edge_features is None:
            edge_features = np.zeros((m, 0))
        node_features = np.asarray(node_features, dtype=np.float64)
        edge_features = np.asarray(edge_features, dtype=np.float64)
        if node_features.ndim != 2 or node_features.shape[0] != n:
            raise DataError(f"node_features must be {n} x d, got {node_features.shape}")
        if edge_features.ndim != 2 or edge_features.shape[0] != m:
            raise DataError(f"edge_features must be {m} x d, got {edge_features.shape}")

        self.node_count = n
        self.edge_count = m
        self.src = _frozen(src)
        self.dst = _frozen(dst)
        self.reverse_edge = _frozen(reverse)
        self.node_features = _frozen(node_features)
        self.edge_features = _frozen(edge_features)
        self._lookup = lookup
        out_ptr, out_idx = _csr(src, n)
        in_ptr, in_idx = _csr(dst, n)
        self.out_ptr, self.out_index = _frozen(out_ptr), _frozen(out_idx)
        self.in_ptr, self.in_index = _frozen(in_ptr), _frozen(in_idx)
        self.out_degree = _frozen(np.diff(out_ptr))
        self.in_degree = _frozen(np.diff(in_ptr))

    n = property(lambda self: self.node_count)
    m = property(lambda self: self.edge_count)

    def __repr__(self):
        return (f"Graph(n={self.node_count}, m={self.edge_count}, "
                f"d_v={self.node_features.shape[1]}, d_e={self.edge_features.shape[1]})")

    @property
    def edges(self):
        return list(zip(self.src.tolist(), self.dst.tolist()))

    def out_edges(self, v):
        return self.out_index[self.out_ptr[v]:self.out_ptr[v + 1]]

    def in_edges(self, v):
        return self.in_index[self.in_ptr[v]:self.in_ptr[v + 1]]

    @property
    def out_adjacency(self):
        return [self.out_edges(v) for v in range(self.node_count)]

    @property
    def in_adjacency(self):
        return [self.in_edges(v) for v in range(self.node_count)]

    def edge_id(self, u, v):
        """Id of edge u->v, or None."""
        return self._lookup.get((int(u), int(v)))

    def has_edge(self, u, v):
        return (int(u), int(v)) in self._lookup

    def successors(self, v):
        return self.dst[self.out_edges(v)]

    def with_edge_features(self, edge_features):
        return Graph(self.node_count, np.stack([self.src, self.dst], axis=1),
                     self.node_features, edge_features)

    def with_node_features(self, node_features):
        return Graph(self.node_count, np.stack([self.src, self.dst], axis=1),
                     node_features, self.edge_features)

    def check_node(self, v):
        if not (isinstance(v, (int, np.integer)) and 0 <= v < self.node_count):
            raise DataError(f"node {v!r} out of range [0, {self.node_count})")
        return int(v)


@dataclass(frozen=True)
class PathSample:
    nodes: tuple

    def __init__(self, nodes):
        object.__setattr__(self, "nodes", tuple(int(v) for v in nodes))

    def __len__(self):
        return len(self.nodes)

    def __iter__(self):
        return iter(self.nodes)


def path_edges(g: Graph, p) -> list[int]:
    nodes = p.nodes if isinstance(p, PathSample) else tuple(p)
    out = []
    for i in range(len(nodes) - 1):
        e = g.edge_id(nodes[i], nodes[i + 1])
        if e is None:
            raise AdjacencyError(f"no edge {nodes[i]}->{nodes[i + 1]} at path index {i}", index=i)
        out.append(e)
    return out


def edges_to_nodes(g: Graph, edge_ids: Sequence[int]) -> PathSample:
    if not len(edge_ids):
        raise ValueError("need at least one edge")
    nodes = [int(g.src[edge_ids[0]])]
    for e in edge_ids:
        if int(g.src[e]) != nodes[-1]:
            raise AdjacencyError(f"edge {e} does not continue the path", index=len(nodes) - 1)
        nodes.append(int(g.dst[e]))
    return PathSample(nodes)


class NodeDistribution:
    """Sparse probability vector over nodes.

    The constructor validates normalization; use :meth:`normalized` to build
    one from unnormalized masses.
    """

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[int, float] | Iterable):
        items = entries.items() if isinstance(entries, Mapping) else entries
        acc: dict[int, float] = {}
        for k, v in items:
            v = float(v)
            if not math.isfinite(v) or v < 0:
                raise DataError(f"mass for node {k} must be finite and >= 0, got {v}")
            if v > 0:
                acc[int(k)] = acc.get(int(k), 0.0) + v
        total = math.fsum(acc.values())
        if abs(total - 1.0) > MASS_TOL:
            raise DataError(f"node distribution sums to {total}, expected 1")
        self._entries = dict(sorted(acc.items()))

    @classmethod
    def normalized(cls, entries):
        items = entries.items() if isinstance(entries, Mapping) else list(entries)
        items = [(int(k), float(v)) for k, v in items]
        total = math.fsum(v for _, v in items if v > 0)
        if not total > 0:
            raise DataError("node distribution has no positive mass")
        return cls([(k, v / total) for k, v in items if v > 0])

    @classmethod
    def from_dense(cls, vec):
        vec = np.asarray(vec, dtype=np.float64)
        idx = np.flatnonzero(vec > 0)
        return cls.normalized(zip(idx.tolist(), vec[idx].tolist()))

    @property
    def entries(self):
        return dict(self._entries)

    def items(self):
        return self._entries.items()

    def support(self):
        return list(self._entries)

    def nodes_array(self):
        return np.fromiter(self._entries.keys(), dtype=np.int64, count=len(self._entries))

    def mass_array(self):
        return np.fromiter(self._entries.values(), dtype=np.float64, count=len(self._entries))

    def __getitem__(self, v):
        return self._entries.get(int(v), 0.0)

    def __len__(self):
        return len(self._entries)

    def __eq__(self, other):
        return isinstance(other, NodeDistribution) and self._entries == other._entries

    def __repr__(self):
        return f"NodeDistribution({self._entries})"

    def dense(self, n):
        out = np.zeros(n)
        if self._entries:
            out[self.nodes_array()] = self.mass_array()
        return out

    def total(self):
        return math.fsum(self._entries.values())

    def argmax(self):
        # lowest node id wins ties
        return max(self._entries.items(), key=lambda kv: (kv[1], -kv[0]))[0]

    def mix(self, other: "NodeDistribution", alpha: float) -> "NodeDistribution":
        """Convex combination ``alpha * self + (1 - alpha) * other``."""
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        acc = {k: alpha * v for k, v in self._entries.items()}
        for k, v in other.items():
            acc[k] = acc.get(k, 0.0) + (1 - alpha) * v
        return NodeDistribution.normalized(acc)

    def to_pairs(self):
        return [[k, v] for k, v in self._entries.items()]


def dirac(g: Graph, v) -> NodeDistribution:
    return NodeDistribution({g.check_node(v): 1.0})


@dataclass(frozen=True)
class Trajectory:
    observations: tuple
    indices: tuple

    def __init__(self, observations, indices=None):
        obs = tuple(observations)
        idx = tuple(range(len(obs))) if indices is None else tuple(int(i) for i in indices)
        if not obs:
            raise DataError("trajectory needs at least one observation")
        if len(obs) != len(idx):
            raise DataError(f"{len(obs)} observations but {len(idx)} indices")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise DataError(f"trajectory indices must be strictly increasing: {idx}")
        for o in obs:
            if not isinstance(o, NodeDistribution):
                raise DataError("observations must be NodeDistribution instances")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.observations)

    @property
    def last(self) -> NodeDistribution:
        return self.observations[-1]

    def fit(self, k: int) -> "Trajectory":
        """Keep the last ``k`` observations, left-padding with the earliest one."""
        obs, idx = list(self.observations), list(self.indices)
        if len(obs) >= k:
            return Trajectory(obs[-k:], idx[-k:])
        pad = k - len(obs)
        # padded copies get indices below the earliest real one
        return Trajectory([obs[0]] * pad + obs, list(range(idx[0] - pad, idx[0])) + idx)


def degree_features(g: Graph) -> np.ndarray:
    return np.stack([g.in_degree, g.out_degree], axis=1).astype(np.float64)


# ---------------------------------------------------------------- file io

def _read_tsv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh, delimiter="\t"))]
    rows = [(ln, r) for ln, r in rows if r and not (len(r) == 1 and not r[0].strip())]
    if not rows:
        raise GraphLoadError("empty file, header expected", path, 1)
    return rows[0], rows[1:]


def _floats(cells, path, line):
    try:
        return [float(c) for c in cells]
    except ValueError as exc:
        raise GraphLoadError(f"non-numeric feature ({exc})", path, line) from None


def load_graph(nodes_file, edges_file) -> Graph:
    nodes_file, edges_file = Path(nodes_file), Path(edges_file)
    (hl, header), rows = _read_tsv(nodes_file)
    if header[0].strip() != "id":
        raise GraphLoadError("nodes header must start with 'id'", nodes_file, hl)
    dv = len(header) - 1
    feats = []
    for expect, (line, row) in enumerate(rows):
        if len(row) != dv + 1:
            raise GraphLoadError(f"expected {dv + 1} columns, got {len(row)}", nodes_file, line)
        try:
            nid = int(row[0])
        except ValueError:
            raise GraphLoadError(f"bad node id {row[0]!r}", nodes_file, line) from None
        if nid != expect:
            raise GraphLoadError(f"node ids must be contiguous from 0; expected {expect}, got {nid}",
                                 nodes_file, line)
        feats.append(_floats(row[1:], nodes_file, line))
    n = len(feats)

    (hl, header), rows = _read_tsv(edges_file)
    if [h.strip() for h in header[:2]] != ["src", "dst"]:
        raise GraphLoadError("edges header must start with 'src\\tdst'", edges_file, hl)
    de = len(header) - 2
    pairs, efeats, seen = [], [], {}
    for line, row in rows:
        if len(row) != de + 2:
            raise GraphLoadError(f"expected {de + 2} columns, got {len(row)}", edges_file, line)
        try:
            u, v = int(row[0]), int(row[1])
        except ValueError:
            raise GraphLoadError(f"bad endpoint in {row[:2]!r}", edges_file, line) from None
        for x in (u, v):
            if not 0 <= x < n:
                raise GraphLoadError(f"dangling endpoint {x} (graph has {n} nodes)", edges_file, line)
        if u == v:
            raise GraphLoadError(f"self-loop {u}->{v}", edges_file, line)
        if (u, v) in seen:
            raise GraphLoadError(f"duplicate edge {u}->{v} (first on line {seen[u, v]})",
                                 edges_file, line)
        seen[u, v] = line
        pairs.append((u, v))
        efeats.append(_floats(row[2:], edges_file, line))
    return Graph(n, pairs, np.array(feats).reshape(n, dv), np.array(efeats).reshape(len(pairs), de))


def _fmt(x):
    return repr(float(x))


def write_graph(g: Graph, nodes_file, edges_file, node_names=None, edge_names=None):
    dv, de = g.node_features.shape[1], g.edge_features.shape[1]
    node_names = node_names or [f"f{i}" for i in range(dv)]
    edge_names = edge_names or [f"f{i}" for i in range(de)]
    with open(nodes_file, "w", encoding="utf-8") as fh:
        fh.write("\t".join(["id", *node_names]) + "\n")
        for v in range(g.node_count):
            fh.write("\t".join([str(v), *map(_fmt, g.node_features[v])]) + "\n")
    with open(edges_file, "w", encoding="utf-8") as fh:
        fh.write("\t".join(["src", "dst", *edge_names]) + "\n")
        for e in range(g.edge_count):
            fh.write("\t".join([str(g.src[e]), str(g.dst[e]), *map(_fmt, g.edge_features[e])]) + "\n")
