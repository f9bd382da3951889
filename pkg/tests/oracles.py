"""Independent reference computations used by the tests.

Nothing here calls into the walk code: probabilities are recomputed from
the step rule on plain dicts, and suffixes are enumerated exhaustively.
"""
import math

import numpy as np

from pathinfer.encoder import EncoderConfig, LatentGraph, init_params
from pathinfer.graph import Graph, NodeDistribution, PathSample, Trajectory
from pathinfer.training import TrainSample

TRAP = 1e-12


def weight_table(g, w):
    return {(int(u), int(v)): float(x) for u, v, x in zip(g.src, g.dst, w)}


def step(W, prev, u, v):
    """Probability of moving u -> v having arrived from ``prev`` (None on the first move)."""
    if (u, v) not in W:
        return 0.0
    if prev is None:
        return W[u, v]
    if v == prev:
        return 0.0
    den = 1.0 - W.get((u, prev), 0.0)
    if den <= TRAP:
        return 0.0
    return W[u, v] / den


def walks(g, start, h):
    """Every node sequence of length ``h`` that follows edges from ``start``."""
    out = [((), start)]
    for _ in range(h):
        nxt = []
        for seq, u in out:
            for v in sorted(g.successors(u).tolist()):
                nxt.append((seq + (v,), v))
        out = nxt
    return [seq for seq, _ in out]


def walk_prob(W, start, seq):
    p, prev, u = 1.0, None, start
    for v in seq:
        p *= step(W, prev, u, v)
        prev, u = u, v
    return p


def suffix_prob(g, w, x, seq):
    W = weight_table(g, w)
    return sum(m * walk_prob(W, v, seq) for v, m in x.items())


def all_suffixes(g, x, h):
    seqs = set()
    for v in x.support():
        seqs.update(walks(g, v, h))
    return sorted(seqs)


def marginal(g, w, x, h):
    W = weight_table(g, w)
    out = np.zeros(g.n)
    for v, m in x.items():
        for seq in walks(g, v, h):
            out[seq[-1]] += m * walk_prob(W, v, seq)
    return out


def dead_end_reachable(g, w, start, h):
    """True when some positive-probability walk shorter than ``h`` has no way on."""
    W = weight_table(g, w)
    frontier = [(None, start, 1.0)]
    for _ in range(h):
        nxt = []
        for prev, u, p in frontier:
            moves = [(v, step(W, prev, u, v)) for v in g.successors(u).tolist()]
            moves = [(v, q) for v, q in moves if q > 0]
            if not moves:
                return True
            nxt += [(u, v, p * q) for v, q in moves]
        frontier = nxt
    return False


def edge_seq(g, start, seq):
    nodes = (start,) + tuple(seq)
    return tuple(g.edge_id(a, b) for a, b in zip(nodes, nodes[1:]))


def brute_most_likely(g, w, start, h, rel=1e-12):
    """Enumerated argmax; near-equal likelihoods go to the smallest edge-id sequence."""
    W = weight_table(g, w)
    scored = [(walk_prob(W, start, s), s) for s in walks(g, start, h)]
    scored = [(p, s) for p, s in scored if p > 0]
    if not scored:
        return None
    best = max(p for p, _ in scored)
    ties = [s for p, s in scored if p >= best * (1 - rel)]
    s = min(ties, key=lambda s: edge_seq(g, start, s))
    return s, math.log(walk_prob(W, start, s))


def random_digraph(rng, n_max=8, m_max=24, min_nodes=2, features=False):
    n = int(rng.integers(min_nodes, n_max + 1))
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    m = int(rng.integers(1, min(m_max, len(pairs)) + 1))
    chosen = sorted(rng.choice(len(pairs), size=m, replace=False).tolist())
    edges = [pairs[i] for i in chosen]
    if features:
        return Graph(n, edges, rng.normal(size=(n, 2)), rng.normal(size=(m, 1)))
    return Graph(n, edges)


def softmax_weights(g, rng, uniform=False):
    z = np.zeros(g.m) if uniform else rng.normal(scale=1.5, size=g.m)
    w = np.exp(z)
    tot = np.bincount(g.src, weights=w, minlength=g.n)
    return w / tot[g.src]


def random_latent(rng, uniform=False, **kw):
    g = random_digraph(rng, **kw)
    return LatentGraph(g, softmax_weights(g, rng, uniform))


def gradient_instance(seed):
    """Small random graph, perturbed encoder parameters and a labeled sample."""
    rng = np.random.default_rng(seed)
    while True:
        n = int(rng.integers(4, 9))
        edges = [(i, j) for i in range(n) for j in range(n) if i != j and rng.random() < 0.45]
        g = Graph(n, edges, rng.normal(size=(n, 2)), rng.normal(size=(len(edges), 1)))
        if g.m and all(g.out_degree > 0):
            break
    kind = ("learned_gcn", "nonparametric_diffusion")[seed % 2]
    cfg = EncoderConfig(encoder_kind=kind, num_observations=3, mlp_hidden=[6], gcn_dim=3,
                        gcn_layers=2)
    store = init_params(cfg, 2, 1, seed=seed)
    store.flat[:] += rng.normal(size=store.size) * 0.5
    obs = [NodeDistribution.normalized({int(v): rng.random() for v in rng.choice(n, 2, replace=False)})
           for _ in range(3)]
    h = int(rng.integers(1, 4))
    v, prev, suffix = obs[-1].support()[0], None, []
    for _ in range(h):
        nxt = [u for u in g.successors(v).tolist() if u != prev] or g.successors(v).tolist()
        u = nxt[int(rng.integers(len(nxt)))]
        suffix.append(u)
        prev, v = v, u
    target = NodeDistribution.normalized({int(u): 1.0 for u in rng.choice(n, 2, replace=False)})
    return g, cfg, store, TrainSample(Trajectory(obs), h, PathSample(suffix), target)
