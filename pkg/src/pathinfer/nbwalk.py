"""Non-backtracking walks on a latent graph.

A walker at node ``i`` takes its first step along ``i->j`` with probability
``w(i->j)``. Afterwards, having arrived over ``i->j``, it leaves along
``j->l`` (``l != i``) with probability ``w(j->l) / (1 - w(j->i))``; the
denominator term is 0 when ``j->i`` does not exist. When that denominator
falls to 1e-12 or below the walker is trapped and every continuation gets
probability 0.

All quantities are built from ``lat.weights``; if those sit on a tape the
results are differentiable.
"""
from __future__ import annotations

import heapq
import math

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Var
from .encoder import LatentGraph
from .errors import AdjacencyError
from .graph import NodeDistribution, PathSample, path_edges

DEAD_END = 1e-12
TIE_TOL = 1e-12  # log-likelihood gap treated as a tie


def _reverse_terms(lat: LatentGraph, prev):
    """Reverse edge of each ``prev`` (-1 if none) and the walk denominators."""
    g, w = lat.graph, lat.weights.value
    rev = np.where(prev >= 0, g.reverse_edge[np.maximum(prev, 0)], -1)
    if not lat.non_backtracking:
        rev = np.full_like(rev, -1)
    back = np.where(rev >= 0, w[np.maximum(rev, 0)], 0.0)
    return rev, 1.0 - back


def transition_probs(lat: LatentGraph, prev, nxt) -> Var:
    """Vector of step probabilities for edge pairs ``(prev[k], nxt[k])``.

    ``prev[k] == -1`` marks a first step (raw weight).
    """
    g = lat.graph
    prev = np.asarray(prev, dtype=np.int64).reshape(-1)
    nxt = np.asarray(nxt, dtype=np.int64).reshape(-1)
    has_prev = prev >= 0
    if np.any(has_prev & (g.src[nxt] != g.dst[np.maximum(prev, 0)])):
        k = int(np.flatnonzero(has_prev & (g.src[nxt] != g.dst[np.maximum(prev, 0)]))[0])
        raise AdjacencyError(f"edge {nxt[k]} does not continue edge {prev[k]}", index=k)
    w = lat.weights
    wv = w.value
    num = wv[nxt]
    if not lat.non_backtracking:
        return ad.gather(w, nxt)
    rev, denom = _reverse_terms(lat, prev)
    ok = ~has_prev | ((nxt != rev) & (denom > DEAD_END))
    safe = np.where(ok, denom, 1.0)
    out = np.where(ok, num / safe, 0.0)
    m = g.edge_count
    with_rev = ok & (rev >= 0)

    def vjp(gr):
        gw = np.bincount(nxt, weights=gr * ok / safe, minlength=m)
        if np.any(with_rev):
            gw += np.bincount(rev[with_rev], weights=(gr * num / safe ** 2)[with_rev], minlength=m)
        return (gw,)

    return ad._op(out, (w,), vjp)


def step_prob(lat: LatentGraph, prev_edge, next_edge) -> float:
    prev = -1 if prev_edge is None else int(prev_edge)
    return float(transition_probs(lat, [prev], [int(next_edge)]).value[0])


def _prod(v: Var) -> Var:
    """Product of a short vector, with a zero-safe gradient."""
    x = v.value
    n = len(x)
    out = float(np.prod(x))

    def vjp(g):
        others = np.array([np.prod(np.delete(x, i)) for i in range(n)])
        return (g * others,)

    return ad._op(np.asarray(out), (v,), vjp)


def suffix_likelihood(lat: LatentGraph, x_t: NodeDistribution, suffix) -> Var:
    """Probability of walking ``suffix`` when the start is drawn from ``x_t``.

    Support nodes without an edge into ``suffix[0]`` contribute nothing.
    """
    g = lat.graph
    s = suffix.nodes if isinstance(suffix, PathSample) else tuple(int(v) for v in suffix)
    if not s:
        raise ValueError("suffix must contain at least one node")
    tail = path_edges(g, s)
    starts, first, mass = [], [], []
    for v, p in x_t.items():
        e = g.edge_id(v, s[0])
        if e is not None:
            starts.append(v)
            first.append(e)
            mass.append(p)
    if not first:
        return Var(0.0)
    first = np.array(first, dtype=np.int64)
    mass = np.array(mass)
    lead = ad.gather(lat.weights, first)
    if tail:
        lead = lead * transition_probs(lat, first, np.full(len(first), tail[0]))
    total = ad.sum(lead * mass)
    if len(tail) > 1:
        rest = transition_probs(lat, tail[:-1], tail[1:])
        total = total * _prod(rest)
    return total


def suffix_log_likelihood(lat, x_t, suffix) -> float:
    p = float(suffix_likelihood(lat, x_t, suffix))
    return math.log(p) if p > 0 else -math.inf


def build_nb_transition(lat: LatentGraph) -> sp.csr_matrix:
    """Sparse m x m matrix; entry (e, f) is the probability of taking f right after e."""
    g = lat.graph
    m = g.edge_count
    counts = g.out_degree[g.dst]
    rows = np.repeat(np.arange(m), counts)
    starts = np.repeat(g.out_ptr[g.dst], counts)
    offsets = np.arange(len(rows)) - np.repeat(np.cumsum(counts) - counts, counts)
    cols = g.out_index[starts + offsets]
    probs = transition_probs(lat, rows, cols).value
    keep = probs > 0
    return sp.csr_matrix((probs[keep], (rows[keep], cols[keep])), shape=(m, m))


def first_step(lat: LatentGraph, x_t: NodeDistribution) -> dict:
    """Edge masses after one move: ``mass(i->j) = x_t[i] * w(i->j)``."""
    g, w = lat.graph, lat.edge_weights
    out = {}
    for v, p in x_t.items():
        for e in g.out_edges(v).tolist():
            out[e] = p * float(w[e])
    return out


def _first_step_dense(lat: LatentGraph, x_dense) -> Var:
    return ad.gather(x_dense, lat.graph.src) * lat.weights


def _push(lat: LatentGraph, mu) -> Var:
    """One walk step applied to a dense edge-mass vector."""
    g = lat.graph
    mu = ad.lift(mu)
    w = lat.weights
    wv, muv = w.value, mu.value
    n, m = g.node_count, g.edge_count
    src, dst = g.src, g.dst
    if lat.non_backtracking:
        rev = g.reverse_edge
        has_rev = rev >= 0
        rev0 = np.maximum(rev, 0)
        denom = 1.0 - np.where(has_rev, wv[rev0], 0.0)
        live = denom > DEAD_END
        safe = np.where(live, denom, 1.0)
        a = np.where(live, muv / safe, 0.0)
        S = np.bincount(dst, weights=a, minlength=n)
        r = S[src] - np.where(has_rev, a[rev0], 0.0)
    else:
        a = muv
        S = np.bincount(dst, weights=a, minlength=n)
        r = S[src]
    # cancellation in the subtraction above can leave -1e-17 residues
    pos = r > 0
    rp = np.where(pos, r, 0.0)
    out = wv * rp

    def vjp(G):
        gw = G * rp
        gr = G * wv * pos
        dS = np.bincount(src, weights=gr, minlength=n)
        ga = dS[dst]
        if lat.non_backtracking:
            ga = ga - np.where(has_rev, gr[rev0], 0.0)
            gmu = ga * live / safe
            sel = has_rev & live
            gw = gw + np.bincount(rev0[sel], weights=(ga * muv / safe ** 2)[sel], minlength=m)
        else:
            gmu = ga
        return gmu, gw

    return ad._op(out, (mu, w), vjp)


def propagate(lat: LatentGraph, x_t: NodeDistribution, steps: int) -> Var:
    """Dense edge masses after ``1 + steps`` moves from ``x_t``."""
    mu = _first_step_dense(lat, x_t.dense(lat.graph.node_count))
    for _ in range(steps):
        mu = _push(lat, mu)
    return mu


def target_marginal(lat: LatentGraph, x_t: NodeDistribution, h: int, mode="exact",
                    renormalize=False) -> Var:
    """Dense length-n node distribution of the walker after ``h`` moves.

    ``mode="exact"`` propagates ``h`` moves and collects mass at edge heads.
    ``mode="paper"`` propagates ``h + 1`` moves and maps edge mass back to
    nodes through the normalized transpose of the node-to-edge lifting.
    Mass lost in dead ends is not restored unless ``renormalize`` is set.
    """
    if h < 1:
        raise ValueError("horizon must be >= 1")
    g = lat.graph
    n = g.node_count
    if mode == "exact":
        mu = propagate(lat, x_t, h - 1)
        out = ad.segment_sum(mu, g.dst, n)
    elif mode == "paper":
        mu = propagate(lat, x_t, h)
        w = lat.weights
        num = ad.segment_sum(mu * w, g.src, n)
        den = ad.segment_sum(w * w, g.src, n)
        out = num / (den + (den.value == 0))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if renormalize:
        total = float(out.value.sum())
        if total > 0:
            out = out / total
    return out


def _walk_candidates(lat, wv, prev, node):
    """(edge, prob) for every legal move out of ``node`` after ``prev``."""
    g = lat.graph
    out = g.out_edges(node)
    if prev < 0:
        return [(int(e), float(wv[e])) for e in out]
    probs = transition_probs(lat, np.full(len(out), prev), out).value
    return [(int(e), float(p)) for e, p in zip(out, probs)]


def most_likely_suffix(lat: LatentGraph, v_t: int, h: int):
    """Best-first search for the most probable length-``h`` suffix from ``v_t``.

    Returns ``(PathSample, log_likelihood)`` or ``None`` when no legal
    length-``h`` continuation exists. Equal likelihoods go to the
    lexicographically smallest edge-id sequence.
    """
    if h < 1:
        raise ValueError("horizon must be >= 1")
    g = lat.graph
    wv = lat.edge_weights
    frontier = [(0.0, (), int(v_t))]
    best = None
    while frontier:
        neg_ll, edges, node = heapq.heappop(frontier)
        if best is not None and neg_ll > best[0] + TIE_TOL:
            break
        if len(edges) == h:
            # log-likelihoods of equally likely suffixes can differ by rounding,
            # so keep searching within TIE_TOL and take the smallest edge ids
            if best is None:
                best = (neg_ll, edges, neg_ll)
            elif edges < best[1]:
                best = (best[0], edges, neg_ll)
            continue
        prev = edges[-1] if edges else -1
        for e, p in _walk_candidates(lat, wv, prev, node):
            if p <= 0:
                continue
            heapq.heappush(frontier, (neg_ll - math.log(p), edges + (e,), int(g.dst[e])))
    if best is None:
        return None
    return PathSample([int(g.dst[e]) for e in best[1]]), -best[2]


def top_suffixes(lat: LatentGraph, x_t: NodeDistribution, h: int, k: int,
                 n_samples=200, seed=0):
    """Up to ``k`` distinct suffixes with their log-likelihood under ``x_t``.

    Candidates are the best-first optimum from the most probable start node
    plus Monte-Carlo draws; output is sorted by descending log-likelihood.
    """
    cands = {}
    best = most_likely_suffix(lat, x_t.argmax(), h)
    if best is not None:
        cands[best[0].nodes] = None
    rng = np.random.default_rng(seed)
    for _ in range(n_samples):
        s = sample_suffix(lat, x_t, h, rng)
        if s is not None:
            cands[s.nodes] = None
    scored = [(suffix_log_likelihood(lat, x_t, s), s) for s in cands]
    scored = [t for t in scored if t[0] > -math.inf]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [(PathSample(s), ll) for ll, s in scored[:k]]


def _draw(rng, probs):
    c = np.cumsum(probs)
    i = int(np.searchsorted(c, rng.random() * c[-1], side="right"))
    return min(i, len(probs) - 1)


def sample_suffix(lat: LatentGraph, x_t: NodeDistribution, h: int, rng_seed=None):
    """One suffix drawn from the walk, or ``None`` if it hits a dead end.

    ``rng_seed`` is an int seed or a ``numpy.random.Generator``.
    """
    if h < 1:
        raise ValueError("horizon must be >= 1")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    g = lat.graph
    wv = lat.edge_weights
    node = int(x_t.nodes_array()[_draw(rng, x_t.mass_array())])
    prev = -1
    nodes = []
    for _ in range(h):
        cands = _walk_candidates(lat, wv, prev, node)
        probs = np.array([p for _, p in cands])
        if not len(cands) or probs.sum() <= 0:
            return None
        prev = cands[_draw(rng, probs)][0]
        node = int(g.dst[prev])
        nodes.append(node)
    return PathSample(nodes)
