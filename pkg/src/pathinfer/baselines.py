"""Reference walkers, the bilinear target scorer, and evaluation metrics.

A *model* passed to the metric functions is one of

* a :class:`LatentGraph` used for every sample (the non-learned baselines),
* a callable ``sample -> LatentGraph`` (a trained encoder),
* an object with ``predict(sample) -> dense node distribution`` (the
  bilinear scorer; it has no walk, so only target metrics apply).
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .encoder import LatentGraph
from .errors import DataError
from .graph import Graph, PathSample, path_edges
from .nbwalk import target_marginal, transition_probs, suffix_likelihood
from .nn import ParamStore, adam_step, grouped_softmax

PROB_FLOOR = 1e-30


def uniform_weights(g: Graph, backtracking_allowed=False) -> LatentGraph:
    w = 1.0 / np.maximum(g.out_degree[g.src], 1)
    return LatentGraph(g, w, non_backtracking=not backtracking_allowed)


def edge_counts(g: Graph, paths) -> np.ndarray:
    counts = np.zeros(g.edge_count)
    for p in paths:
        for e in path_edges(g, p):
            counts[e] += 1
    return counts


def reweighted_weights(g: Graph, train_paths, alpha=1.0) -> LatentGraph:
    """Walk biased towards frequently used links: ``w(e) ~ count(e) + alpha``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    raw = edge_counts(g, train_paths) + alpha
    total = np.bincount(g.src, weights=raw, minlength=g.node_count)
    return LatentGraph(g, raw / total[g.src])


# ---------------------------------------------------------------- bilinear scorer

def prefix_nodes(sample, prefix_len=4):
    """Most likely node of each observation, left-padded to ``prefix_len``."""
    nodes = [obs.argmax() for obs in sample.trajectory.observations][-prefix_len:]
    return [nodes[0]] * (prefix_len - len(nodes)) + nodes


def final_target(sample):
    if sample.true_target is not None:
        return sample.true_target.argmax()
    return sample.true_suffix.nodes[-1]


class BilinearTargetScorer:
    """``score(j) = sum_i f(p_i)^T W_i f(j)`` followed by a softmax over all nodes."""

    def __init__(self, embeddings, prefix_len=4):
        self.embeddings = np.asarray(embeddings, dtype=np.float64)
        self.prefix_len = prefix_len
        d = self.embeddings.shape[1]
        self.params = ParamStore({f"bilinear.{i}": (d, d) for i in range(prefix_len)})

    def _probs(self, prefix, tape=None):
        E = self.embeddings
        q = None
        for i, v in enumerate(prefix):
            term = ad.matmul(E[v], self.params.var(f"bilinear.{i}", tape))
            q = term if q is None else q + term
        scores = ad.matmul(E, q)
        return grouped_softmax(scores, np.zeros(len(E), dtype=np.int64))

    def predict(self, sample) -> np.ndarray:
        return self._probs(prefix_nodes(sample, self.prefix_len)).value

    def fit(self, samples, epochs=100, lr=0.01, batch_size=32, seed=0):
        samples = list(samples)
        rng = np.random.default_rng(seed)
        t = 0
        history = []
        for _ in range(epochs):
            order = rng.permutation(len(samples))
            losses = []
            for start in range(0, len(order), batch_size):
                batch = [samples[i] for i in order[start:start + batch_size]]
                self.params.zero_grad()
                for s in batch:
                    tape = Tape()
                    p = self._probs(prefix_nodes(s, self.prefix_len), tape)
                    loss = -ad.log(ad.gather(p, [final_target(s)]) + PROB_FLOOR)
                    loss = ad.sum(loss)
                    losses.append(float(loss))
                    backward(tape, seed=1.0 / len(batch), output=loss, accumulate=True)
                t += 1
                adam_step(self.params, lr=lr, t=t)
            history.append(float(np.mean(losses)))
        return history


def bilinear_target_scorer(train, node_embeddings, prefix_len=4, lr=0.01, epochs=100, seed=0):
    """Fit a :class:`BilinearTargetScorer` by cross entropy with Adam (weights start at zero)."""
    scorer = BilinearTargetScorer(node_embeddings, prefix_len)
    scorer.fit(train, epochs=epochs, lr=lr, seed=seed)
    return scorer


def load_embeddings(path, n):
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            cells = line.split()
            if not cells:
                continue
            try:
                rows[int(cells[0])] = [float(c) for c in cells[1:]]
            except ValueError:
                raise DataError(f"{path}:{line_no}: malformed embedding row") from None
    dims = {len(v) for v in rows.values()}
    if len(dims) != 1:
        raise DataError(f"{path}: embedding rows have inconsistent widths {sorted(dims)}")
    missing = [v for v in range(n) if v not in rows]
    if missing:
        raise DataError(f"{path}: no embedding for node {missing[0]}")
    return np.array([rows[v] for v in range(n)])


# ---------------------------------------------------------------- model adapters

def latent_for(model, sample) -> LatentGraph:
    if isinstance(model, LatentGraph):
        return model
    if callable(model):
        return model(sample)
    raise TypeError("model has no latent graph")


def target_distribution(model, sample) -> np.ndarray:
    if hasattr(model, "predict"):
        return np.asarray(model.predict(sample))
    lat = latent_for(model, sample)
    return target_marginal(lat, sample.trajectory.last, sample.horizon, mode="exact").value


def _has_walk(model):
    return isinstance(model, LatentGraph) or (callable(model) and not hasattr(model, "predict"))


# ---------------------------------------------------------------- metrics

def choice_decisions(lat: LatentGraph, path, start=0):
    """``(correct, total)`` over the decisions ``path[start] -> path[start+1]`` onwards.

    Only nodes with out-degree >= 3 count. The model's choice is the
    out-edge with the highest step probability; among equal probabilities
    the smallest edge id wins.
    """
    g = lat.graph
    nodes = path.nodes if isinstance(path, PathSample) else tuple(path)
    edges = path_edges(g, nodes)
    correct = total = 0
    for tau in range(start, len(nodes) - 1):
        v = nodes[tau]
        if g.out_degree[v] < 3:
            continue
        outs = g.out_edges(v)
        prev = edges[tau - 1] if tau > 0 else -1
        probs = transition_probs(lat, np.full(len(outs), prev), outs).value
        total += 1
        correct += int(outs[int(np.argmax(probs))] == edges[tau])
    return correct, total


@dataclass
class Rate:
    hits: int = 0
    count: int = 0

    @property
    def percent(self):
        return 100.0 * self.hits / self.count if self.count else math.nan

    @property
    def defined(self):
        return self.count > 0


def choice_accuracy(lat: LatentGraph, true_paths) -> Rate:
    """Percentage of correct crossroad decisions along ``true_paths``.

    Items are paths or ``(path, start)`` pairs. ``Rate.defined`` is False
    when no decision point was visited.
    """
    rate = Rate()
    for item in true_paths:
        pair = isinstance(item, tuple) and len(item) == 2 and not isinstance(item[0], (int, np.integer))
        path, start = item if pair else (item, 0)
        c, t = choice_decisions(lat, path, start)
        rate.hits += c
        rate.count += t
    return rate


def decision_path(sample):
    """Known node path through the current position and the true suffix, with its start index."""
    if sample.true_suffix is None:
        return None
    if sample.prefix_path is not None and len(sample.prefix_path):
        head = sample.prefix_path.nodes[-2:]
    elif len(sample.trajectory.last) == 1:
        head = (sample.trajectory.last.argmax(),)
    else:
        return None
    return head + sample.true_suffix.nodes, len(head) - 1


def sample_choice_accuracy(model, samples) -> Rate:
    rate = Rate()
    for s in samples:
        dp = decision_path(s)
        if dp is None:
            continue
        c, t = choice_decisions(latent_for(model, s), *dp)
        rate.hits += c
        rate.count += t
    return rate


def target_probability(model, samples, h=None):
    """Mean model mass on the support of the true target distribution."""
    vals = []
    for s in samples:
        if s.true_target is None:
            continue
        if h is not None and s.horizon != h:
            continue
        xhat = target_distribution(model, s)
        vals.append(float(xhat[s.true_target.nodes_array()].sum()))
    return (float(np.mean(vals)) if vals else math.nan), len(vals)


def mean_suffix_nll(model, samples):
    vals = []
    for s in samples:
        if s.true_suffix is None:
            continue
        p = float(suffix_likelihood(latent_for(model, s), s.trajectory.last, s.true_suffix))
        vals.append(-math.log(p + PROB_FLOOR))
    return (float(np.mean(vals)) if vals else math.nan), len(vals)


def bfs_distances(g: Graph, source) -> np.ndarray:
    dist = np.full(g.node_count, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in g.successors(u).tolist():
            if dist[v] < 0:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def precision_and_2target(model, samples, distance_table=None, target_pool=None, seed=0):
    """``(precision@1 Rate, 2-targets Rate)``.

    Negatives are drawn (seeded) among nodes that were given as a target at
    least once and lie at the same BFS distance from the prefix start as
    the true target. Ties count as failures for 2-targets.
    """
    samples = [s for s in samples if s.true_target is not None or s.true_suffix is not None]
    if target_pool is None:
        target_pool = {final_target(s) for s in samples}
    pool = np.array(sorted(target_pool), dtype=np.int64)
    distance_table = {} if distance_table is None else distance_table
    rng = np.random.default_rng(seed)
    prec, two = Rate(), Rate()
    for s in samples:
        xhat = target_distribution(model, s)
        tgt = final_target(s)
        prec.count += 1
        prec.hits += int(int(np.argmax(xhat)) == tgt)
        src = s.trajectory.observations[0].argmax()
        if src not in distance_table:
            distance_table[src] = bfs_distances(_graph_of(model, s, len(xhat)), src)
        dist = distance_table[src]
        cands = pool[(dist[pool] == dist[tgt]) & (pool != tgt)]
        if not len(cands):
            continue
        neg = int(cands[rng.integers(len(cands))])
        two.count += 1
        two.hits += int(xhat[tgt] > xhat[neg])
    return prec, two


def _graph_of(model, sample, n):
    if _has_walk(model):
        return latent_for(model, sample).graph
    g = getattr(model, "graph", None)
    if g is None:
        raise DataError("precision_and_2target needs a graph for distances; set model.graph")
    return g


@dataclass
class MetricReport:
    choice_accuracy: float = math.nan
    target_probability: float = math.nan
    suffix_nll: float = math.nan
    suffix_geo_mean: float = math.nan
    precision_at_1: float = math.nan
    two_target_accuracy: float = math.nan
    counts: dict = field(default_factory=dict)

    def as_dict(self):
        d = asdict(self)
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in d.items()}

    def to_json(self):
        return json.dumps(self.as_dict(), sort_keys=True)


def evaluate(model, samples, seed=0, distance_table=None) -> MetricReport:
    samples = list(samples)
    r = MetricReport()
    if _has_walk(model):
        ca = sample_choice_accuracy(model, samples)
        r.choice_accuracy = ca.percent
        r.counts["choice_accuracy"] = ca.count
        nll, k = mean_suffix_nll(model, samples)
        r.suffix_nll, r.counts["suffix_nll"] = nll, k
        r.suffix_geo_mean = math.exp(-nll) if k else math.nan
    tp, k = target_probability(model, samples)
    r.target_probability, r.counts["target_probability"] = tp, k
    prec, two = precision_and_2target(model, samples, distance_table, seed=seed)
    r.precision_at_1, r.counts["precision_at_1"] = prec.percent, prec.count
    r.two_target_accuracy, r.counts["two_target_accuracy"] = two.percent, two.count
    return r


def format_table(reports: dict) -> str:
    cols = [("choice_accuracy", "choice acc %"), ("target_probability", "P(target)"),
            ("suffix_nll", "NLL"), ("suffix_geo_mean", "geo-mean p"),
            ("precision_at_1", "prec@1 %"), ("two_target_accuracy", "2-targets %")]
    width = max([len("model")] + [len(k) for k in reports]) + 2
    head = "model".ljust(width) + "".join(title.rjust(14) for _, title in cols)
    lines = [head, "-" * len(head)]
    for name, rep in reports.items():
        cells = []
        for key, _ in cols:
            v = getattr(rep, key)
            cells.append(("-" if v is None or math.isnan(v) else f"{v:.4f}").rjust(14))
        lines.append(name.ljust(width) + "".join(cells))
    return "\n".join(lines)
