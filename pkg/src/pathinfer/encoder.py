"""Trajectory-conditioned edge weights.

The encoder turns (graph, trajectory) into a :class:`LatentGraph`: per-node
pseudo-coordinates are computed from the observations, every edge is scored
by an MLP on the coordinates and features of its endpoints, and scores are
normalized over each node's outgoing edges.
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import autodiff as ad
from .autodiff import Tape, Var
from .errors import ConfigError, DataError
from .graph import Graph, Trajectory
from .nn import ParamStore, grouped_softmax, init_mlp, mlp_forward, mlp_shapes

ENCODER_KINDS = ("learned_gcn", "nonparametric_diffusion")
SOFTMAX_KINDS = ("true_softmax", "ratio")
SUM_TOL = 1e-9


@dataclass
class EncoderConfig:
    gcn_layers: int = 3
    gcn_dim: int = 8
    mlp_hidden: list = field(default_factory=lambda: [32, 32])
    num_observations: int = 5
    encoder_kind: str = "learned_gcn"
    diffusion_steps: int = 3
    softmax_kind: str = "true_softmax"

    def __post_init__(self):
        self.mlp_hidden = [int(h) for h in self.mlp_hidden]
        for name in ("gcn_layers", "gcn_dim", "num_observations", "diffusion_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
            setattr(self, name, int(getattr(self, name)))
        if any(h < 1 for h in self.mlp_hidden):
            raise ConfigError("mlp_hidden entries must be positive")
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"encoder_kind must be one of {ENCODER_KINDS}")
        if self.softmax_kind not in SOFTMAX_KINDS:
            raise ConfigError(f"softmax_kind must be one of {SOFTMAX_KINDS}")

    @property
    def coord_dim(self):
        per_obs = self.gcn_dim if self.encoder_kind == "learned_gcn" else self.diffusion_steps
        return self.num_observations * per_obs


class LatentGraph:
    """Graph plus per-edge weights forming a categorical over each node's out-edges.

    ``weights`` is a :class:`Var`; when it sits on a tape every walk quantity
    computed from it is differentiable. ``non_backtracking=False`` turns the
    walk into a plain random walk (used by the Uniform baseline).
    """

    def __init__(self, graph: Graph, weights, non_backtracking=True):
        self.graph = graph
        self.weights = ad.lift(weights)
        self.non_backtracking = non_backtracking
        if self.weights.shape != (graph.edge_count,):
            raise ValueError(f"need {graph.edge_count} edge weights, got {self.weights.shape}")

    @property
    def edge_weights(self) -> np.ndarray:
        return self.weights.value

    def detached(self):
        return LatentGraph(self.graph, self.weights.value.copy(), self.non_backtracking)

    def check(self, tol=SUM_TOL):
        g, w = self.graph, self.weights.value
        # exp underflow can produce exact zeros for extreme logits
        if np.any(w < 0) or np.any(w > 1 + tol):
            raise ValueError("edge weights must lie in [0, 1]")
        sums = np.bincount(g.src, weights=w, minlength=g.node_count)
        has_out = g.out_degree > 0
        bad = np.flatnonzero(has_out & (np.abs(sums - 1.0) > tol))
        if len(bad):
            raise ValueError(f"outgoing weights of node {bad[0]} sum to {sums[bad[0]]}")
        return self


def init_params(config: EncoderConfig, node_dim: int, edge_dim: int, seed: int = 0) -> ParamStore:
    shapes = {}
    if config.encoder_kind == "learned_gcn":
        shapes.update(mlp_shapes("init_mlp", 2 * node_dim + edge_dim, config.mlp_hidden, 1))
        d_in = 1
        for k in range(config.gcn_layers):
            shapes[f"gcn.{k}.weight"] = (d_in, config.gcn_dim)
            d_in = config.gcn_dim
    score_in = 2 * config.coord_dim + 2 * node_dim + edge_dim
    shapes.update(mlp_shapes("score_mlp", score_in, config.mlp_hidden, 1))
    store = ParamStore(shapes)
    rng = np.random.default_rng(seed)
    if config.encoder_kind == "learned_gcn":
        init_mlp(store, "init_mlp", rng)
        for k in range(config.gcn_layers):
            name = f"gcn.{k}.weight"
            a, b = store.shapes[name]
            store[name] = rng.uniform(-1, 1, size=(a, b)) * np.sqrt(6.0 / (a + b))
    # zero last layer: encode starts out as the uniform out-edge distribution
    init_mlp(store, "score_mlp", rng, zero_last=True)
    store.meta["seed"] = seed
    return store


_static_inputs = weakref.WeakKeyDictionary()
_diffusion_ops = weakref.WeakKeyDictionary()


def _edge_static_input(g: Graph):
    got = _static_inputs.get(g)
    if got is None:
        fv, fe = g.node_features, g.edge_features
        got = np.concatenate([fv[g.src], fv[g.dst], fe], axis=1)
        _static_inputs[g] = got
    return got


def initial_edge_weights(g: Graph, params: ParamStore, tape: Tape | None = None) -> Var:
    x = _edge_static_input(g)
    z = mlp_forward(params, "init_mlp", x, tape)
    return ad.sigmoid(ad.reshape(z, (g.edge_count,)))


def _observation_matrix(g: Graph, traj: Trajectory) -> np.ndarray:
    X = np.zeros((g.node_count, len(traj)))
    for t, obs in enumerate(traj.observations):
        if len(obs):
            nodes = obs.nodes_array()
            if nodes.max() >= g.node_count:
                raise DataError(f"observation {t} references node {nodes.max()} outside the graph")
            X[nodes, t] = obs.mass_array()
    return X


def _fit(traj: Trajectory, k: int, strict: bool):
    if len(traj) == k:
        return traj
    if strict:
        raise DataError(f"trajectory has {len(traj)} observations, model expects {k}")
    return traj.fit(k)


def gcn_pseudo_coordinates(g: Graph, traj: Trajectory, init_w, params: ParamStore,
                           tape: Tape | None = None, num_observations=None) -> Var:
    """k-layer GCN applied to every observation; rows are concatenated over observations.

    Aggregation runs over incoming edges weighted by ``init_w`` plus a
    self-loop of weight 1.
    """
    T = len(traj) if num_observations is None else num_observations
    traj = _fit(traj, T, strict=num_observations is not None)
    n = g.node_count
    rows = np.concatenate([g.dst, np.arange(n)])
    cols = np.concatenate([g.src, np.arange(n)])
    agg_w = ad.concat([ad.lift(init_w), np.ones(n)], axis=0)
    X = ad.lift(_observation_matrix(g, traj))  # n x T, one channel per observation
    d = 1
    k = 0
    while f"gcn.{k}.weight" in params:
        W = params.var(f"gcn.{k}.weight", tape)
        if W.shape[0] != d:
            raise ValueError(f"gcn layer {k} expects width {W.shape[0]}, got {d}")
        H = ad.spmm(agg_w, rows, cols, (n, n), X)  # n x (T*d)
        H = ad.reshape(H, (n * T, d)) @ W
        d = W.shape[1]
        X = ad.reshape(ad.relu(H), (n, T * d))
        k += 1
    return X


def _diffusion_operator(g: Graph):
    op = _diffusion_ops.get(g)
    if op is None:
        n = g.node_count
        share = 1.0 / (g.out_degree + 1.0)
        rows = np.concatenate([g.dst, np.arange(n)])
        cols = np.concatenate([g.src, np.arange(n)])
        vals = np.concatenate([share[g.src], share])
        op = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
        _diffusion_ops[g] = op
    return op


def diffusion_pseudo_coordinates(g: Graph, traj: Trajectory, steps: int) -> np.ndarray:
    """Column block ``tau * steps + (s - 1)`` holds ``D^s x_tau``.

    ``D`` spreads each node's mass uniformly over its out-neighbours and
    itself, so every diffused column keeps total mass 1.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    D = _diffusion_operator(g)
    X = _observation_matrix(g, traj)
    T = X.shape[1]
    out = np.empty((g.node_count, T, steps))
    for s in range(steps):
        X = D @ X
        out[:, :, s] = X
    return out.reshape(g.node_count, T * steps)


def pseudo_coordinates(g, traj, params, config: EncoderConfig, tape=None):
    traj = _fit(traj, config.num_observations, strict=False)
    if config.encoder_kind == "nonparametric_diffusion":
        return ad.lift(diffusion_pseudo_coordinates(g, traj, config.diffusion_steps))
    init_w = initial_edge_weights(g, params, tape)
    return gcn_pseudo_coordinates(g, traj, init_w, params, tape, config.num_observations)


def edge_scores(g: Graph, coords, params: ParamStore, tape=None) -> Var:
    coords = ad.lift(coords)
    x = ad.concat([ad.gather(coords, g.src), ad.gather(coords, g.dst), _edge_static_input(g)], axis=1)
    z = mlp_forward(params, "score_mlp", x, tape)
    return ad.reshape(z, (g.edge_count,))


def encode(g: Graph, traj: Trajectory, params: ParamStore, config: EncoderConfig,
           tape: Tape | None = None) -> LatentGraph:
    coords = pseudo_coordinates(g, traj, params, config, tape)
    z = edge_scores(g, coords, params, tape)
    if g.edge_count == 0:
        return LatentGraph(g, z)
    kind = "softmax" if config.softmax_kind == "true_softmax" else "ratio"
    # nodes without out-edges simply own no group
    w = grouped_softmax(z, g.src, kind=kind)
    return LatentGraph(g, w).check()
