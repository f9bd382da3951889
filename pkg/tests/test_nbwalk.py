import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pathinfer.encoder import LatentGraph
from pathinfer.errors import AdjacencyError
from pathinfer.graph import Graph, NodeDistribution, PathSample, dirac
from pathinfer.nbwalk import (build_nb_transition, first_step, most_likely_suffix, sample_suffix,
                              step_prob, suffix_likelihood, target_marginal, top_suffixes)

import oracles

A, B, C = 0, 1, 2


def test_step_prob_examples():
    g = Graph(3, [(A, B), (B, C), (B, A), (A, C)])
    lat = LatentGraph(g, [0.5, 0.3, 0.4, 0.5])
    assert step_prob(lat, None, 0) == 0.5
    assert step_prob(lat, 0, 1) == pytest.approx(0.3 / 0.6, abs=1e-15)
    assert step_prob(lat, 0, 2) == 0.0


def test_step_prob_rejects_non_consecutive(uniform_triangle):
    with pytest.raises(AdjacencyError):
        step_prob(uniform_triangle, 0, 0)


def test_suffix_likelihood_examples(uniform_triangle, triangle):
    assert float(suffix_likelihood(uniform_triangle, dirac(triangle, A), PathSample([B, C]))) == 0.5
    assert float(suffix_likelihood(uniform_triangle, dirac(triangle, A), PathSample([B, A]))) == 0.0
    x = NodeDistribution({A: 0.6, C: 0.4})
    assert float(suffix_likelihood(uniform_triangle, x, PathSample([B, C]))) == pytest.approx(0.3)


def test_nb_transition_on_triangle(uniform_triangle):
    P = build_nb_transition(uniform_triangle).toarray()
    assert np.array_equal((P > 0).sum(axis=1), np.ones(6))
    assert np.allclose(P.sum(axis=1), 1.0)


def test_nb_transition_on_cycle(cycle):
    lat = LatentGraph(cycle, np.ones(3))
    P = build_nb_transition(lat).toarray()
    assert P[0, 1] == 1.0 and P[1, 2] == 1.0 and P[2, 0] == 1.0


def test_nb_transition_sink_row_empty():
    lat = LatentGraph(Graph(2, [(0, 1)]), [1.0])
    assert build_nb_transition(lat).toarray().tolist() == [[0.0]]


def test_first_step_examples(uniform_triangle, triangle):
    fs = first_step(uniform_triangle, dirac(triangle, A))
    assert fs == {triangle.edge_id(A, B): 0.5, triangle.edge_id(A, C): 0.5}
    lat = LatentGraph(Graph(2, [(0, 1)]), [1.0])
    assert not any(first_step(lat, dirac(lat.graph, 1)).values())


def test_first_step_is_linear(uniform_triangle, triangle):
    x = NodeDistribution({A: 0.25, B: 0.75})
    fa = first_step(uniform_triangle, dirac(triangle, A))
    fb = first_step(uniform_triangle, dirac(triangle, B))
    mixed = first_step(uniform_triangle, x)
    for e in range(triangle.m):
        assert mixed.get(e, 0.0) == pytest.approx(0.25 * fa.get(e, 0.0) + 0.75 * fb.get(e, 0.0))


def test_target_marginal_examples(uniform_triangle, triangle, cycle):
    assert np.allclose(target_marginal(uniform_triangle, dirac(triangle, A), 2).value, [0, 0.5, 0.5])
    assert np.allclose(target_marginal(uniform_triangle, dirac(triangle, A), 1).value, [0, 0.5, 0.5])
    lat = LatentGraph(cycle, np.ones(3))
    assert np.allclose(target_marginal(lat, dirac(cycle, A), 3).value, [1, 0, 0])


def test_paper_mode_on_cycle(cycle):
    lat = LatentGraph(cycle, np.ones(3))
    assert np.allclose(target_marginal(lat, dirac(cycle, A), 3, mode="paper").value, [1, 0, 0])


def test_most_likely_examples(uniform_triangle, triangle):
    chain = LatentGraph(Graph(3, [(A, B), (B, C)]), [1.0, 1.0])
    assert most_likely_suffix(chain, A, 2) == (PathSample([B, C]), 0.0)
    path, ll = most_likely_suffix(uniform_triangle, A, 2)
    assert ll == pytest.approx(math.log(0.5))
    assert path == PathSample([B, C])  # A->B has the smaller edge id
    trap = LatentGraph(Graph(2, [(0, 1), (1, 0)]), [1.0, 1.0])
    assert most_likely_suffix(trap, 0, 2) is None


def test_sample_suffix_examples(uniform_triangle, triangle):
    chain = LatentGraph(Graph(3, [(A, B), (B, C)]), [1.0, 1.0])
    assert all(sample_suffix(chain, dirac(chain.graph, A), 2, s) == PathSample([B, C])
               for s in range(5))
    draws = [sample_suffix(uniform_triangle, dirac(triangle, A), 3, 11) for _ in range(3)]
    assert draws[0] == draws[1] == draws[2]


def test_sample_frequency_matches_likelihood(uniform_triangle, triangle):
    rng = np.random.default_rng(0)
    n = 100_000
    hits = sum(sample_suffix(uniform_triangle, dirac(triangle, A), 1, rng) == PathSample([B])
               for _ in range(n))
    assert abs(hits / n - 0.5) < 0.01


def test_monte_carlo_within_three_standard_errors():
    rng = np.random.default_rng(5)
    lat = oracles.random_latent(rng, n_max=6, m_max=16)
    g = lat.graph
    start = int(g.src[0])
    x = dirac(g, start)
    n = 20_000
    counts = {}
    for _ in range(n):
        s = sample_suffix(lat, x, 2, rng)
        key = None if s is None else s.nodes
        counts[key] = counts.get(key, 0) + 1
    for seq in oracles.walks(g, start, 2):
        p = float(suffix_likelihood(lat, x, PathSample(seq)))
        se = math.sqrt(max(p * (1 - p), 1e-12) / n)
        assert abs(counts.get(seq, 0) / n - p) <= 3 * se + 1e-12


def test_top_suffixes_sorted(uniform_triangle, triangle):
    out = top_suffixes(uniform_triangle, dirac(triangle, A), 3, 3, n_samples=50)
    lls = [ll for _, ll in out]
    assert lls == sorted(lls, reverse=True)
    assert len(out) == 2  # only two non-backtracking 3-walks exist


def test_uniform_backtracking_walk_is_plain_random_walk(triangle):
    lat = LatentGraph(triangle, np.full(6, 0.5), non_backtracking=False)
    assert float(suffix_likelihood(lat, dirac(triangle, A), PathSample([B, A]))) == 0.25


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4), st.booleans())
def test_walk_matches_enumeration(seed, h, uniform):
    rng = np.random.default_rng(seed)
    lat = oracles.random_latent(rng, uniform=uniform)
    g, w = lat.graph, lat.edge_weights
    x = NodeDistribution.normalized({int(v): rng.random() + 0.1
                                     for v in rng.choice(g.n, min(2, g.n), replace=False)})
    for seq in oracles.all_suffixes(g, x, h):
        got = float(suffix_likelihood(lat, x, PathSample(seq)))
        assert got == pytest.approx(oracles.suffix_prob(g, w, x, seq), abs=1e-12)
    assert np.allclose(target_marginal(lat, x, h).value, oracles.marginal(g, w, x, h), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4))
def test_marginal_of_trap_free_walk_sums_to_one(seed, h):
    rng = np.random.default_rng(seed)
    lat = oracles.random_latent(rng)
    v = int(rng.integers(lat.graph.n))
    if oracles.dead_end_reachable(lat.graph, lat.edge_weights, v, h):
        return
    assert target_marginal(lat, dirac(lat.graph, v), h).value.sum() == pytest.approx(1.0, abs=1e-12)


def test_most_likely_rounding_tie_uses_smallest_edges():
    # 0->1->2 and 0->3->1 have the same probability (1/3 * 1/2) but their
    # log-likelihoods differ in the last bit
    edges = [(0, 1), (0, 2), (0, 3), (1, 0), (1, 2), (1, 3), (2, 0), (2, 1), (2, 3), (3, 1), (3, 2)]
    g = Graph(4, edges)
    w = np.array([1 / 3] * 9 + [0.5, 0.5])
    path, ll = most_likely_suffix(LatentGraph(g, w), 0, 2)
    assert path == PathSample([1, 2])
    assert ll == pytest.approx(math.log(1 / 6), abs=1e-12)
