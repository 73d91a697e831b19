import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from spreadperc.errors import CapacityError, UsageError
from spreadperc.estimators import explore_mc
from spreadperc.lattice import Box, Full, HalfSpace, Sites, SpreadOutModel
from spreadperc.percolation import (
    ConfigTable,
    FiniteGraph,
    config_weight,
    connectivity_matrix,
    disjoint_occurrence_multi,
    disjoint_occurrence_pair,
    disjoint_probability,
    enumerate_connect_prob,
    explore_cluster,
)


def line_graph(p):
    return FiniteGraph(((0,), (1,), (2,)), (((0,), (1,)), ((1,), (2,)), ((0,), (2,))), (p, p, p))


@st.composite
def graphs(draw, max_sites=6, max_edges=8):
    n = draw(st.integers(2, max_sites))
    sites = [(i,) for i in range(n)]
    pairs = list(itertools.combinations(range(n), 2))
    chosen = draw(st.lists(st.sampled_from(pairs), min_size=1, max_size=min(max_edges, len(pairs)), unique=True))
    probs = draw(st.lists(st.floats(0.05, 0.95), min_size=len(chosen), max_size=len(chosen)))
    return FiniteGraph(tuple(sites), tuple((sites[a], sites[b]) for a, b in chosen), tuple(probs))


def test_single_edge():
    g = FiniteGraph(((0,), (1,)), (((0,), (1,)),), (0.3,))
    assert enumerate_connect_prob(g, None, (0,), (1,)) == pytest.approx(0.3, abs=1e-15)
    assert enumerate_connect_prob(g, None, (0,), (0,)) == 1.0


def test_triangle_closed_form():
    # oracle: hand enumeration of the 8 configurations
    p = 0.37
    hand = sum(
        config_weight(line_graph(p), c)
        for c in range(8)
        if (c >> 2) & 1 or ((c & 1) and (c >> 1) & 1)
    )
    got = enumerate_connect_prob(line_graph(p), None, (0,), (2,))
    assert got == pytest.approx(hand, abs=1e-12)
    assert got == pytest.approx(p + (1 - p) * p * p, abs=1e-12)


def test_region_restricts_edges():
    g = line_graph(0.5)
    assert enumerate_connect_prob(g, Sites([(0,), (2,)]), (0,), (2,)) == pytest.approx(0.5)


def test_capacity():
    sites = [(i,) for i in range(9)]
    edges = list(itertools.combinations(sites, 2))[:31]
    g = FiniteGraph(tuple(sites), tuple(edges), tuple([0.5] * 31))
    with pytest.raises(CapacityError):
        enumerate_connect_prob(g, None, (0,), (1,))


def test_graph_validation():
    with pytest.raises(UsageError):
        FiniteGraph(((0,), (1,)), (((0,), (1,)), ((1,), (0,))), (0.5, 0.5))
    with pytest.raises(UsageError):
        FiniteGraph(((0,),), (((0,), (1,)),), (0.5,))


def test_explore_beta_zero():
    s = explore_cluster(SpreadOutModel(3, 1, 0.0), Full(), (0, 0, 0), np.random.default_rng(1))
    assert s.sites == {(0, 0, 0)} and not s.capped


def test_explore_cap_one():
    m = SpreadOutModel(2, 1, 50.0)
    s = explore_cluster(m, Full(), (0, 0), np.random.default_rng(2), cap=1)
    assert s.sites == {(0, 0)} and s.capped
    with pytest.raises(UsageError):
        explore_cluster(m, Full(), (0, 0), np.random.default_rng(2), cap=0)
    with pytest.raises(UsageError):
        explore_cluster(m, HalfSpace(0), (-1, 0), np.random.default_rng(2))


def test_explore_edges_sampled_once():
    m = SpreadOutModel(2, 2, 1.5)
    rng = np.random.default_rng(3)
    for _ in range(50):
        s = explore_cluster(m, Box.around_origin(2, 3), (0, 0), rng)
        keys = list(s.touched_edges)
        assert len(keys) == len(set(keys))
        for k in keys:
            a, b = tuple(k)
            assert 1 <= max(abs(u - v) for u, v in zip(a, b)) <= 2
        # sites are the open cluster of the touched edges
        adj = {x: [] for x in s.sites}
        for k, open_ in s.touched_edges.items():
            a, b = tuple(k)
            if open_:
                assert a in s.sites and b in s.sites
                adj[a].append(b)
                adj[b].append(a)
        seen, stack = {(0, 0)}, [(0, 0)]
        while stack:
            for y in adj[stack.pop()]:
                if y not in seen:
                    seen.add(y)
                    stack.append(y)
        assert seen == s.sites


@pytest.mark.parametrize("beta", [0.8, 2.0])
def test_mc_matches_enumeration(beta):
    m = SpreadOutModel(1, 2, beta)
    pts = [(i,) for i in range(-2, 3)]
    region = Sites(pts)
    g = FiniteGraph.induced(m, pts)
    n = 100_000
    res = explore_mc(m, region, (0,), n, seed=11, targets=pts)
    for j, y in enumerate(pts):
        exact = enumerate_connect_prob(g, None, (0,), y)
        freq = res.hits[:, j].mean()
        se = np.sqrt(max(exact * (1 - exact), 1e-12) / n)
        assert abs(freq - exact) <= 4 * se + 1e-12


def test_python_explorer_matches_enumeration():
    m = SpreadOutModel(1, 2, 1.2)
    pts = [(i,) for i in range(-1, 3)]
    g = FiniteGraph.induced(m, pts)
    exact = enumerate_connect_prob(g, None, (0,), (2,))
    rng = np.random.default_rng(5)
    n = 20_000
    freq = np.mean([(2,) in explore_cluster(m, Sites(pts), (0,), rng).sites for _ in range(n)])
    assert abs(freq - exact) <= 4 * np.sqrt(exact * (1 - exact) / n)


def test_disjoint_examples():
    c4 = FiniteGraph(((0,), (1,), (2,), (3,)),
                     (((0,), (1,)), ((1,), (2,)), ((2,), (3,)), ((3,), (0,))), (0.5,) * 4)
    assert disjoint_occurrence_pair(c4, 0b1111, ((0,), (2,)), ((0,), (2,)))
    e = FiniteGraph(((0,), (1,)), (((0,), (1,)),), (0.5,))
    assert not disjoint_occurrence_pair(e, 1, ((0,), (1,)), ((0,), (1,)))
    path = FiniteGraph(((0,), (1,), (2,)), (((0,), (1,)), ((1,), (2,))), (0.5, 0.5))
    assert disjoint_occurrence_pair(path, 0b11, ((0,), (1,)), ((1,), (2,)))


def test_multi_examples():
    star = FiniteGraph(((0,), (1,), (2,), (3,)),
                       (((0,), (1,)), ((0,), (2,)), ((0,), (3,))), (0.5,) * 3)
    u, a, b, o = (0,), (1,), (2,), (3,)
    assert disjoint_occurrence_multi(star, 0b111, [(o, u), (u, a), (u, b)])
    assert not disjoint_occurrence_multi(star, 0b011, [(o, u), (u, a), (u, b)])
    assert disjoint_occurrence_multi(star, 0, [(u, u), (a, a), (b, b)])
    with pytest.raises(UsageError):
        disjoint_occurrence_multi(star, 0, [(u, u)] * 4)


@given(graphs(), st.data())
def test_multi_agrees_with_pair(g, data):
    sites = g.sites
    ev = st.tuples(st.sampled_from(sites), st.sampled_from(sites))
    e1, e2 = data.draw(ev), data.draw(ev)
    for c in range(2 ** g.n_edges):
        assert disjoint_occurrence_pair(g, c, e1, e2) == disjoint_occurrence_multi(g, c, [e1, e2])


@given(graphs(max_edges=10), st.data())
def test_bk_exact(g, data):
    sites = g.sites
    ev = st.tuples(st.sampled_from(sites), st.sampled_from(sites))
    e1, e2 = data.draw(ev), data.draw(ev)
    pa = enumerate_connect_prob(g, None, *e1)
    pb = enumerate_connect_prob(g, None, *e2)
    pab = disjoint_probability(g, e1, e2)
    brute = sum(config_weight(g, c) for c in range(2 ** g.n_edges) if disjoint_occurrence_pair(g, c, e1, e2))
    assert pab == pytest.approx(brute, abs=1e-12)
    assert pab <= pa * pb + 1e-9


@given(graphs(), st.data())
def test_region_monotone(g, data):
    sites = list(g.sites)
    x, y = data.draw(st.sampled_from(sites)), data.draw(st.sampled_from(sites))
    big = data.draw(st.sets(st.sampled_from(sites))) | {x, y}
    small = data.draw(st.sets(st.sampled_from(sorted(big)))) | {x, y}
    assert enumerate_connect_prob(g, Sites(small), x, y) <= enumerate_connect_prob(g, Sites(big), x, y) + 1e-15


@given(st.integers(1, 2), st.floats(0.05, 3.0), st.floats(0.01, 1.0))
def test_beta_monotone(L, beta, delta):
    pts = [(i,) for i in range(4)]
    lo = connectivity_matrix(FiniteGraph.induced(SpreadOutModel(1, L, beta), pts))
    hi = connectivity_matrix(FiniteGraph.induced(SpreadOutModel(1, L, beta + delta), pts))
    assert np.all(lo <= hi + 1e-12)


@given(graphs())
def test_weights_sum_to_one(g):
    t = ConfigTable(g)
    assert t.weights.sum() == pytest.approx(1.0, abs=1e-12)
