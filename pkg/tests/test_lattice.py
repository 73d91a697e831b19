import itertools
import math

import pytest
from hypothesis import given, strategies as st

from spreadperc.errors import UsageError
from spreadperc.lattice import (
    INF,
    Box,
    Full,
    GeneralizedBlock,
    HalfSpace,
    Sites,
    SpreadOutModel,
    Torus,
    add,
    as_block,
    edge_probability,
    in_boundary,
    k_boundary,
    kernel,
    linf,
    neg,
    origin,
    region_boundary_distance,
    region_membership,
    spread_out_neighborhood,
    sub,
    unit,
)

points = st.integers(1, 4).flatmap(lambda d: st.tuples(*[st.integers(-20, 20)] * d))


def test_kernel_examples():
    assert kernel(SpreadOutModel(2, 1, 1.0), (0, 0), (1, 1)) == 1 / 8
    assert kernel(SpreadOutModel(2, 1, 1.0), (3, 3), (3, 3)) == 0.0
    m7 = SpreadOutModel(7, 1, 1.0)
    count = sum(1 for s in itertools.product((-1, 0, 1), repeat=7) if any(s))
    assert kernel(m7, origin(7), unit(7)) == 1 / count == 1 / 2186


def test_kernel_dimension_mismatch():
    with pytest.raises(UsageError):
        kernel(SpreadOutModel(2, 1, 1.0), (0, 0), (1, 0, 0))


def test_edge_probability_examples():
    m = SpreadOutModel(2, 1, 1.0)
    assert edge_probability(m, (0, 0), (0, 1)) == pytest.approx(1 - math.exp(-1 / 8), abs=1e-15)
    assert round(edge_probability(m, (0, 0), (0, 1)), 6) == 0.117503
    assert edge_probability(m, (0, 0), (2, 0)) == 0.0
    assert edge_probability(SpreadOutModel(3, 2, 0.0), (0, 0, 0), (1, 0, 0)) == 0.0


def test_neighborhood_examples():
    assert sorted(spread_out_neighborhood(SpreadOutModel(1, 2, 1.0), (0,))) == [(-2,), (-1,), (1,), (2,)]
    assert len(list(spread_out_neighborhood(SpreadOutModel(2, 1, 1.0), (0, 0)))) == 8
    assert sum(1 for _ in spread_out_neighborhood(SpreadOutModel(7, 2, 1.0), origin(7))) == 5 ** 7 - 1


@pytest.mark.parametrize("d", range(1, 8))
@pytest.mark.parametrize("L", range(1, 9))
def test_kernel_normalization_grid(d, L):
    m = SpreadOutModel(d, L, 1.0)
    assert m.n_neighbors == (2 * L + 1) ** d - 1
    assert m.c_L * m.n_neighbors == pytest.approx(1.0, abs=1e-12)
    if m.n_neighbors < 20000:
        tot = math.fsum(kernel(m, origin(d), v) for v in spread_out_neighborhood(m, origin(d)))
        assert abs(tot - 1.0) < 1e-12


@given(st.integers(1, 3), st.integers(1, 3), st.data())
def test_kernel_symmetry_translation(d, L, data):
    m = SpreadOutModel(d, L, 0.7)
    pt = st.tuples(*[st.integers(-6, 6)] * d)
    u, v = data.draw(pt), data.draw(pt)
    assert kernel(m, u, v) == kernel(m, v, u) == kernel(m, origin(d), sub(v, u))
    r = linf(sub(u, v))
    assert (kernel(m, u, v) == m.c_L) == (1 <= r <= L)


@given(st.floats(0, 5), st.floats(1e-6, 5))
def test_p_beta_monotone(beta, delta):
    m = SpreadOutModel(3, 2, beta)
    q = m.with_beta(beta + delta)
    assert 0 <= m.p < 1
    assert q.p > m.p or q.p == m.p == 0 or q.p - m.p < 1e-15


@given(points)
def test_point_arithmetic(x):
    d = len(x)
    assert linf(x) >= 0
    assert (linf(x) == 0) == (x == origin(d))
    assert add(x, neg(x)) == origin(d)
    assert sub(x, x) == origin(d)


def test_point_dimension_mismatch():
    with pytest.raises(UsageError):
        add((1, 2), (1,))


@given(points, st.integers(0, 10))
def test_box_and_halfspace_membership(x, n):
    assert region_membership(Box.around_origin(len(x), n), x) == (linf(x) <= n)
    assert region_membership(HalfSpace(n), x) == (x[0] >= -n)
    assert region_membership(Full(), x)


def test_generalized_block_contains_origin():
    with pytest.raises(UsageError):
        GeneralizedBlock((1, -2), (3, 2))
    b = GeneralizedBlock((-math.inf, -2), (0, math.inf))
    assert b.contains((0, 0)) and b.contains((-10 ** 6, 10 ** 6))
    assert b.bounds(2) == ([-INF, -2], [0, INF])


def test_torus():
    t = Torus(6)
    assert t.wrap((3, -4)) == (-3, 2)
    with pytest.raises(UsageError):
        Torus(5)


def test_boundary_distance_examples():
    assert region_boundary_distance(as_block(Box.around_origin(3, 5), 3), (0, 0, 0)) == 5
    h = GeneralizedBlock((0, -math.inf, -math.inf), (math.inf, math.inf, math.inf))
    assert region_boundary_distance(h, (3, 7, -2)) == 3
    b = GeneralizedBlock((-2, -math.inf), (math.inf, math.inf))
    assert region_boundary_distance(b, (-2, 0)) == 0
    assert in_boundary(b, (-2, 0))
    assert region_boundary_distance(as_block(Full(), 2), (4, 4)) == math.inf
    with pytest.raises(UsageError):
        region_boundary_distance(b, (-3, 0))


blocks = st.integers(1, 3).flatmap(
    lambda d: st.tuples(st.tuples(*[st.integers(-4, 0)] * d), st.tuples(*[st.integers(0, 4)] * d))
)


@given(blocks)
def test_k_boundary_partitions_block(ab):
    lo, hi = ab
    b = GeneralizedBlock(lo, hi)
    d = len(lo)
    layers = {}
    for k in range(0, 5):
        for x in k_boundary(b, k, d):
            assert x not in layers
            layers[x] = k
    all_pts = set(itertools.product(*(range(a, c + 1) for a, c in zip(lo, hi))))
    assert set(layers) == all_pts
    for x, k in layers.items():
        assert (k == 0) == in_boundary(b, x)


def test_sites_region():
    s = Sites([(0, 0), (1, 0)])
    assert s.contains((1, 0)) and not s.contains((0, 1))
    assert s.finite
