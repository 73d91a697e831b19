import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from spreadperc import randwalk as R
from spreadperc.errors import UsageError
from spreadperc.lattice import SpreadOutModel, linf

TWO_STEP = R.StepDistribution.tabulated({(1,): 0.3, (-1,): 0.3, (2,): 0.2, (-2,): 0.2})


# --- step laws ------------------------------------------------------------


@given(st.integers(1, 3), st.integers(1, 4))
def test_uniform_spread_support_and_sigma(d, L):
    s = R.uniform_spread(d, L)
    assert abs(s.masses.sum() - 1) < 1e-12
    norms = np.abs(s.offsets).max(1)
    assert norms.min() == 1 and norms.max() == L
    assert len(s.offsets) == (2 * L + 1) ** d - 1
    closed = d * (2 * L + 1) ** (d - 1) * sum(j * j for j in range(-L, L + 1)) / ((2 * L + 1) ** d - 1)
    assert s.sigma2() == pytest.approx(closed, rel=1e-12)
    assert s.is_symmetric()


@given(st.integers(1, 3), st.integers(1, 4))
def test_pm_family_in_class(d, m):
    for name, s in R.pm_family(d, m).items():
        assert s.in_class(m), name
        assert m * m - 1e-12 <= s.sigma2() <= 4 * d * m * m + 1e-12


def test_step_validation():
    with pytest.raises(UsageError):
        R.StepDistribution.tabulated({(1,): 0.5, (-1,): 0.4})
    with pytest.raises(UsageError):
        R.StepDistribution.tabulated({(1,): 1.5, (-1,): -0.5})
    with pytest.raises(UsageError):
        R.StepDistribution.tabulated({})


def test_asymmetric_law_detected():
    s = R.StepDistribution.tabulated({(1, 0): 0.5, (0, 2): 0.5})
    assert not s.is_symmetric() and not s.in_class(1)


# --- rescaled law -----------------------------------------------------------


@pytest.mark.parametrize("d,L", [(1, 2), (2, 1), (2, 3)])
def test_rescaled_m1_is_uniform(d, L):
    mu = R.rescaled_step(SpreadOutModel(d, L, 0.9), 1)
    assert mu.as_dict() == pytest.approx(R.uniform_spread(d, L).as_dict(), abs=1e-15)


def test_rescaled_beta_zero_is_degenerate():
    with pytest.raises(UsageError):
        R.rescaled_step(SpreadOutModel(2, 1, 0.0), 2)


def test_rescaled_m2_symmetric_and_in_class():
    model = SpreadOutModel(2, 1, 0.7)
    mu = R.rescaled_step(model, 2, method="exact")
    table = mu.as_dict()
    for v, w in table.items():
        assert abs(table[tuple(-c for c in v)] - w) < 1e-9
        assert abs(table[(v[1], v[0])] - w) < 1e-9
        assert abs(table[(-v[0], v[1])] - w) < 1e-9
    assert mu.in_class(2)
    assert 4 <= mu.sigma2() <= 32
    mc = R.rescaled_step(model, 2, method="mc", n=200_000, seed=1)
    other = mc.as_dict()
    assert max(abs(other.get(v, 0.0) - w) for v, w in table.items()) < 1e-3


# --- walks ------------------------------------------------------------------


def test_walk_sample_horizon_checked():
    with pytest.raises(UsageError):
        R.walk_sample(R.uniform_spread(1, 1), (0,), R.ExitBox(3), 0, np.random.default_rng(0))


def test_uniform_steps_in_support():
    s = R.uniform_spread(3, 2)
    steps = s.sample(np.random.default_rng(0), 5000)
    n = np.abs(steps).max(1)
    assert n.min() >= 1 and n.max() <= 2


def test_first_step_second_moment():
    s = R.uniform_spread(2, 3)
    idx, fin = R.walk_batch(s, (0, 0), R.ExitBox(0), 1, 40_000, seed=2)
    assert (idx == 1).all()
    sq = (fin.astype(float) ** 2).sum(1)
    assert abs(sq.mean() - s.sigma2()) < 3 * sq.std(ddof=1) / math.sqrt(len(sq))


def test_stopping_conventions():
    s = R.uniform_spread(1, 1)
    rng = np.random.default_rng(3)
    assert R.walk_sample(s, (5,), R.ExitBox(2), 10, rng).index == 0
    assert R.walk_sample(s, (4,), R.Hit((4,)), 10, rng).index == 0
    # exits of the half-space are counted from index 1
    assert R.walk_sample(s, (-3,), R.ExitHalfSpace(0), 10, rng).index == 1
    mask = R.stop_mask(R.HitLevel(2), np.array([[5], [1], [2]]))
    assert mask.tolist() == [False, False, True]


def test_occupation_counts_indices_before_stop():
    s = R.uniform_spread(2, 1)
    rng = np.random.default_rng(4)
    for _ in range(20):
        w = R.walk_sample(s, (0, 0), R.ExitBox(3), 10 ** 6, rng, occupation=True)
        assert w.stopped and sum(w.occupation.values()) == w.index
        assert all(linf(p) <= 3 for p in w.occupation)
        assert linf(w.final) > 3


def test_walk_sample_agrees_with_batch():
    s = R.uniform_spread(2, 1)
    rng = np.random.default_rng(5)
    a = np.array([R.walk_sample(s, (0, 0), R.ExitBox(4), 10 ** 6, rng).index for _ in range(3000)], float)
    b, _ = R.walk_batch(s, (0, 0), R.ExitBox(4), 10 ** 6, 20_000, seed=5)
    se = math.hypot(a.std() / math.sqrt(len(a)), b.std() / math.sqrt(len(b)))
    assert abs(a.mean() - b.mean()) < 4 * se


# --- Green function ---------------------------------------------------------


def brute_green(step, W, M, x):
    """Dense solve on {0..W} x (Z/M)^(d-1), walk killed outside the strip."""
    d = step.d
    lat = list(itertools.product(range(M), repeat=d - 1))
    states = [(a,) + l for a in range(W + 1) for l in lat]
    index = {s: i for i, s in enumerate(states)}
    Q = np.zeros((len(states), len(states)))
    for s, i in index.items():
        for o, w in zip(step.offsets, step.masses):
            y0 = s[0] + int(o[0])
            if 0 <= y0 <= W:
                t = (y0,) + tuple((c + int(oc)) % M for c, oc in zip(s[1:], o[1:]))
                Q[i, index[t]] += w
    G = np.linalg.inv(np.eye(len(states)) - Q)
    return G[index[(0,) * d], index[(x[0],) + tuple(c % M for c in x[1:])]]


@pytest.mark.parametrize("step,W,M,xs", [
    (TWO_STEP, 12, 1, [(0,), (1,), (5,), (12,)]),
    (R.uniform_spread(2, 1), 6, 8, [(0, 0), (1, 0), (2, 1), (3, -2)]),
    (R.pm_family(2, 1)["annulus"], 6, 10, [(0, 0), (2, 2), (4, -1)]),
])
def test_green_dp_matches_dense_solve(step, W, M, xs):
    res = R.halfspace_green_table(step, xs, window=W, lateral=M)
    for x, v in zip(xs, res.values):
        assert v == pytest.approx(brute_green(step, W, M, x), rel=1e-9, abs=1e-12)


def test_green_outside_halfspace_is_zero():
    e = R.halfspace_green(R.uniform_spread(3, 1), (-1, 0, 0))
    assert e.value == 0.0 and e.std_error == 0.0


def test_green_dp_vs_mc_d2():
    s = R.uniform_spread(2, 1)
    dp = R.halfspace_green(s, (1, 0), window=16)
    mc = R.halfspace_green(s, (1, 0), method="mc", n=40_000, window=16, seed=6)
    assert mc.within(dp.value)


def test_green_leakage_guard():
    s = R.uniform_spread(2, 1)
    with pytest.raises(UsageError):
        R.halfspace_green(s, (1, 0), window=8, leakage_tol=1e-9)
    res = R.halfspace_green_table(s, [(2, 0)], window=32)
    assert 0 < res.far_exit < 1


def test_green_dp_dimension_guard():
    with pytest.raises(UsageError):
        R.halfspace_green_table(R.uniform_spread(4, 1), [(0, 0, 0, 0)], window=4)


# --- gambler's ruin and exit probabilities ---------------------------------


@pytest.mark.parametrize("k", [1, 3, 10])
def test_ruin_mc_vs_exact(k):
    s = R.uniform_spread(2, 2)
    ex = R.gamblers_ruin_exact(s, k)
    mc = R.gamblers_ruin(s, k, 40_000, seed=k)
    assert 0 <= mc.value <= 1 and mc.within(ex)


def test_ruin_simple_walk_closed_form():
    # nearest-neighbour projection (lazy or not): absorbed at -1 or k from 0, so 1/(k+1)
    for step in (R.uniform_spread(2, 1), R.StepDistribution.tabulated({(1,): 0.5, (-1,): 0.5})):
        for k in (1, 4, 9):
            assert R.gamblers_ruin_exact(step, k) == pytest.approx(1 / (k + 1), rel=1e-12)


def test_ruin_far_level_small():
    e = R.gamblers_ruin(R.uniform_spread(2, 1), 10_000, 100_000, seed=7)
    assert e.value + 4 * e.std_error < 1e-2


def test_exit_probability_horizons():
    s = R.uniform_spread(2, 1)
    hs = [10, 100, 1000, 10_000, 100_000]
    est = R.exit_probability_finite(s, 0, hs, 40_000, seed=8)
    vals = [e.value for e in est]
    assert vals == sorted(vals) and all(v <= 1 for v in vals)
    deficit = np.array([1 - v for v in vals])
    assert deficit[-1] < 0.01
    # recurrence: the survival probability decays like h^(-1/2)
    slope = np.polyfit(np.log(hs[1:]), np.log(deficit[1:]), 1)[0]
    assert abs(slope + 0.5) < 0.1


# --- exit times ---------------------------------------------------------------


def test_exit_time_exact_vs_mc():
    s = R.uniform_spread(1, 2)
    ex = R.exit_time_exact_1d(s, 10)
    assert ex[10] == pytest.approx(50.943, abs=1e-3)
    mc = R.exit_time_box(s, 10, 20_000, seed=9)
    assert mc.within(ex[10])


def test_exit_time_conventions():
    s = R.pm_family(2, 2)["annulus"]
    assert R.exit_time_box(s, 3, 10, start=(5, 0)).value == 0.0
    with pytest.raises(UsageError):
        R.exit_time_box(s, 1, 10)


def test_exit_time_bound_small_grid():
    for d in (1, 2):
        for name, s in R.pm_family(d, 2).items():
            for n in (2, 8):
                e = R.exit_time_box(s, n, 4000, seed=10)
                assert e.value <= R.exit_time_bound(d, n, 2) + 4 * e.std_error, (d, name, n)


# --- Harnack ----------------------------------------------------------------


def test_harnack_constant_weight():
    s = R.pm_family(2, 2)["annulus"]
    rep = R.harnack_ratio(s, 8, 0.5, f=[("one", lambda y, Rr: np.ones(len(y)))], N=500, seed=1)
    assert rep.ratio == 1.0


def test_harnack_symmetric_starts():
    s = R.pm_family(2, 2)["annulus"]
    f = [("x-faces", lambda y, Rr: np.abs(y[:, 0]) > Rr)]
    rep = R.harnack_ratio(s, 8, 0.5, f=f, N=20_000, starts=[(8, 0), (-8, 0)], seed=2)
    assert abs(rep.ratio - 1) < 4 * rep.ratio_se


def test_harnack_rejects_far_starts():
    with pytest.raises(UsageError):
        R.harnack_ratio(R.uniform_spread(2, 1), 4, 0.5, starts=[(5, 0)])


# --- coupling ---------------------------------------------------------------


def test_coupling_same_start():
    e = R.ornstein_coupling(2, 4, (1, 1), (1, 1), 10)
    assert e.value == 0.0 and e.std_error == 0.0


def test_one_step_tv_examples():
    assert R.one_step_tv(1, 2, (1,), (0,)) == pytest.approx(0.5)
    assert R.one_step_tv(2, 3, (0, 0), (0, 0)) == 0.0
    assert R.one_step_tv(1, 1, (3,), (0,)) == pytest.approx(1.0)


@pytest.mark.parametrize("mode", ["proof", "greedy"])
def test_one_step_maximal_coupling(mode):
    e = R.ornstein_coupling(1, 2, (1,), (0,), 1, N=10_000, mode=mode, seed=3)
    assert abs(e.value - R.one_step_tv(1, 2, (1,), (0,))) < 3 * e.std_error


def test_coupling_domain():
    with pytest.raises(UsageError):
        R.ornstein_coupling(1, 2, (5,), (0,), 3)
    with pytest.raises(UsageError):
        R.ornstein_coupling(1, 2, (1,), (0,), 0)


def t_step_law(d, L, start, T):
    """Exact law of the uniform walk after T steps, by repeated convolution."""
    law = {tuple(start): 1.0}
    step = R.uniform_spread(d, L).as_dict()
    for _ in range(T):
        nxt = {}
        for x, w in law.items():
            for o, q in step.items():
                y = tuple(a + b for a, b in zip(x, o))
                nxt[y] = nxt.get(y, 0.0) + w * q
        law = nxt
    return law


@pytest.mark.parametrize("d,L,u,T,kappa,mode", [
    (1, 3, (2,), 3, 0.4, "proof"),
    (1, 3, (2,), 3, 0.4, "greedy"),
    (2, 2, (2, 1), 2, 0.5, "proof"),
    (2, 2, (2, 1), 2, 1.0, "greedy"),
])
def test_coupled_marginals_exact(d, L, u, T, kappa, mode):
    v = (0,) * d
    N = 40_000
    pa, pb = R.coupled_marginals(d, L, u, v, T, N, kappa, mode, seed=4)
    for pos, start in ((pa, u), (pb, v)):
        law = t_step_law(d, L, start, T)
        keys = sorted(law)
        idx = {k: i for i, k in enumerate(keys)}
        obs = np.zeros(len(keys))
        for row in pos:
            obs[idx[tuple(int(c) for c in row)]] += 1
        exp = np.array([law[k] for k in keys]) * N
        assert stats.chisquare(obs, exp).pvalue > 1e-3


def test_coupling_threshold():
    assert R.coupling_threshold(4, 0.125) == 1
    assert R.coupling_threshold(64, 0.125) == 8


def test_calibration_doubles():
    T, est = R.calibrate_coupling_time(1, 2, (1,), (0,), target=0.3, N=4000, kappa=1.0, mode="greedy", seed=5)
    assert est.value <= 0.3 and T & (T - 1) == 0
    with pytest.raises(UsageError):
        R.calibrate_coupling_time(1, 2, (1,), (0,), target=0.0, N=200, T_max=2, seed=5)
