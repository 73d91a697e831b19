"""Estimators for two-point functions, phi, psi, sharp lengths and related sums.

Monte Carlo estimators are built on cluster functionals: one exploration of
the cluster of the origin yields every term of a sum over sites at once
(the number of cluster sites on a face, the number of exits from a region,
and so on). Exact counterparts enumerate edge configurations of the finite
graph induced on a small region.

All Monte Carlo routines take a ``seed`` that may be an int or an
:class:`~spreadperc.rng.RngStream`; results are reproducible for a fixed
seed regardless of the worker count.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import _engine as E
from .errors import CapacityError, CensoringError, UsageError
from .lattice import (
    INF,
    Box,
    Full,
    HalfSpace,
    Sites,
    SpreadOutModel,
    as_point,
    box_points,
    linf,
    origin,
    region_dim,
    sub,
    unit,
)
from .percolation import ConfigTable, FiniteGraph, MAX_TABLE_EDGES
from .rng import RngStream, as_stream, block_sizes, fold_tasks, run_tasks

DEFAULT_CAP = 1_000_000
REFUSE_RATE = 1e-2
FLAG_RATE = 1e-3
E2 = math.exp(-2.0)
DEFAULT_EPS = 1.0 - E2


@dataclass(frozen=True)
class Estimate:
    value: float
    std_error: float
    n_samples: int
    truncation: object = None
    censored_rate: float = 0.0

    def within(self, other: float, n_se: float = 4.0) -> bool:
        return abs(self.value - other) <= n_se * self.std_error + 1e-15

    @classmethod
    def exact(cls, value: float, truncation=None) -> "Estimate":
        return cls(float(value), 0.0, 0, truncation, 0.0)


def _mean_se(s: float, sq: float, n: int) -> tuple[float, float]:
    if n <= 0:
        return math.nan, math.nan
    m = s / n
    if n == 1:
        return m, 0.0
    var = max(sq / n - m * m, 0.0) * n / (n - 1)
    return m, math.sqrt(var / n)


def _check_censoring(rate: float, what: str):
    if rate > REFUSE_RATE:
        raise CensoringError(f"{what}: censored rate {rate:.3g} exceeds {REFUSE_RATE}", rate)


# --------------------------------------------------------------------------
# Parallel batches of the compiled kernels


def _explore_task(args):
    stream, n, params = args
    return E.explore_batch(stream.generator(), n, *params)


def _nested_task(args):
    stream, n, params = args
    return E.nested_batch(stream.generator(), n, *params)


@dataclass
class ExploreResult:
    sizes: np.ndarray
    capped: np.ndarray
    exits: np.ndarray
    hits: np.ndarray
    hist: tuple
    face: tuple

    @property
    def n(self) -> int:
        return len(self.sizes)

    @property
    def n_ok(self) -> int:
        return int(self.n - self.capped.sum())

    @property
    def censored_rate(self) -> float:
        return float(self.capped.mean()) if self.n else 0.0

    def ok(self) -> np.ndarray:
        return self.capped == 0


def explore_mc(model: SpreadOutModel, region, start, n: int, seed, cap: int = DEFAULT_CAP,
               targets=None, r_hist: int = 0, face: int | None = None, r_face: int = 0,
               workers: int | None = None) -> ExploreResult:
    """Run ``n`` explorations from ``start`` in ``region`` and merge block results."""
    d = model.d
    start = as_point(start)
    if len(start) != d:
        raise UsageError("start point has wrong dimension")
    if not region.contains(start):
        raise UsageError("start point must lie in the region")
    if isinstance(region, E.Torus) and region.side <= 2 * model.L:
        raise UsageError("torus side must exceed 2L")
    lo, hi, ts, mask, mshape = E.encode_region(region, d)
    tg = np.zeros((0, d), np.int64) if targets is None or len(targets) == 0 else np.array(targets, np.int64).reshape(-1, d)
    params = (d, model.L, model.p, np.array(start, np.int64), lo, hi, ts, mask, mshape, int(cap),
              tg, int(r_hist), 0 if face is None else int(face), face is not None, int(r_face))
    stream = as_stream(seed)
    tasks = [(stream.child(i), b, params) for i, b in enumerate(block_sizes(n))]
    outs = run_tasks(_explore_task, tasks, workers)
    cat = lambda k: np.concatenate([o[k] for o in outs]) if outs else np.zeros(0)
    tot = lambda k: np.sum([o[k] for o in outs], axis=0) if outs else None
    return ExploreResult(cat(0), cat(1), cat(2),
                         np.concatenate([o[3] for o in outs]) if outs else np.zeros((0, len(tg)), np.uint8),
                         tuple(tot(k) for k in (4, 5, 6, 7)), tuple(tot(k) for k in (8, 9, 10, 11)))


def nested_mc(model: SpreadOutModel, halfspace: bool, K: int, n: int, seed, cap: int = DEFAULT_CAP,
              workers: int | None = None):
    """Per-stage sums from the nested kernel, merged over blocks."""
    params = (model.d, model.L, model.p, bool(halfspace), int(K), int(cap))
    stream = as_stream(seed)
    tasks = [(stream.child(i), b, params) for i, b in enumerate(block_sizes(n))]
    outs = run_tasks(_nested_task, tasks, workers)
    return tuple(np.sum([o[k] for o in outs], axis=0) for k in range(5))


# --------------------------------------------------------------------------
# Finite substrates


def region_points(region, d: int) -> list:
    if isinstance(region, Sites):
        return sorted(region.points)
    if not region.finite:
        raise UsageError("exact methods need a finite region")
    lo, hi = region.bounds(d)
    return [x for x in box_points(lo, hi) if region.contains(x)]


def substrate(model: SpreadOutModel, region) -> FiniteGraph:
    """The finite graph induced by the model on the points of a finite region."""
    return FiniteGraph.induced(model, region_points(region, model.d))


def exits_count(model: SpreadOutModel, region, y) -> int:
    """Number of z with 1 <= |z - y| <= L outside ``region``."""
    lo, hi, ts, mask, mshape = E.encode_region(region, model.d)
    nbd = (2 * model.L + 1) ** model.d
    return int(E._count_out(np.array(y, np.int64), model.d, model.L, lo, hi, ts, mask, mshape,
                            nbd, np.empty(model.d, np.int64)))


# --------------------------------------------------------------------------
# Two-point function and phi


def two_point(model: SpreadOutModel, region, x, y, method: str = "mc", n: int = 100_000,
              seed=0, cap: int = DEFAULT_CAP, workers: int | None = None) -> Estimate:
    """P[x <-> y inside region]."""
    x, y = as_point(x), as_point(y)
    if not (region.contains(x) and region.contains(y)):
        raise UsageError("x and y must lie in the region")
    if x == y:
        return Estimate.exact(1.0)
    if model.beta == 0:
        return Estimate.exact(0.0)
    if method == "exact":
        g = substrate(model, region)
        t = ConfigTable(g, None)
        return Estimate.exact(t.prob(t.connected(g.index(x), g.index(y))))
    if method != "mc":
        raise UsageError(f"unknown method {method!r}")
    res = explore_mc(model, region, x, n, seed, cap, targets=[y], workers=workers)
    rate = res.censored_rate
    _check_censoring(rate, "two_point")
    h = res.hits[res.ok(), 0].astype(float)
    m, se = _mean_se(h.sum(), (h * h).sum(), len(h))
    return Estimate(m, se, len(h), None, rate)


def phi(model: SpreadOutModel, S, method: str = "mc", n: int = 100_000, seed=0,
        cap: int = DEFAULT_CAP, workers: int | None = None) -> Estimate:
    """Expected number of open exit pairs: sum_{y in S, z not in S} P[0 <-S-> y] p_yz.

    The exterior factor is counted geometrically for each cluster site, so
    the Monte Carlo version averages p times the exit count of the cluster.
    """
    o = origin(model.d)
    if not S.contains(o):
        raise UsageError("S must contain the origin")
    if model.beta == 0:
        return Estimate.exact(0.0)
    if method == "exact":
        pts = region_points(S, model.d)
        g = FiniteGraph.induced(model, pts)
        t = ConfigTable(g, None)
        i0 = g.index(o)
        tot = 0.0
        for j, y in enumerate(g.sites):
            tot += t.prob(t.connected(i0, j)) * exits_count(model, S, y)
        return Estimate.exact(tot * model.p)
    if method != "mc":
        raise UsageError(f"unknown method {method!r}")
    res = explore_mc(model, S, o, n, seed, cap, workers=workers)
    _check_censoring(res.censored_rate, "phi")
    ex = res.exits[res.ok()].astype(float) * model.p
    m, se = _mean_se(ex.sum(), (ex * ex).sum(), len(ex))
    return Estimate(m, se, len(ex), None, res.censored_rate)


def phi_singleton(model: SpreadOutModel) -> float:
    """phi({0}) = |Lambda_L^*| p_beta."""
    return model.n_neighbors * model.p


# --------------------------------------------------------------------------
# Half-space sums


def psi_both(model: SpreadOutModel, n: int, k: int, n_samples: int = 100_000, seed=0,
             cap: int = DEFAULT_CAP, workers: int | None = None) -> tuple[Estimate, Estimate]:
    """(psi(H_n), psi^[k](H_n)) from one batch of half-space explorations."""
    if n < 0 or k < 0:
        raise UsageError("n and k must be >= 0")
    if model.beta == 0:
        return Estimate.exact(0.0), Estimate.exact(0.0, truncation=k)
    res = explore_mc(model, HalfSpace(n), origin(model.d), n_samples, seed, cap,
                     face=-n, r_face=k, workers=workers)
    _check_censoring(res.censored_rate, "psi")
    fc_sum, fc_sq = res.face[2], res.face[3]
    full = Estimate(*_mean_se(fc_sum[-1], fc_sq[-1], res.n_ok), res.n_ok, None, res.censored_rate)
    part = Estimate(*_mean_se(fc_sum[k], fc_sq[k], res.n_ok), res.n_ok, k, res.censored_rate)
    return full, part


def psi(model: SpreadOutModel, n: int, n_samples: int = 100_000, seed=0, **kw) -> Estimate:
    """Expected number of cluster sites (other than 0) on the face {x_1 = -n} in H_n."""
    return psi_both(model, n, 0, n_samples, seed, **kw)[0]


def psi_k(model: SpreadOutModel, n: int, k: int, n_samples: int = 100_000, seed=0, **kw) -> Estimate:
    """As :func:`psi`, counting only face sites with |x| <= k."""
    return psi_both(model, n, k, n_samples, seed, **kw)[1]


def psi_profile(model: SpreadOutModel, n_max: int, n_samples: int = 100_000, seed=0,
                cap: int = DEFAULT_CAP, workers: int | None = None) -> list[Estimate]:
    """psi(H_n) for n = 0..n_max, all from the same configurations."""
    if model.beta == 0:
        return [Estimate.exact(0.0) for _ in range(n_max + 1)]
    n_ok, _, _, f_sum, f_sq = nested_mc(model, True, n_max, n_samples, seed, cap, workers)
    out = []
    for k in range(n_max + 1):
        rate = 1.0 - n_ok[k] / n_samples
        _check_censoring(rate, "psi_profile")
        out.append(Estimate(*_mean_se(f_sum[k], f_sq[k], int(n_ok[k])), int(n_ok[k]), k, rate))
    return out


def halfspace_phi_profile(model: SpreadOutModel, n_max: int, n_samples: int = 100_000, seed=0,
                          cap: int = DEFAULT_CAP, workers: int | None = None) -> list[Estimate]:
    """phi(H_n) for n = 0..n_max from one set of configurations."""
    if model.beta == 0:
        return [Estimate.exact(0.0) for _ in range(n_max + 1)]
    n_ok, e_sum, e_sq, _, _ = nested_mc(model, True, n_max, n_samples, seed, cap, workers)
    p = model.p
    return [Estimate(*(p * v for v in _mean_se(e_sum[k], e_sq[k], int(n_ok[k]))), int(n_ok[k]), k,
                     1.0 - n_ok[k] / n_samples) for k in range(n_max + 1)]


# --------------------------------------------------------------------------
# Sharp length


@dataclass(frozen=True)
class Unbounded:
    cap: int


@dataclass
class PhiProfile:
    beta: float
    family: str
    values: list

    def __post_init__(self):
        for e in self.values:
            if e.value < 0:
                raise UsageError("phi values must be nonnegative")


@dataclass
class SharpLength:
    beta: float
    value: object
    epsilon: float = DEFAULT_EPS
    interpolated: float = math.nan
    ambiguous: bool = False
    profile: PhiProfile | None = None


def box_phi_profile(model: SpreadOutModel, K: int, n: int = 100_000, seed=0,
                    cap: int = DEFAULT_CAP, workers: int | None = None) -> PhiProfile:
    """phi(Lambda_k) for k = 0..K from one set of configurations."""
    if model.beta == 0:
        return PhiProfile(0.0, "box", [Estimate.exact(0.0, k) for k in range(K + 1)])
    n_ok, e_sum, e_sq, _, _ = nested_mc(model, False, K, n, seed, cap, workers)
    p = model.p
    vals = [Estimate.exact(phi_singleton(model), 0)]
    for k in range(1, K + 1):
        m, se = _mean_se(e_sum[k], e_sq[k], int(n_ok[k]))
        vals.append(Estimate(p * m, p * se, int(n_ok[k]), k, 1.0 - n_ok[k] / n))
    return PhiProfile(model.beta, "box", vals)


def sharp_length_from_profile(prof: PhiProfile, epsilon: float = DEFAULT_EPS, z: float = 2.0):
    """(k, interpolated, ambiguous) or (None, nan, False) if no k qualifies.

    The interpolated length places the crossing of log(phi) through
    log(1 - epsilon) linearly between k - 1 and k.
    """
    t = 1.0 - epsilon
    vals = prof.values
    for k in range(1, len(vals)):
        if vals[k].value <= t:
            prev, cur = vals[k - 1], vals[k]
            amb = cur.value + z * cur.std_error > t or prev.value - z * prev.std_error <= t
            if cur.value > 0 and prev.value > t:
                frac = (math.log(prev.value) - math.log(t)) / (math.log(prev.value) - math.log(cur.value))
            else:
                frac = 1.0
            return k, (k - 1) + frac, bool(amb)
    return None, math.nan, False


def sharp_length(model: SpreadOutModel, epsilon: float = DEFAULT_EPS, cap: int = 256,
                 n: int = 20_000, seed=0, site_cap: int = DEFAULT_CAP, k_start: int = 8,
                 workers: int | None = None) -> SharpLength:
    """Smallest k >= 1 with phi(Lambda_k) <= 1 - epsilon.

    The profile is computed up to K, doubling K until a crossing is found or
    K reaches ``cap``. If the confidence interval at the crossing straddles
    the threshold, the sample size is quadrupled once and the result flagged.
    """
    if cap < 1:
        raise UsageError("cap must be >= 1")
    if not (0.0 < epsilon < 1.0):
        raise UsageError("epsilon must lie in (0, 1)")
    if model.beta == 0:
        prof = PhiProfile(0.0, "box", [Estimate.exact(0.0, k) for k in range(2)])
        return SharpLength(0.0, 1, epsilon, 1.0 - 1.0, False, prof)
    stream = as_stream(seed)
    K = min(k_start, cap)
    attempt = 0
    while True:
        prof = box_phi_profile(model, K, n, stream.child("sharp", K, attempt), site_cap, workers)
        rate = max(e.censored_rate for e in prof.values)
        _check_censoring(rate, "sharp_length")
        k, interp, amb = sharp_length_from_profile(prof, epsilon)
        if k is None:
            if K >= cap:
                return SharpLength(model.beta, Unbounded(cap), epsilon, math.nan, False, prof)
            K = min(2 * K, cap)
            continue
        if amb and attempt == 0:
            attempt = 1
            n *= 4
            continue
        return SharpLength(model.beta, k, epsilon, interp, amb, prof)


# --------------------------------------------------------------------------
# beta_0 and related closed forms


def beta0(d: int, L: int) -> float:
    """Smallest beta with |Lambda_L^*| p_beta = 1, in closed form."""
    n = SpreadOutModel(d, L, 0.0).n_neighbors
    if n == 1:
        return math.inf
    return -n * math.log1p(-1.0 / n)


def beta0_bisect(d: int, L: int, xtol: float = 1e-14) -> float:
    """The same root found by bisection on phi_beta({0}) - 1."""
    f = lambda b: phi_singleton(SpreadOutModel(d, L, b)) - 1.0
    return optimize.bisect(f, 0.0, 4.0, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=400)


def kboundary_decay_constant(d: int) -> float:
    """|log(1 - 1/(4 d^2))| / (2 log 2)."""
    if d < 1:
        raise UsageError("d must be >= 1")
    return abs(math.log1p(-1.0 / (4 * d * d))) / (2 * math.log(2))


lemma27_constant = kboundary_decay_constant


# --------------------------------------------------------------------------
# Susceptibility, correlation length, windowed sums


def susceptibility(model: SpreadOutModel, n: int = 100_000, seed=0, cap: int = DEFAULT_CAP,
                   workers: int | None = None) -> Estimate:
    """Mean cluster size of the origin on the full lattice."""
    if model.beta == 0:
        return Estimate.exact(1.0)
    res = explore_mc(model, Full(), origin(model.d), n, seed, cap, workers=workers)
    _check_censoring(res.censored_rate, "susceptibility")
    s = res.sizes[res.ok()].astype(float)
    m, se = _mean_se(s.sum(), (s * s).sum(), len(s))
    return Estimate(m, se, len(s), None, res.censored_rate)


@dataclass
class ClusterProfile:
    """Susceptibility and l-infinity shell counts from one batch of explorations."""

    chi: Estimate
    shells: list
    windowed: list


def cluster_profile(model: SpreadOutModel, r_max: int, n: int = 100_000, seed=0,
                    cap: int = DEFAULT_CAP, workers: int | None = None) -> ClusterProfile:
    """Expected cluster-site counts on each shell {|x| = r} and inside each box Lambda_r."""
    res = explore_mc(model, Full(), origin(model.d), n, seed, cap, r_hist=r_max, workers=workers)
    _check_censoring(res.censored_rate, "cluster_profile")
    ok = res.ok()
    s = res.sizes[ok].astype(float)
    chi = Estimate(*_mean_se(s.sum(), (s * s).sum(), len(s)), len(s), None, res.censored_rate)
    h_sum, h_sq, hc_sum, hc_sq = res.hist
    shells = [Estimate(*_mean_se(h_sum[r], h_sq[r], res.n_ok), res.n_ok, r, res.censored_rate)
              for r in range(r_max + 1)]
    windowed = [Estimate(*_mean_se(hc_sum[r], hc_sq[r], res.n_ok), res.n_ok, r, res.censored_rate)
                for r in range(r_max + 1)]
    return ClusterProfile(chi, shells, windowed)


@dataclass
class Fit:
    slope: float
    slope_se: float
    intercept: float
    n_points: int


def loglog_fit(x, y, y_se=None) -> Fit:
    """Weighted least squares of log y against log x (weights from relative errors)."""
    return linear_fit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)),
                      None if y_se is None else np.asarray(y_se, float) / np.asarray(y, float))


def linear_fit(x, y, sigma=None) -> Fit:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if len(x) < 2:
        raise UsageError("a fit needs at least two points")
    w = None
    if sigma is not None:
        sigma = np.asarray(sigma, float)
        if np.all(sigma > 0):
            w = 1.0 / sigma
    if len(x) == 2:
        coef = np.polyfit(x, y, 1, w=w)
        return Fit(float(coef[0]), math.nan, float(coef[1]), 2)
    coef, cov = np.polyfit(x, y, 1, w=w, cov=True)
    return Fit(float(coef[0]), float(math.sqrt(cov[0, 0])), float(coef[1]), len(x))


def correlation_length(model: SpreadOutModel, fit_range=(1, 6), n: int = 100_000, seed=0,
                       cap: int = DEFAULT_CAP, workers: int | None = None) -> Estimate:
    """1 / slope of -log P[0 <-> n e_1] against n over ``fit_range`` (inclusive)."""
    if model.beta == 0:
        raise UsageError("correlation length is undefined at beta = 0")
    a, b = fit_range
    ns = list(range(a, b + 1))
    if not ns:
        raise UsageError("empty fit range")
    targets = [unit(model.d, 0, k) for k in ns]
    res = explore_mc(model, Full(), origin(model.d), n, seed, cap, targets=targets, workers=workers)
    _check_censoring(res.censored_rate, "correlation_length")
    h = res.hits[res.ok()].astype(float)
    g = h.mean(axis=0)
    if np.any(g <= 0):
        raise UsageError("two-point estimate vanished in the fit range; use more samples or a shorter range")
    g_se = np.sqrt(g * (1 - g) / len(h))
    fit = linear_fit(ns, -np.log(g), g_se / g)
    if fit.slope <= 0:
        raise UsageError("non-decaying two-point function in the fit range")
    xi = 1.0 / fit.slope
    return Estimate(xi, xi * xi * fit.slope_se if math.isfinite(fit.slope_se) else math.nan,
                    len(h), (a, b), res.censored_rate)


# --------------------------------------------------------------------------
# Triangle diagram


TABLE_LIMIT = 40_000_000


@dataclass
class TriangleResult:
    windows: tuple
    values: list
    increments: list
    n_pairs: int
    n_table: int
    censored_rate: float


def _gtable_task(args):
    stream, n, params, nclass = args
    counts = np.zeros(nclass, np.int64)
    ncap = E.gtable_fill(stream.generator(), n, *params, counts)
    return counts, ncap


def _pairs_task(args):
    stream, n, params, counts, n_table = args
    return E.triangle_pairs(stream.generator(), n, *params, counts, n_table)


def triangle_profile(model: SpreadOutModel, windows=(4, 8, 16), n_pairs: int = 2000,
                     n_table: int = 100_000, seed=0, cap: int = DEFAULT_CAP,
                     workers: int | None = None) -> TriangleResult:
    """Windowed triangle sums nabla_R = sum_{x,z in Lambda_R} G(x) G(z) G(x - z).

    G is a symmetry-class table built from ``n_table`` clusters; the outer
    sums come from ``n_pairs`` pairs of independent clusters. Increments
    between consecutive windows carry their own standard errors.
    """
    windows = tuple(sorted(int(r) for r in windows))
    if windows[0] < 1:
        raise UsageError("windows must be >= 1")
    d = model.d
    rmax = 2 * windows[-1]
    nclass = E.n_classes(d, rmax)
    if nclass > TABLE_LIMIT:
        raise CapacityError(f"two-point table with {nclass} classes exceeds {TABLE_LIMIT}")
    if model.beta == 0:
        vals = [Estimate.exact(1.0, r) for r in windows]
        incs = [Estimate.exact(1.0 if i == 0 else 0.0, r) for i, r in enumerate(windows)]
        return TriangleResult(windows, vals, incs, 0, 0, 0.0)
    stream = as_stream(seed)
    params = (d, model.L, model.p, int(cap), rmax)
    tstream = stream.child("table")
    blocks = block_sizes(n_table)

    def fold(acc, part):
        acc[0][:] += part[0]
        return acc[0], acc[1] + part[1]

    counts, ncap = fold_tasks(_gtable_task, [(tstream.child(i), b, params, nclass) for i, b in enumerate(blocks)],
                              fold, (np.zeros(nclass, np.int64), 0), workers)
    n_ok_table = n_table - ncap
    rate_t = ncap / n_table
    _check_censoring(rate_t, "triangle table")
    pstream = stream.child("pairs")
    pparams = (d, model.L, model.p, int(cap), np.array(windows, np.int64))
    pblocks = block_sizes(n_pairs, 100)
    outs = run_tasks(_pairs_task, [(pstream.child(i), b, pparams, counts, float(n_ok_table))
                                   for i, b in enumerate(pblocks)], workers)
    s_sum, s_sq, i_sum, i_sq = (np.sum([o[k] for o in outs], axis=0) for k in range(4))
    ndrop = int(sum(o[4] for o in outs))
    m = n_pairs - ndrop
    rate = max(rate_t, ndrop / n_pairs)
    _check_censoring(ndrop / n_pairs / 2, "triangle pairs")
    vals = [Estimate(*_mean_se(s_sum[i], s_sq[i], m), m, r, rate) for i, r in enumerate(windows)]
    incs = [Estimate(*_mean_se(i_sum[i], i_sq[i], m), m, r, rate) for i, r in enumerate(windows)]
    return TriangleResult(windows, vals, incs, m, n_ok_table, rate)


def triangle(model: SpreadOutModel, R: int, n_pairs: int = 2000, n_table: int = 100_000, seed=0,
             cap: int = DEFAULT_CAP, workers: int | None = None) -> tuple[Estimate, Estimate]:
    """(nabla_R, nabla_2R - nabla_R); the increment is the convergence diagnostic."""
    res = triangle_profile(model, (R, 2 * R), n_pairs, n_table, seed, cap, workers)
    return res.values[0], res.increments[1]


# --------------------------------------------------------------------------
# Error term of the reversed inequality


def error_term_from_tables(PS, PL, pmat, in_S, o: int, x: int) -> float:
    """Both sums of the reversed-inequality error from two-point tables.

    ``PS[a, b]`` is the two-point function inside S (zero unless both a, b
    lie in S), ``PL`` the one inside Lambda, ``pmat`` the edge probabilities,
    all indexed by the sites of Lambda. ``in_S`` masks S.
    """
    S = np.flatnonzero(in_S)
    Sc = np.flatnonzero(~in_S)
    if len(Sc) == 0:
        return 0.0
    A = PS[:, S]
    P = pmat[np.ix_(S, Sc)]
    B = PL[Sc, :]
    M = A @ P @ B
    Q = (A * A) @ (P * P) @ (B * B)
    PSo = PS[o]
    PLx = PL[:, x]
    t1 = np.einsum("u,uv,uv,v->", PSo[S], M[np.ix_(S, S)], PS[np.ix_(S, S)], PLx[S])
    t2 = np.einsum("u,uv,v->", PSo[S], (M * M - Q)[S, :], PLx)
    return float(t1 + t2)


def _edge_matrix(model: SpreadOutModel, pts) -> np.ndarray:
    arr = np.array(pts, np.int64)
    diff = np.abs(arr[:, None, :] - arr[None, :, :]).max(axis=2)
    return np.where((diff >= 1) & (diff <= model.L), model.p, 0.0)


def _two_point_tables_mc(model, region, pts, sources, n, stream, cap, workers):
    """Matrix of P[a <-> b inside region] for a in ``sources`` (row index into pts)."""
    nb = 20
    m = len(pts)
    tab = np.zeros((nb, m, m))
    cnt = np.ones((nb, m, 1))
    rate = 0.0
    for a in sources:
        if not region.contains(pts[a]):
            continue
        res = explore_mc(model, region, pts[a], n, stream.child(a), cap, targets=pts, workers=workers)
        rate = max(rate, res.censored_rate)
        ok = res.ok()
        h = res.hits.astype(float)
        idx = np.arange(res.n) * nb // res.n
        for b in range(nb):
            sel = ok & (idx == b)
            tab[b, a] = h[sel].sum(axis=0)
            cnt[b, a] = sel.sum()
    _check_censoring(rate, "two-point table")
    return tab, cnt, rate


def error_term(model: SpreadOutModel, S, Lam, o, x, method: str = "mc", n: int = 100_000, seed=0,
               cap: int = DEFAULT_CAP, workers: int | None = None) -> Estimate:
    """E(S, Lambda, o, x) on a finite Lambda.

    The Monte Carlo version tabulates every needed two-point factor from
    explorations out of each site (in S and in Lambda), plugs the tables
    into the two sums, and attaches a standard error from batch means of the
    plug-in value over 20 sub-batches.
    """
    d = model.d
    pts = region_points(Lam, d)
    index = {p: i for i, p in enumerate(pts)}
    o, x = as_point(o), as_point(x)
    if not S.contains(o):
        raise UsageError("o must lie in S")
    if o not in index or x not in index:
        raise UsageError("o and x must lie in Lambda")
    in_S = np.array([S.contains(p) for p in pts], bool)
    if S.finite and any(p not in index for p in region_points(S, d)):
        raise UsageError("S must be a subset of Lambda")
    if model.beta == 0:
        return Estimate.exact(0.0)
    pmat = _edge_matrix(model, pts)
    io, ix = index[o], index[x]
    if method == "exact":
        g = FiniteGraph.induced(model, pts)
        if g.n_edges > MAX_TABLE_EDGES:
            raise CapacityError("substrate too large for exact enumeration")
        PL = ConfigTable(g, None).matrix()
        PS = ConfigTable(g, Sites([p for p, s in zip(pts, in_S) if s])).matrix()
        PS = np.where(np.outer(in_S, in_S), PS, 0.0)
        return Estimate.exact(error_term_from_tables(PS, PL, pmat, in_S, io, ix))
    if method != "mc":
        raise UsageError(f"unknown method {method!r}")
    stream = as_stream(seed)
    Sreg = Sites([p for p, s in zip(pts, in_S) if s])
    Lreg = Sites(pts)
    tS, cS, rS = _two_point_tables_mc(model, Sreg, pts, np.flatnonzero(in_S), n, stream.child("S"), cap, workers)
    tL, cL, rL = _two_point_tables_mc(model, Lreg, pts, range(len(pts)), n, stream.child("L"), cap, workers)

    def plug(ts, cs, tl, cl):
        PS = ts / cs
        PL = tl / cl
        PL = 0.5 * (PL + PL.T)
        PS = 0.5 * (PS + PS.T)
        PS = np.where(np.outer(in_S, in_S), PS, 0.0)
        return error_term_from_tables(PS, PL, pmat, in_S, io, ix)

    value = plug(tS.sum(0), cS.sum(0), tL.sum(0), cL.sum(0))
    nb = len(cS)
    loo = np.array([plug(tS.sum(0) - tS[b], cS.sum(0) - cS[b], tL.sum(0) - tL[b], cL.sum(0) - cL[b])
                    for b in range(nb)])
    se = math.sqrt((nb - 1) / nb * ((loo - loo.mean()) ** 2).sum())
    return Estimate(value, se, n, None, max(rS, rL))


def error_amplitude(model: SpreadOutModel, B, R: int, n: int = 100_000, seed=0,
                    cap: int = DEFAULT_CAP, workers: int | None = None) -> Estimate:
    """The error amplitude E(B), with every lattice sum truncated to Lambda_R.

    Restricted factors (inside B) come from explorations in B out of each
    site of B within the window; full-space factors come from one table of
    P[0 <-> w] over Lambda_2R and translation invariance.
    """
    d = model.d
    if not B.contains(origin(d)):
        raise UsageError("B must contain the origin")
    if model.beta == 0:
        return Estimate.exact(0.0, truncation=R)
    pts = list(box_points([-R] * d, [R] * d))
    if len(pts) > 4000:
        raise CapacityError("window too large for the dense error-amplitude tables")
    index = {p: i for i, p in enumerate(pts)}
    in_B = np.array([B.contains(p) for p in pts], bool)
    stream = as_stream(seed)
    two_r = list(box_points([-2 * R] * d, [2 * R] * d))
    gres = explore_mc(model, Full(), origin(d), n, stream.child("G"), cap, targets=two_r, workers=workers)
    _check_censoring(gres.censored_rate, "error_amplitude")
    gh = gres.hits[gres.ok()].astype(float)
    nbt = 20
    gidx = np.arange(len(gh)) * nbt // len(gh)
    g_batches = np.array([gh[gidx == b].sum(axis=0) for b in range(nbt)])
    g_counts = np.array([(gidx == b).sum() for b in range(nbt)], float)
    arr = np.array(pts, np.int64)
    diff = arr[:, None, :] - arr[None, :, :]
    side = 4 * R + 1
    flat = np.zeros(diff.shape[:2], np.int64)
    for j in range(d):
        flat = flat * side + (diff[:, :, j] + 2 * R)
    Bpts = np.flatnonzero(in_B)
    tB, cB, rB = _two_point_tables_mc(model, B, pts, Bpts, n, stream.child("B"), cap, workers)
    pmat = _edge_matrix(model, pts)
    o = index[origin(d)]
    Sc = np.flatnonzero(~in_B)

    def plug(gsum, gcnt, tb, cb):
        G = (gsum / gcnt)[flat]
        PB = tb / cb
        PB = 0.5 * (PB + PB.T)
        PB = np.where(np.outer(in_B, in_B), PB, 0.0)
        A = PB[:, Bpts]
        P = pmat[np.ix_(Bpts, Sc)]
        Gz = G[Sc, :]
        M = A @ P @ Gz
        Q = (A * A) @ (P * P) @ (Gz * Gz)
        t1 = np.einsum("u,uv,uv->", PB[o, Bpts], M[np.ix_(Bpts, Bpts)], G[np.ix_(Bpts, Bpts)])
        t2 = np.einsum("u,uv->", PB[o, Bpts], (M * M - Q)[Bpts, :])
        return float(t1 + t2)

    gs, gc = g_batches.sum(0), g_counts.sum()
    value = plug(gs, gc, tB.sum(0), cB.sum(0))
    loo = np.array([plug(gs - g_batches[b], gc - g_counts[b], tB.sum(0) - tB[b], cB.sum(0) - cB[b])
                    for b in range(nbt)])
    se = math.sqrt((nbt - 1) / nbt * ((loo - loo.mean()) ** 2).sum())
    return Estimate(value, se, n, R, max(rB, gres.censored_rate))


# --------------------------------------------------------------------------
# Bootstrap conditions on finite grids


@dataclass
class BootstrapReport:
    C: float
    L: int
    beta: float
    ell1_holds: bool
    ell1_worst: tuple
    ellinf_holds: bool
    ellinf_worst: tuple
    ell1_margins: list = field(default_factory=list)
    ellinf_margins: list = field(default_factory=list)
    ambiguous: bool = False


def halfspace_bound(model: SpreadOutModel, C: float, x) -> float:
    L, d = model.L, model.d
    return C / L ** d * (L / max(L, abs(x[0]))) ** (d - 1)


def default_x_grid(d: int, L: int) -> list:
    grid = []
    for k in (0, 1, L, 2 * L, 4 * L):
        for lateral in (0, 1, L):
            x = [k] + [0] * (d - 1)
            if d > 1:
                x[1] = lateral
            if any(x):
                grid.append(tuple(x))
    return sorted(set(grid))


def bootstrap_check(model: SpreadOutModel, C: float, n_max: int = 8, x_grid=None, n: int = 100_000,
                    seed=0, cap: int = DEFAULT_CAP, workers: int | None = None) -> BootstrapReport:
    """Check the half-space l1 and pointwise conditions on finite grids.

    The l1 condition asks psi(H_k) < C / L for k = 0..n_max; the pointwise
    one asks P[0 <-H-> x] < (C / L^d) (L / (L v |x_1|))^(d-1) for x on the
    grid. Margins are (bound - value) / bound; an entry is ambiguous when
    the two-standard-error interval contains the bound.
    """
    if not C > 1:
        raise UsageError("C must exceed 1")
    d, L = model.d, model.L
    x_grid = default_x_grid(d, L) if x_grid is None else [as_point(x) for x in x_grid]
    for x in x_grid:
        if x[0] < 0 or not any(x):
            raise UsageError("grid points must lie in the half-space minus the origin")
    stream = as_stream(seed)
    psis = psi_profile(model, n_max, n, stream.child("psi"), cap, workers)
    b1 = C / L
    m1 = [(k, (b1 - e.value) / b1, e) for k, e in enumerate(psis)]
    amb = any(abs(e.value - b1) <= 2 * e.std_error and e.std_error > 0 for e in psis)
    if model.beta == 0:
        vals = [Estimate.exact(0.0) for _ in x_grid]
    else:
        res = explore_mc(model, HalfSpace(0), origin(d), n, stream.child("x"), cap, targets=x_grid, workers=workers)
        h = res.hits[res.ok()].astype(float)
        vals = [Estimate(*_mean_se(h[:, i].sum(), h[:, i].sum(), len(h)), len(h), None, res.censored_rate)
                for i in range(len(x_grid))]
    minf = []
    for x, e in zip(x_grid, vals):
        bd = halfspace_bound(model, C, x)
        minf.append((x, (bd - e.value) / bd, e))
        if e.std_error > 0 and abs(e.value - bd) <= 2 * e.std_error:
            amb = True
    w1 = min(m1, key=lambda t: t[1])
    winf = min(minf, key=lambda t: t[1])
    return BootstrapReport(C, L, model.beta, all(m > 0 for _, m, _ in m1), (w1[0], w1[2].value),
                           all(m > 0 for _, m, _ in minf), (winf[0], winf[2].value),
                           [(k, m) for k, m, _ in m1], [(x, m) for x, m, _ in minf], amb)


# --------------------------------------------------------------------------
# Pseudo-critical point


def censor_rate(model: SpreadOutModel, n: int, seed, cap: int = DEFAULT_CAP, stop_rate: float | None = None,
                workers: int | None = None) -> tuple[int, int]:
    """(capped, explored) over up to ``n`` full-lattice clusters.

    With ``stop_rate`` set, blocks stop once more than ``stop_rate * n``
    clusters were capped (the verdict "above" can no longer change).
    """
    stream = as_stream(seed)
    stop_after = n + 1 if stop_rate is None else int(math.floor(stop_rate * n)) + 1
    capped = explored = 0
    for i, b in enumerate(block_sizes(n)):
        k, m = E.capped_count(stream.child(i).generator(), b, model.d, model.L, model.p, int(cap),
                              stop_after - capped)
        capped += k
        explored += m
        if capped >= stop_after:
            break
    return capped, explored


@dataclass
class PseudoCritical:
    beta: float
    step: float
    lower: float
    upper: float
    n: int
    cap: int
    threshold: float


def pseudo_critical_beta(d: int, L: int, lower: float = 1.0, upper: float = 1.2, n: int = 20_000,
                         cap: int = DEFAULT_CAP, threshold: float = FLAG_RATE, tol: float = 1e-3,
                         seed=0) -> PseudoCritical:
    """Smallest beta whose censored rate at ``cap`` exceeds ``threshold``, by bisection.

    Every evaluation reuses the same random stream, so the verdict is a
    deterministic function of beta. Returns the upper end of the final
    bracket; ``step`` is the bracket width.
    """
    stream = as_stream(seed).child("betac")

    def above(b):
        k, _ = censor_rate(SpreadOutModel(d, L, b), n, stream, cap, threshold)
        return k > threshold * n

    if above(lower):
        raise UsageError("lower end of the bracket is already above threshold")
    while not above(upper):
        lower, upper = upper, upper + 2 * (upper - lower)
    a, b = lower, upper
    while b - a > tol:
        mid = 0.5 * (a + b)
        if above(mid):
            b = mid
        else:
            a = mid
    return PseudoCritical(b, b - a, a, b, n, cap, threshold)
