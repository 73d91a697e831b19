"""Spread-out random walks: Green functions, exit times, ruin and couplings.

Step laws are finite tables of integer offsets with masses. The uniform
spread-out law puts mass ``c_L`` on every nonzero offset of the box of
radius L. Rescaled laws come from restricted two-point functions of the
percolation model, and tabulated laws cover the rest of the class of
symmetric steps supported on an annulus ``Lambda_{2m} minus Lambda_{m-1}``.

Stopping conventions follow the stopping-time classes below: exits from a
half-space and level hits are looked for from index 1 on, box exits and point
hits from index 0 on. A start outside a box therefore exits at time 0.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .errors import ConsistencyError, UsageError
from .estimators import Estimate, _mean_se, explore_mc, exits_count, phi as phi_estimate
from .lattice import Box, SpreadOutModel, as_point, box_points, linf
from .percolation import MAX_TABLE_EDGES, ConfigTable, FiniteGraph
from .rng import as_stream, block_sizes, run_tasks

NORM_TOL = 1e-9
RESCALED_TOL = 1e-6
SEGMENT = 4096


# --------------------------------------------------------------------------
# Step distributions


@dataclass(frozen=True, eq=False)
class StepDistribution:
    """A finite step law: ``offsets[i]`` has mass ``masses[i]``."""

    kind: str
    d: int
    offsets: np.ndarray
    masses: np.ndarray
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        off = np.asarray(self.offsets, np.int64).reshape(-1, self.d)
        ms = np.asarray(self.masses, float)
        if len(off) != len(ms) or len(off) == 0:
            raise UsageError("offsets and masses must be nonempty and aligned")
        if (ms < 0).any():
            raise UsageError("masses must be nonnegative")
        if abs(ms.sum() - 1.0) > NORM_TOL:
            raise UsageError(f"masses sum to {ms.sum()!r}, not 1")
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "masses", ms)

    @classmethod
    def uniform_spread(cls, d: int, L: int) -> "StepDistribution":
        if d < 1 or L < 1:
            raise UsageError("need d >= 1 and L >= 1")
        off = np.array([s for s in itertools.product(range(-L, L + 1), repeat=d) if any(s)], np.int64)
        return cls("uniform", d, off, np.full(len(off), 1.0 / len(off)), {"L": L})

    @classmethod
    def tabulated(cls, support: dict) -> "StepDistribution":
        if not support:
            raise UsageError("empty support")
        pts = [as_point(p) for p in support]
        d = len(pts[0])
        if any(len(p) != d for p in pts):
            raise UsageError("support points of mixed dimension")
        return cls("tabulated", d, np.array(pts, np.int64), np.array(list(support.values()), float))

    def as_dict(self) -> dict:
        return {tuple(int(c) for c in o): float(m) for o, m in zip(self.offsets, self.masses)}

    def sigma2(self) -> float:
        """E|X_1|_2^2 by direct summation."""
        return float(np.sum(self.masses * (self.offsets ** 2).sum(1)))

    def radius(self) -> int:
        return int(np.abs(self.offsets).max())

    def projection(self, i: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Law of the i-th coordinate of one step, as (values, masses)."""
        vals, inv = np.unique(self.offsets[:, i], return_inverse=True)
        return vals, np.bincount(inv, weights=self.masses)

    def is_symmetric(self, tol: float = NORM_TOL) -> bool:
        """Invariance under coordinate permutations and sign flips."""
        table = self.as_dict()
        for perm in itertools.permutations(range(self.d)):
            for signs in itertools.product((1, -1), repeat=self.d):
                for o, m in table.items():
                    img = tuple(signs[k] * o[perm[k]] for k in range(self.d))
                    if abs(table.get(img, 0.0) - m) > tol:
                        return False
        return True

    def is_reflection_symmetric(self, axes=None, tol: float = NORM_TOL) -> bool:
        table = self.as_dict()
        for k in range(self.d) if axes is None else axes:
            for o, m in table.items():
                img = o[:k] + (-o[k],) + o[k + 1:]
                if abs(table.get(img, 0.0) - m) > tol:
                    return False
        return True

    def in_class(self, m: int) -> bool:
        """Membership in the annulus class of scale m (support and symmetry)."""
        nrm = np.abs(self.offsets[self.masses > 0]).max(1)
        return bool((nrm >= m).all() and (nrm <= 2 * m).all()) and self.is_symmetric()

    def cdf(self) -> np.ndarray:
        c = np.cumsum(self.masses)
        c[-1] = 1.0
        return c

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = np.minimum(np.searchsorted(self.cdf(), rng.random(size), side="right"), len(self.masses) - 1)
        return self.offsets[idx]


def uniform_spread(d: int, L: int) -> StepDistribution:
    return StepDistribution.uniform_spread(d, L)


def pm_family(d: int, m: int) -> dict:
    """A few members of the annulus class of scale m, keyed by name."""
    if m < 1:
        raise UsageError("m must be >= 1")
    out = {}
    axis = {}
    for k in range(d):
        for s in (1, -1):
            axis[tuple(s * m if j == k else 0 for j in range(d))] = 1.0 / (2 * d)
    out["axis"] = StepDistribution("tabulated", d, np.array(list(axis), np.int64), np.array(list(axis.values())),
                                   {"m": m, "name": "axis"})
    for name, keep in (("annulus", lambda r: m <= r <= 2 * m), ("inner", lambda r: r == m),
                       ("outer", lambda r: r == 2 * m)):
        pts = [p for p in box_points((-2 * m,) * d, (2 * m,) * d) if keep(linf(p))]
        out[name] = StepDistribution("tabulated", d, np.array(pts, np.int64), np.full(len(pts), 1.0 / len(pts)),
                                     {"m": m, "name": name})
    return out


def _symmetrize(table: dict, d: int) -> dict:
    """Average a function of points over signed coordinate permutations."""
    out = {}
    group = [(perm, signs) for perm in itertools.permutations(range(d))
             for signs in itertools.product((1, -1), repeat=d)]
    for p in table:
        if p in out:
            continue
        orbit = {tuple(signs[k] * p[perm[k]] for k in range(d)) for perm, signs in group}
        val = sum(table.get(q, 0.0) for q in orbit) / len(orbit)
        for q in orbit:
            out[q] = val
    return out


def rescaled_step(model: SpreadOutModel, m: int, method: str = "auto", n: int = 100_000, seed=0,
                  workers: int | None = None) -> StepDistribution:
    """Exit-position law of the cluster of the origin in Lambda_{m-1}.

    mu(v) is proportional to sum_w P[0 <-> w in Lambda_{m-1}] p_wv over v outside
    the box, normalized by phi(Lambda_{m-1}). The two-point table is exact
    when the induced graph is small enough, and sampled otherwise.
    """
    if m < 1:
        raise UsageError("m must be >= 1")
    d, L = model.d, model.L
    if model.beta == 0:
        raise UsageError("degenerate law: phi vanishes at beta = 0")
    box = Box.around_origin(d, m - 1)
    pts = list(box_points((-(m - 1),) * d, (m - 1,) * d))
    g = FiniteGraph.induced(model, pts)
    if method == "auto":
        method = "exact" if g.n_edges <= MAX_TABLE_EDGES else "mc"
    o = (0,) * d
    if method == "exact":
        t = ConfigTable(g, None)
        i0 = g.index(o)
        tp = {y: t.prob(t.connected(i0, j)) for j, y in enumerate(g.sites)}
        phi_ref = phi_estimate(model, box, method="exact").value
    elif method == "mc":
        res = explore_mc(model, box, o, n, seed, targets=pts, workers=workers)
        tp = dict(zip(pts, res.hits[res.ok()].mean(0)))
        phi_ref = None
    else:
        raise UsageError(f"unknown method {method!r}")
    tp = _symmetrize(tp, d)
    mu = {}
    p = model.p
    for w, t_w in tp.items():
        if t_w == 0.0:
            continue
        for s in itertools.product(range(-L, L + 1), repeat=d):
            v = tuple(a + b for a, b in zip(w, s))
            if any(s) and linf(v) > m - 1:
                mu[v] = mu.get(v, 0.0) + t_w * p
    total = sum(mu.values())
    if phi_ref is None:
        phi_ref = sum(t_w * exits_count(model, box, w) for w, t_w in tp.items()) * p
    if phi_ref <= 0:
        raise UsageError("degenerate law: phi vanishes")
    if abs(total / phi_ref - 1.0) > RESCALED_TOL:
        raise ConsistencyError(f"rescaled law normalization {total / phi_ref!r}")
    masses = np.array(list(mu.values())) / total
    return StepDistribution("rescaled", d, np.array(list(mu), np.int64), masses,
                            {"m": m, "L": L, "beta": model.beta, "phi": phi_ref, "method": method})


# --------------------------------------------------------------------------
# Stopping times


@dataclass(frozen=True)
class ExitHalfSpace:
    """tau = inf{k >= 1: X_k not in {x_1 >= -n}}."""

    n: int = 0


@dataclass(frozen=True)
class ExitBox:
    """tau = inf{k >= 0: X_k not in Lambda_n}."""

    n: int


@dataclass(frozen=True)
class Hit:
    """sigma = inf{k >= 0: X_k = x}."""

    x: tuple

    def __post_init__(self):
        object.__setattr__(self, "x", as_point(self.x))


@dataclass(frozen=True)
class HitLevel:
    """inf{k >= 1: first coordinate of X_k >= k}."""

    k: int


def _condition(stop, pts: np.ndarray) -> np.ndarray:
    if isinstance(stop, ExitHalfSpace):
        return pts[:, 0] < -stop.n
    if isinstance(stop, ExitBox):
        return np.abs(pts).max(1) > stop.n
    if isinstance(stop, Hit):
        return (pts == np.array(stop.x)).all(1)
    if isinstance(stop, HitLevel):
        return pts[:, 0] >= stop.k
    raise UsageError(f"unknown stopping rule {stop!r}")


def first_index(stop) -> int:
    return 1 if isinstance(stop, (ExitHalfSpace, HitLevel)) else 0


def stop_mask(stop, path: np.ndarray) -> np.ndarray:
    """Boolean mask of the indices of ``path`` (index 0 = start) at which ``stop`` may fire."""
    hit = _condition(stop, np.asarray(path).reshape(len(path), -1))
    hit[: first_index(stop)] = False
    return hit


def _stop_code(stop) -> tuple[int, int, np.ndarray]:
    if isinstance(stop, ExitHalfSpace):
        return 0, int(stop.n), np.zeros(1, np.int64)
    if isinstance(stop, ExitBox):
        return 1, int(stop.n), np.zeros(1, np.int64)
    if isinstance(stop, Hit):
        return 2, 0, np.array(stop.x, np.int64)
    if isinstance(stop, HitLevel):
        return 3, int(stop.k), np.zeros(1, np.int64)
    raise UsageError(f"unknown stopping rule {stop!r}")


@dataclass
class WalkSummary:
    stopped: bool
    index: int
    final: tuple
    occupation: dict | None = None


def walk_sample(step: StepDistribution, start, stop, horizon: int, rng: np.random.Generator,
                occupation: bool = False) -> WalkSummary:
    """Run one walk until ``stop`` fires or ``horizon`` steps are made.

    Occupation counts cover the indices before the stopping index (all
    indices 0..horizon when the walk is not stopped).
    """
    if horizon < 1:
        raise UsageError("horizon must be >= 1")
    start = as_point(start)
    if len(start) != step.d:
        raise UsageError("start point has wrong dimension")
    pos = np.array(start, np.int64)
    visits: dict = {}

    def record(pts):
        if occupation and len(pts):
            rows, cnt = np.unique(pts, axis=0, return_counts=True)
            for r, c in zip(rows, cnt):
                key = tuple(int(v) for v in r)
                visits[key] = visits.get(key, 0) + int(c)

    if first_index(stop) == 0 and _condition(stop, pos[None, :])[0]:
        return WalkSummary(True, 0, start, visits if occupation else None)
    record(pos[None, :])
    k = 0
    while k < horizon:
        seg = pos + np.cumsum(step.sample(rng, min(SEGMENT, horizon - k)), axis=0)
        hits = np.flatnonzero(_condition(stop, seg))
        if len(hits):
            j = int(hits[0])
            record(seg[:j])
            return WalkSummary(True, k + j + 1, tuple(int(c) for c in seg[j]), visits if occupation else None)
        record(seg)
        pos = seg[-1]
        k += len(seg)
    return WalkSummary(False, horizon, tuple(int(c) for c in pos), visits if occupation else None)


# --------------------------------------------------------------------------
# Compiled kernels


@nb.njit(cache=True)
def _draw(rng, cdf):
    i = np.searchsorted(cdf, rng.random(), side="right")
    return min(i, len(cdf) - 1)


@nb.njit(cache=True)
def _stopped(kind, param, target, pos, k):
    d = len(pos)
    if kind == 0:
        return k >= 1 and pos[0] < -param
    if kind == 1:
        for i in range(d):
            if abs(pos[i]) > param:
                return True
        return False
    if kind == 2:
        for i in range(d):
            if pos[i] != target[i]:
                return False
        return True
    return k >= 1 and pos[0] >= param


@nb.njit(cache=True)
def _walk_batch(rng, cdf, offs, start, kind, param, target, horizon, n):
    d = offs.shape[1]
    idx = np.full(n, -1, np.int64)
    final = np.empty((n, d), np.int64)
    pos = np.empty(d, np.int64)
    for t in range(n):
        for i in range(d):
            pos[i] = start[i]
        k = 0
        while True:
            if _stopped(kind, param, target, pos, k):
                idx[t] = k
                break
            if k == horizon:
                break
            j = _draw(rng, cdf)
            for i in range(d):
                pos[i] += offs[j, i]
            k += 1
        for i in range(d):
            final[t, i] = pos[i]
    return idx, final


@nb.njit(cache=True)
def _green_batch(rng, cdf, offs, targets, window, horizon, n):
    """Visit counts of killed walks from 0; killed when x_1 < 0 or x_1 > window."""
    d = offs.shape[1]
    nt = targets.shape[0]
    cnt = np.zeros((n, nt), np.int64)
    trunc = 0
    pos = np.zeros(d, np.int64)
    for t in range(n):
        for i in range(d):
            pos[i] = 0
        k = 0
        while True:
            for a in range(nt):
                same = True
                for i in range(d):
                    if pos[i] != targets[a, i]:
                        same = False
                        break
                if same:
                    cnt[t, a] += 1
            if k == horizon:
                trunc += 1
                break
            j = _draw(rng, cdf)
            for i in range(d):
                pos[i] += offs[j, i]
            k += 1
            if pos[0] < 0 or pos[0] > window:
                break
    return cnt, trunc


@nb.njit(cache=True)
def _ruin_batch(rng, cdf, vals, k, n):
    wins = 0
    for t in range(n):
        x = 0
        while True:
            x += vals[_draw(rng, cdf)]
            if x < 0:
                break
            if x >= k:
                wins += 1
                break
    return wins


@nb.njit(cache=True)
def _exit_times_1d(rng, cdf, vals, level, horizon, n):
    out = np.full(n, -1, np.int64)
    for t in range(n):
        x = 0
        for s in range(1, horizon + 1):
            x += vals[_draw(rng, cdf)]
            if x < -level:
                out[t] = s
                break
    return out


def _walk_task(args):
    stream, n, params = args
    return _walk_batch(stream.generator(), *params, n)


def _green_task(args):
    stream, n, params = args
    return _green_batch(stream.generator(), *params, n)


def _ruin_task(args):
    stream, n, params = args
    return _ruin_batch(stream.generator(), *params, n)


def _exit1d_task(args):
    stream, n, params = args
    return _exit_times_1d(stream.generator(), *params, n)


def _fan_out(task, n: int, seed, params, workers):
    stream = as_stream(seed)
    return run_tasks(task, [(stream.child(i), b, params) for i, b in enumerate(block_sizes(n))], workers)


def walk_batch(step: StepDistribution, start, stop, horizon: int, n: int, seed=0,
               workers: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stopping indices (-1 if not stopped by ``horizon``) and final points of n walks."""
    if horizon < 1:
        raise UsageError("horizon must be >= 1")
    kind, param, target = _stop_code(stop)
    params = (step.cdf(), step.offsets, np.array(as_point(start), np.int64), kind, param, target, int(horizon))
    outs = _fan_out(_walk_task, n, seed, params, workers)
    return np.concatenate([o[0] for o in outs]), np.concatenate([o[1] for o in outs])


# --------------------------------------------------------------------------
# Half-space Green function


@dataclass(frozen=True)
class GreenResult:
    values: np.ndarray
    window: int
    far_exit: float
    window_change: np.ndarray


def _lateral_symbol(step: StepDistribution, thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Fourier symbol of the step in the lateral coordinates, per first-coordinate jump.

    Returns (jumps, P) with P[f, a] = sum over offsets with first coordinate
    jumps[a] of mass * prod_i cos(theta_{f,i} o_i). Real by reflection symmetry.
    """
    jumps = np.unique(step.offsets[:, 0])
    P = np.zeros((len(thetas), len(jumps)))
    col = np.searchsorted(jumps, step.offsets[:, 0])
    for o, mass, c in zip(step.offsets, step.masses, col):
        term = np.full(len(thetas), mass)
        for i in range(1, step.d):
            if o[i]:
                term = term * np.cos(thetas[:, i - 1] * o[i])
        P[:, c] += term
    return jumps, P


def _banded_first_column(jumps: np.ndarray, P: np.ndarray, W: int) -> np.ndarray:
    """Row 0 of (I - K)^{-1} on {0..W} for each frequency.

    K[i, j] = P[:, jump j - i] is the killed one-step kernel of the first
    coordinate (in Fourier in the lateral coordinates). Gaussian elimination
    without pivoting over the band; the matrix is diagonally dominant.
    """
    nf = P.shape[0]
    L = int(np.abs(jumps).max())
    size = W + 1
    bw = 2 * L + 1
    A = np.zeros((size, bw, nf))  # A[i, L + (j - i)] = (I - K)[i, j]
    for a, jmp in enumerate(jumps):
        for i in range(size):
            # transposed kernel: row 0 of the inverse is the occupation from 0
            if 0 <= i - jmp < size:
                A[i, L - jmp] -= P[:, a]
    A[:, L] += 1.0
    b = np.zeros((size, nf))
    b[0] = 1.0
    for i in range(size):
        piv = A[i, L]
        for r in range(1, L + 1):
            if i + r >= size:
                break
            f = A[i + r, L - r] / piv
            for c in range(0, L + 1):
                A[i + r, L - r + c] -= f * A[i, L + c]
            b[i + r] -= f * b[i]
    x = np.zeros((size, nf))
    for i in range(size - 1, -1, -1):
        acc = b[i].copy()
        for c in range(1, L + 1):
            if i + c < size:
                acc -= A[i, L + c] * x[i + c]
        x[i] = acc / A[i, L]
    return x


def _green_window(step: StepDistribution, points: np.ndarray, W: int, M: int, chunk: int) -> tuple[np.ndarray, float]:
    d = step.d
    half = M // 2
    grid1 = 2 * np.pi * np.arange(half + 1) / M
    weight1 = np.where((np.arange(half + 1) == 0) | (np.arange(half + 1) == half), 1.0, 2.0)
    nl = d - 1
    if nl:
        mesh = np.stack(np.meshgrid(*([grid1] * nl), indexing="ij"), -1).reshape(-1, nl)
        wts = np.prod(np.stack(np.meshgrid(*([weight1] * nl), indexing="ij"), -1).reshape(-1, nl), 1)
    else:
        mesh = np.zeros((1, 0))
        wts = np.ones(1)
    vals = np.zeros(len(points))
    far = 0.0
    pts = np.asarray(points, np.int64)
    rows = np.clip(pts[:, 0], 0, W)
    for s in range(0, len(mesh), chunk):
        th = mesh[s:s + chunk]
        jumps, P = _lateral_symbol(step, th)
        g = _banded_first_column(jumps, P, W)
        phase = np.ones((len(pts), len(th)))
        for i in range(nl):
            phase = phase * np.cos(np.outer(pts[:, i + 1], th[:, i]))
        vals += (g[rows] * phase * wts[s:s + chunk]).sum(1)
        if s == 0:
            # zero frequency: mass absorbed beyond the far end of the window
            for a, jmp in enumerate(jumps):
                if jmp > 0:
                    far += float(P[0, a] * g[max(W - jmp + 1, 0):, 0].sum())
    vals /= float(M) ** nl
    vals[(pts[:, 0] < 0) | (pts[:, 0] > W)] = 0.0
    return vals, far


def halfspace_green_table(step: StepDistribution, points, window: int = 64, lateral: int | None = None,
                          chunk: int = 16384) -> GreenResult:
    """Expected visits to each point before leaving {x_1 >= 0}, walk killed beyond x_1 = window.

    The lateral coordinates live on a torus of side ``lateral`` (default 8 W)
    and are handled in Fourier space; each frequency reduces to a banded
    linear system in the first coordinate. ``window_change`` is the difference
    with the same computation at window W/2.
    """
    if step.d > 3:
        raise UsageError("dp Green function supports d <= 3")
    if not step.is_reflection_symmetric(range(1, step.d)):
        raise UsageError("dp Green function needs reflection symmetry in the lateral coordinates")
    pts = np.array([as_point(p) for p in points], np.int64).reshape(-1, step.d)
    M = 8 * window if lateral is None else int(lateral)
    M += M % 2
    vals, far = _green_window(step, pts, window, M, chunk)
    half, _ = _green_window(step, pts, window // 2, M, chunk)
    return GreenResult(vals, window, far, vals - half)


def halfspace_green(step: StepDistribution, x, method: str = "dp", n: int = 100_000, horizon: int = 10 ** 7,
                    window: int = 64, leakage_tol: float | None = None, seed=0,
                    workers: int | None = None) -> Estimate:
    """E_0[sum_{l < tau} 1{X_l = x}] with tau the exit time of {x_1 >= 0}.

    Both methods kill the walk once x_1 exceeds ``window``; the dp result is
    exact for that truncated walk. With ``leakage_tol`` set, the dp method
    refuses when halving the window moves the value by more than the tolerance.
    """
    x = as_point(x)
    if len(x) != step.d:
        raise UsageError("x has wrong dimension")
    if x[0] < 0:
        return Estimate.exact(0.0, window)
    if method == "dp":
        res = halfspace_green_table(step, [x], window)
        change = float(abs(res.window_change[0]))
        if leakage_tol is not None and change > leakage_tol:
            raise UsageError(f"dp window {window} too small: halving it moves the value by {change:.3g}")
        return Estimate(float(res.values[0]), 0.0, 0, window, 0.0)
    if method != "mc":
        raise UsageError(f"unknown method {method!r}")
    params = (step.cdf(), step.offsets, np.array([x], np.int64), int(window), int(horizon))
    outs = _fan_out(_green_task, n, seed, params, workers)
    c = np.concatenate([o[0][:, 0] for o in outs]).astype(float)
    trunc = sum(int(o[1]) for o in outs)
    m, se = _mean_se(c.sum(), (c * c).sum(), len(c))
    return Estimate(m, se, len(c), window, trunc / max(len(c), 1))


# --------------------------------------------------------------------------
# Gambler's ruin and exit probabilities


def gamblers_ruin(step: StepDistribution, k: int, n: int = 100_000, seed=0,
                  workers: int | None = None) -> Estimate:
    """P_0[first coordinate reaches level k before it becomes negative]."""
    if k < 1:
        raise UsageError("k must be >= 1")
    vals, ms = step.projection(0)
    cdf = np.cumsum(ms)
    cdf[-1] = 1.0
    outs = _fan_out(_ruin_task, n, seed, (cdf, vals.astype(np.int64), int(k)), workers)
    wins = float(sum(outs))
    m, se = _mean_se(wins, wins, n)
    return Estimate(m, se, n)


def gamblers_ruin_exact(step: StepDistribution, k: int) -> float:
    """The same probability by solving the linear system on levels 0..k-1."""
    if k < 1:
        raise UsageError("k must be >= 1")
    vals, ms = step.projection(0)
    A = np.eye(k)
    b = np.zeros(k)
    for i in range(k):
        for v, w in zip(vals, ms):
            j = i + int(v)
            if j >= k:
                b[i] += w
            elif j >= 0:
                A[i, j] -= w
    return float(np.linalg.solve(A, b)[0])


def exit_probability_finite(step: StepDistribution, k: int, horizon, n: int = 100_000, seed=0,
                            workers: int | None = None):
    """P_0[tau_k < horizon] with tau_k = inf{l >= 1: X_l not in {x_1 >= -k}}.

    ``horizon`` may be a sequence; all horizons then share the same walks, so
    the estimates are monotone in the horizon.
    """
    hs = [int(h) for h in np.atleast_1d(horizon)]
    if min(hs) < 1:
        raise UsageError("horizon must be >= 1")
    vals, ms = step.projection(0)
    cdf = np.cumsum(ms)
    cdf[-1] = 1.0
    outs = _fan_out(_exit1d_task, n, seed, (cdf, vals.astype(np.int64), int(k), max(hs)), workers)
    taus = np.concatenate(outs)
    res = []
    for h in hs:
        hit = ((taus >= 0) & (taus < h)).astype(float)
        m, se = _mean_se(hit.sum(), hit.sum(), len(hit))
        res.append(Estimate(m, se, len(hit), h))
    return res if np.ndim(horizon) else res[0]


# --------------------------------------------------------------------------
# Exit times of boxes


def exit_time_box(step: StepDistribution, n: int, N: int = 10_000, start=None, horizon: int = 10 ** 8,
                  seed=0, workers: int | None = None) -> Estimate:
    """Monte Carlo mean of tau_n = inf{k >= 0: X_k not in Lambda_n}."""
    m = step.params.get("m")
    if m is not None and n < m:
        raise UsageError("need n >= m")
    start = (0,) * step.d if start is None else as_point(start)
    if linf(start) > n:
        return Estimate.exact(0.0)
    idx, _ = walk_batch(step, start, ExitBox(n), horizon, N, seed, workers)
    trunc = float((idx < 0).mean())
    t = np.where(idx < 0, horizon, idx).astype(float)
    mu, se = _mean_se(t.sum(), (t * t).sum(), len(t))
    return Estimate(mu, se, len(t), horizon, trunc)


def exit_time_bound(d: int, n: int, m: int) -> float:
    return 9.0 * d * (n / m) ** 2


def exit_time_exact_1d(step: StepDistribution, n: int) -> np.ndarray:
    """E_u[tau_n] for u = -n..n for a one-dimensional step law."""
    if step.d != 1:
        raise UsageError("one-dimensional steps only")
    size = 2 * n + 1
    A = np.eye(size)
    for i in range(size):
        for o, w in zip(step.offsets[:, 0], step.masses):
            j = i + int(o)
            if 0 <= j < size:
                A[i, j] -= w
    return np.linalg.solve(A, np.ones(size))


# --------------------------------------------------------------------------
# Harnack ratios


@dataclass
class HarnackReport:
    ratio: float
    ratio_se: float
    starts: list
    patches: list
    values: np.ndarray
    std_errors: np.ndarray
    n: int
    radius: int


def face_patches(d: int, split: bool = False) -> list:
    """Boundary weights: indicators of each face of the exit box, optionally halved.

    A weight is a function of the exit point and the box radius.
    """
    out = []
    for k in range(d):
        for s in (1, -1):
            face = lambda y, R, k=k, s=s: (s * y[:, k] > R)
            if not split or d == 1:
                out.append(((k, s), face))
                continue
            j = (k + 1) % d
            out.append(((k, s, j, 1), lambda y, R, f=face, j=j: f(y, R) & (y[:, j] >= 0)))
            out.append(((k, s, j, -1), lambda y, R, f=face, j=j: f(y, R) & (y[:, j] < 0)))
    return out


def default_starts(d: int, n: int) -> list:
    pts = [(0,) * d]
    for k in range(d):
        for s in (1, -1):
            pts.append(tuple(s * n if j == k else 0 for j in range(d)))
    pts.append((n,) * d)
    pts.append((-n,) * d)
    return pts


def harnack_ratio(step: StepDistribution, n: int, alpha: float, f=None, N: int = 20_000, starts=None,
                  seed=0, workers: int | None = None) -> HarnackReport:
    """max over patches of max_u E_u[f(X_tau)] / min_v E_v[f(X_tau)].

    tau is the exit time of Lambda_{(1+alpha) n}; ``f`` is a list of
    (label, weight) pairs, each weight mapping exit points to values.
    Patches with a zero estimate at some start give an infinite ratio.
    """
    d = step.d
    R = int(math.floor((1 + alpha) * n))
    starts = default_starts(d, n) if starts is None else [as_point(s) for s in starts]
    if any(linf(s) > n for s in starts):
        raise UsageError("starts must lie in Lambda_n")
    patches = face_patches(d) if f is None else list(f)
    stream = as_stream(seed)
    vals = np.zeros((len(starts), len(patches)))
    ses = np.zeros_like(vals)
    for a, u in enumerate(starts):
        idx, fin = walk_batch(step, u, ExitBox(R), 10 ** 9, N, stream.child(a), workers)
        for b, (_, w) in enumerate(patches):
            y = np.asarray(w(fin, R), float)
            vals[a, b], ses[a, b] = _mean_se(y.sum(), (y * y).sum(), len(y))
    best, best_se = 1.0, 0.0
    for b in range(len(patches)):
        hi, lo = vals[:, b].argmax(), vals[:, b].argmin()
        if vals[hi, b] <= 0:
            continue
        if vals[lo, b] <= 0:
            return HarnackReport(math.inf, math.nan, starts, [lab for lab, _ in patches], vals, ses, N, R)
        r = vals[hi, b] / vals[lo, b]
        if r > best:
            best = r
            best_se = r * math.hypot(ses[hi, b] / vals[hi, b], ses[lo, b] / vals[lo, b])
    return HarnackReport(best, best_se, starts, [lab for lab, _ in patches], vals, ses, N, R)


# --------------------------------------------------------------------------
# Coupling of two walks started at nearby points


@nb.njit(cache=True)
def _coord_law(L, d, i, zero_prefix):
    """Law of coordinate i of a uniform nonzero step of the box, given the prefix.

    Only a zero prefix changes the law: then the all-zero completion is excluded.
    """
    w = np.ones(2 * L + 1)
    if zero_prefix:
        rest = (2 * L + 1) ** (d - i - 1)
        for a in range(2 * L + 1):
            w[a] = rest
        w[L] = rest - 1
    return w / w.sum()


@nb.njit(cache=True)
def _sample_law(rng, law):
    u = rng.random()
    acc = 0.0
    for a in range(len(law)):
        acc += law[a]
        if u < acc:
            return a
    return len(law) - 1


@nb.njit(cache=True)
def _max_couple_1d(rng, lx, l0):
    """Maximal coupling of two laws on the same finite set; returns (a, b)."""
    a = _sample_law(rng, lx)
    if rng.random() * lx[a] <= l0[a]:
        return a, a
    res = np.maximum(l0 - lx, 0.0)
    res /= res.sum()
    return a, _sample_law(rng, res)


@nb.njit(cache=True)
def _coupled_step(rng, D, L, d, K, mode_same, sx, s0):
    """One step of both walks built coordinate by coordinate.

    Coordinates with |D_i| <= K (or all of them when ``mode_same``) take a common
    increment; the others follow the Ornstein rule: the second walk takes an
    independent draw if it is within K of the first walk's draw, and the same
    draw otherwise. When the prefix laws differ, a maximal coupling is used.
    Marginally each walk makes a uniform step over the punctured box.
    """
    zx = True
    z0 = True
    for i in range(d):
        lx = _coord_law(L, d, i, zx)
        l0 = _coord_law(L, d, i, z0)
        if zx == z0:
            a = _sample_law(rng, lx)
            b = a
            if not mode_same and abs(D[i]) > K:
                c = _sample_law(rng, l0)
                if abs(a - c) <= K:
                    b = c
        else:
            a, b = _max_couple_1d(rng, lx, l0)
        sx[i] = a - L
        s0[i] = b - L
        zx = zx and sx[i] == 0
        z0 = z0 and s0[i] == 0


@nb.njit(cache=True)
def _in_punctured(y, c, L):
    same = True
    for i in range(len(y)):
        if abs(y[i] - c[i]) > L:
            return False
        if y[i] != c[i]:
            same = False
    return not same


@nb.njit(cache=True)
def _uniform_step(rng, L, d, s):
    nbd = (2 * L + 1) ** d
    r = np.int64(rng.integers(0, nbd - 1))
    if r >= (nbd - 1) // 2:
        r += 1
    for i in range(d - 1, -1, -1):
        s[i] = r % (2 * L + 1) - L
        r //= 2 * L + 1


@nb.njit(cache=True)
def _max_couple_step(rng, a, b, L, ya, yb):
    """Maximal coupling of one uniform step from a and one from b."""
    d = len(a)
    s = np.empty(d, np.int64)
    _uniform_step(rng, L, d, s)
    for i in range(d):
        ya[i] = a[i] + s[i]
    if _in_punctured(ya, b, L):
        for i in range(d):
            yb[i] = ya[i]
        return
    while True:
        _uniform_step(rng, L, d, s)
        for i in range(d):
            yb[i] = b[i] + s[i]
        if not _in_punctured(yb, a, L):
            return


@nb.njit(cache=True)
def _coupled_positions(rng, d, L, u, v, T, K, greedy, n):
    pa = np.empty((n, d), np.int64)
    pb = np.empty((n, d), np.int64)
    xa = np.empty(d, np.int64)
    xb = np.empty(d, np.int64)
    ya = np.empty(d, np.int64)
    yb = np.empty(d, np.int64)
    D = np.empty(d, np.int64)
    sx = np.empty(d, np.int64)
    s0 = np.empty(d, np.int64)
    for t in range(n):
        for i in range(d):
            xa[i] = u[i]
            xb[i] = v[i]
        for k in range(T):
            close = True
            equal = True
            for i in range(d):
                D[i] = xa[i] - xb[i]
                if abs(D[i]) > K:
                    close = False
                if D[i] != 0:
                    equal = False
            last = k == T - 1
            if equal:
                _uniform_step(rng, L, d, sx)
                for i in range(d):
                    xa[i] += sx[i]
                    xb[i] += sx[i]
            elif close and (greedy or last):
                _max_couple_step(rng, xa, xb, L, ya, yb)
                for i in range(d):
                    xa[i] = ya[i]
                    xb[i] = yb[i]
            else:
                _coupled_step(rng, D, L, d, K, last, sx, s0)
                for i in range(d):
                    xa[i] += sx[i]
                    xb[i] += s0[i]
        for i in range(d):
            pa[t, i] = xa[i]
            pb[t, i] = xb[i]
    return pa, pb


@nb.njit(cache=True)
def _coupling_batch(rng, d, L, u, v, T, K, greedy, n):
    """Mismatch indicators of n coupled pairs at time T."""
    pa, pb = _coupled_positions(rng, d, L, u, v, T, K, greedy, n)
    out = np.zeros(n, np.int64)
    for t in range(n):
        for i in range(d):
            if pa[t, i] != pb[t, i]:
                out[t] = 1
    return out


def _coupling_task(args):
    stream, n, params = args
    return _coupling_batch(stream.generator(), *params, n)


def coupling_threshold(L: int, kappa: float) -> int:
    """The closeness radius: kappa L floored at 1."""
    return max(1, int(math.floor(kappa * L)))


def one_step_tv(d: int, L: int, u, v) -> float:
    """Total variation distance of one uniform step from u and from v, by mass summation."""
    u, v = as_point(u), as_point(v)
    cL = 1.0 / ((2 * L + 1) ** d - 1)
    lo = [min(a, b) - L for a, b in zip(u, v)]
    hi = [max(a, b) + L for a, b in zip(u, v)]
    tot = 0.0
    for y in box_points(lo, hi):
        ju = cL if 1 <= linf(tuple(a - b for a, b in zip(y, u))) <= L else 0.0
        jv = cL if 1 <= linf(tuple(a - b for a, b in zip(y, v))) <= L else 0.0
        tot += abs(ju - jv)
    return 0.5 * tot


def ornstein_coupling(d: int, L: int, u, v, T: int, N: int = 10_000, kappa: float = 0.125,
                      mode: str = "proof", seed=0, workers: int | None = None) -> Estimate:
    """Estimate P[Y^u != Y^v] for a coupling of the walks from u and v at time T.

    ``mode="proof"`` runs the two-phase construction: Ornstein steps for T - 1
    steps, then a maximal one-step coupling if every coordinate difference is
    at most kappa L (floored at 1), and a common step otherwise.
    ``mode="greedy"`` attempts the maximal one-step coupling at every step at
    which the walks are that close, and keeps them together once they meet.
    """
    u, v = as_point(u), as_point(v)
    if len(u) != d or len(v) != d:
        raise UsageError("points have wrong dimension")
    if max(linf(u), linf(v)) > 2 * L:
        raise UsageError("u and v must lie in Lambda_{2L}")
    if T < 1:
        raise UsageError("T must be >= 1")
    if mode not in ("proof", "greedy"):
        raise UsageError(f"unknown mode {mode!r}")
    if u == v:
        return Estimate.exact(0.0, T)
    K = coupling_threshold(L, kappa)
    params = (d, L, np.array(u, np.int64), np.array(v, np.int64), int(T), K, mode == "greedy")
    outs = _fan_out(_coupling_task, N, seed, params, workers)
    x = np.concatenate(outs).astype(float)
    m, se = _mean_se(x.sum(), x.sum(), len(x))
    return Estimate(m, se, len(x), T)


def coupled_marginals(d: int, L: int, u, v, T: int, N: int, kappa: float = 0.125, mode: str = "proof",
                      seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Positions of both coupled walks at time T (for marginal checks)."""
    u, v = as_point(u), as_point(v)
    K = coupling_threshold(L, kappa)
    return _coupled_positions(as_stream(seed).generator(), d, L, np.array(u, np.int64), np.array(v, np.int64),
                              int(T), K, mode == "greedy", int(N))


def calibrate_coupling_time(d: int, L: int, u, v, target: float = 0.1, N: int = 10_000, T0: int = 1,
                            T_max: int = 1 << 16, kappa: float = 0.125, mode: str = "proof", seed=0,
                            workers: int | None = None) -> tuple[int, Estimate]:
    """Smallest T in the doubling sequence T0, 2 T0, ... with mismatch <= target."""
    T = T0
    while True:
        est = ornstein_coupling(d, L, u, v, T, N, kappa, mode, seed, workers)
        if est.value <= target:
            return T, est
        if T >= T_max:
            raise UsageError(f"mismatch {est.value:.3g} still above {target} at T = {T}")
        T *= 2
