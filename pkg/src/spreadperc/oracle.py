"""Exact verification of correlation inequalities on enumerable graphs.

Every check returns an :class:`InequalityReport` oriented so that the
inequality reads ``lhs <= rhs``; it passes when ``rhs - lhs >= -TOL``.
Probabilities come from full enumeration of edge configurations.

Replay format
-------------
Failing instances can be written to a plain-text file, one record per line::

    spreadperc-instance 1
    dim <d>
    meta <key> <value>            (optional, any number)
    site <i> <c_1> ... <c_d>      (sites are numbered from 0 in file order)
    edge <i> <j> <probability>    (probability written with repr())
    set S <i> <i> ...             (site indices of S)
    set Lambda <i> ...
    point <name> <i>              (names o, x, a, b)
    event <i1> <j1> <i2> <j2>     (event pair {s_i1 <-> s_j1}, {s_i2 <-> s_j2})

Lines starting with ``#`` are comments. Reading a file back yields the same
instance bit for bit.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, UsageError
from .estimators import error_term_from_tables
from .lattice import Box, Sites, SpreadOutModel, as_point, box_points, edge_probability, linf, sub
from .percolation import MAX_TABLE_EDGES, ConfigTable, FiniteGraph, disjoint_probability

TOL = 1e-9


@dataclass(frozen=True)
class InequalityReport:
    name: str
    instance: object
    lhs: float
    rhs: float
    tol: float = TOL

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        return self.slack >= -self.tol


# --------------------------------------------------------------------------
# Instances


@dataclass
class Instance:
    graph: FiniteGraph
    S: tuple
    Lam: tuple
    o: tuple
    x: tuple
    a: tuple
    b: tuple
    events: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _edge_prob_matrix(g: FiniteGraph) -> np.ndarray:
    n = len(g.sites)
    idx = {s: i for i, s in enumerate(g.sites)}
    P = np.zeros((n, n))
    for (u, v), q in zip(g.edges, g.probs):
        P[idx[u], idx[v]] = P[idx[v], idx[u]] = q
    return P


class _Tables:
    """Two-point matrices of one graph under several site restrictions."""

    def __init__(self, g: FiniteGraph):
        if g.n_edges > MAX_TABLE_EDGES:
            raise CapacityError(f"{g.n_edges} edges exceed {MAX_TABLE_EDGES}")
        self.g = g
        self._cache = {}

    def table(self, sites) -> ConfigTable:
        key = frozenset(sites)
        if key not in self._cache:
            self._cache[key] = ConfigTable(self.g, Sites(key))
        return self._cache[key]

    def matrix(self, sites) -> np.ndarray:
        t = self.table(sites)
        m = t.matrix()
        mask = t.allowed
        m = np.where(np.outer(mask, mask), m, 0.0)
        np.fill_diagonal(m, np.where(mask, 1.0, 0.0))
        return m


def verify_bk(g: FiniteGraph, event_pairs, instance=None) -> list[InequalityReport]:
    """P[A o B] <= P[A] P[B] for connectivity events A = {x1 <-> y1}, B = {x2 <-> y2}.

    Events may carry a region as a third element restricting their edges.
    """
    out = []
    tabs = _Tables(g)
    for ev1, ev2 in event_pairs:
        pa = _event_prob(g, tabs, ev1)
        pb = _event_prob(g, tabs, ev2)
        lhs = disjoint_probability(g, ev1, ev2)
        out.append(InequalityReport("bk", instance if instance is not None else (ev1, ev2), lhs, pa * pb))
    return out


def _event_prob(g, tabs, ev):
    x, y = g.index(ev[0]), g.index(ev[1])
    region = ev[2] if len(ev) > 2 else None
    t = tabs.table(g.sites if region is None else [s for s in g.sites if region.contains(s)])
    return t.prob(t.connected(x, y))


def verify_tree_bound(g: FiniteGraph, o, a, b, S, instance=None) -> InequalityReport:
    """P[o <-S-> a and o <-S-> b] <= sum_{u in S} P[o <-S-> u] P[u <-S-> a] P[u <-S-> b]."""
    S = [as_point(s) for s in S]
    tabs = _Tables(g)
    t = tabs.table(S)
    io, ia, ib = g.index(o), g.index(a), g.index(b)
    lhs = t.prob(t.connected(io, ia) & t.connected(io, ib))
    P = tabs.matrix(S)
    us = [g.index(u) for u in S]
    rhs = float(sum(P[io, u] * P[u, ia] * P[u, ib] for u in us))
    return InequalityReport("tree", instance if instance is not None else (o, a, b), lhs, rhs)


def _sl_parts(g: FiniteGraph, S, Lam, o, x):
    S = [as_point(s) for s in S]
    Lam = [as_point(s) for s in Lam]
    if not set(S) <= set(Lam):
        raise UsageError("S must be a subset of Lambda")
    if as_point(o) not in S or as_point(x) not in Lam:
        raise UsageError("need o in S and x in Lambda")
    tabs = _Tables(g)
    PS = tabs.matrix(S)
    PL = tabs.matrix(Lam)
    pm = _edge_prob_matrix(g)
    io, ix = g.index(o), g.index(x)
    iS = [g.index(s) for s in S]
    iC = [g.index(s) for s in Lam if s not in set(S)]
    boundary = 0.0
    if iC:
        boundary = float(PS[io, iS] @ pm[np.ix_(iS, iC)] @ PL[iC, ix])
    return PS, PL, pm, io, ix, iS, iC, boundary


def verify_simon_lieb(g: FiniteGraph, S, Lam, o, x, instance=None) -> InequalityReport:
    """P[o <-Lam-> x] <= P[o <-S-> x] + sum_{y in S, z in Lam\\S} P[o <-S-> y] p_yz P[z <-Lam-> x]."""
    PS, PL, pm, io, ix, iS, iC, boundary = _sl_parts(g, S, Lam, o, x)
    return InequalityReport("simon_lieb", instance if instance is not None else (o, x),
                            float(PL[io, ix]), float(PS[io, ix]) + boundary)


def reversed_error(g: FiniteGraph, S, Lam, o, x) -> float:
    """Both sums of the reversed-inequality error term, exactly."""
    PS, PL, pm, io, ix, iS, iC, _ = _sl_parts(g, S, Lam, o, x)
    idx = sorted(set(iS) | set(iC))
    sub_ = np.ix_(idx, idx)
    in_S = np.array([i in set(iS) for i in idx])
    return error_term_from_tables(PS[sub_], PL[sub_], pm[sub_], in_S, idx.index(io), idx.index(ix))


def verify_reversed(g: FiniteGraph, S, Lam, o, x, instance=None) -> InequalityReport:
    """P[o <-S-> x] + sum(...) - E(S, Lam, o, x) <= P[o <-Lam-> x]."""
    PS, PL, pm, io, ix, iS, iC, boundary = _sl_parts(g, S, Lam, o, x)
    err = reversed_error(g, S, Lam, o, x)
    return InequalityReport("reversed_simon_lieb", instance if instance is not None else (o, x),
                            float(PS[io, ix]) + boundary - err, float(PL[io, ix]))


def error_term_bruteforce(g: FiniteGraph, S, Lam, o, x) -> float:
    """Nested-loop evaluation of both error sums (reference for the matrix form)."""
    PS, PL, pm, io, ix, iS, iC, _ = _sl_parts(g, S, Lam, o, x)
    iL = iS + iC
    t1 = 0.0
    for u in iS:
        for v in iS:
            for y in iS:
                for z in iC:
                    t1 += PS[io, u] * PS[u, y] * pm[y, z] * PL[z, v] * PS[u, v] * PL[v, ix]
    t2 = 0.0
    for u in iS:
        for v in iL:
            for y, s in itertools.product(iS, iS):
                for z, t in itertools.product(iC, iC):
                    if (y, z) == (s, t):
                        continue
                    t2 += (PS[io, u] * PS[u, y] * PS[u, s] * pm[y, z] * pm[s, t]
                           * PL[z, v] * PL[t, v] * PL[v, ix])
    return t1 + t2


def verify_instance(inst: Instance) -> list[InequalityReport]:
    g = inst.graph
    reps = verify_bk(g, inst.events, inst)
    reps.append(verify_tree_bound(g, inst.o, inst.a, inst.b, inst.S, inst))
    reps.append(verify_simon_lieb(g, inst.S, inst.Lam, inst.o, inst.x, inst))
    reps.append(verify_reversed(g, inst.S, inst.Lam, inst.o, inst.x, inst))
    return reps


def random_instance(rng: np.random.Generator, d: int, L: int, beta: float, max_edges: int = 12) -> Instance:
    """A random spread-out subgraph of a small box with a random S, o, x and events.

    Sites are a random subset of a box of radius L (or 2L in d = 1); edges are
    spread-out edges among them, thinned at random to at most ``max_edges``.
    """
    model = SpreadOutModel(d, L, beta)
    r = 2 * L if d == 1 else L
    box = list(box_points([-r] * d, [r] * d))
    n_sites = int(rng.integers(3, min(len(box), 7) + 1))
    pick = rng.choice(len(box), size=n_sites, replace=False)
    sites = [box[i] for i in sorted(pick)]
    cand = [(a, b) for a, b in itertools.combinations(sites, 2) if 1 <= linf(sub(a, b)) <= L]
    keep_p = rng.uniform(0.4, 1.0)
    edges = [e for e in cand if rng.random() < keep_p]
    if len(edges) > max_edges:
        sel = rng.choice(len(edges), size=max_edges, replace=False)
        edges = [edges[i] for i in sorted(sel)]
    g = FiniteGraph(tuple(sites), tuple(edges), tuple(edge_probability(model, a, b) for a, b in edges))
    lam_size = int(rng.integers(2, n_sites + 1))
    Lam = [sites[i] for i in sorted(rng.choice(n_sites, size=lam_size, replace=False))]
    s_size = int(rng.integers(1, lam_size + 1))
    S = [Lam[i] for i in sorted(rng.choice(lam_size, size=s_size, replace=False))]
    o = S[int(rng.integers(len(S)))]
    x = Lam[int(rng.integers(len(Lam)))]
    a = S[int(rng.integers(len(S)))]
    b = S[int(rng.integers(len(S)))]
    events = []
    for _ in range(3):
        u = [sites[int(i)] for i in rng.integers(n_sites, size=4)]
        events.append(((u[0], u[1]), (u[2], u[3])))
    return Instance(g, tuple(S), tuple(Lam), o, x, a, b, events, {"d": d, "L": L, "beta": beta})


def adversarial_instances(beta: float) -> list[Instance]:
    """Hand-built cases where long edges cross the boundary of S."""
    out = []
    for L in (2, 3):
        model = SpreadOutModel(1, L, beta)
        sites = [(i,) for i in range(-1, L + 3)]
        S = [(i,) for i in range(-1, 2)]
        edges = [(a, b) for a, b in itertools.combinations(sites, 2)
                 if 1 <= abs(a[0] - b[0]) <= L and (a in S) != (b in S)]
        edges += [((-1,), (0,)), ((0,), (1,))]
        edges = edges[:12]
        g = FiniteGraph(tuple(sites), tuple(edges), tuple(edge_probability(model, a, b) for a, b in edges))
        x = sites[-1]
        events = [(((0,), x), ((0,), x)), (((-1,), x), ((1,), x))]
        out.append(Instance(g, tuple(S), tuple(sites), (0,), x, (-1,), (1,), events,
                            {"d": 1, "L": L, "beta": beta, "kind": "crossing"}))
    model = SpreadOutModel(2, 1, beta)
    sites = [(0, 0), (1, 0), (1, 1), (0, 1), (2, 0), (2, 1)]
    S = [(0, 0), (0, 1)]
    edges = [(a, b) for a, b in itertools.combinations(sites, 2) if linf(sub(a, b)) == 1]
    edges = [e for e in edges if (e[0] in S) != (e[1] in S) or e == ((0, 0), (0, 1))][:12]
    g = FiniteGraph(tuple(sites), tuple(edges), tuple(edge_probability(model, a, b) for a, b in edges))
    out.append(Instance(g, tuple(S), tuple(sites), (0, 0), (2, 1), (0, 0), (0, 1),
                        [(((0, 0), (2, 1)), ((0, 1), (2, 0)))], {"d": 2, "L": 1, "beta": beta, "kind": "crossing"}))
    return out


@dataclass
class SweepResult:
    reports: list
    n_instances: int

    @property
    def failures(self) -> list:
        return [r for r in self.reports if not r.passed]

    def by_name(self) -> dict:
        out = {}
        for r in self.reports:
            out.setdefault(r.name, []).append(r)
        return out


def run_sweep(n_instances: int = 500, seed: int = 0, dims=(1, 2), ranges=(1, 2, 3),
              betas=(0.1, 0.5, 1.0, 1.5), max_edges: int = 12, dump_dir=None) -> SweepResult:
    """Random plus adversarial instances over the parameter grid, all checks applied."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    grid = list(itertools.product(dims, ranges, betas))
    reports = []
    count = 0
    for i in range(n_instances):
        d, L, beta = grid[i % len(grid)]
        inst = random_instance(rng, d, L, beta, max_edges)
        reports += verify_instance(inst)
        count += 1
    if n_instances > 0:
        for beta in betas:
            for inst in adversarial_instances(beta):
                reports += verify_instance(inst)
                count += 1
    res = SweepResult(reports, count)
    if dump_dir is not None:
        import os

        os.makedirs(dump_dir, exist_ok=True)
        seen = set()
        for k, r in enumerate(res.failures):
            if id(r.instance) in seen or not isinstance(r.instance, Instance):
                continue
            seen.add(id(r.instance))
            with open(os.path.join(dump_dir, f"failure_{k:04d}.txt"), "w") as fh:
                fh.write(format_instance(r.instance, comment=f"{r.name} lhs={r.lhs!r} rhs={r.rhs!r}"))
    return res


# --------------------------------------------------------------------------
# Replay files


def format_instance(inst: Instance, comment: str | None = None) -> str:
    g = inst.graph
    d = len(g.sites[0])
    idx = {s: i for i, s in enumerate(g.sites)}
    lines = ["spreadperc-instance 1"]
    if comment:
        lines.append(f"# {comment}")
    lines.append(f"dim {d}")
    for k, v in sorted(inst.meta.items()):
        lines.append(f"meta {k} {v!r}")
    for s in g.sites:
        lines.append("site " + " ".join(str(c) for c in (idx[s],) + s))
    for (a, b), q in zip(g.edges, g.probs):
        lines.append(f"edge {idx[a]} {idx[b]} {q!r}")
    lines.append("set S " + " ".join(str(idx[s]) for s in inst.S))
    lines.append("set Lambda " + " ".join(str(idx[s]) for s in inst.Lam))
    for name in ("o", "x", "a", "b"):
        lines.append(f"point {name} {idx[getattr(inst, name)]}")
    for ev1, ev2 in inst.events:
        lines.append("event " + " ".join(str(idx[as_point(p)]) for p in (*ev1[:2], *ev2[:2])))
    return "\n".join(lines) + "\n"


def parse_instance(text: str) -> Instance:
    import ast

    lines = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines or lines[0] != ["spreadperc-instance", "1"]:
        raise UsageError("not a spreadperc instance file")
    sites, edges, probs, sets, points, events, meta = {}, [], [], {}, {}, [], {}
    for tok in lines[1:]:
        kind = tok[0]
        if kind == "dim":
            continue
        if kind == "meta":
            meta[tok[1]] = ast.literal_eval(" ".join(tok[2:]))
        elif kind == "site":
            sites[int(tok[1])] = tuple(int(c) for c in tok[2:])
        elif kind == "edge":
            edges.append((int(tok[1]), int(tok[2])))
            probs.append(float(tok[3]))
        elif kind == "set":
            sets[tok[1]] = tuple(int(i) for i in tok[2:])
        elif kind == "point":
            points[tok[1]] = int(tok[2])
        elif kind == "event":
            i = [int(t) for t in tok[1:5]]
            events.append(((i[0], i[1]), (i[2], i[3])))
        else:
            raise UsageError(f"unknown record {kind!r}")
    order = [sites[i] for i in sorted(sites)]
    g = FiniteGraph(tuple(order), tuple((sites[a], sites[b]) for a, b in edges), tuple(probs))
    ev = [((sites[a], sites[b]), (sites[c], sites[e])) for (a, b), (c, e) in events]
    return Instance(g, tuple(sites[i] for i in sets["S"]), tuple(sites[i] for i in sets["Lambda"]),
                    *(sites[points[k]] for k in ("o", "x", "a", "b")), ev, meta)


def fsum_recheck(g: FiniteGraph, x, y, region_sites=None) -> tuple[float, float]:
    """P[x <-> y] summed by numpy and by math.fsum over the same configuration weights."""
    t = ConfigTable(g, None if region_sites is None else Sites(region_sites))
    ev = t.connected(g.index(x), g.index(y))
    return float(t.weights[ev].sum()), math.fsum(t.weights[ev].tolist())


# --------------------------------------------------------------------------
# Convolution estimate


@dataclass
class ConvolutionResult:
    d: int
    L: int
    R: int
    A_R: float
    A_2R: float
    report: InequalityReport
    profile: dict


def radial_hypothesis(d: int, L: int, C: float, r_max: int) -> np.ndarray:
    """The largest f allowed by the hypothesis, as a function of |x| = 0..r_max."""
    r = np.arange(r_max + 1, dtype=float)
    f = C / L ** d * (L / np.maximum(L, r)) ** (d - 2)
    f[0] += 1.0
    return f


def conclusion_shape(d: int, L: int, r) -> np.ndarray:
    r = np.asarray(r, float)
    return np.where(r == 0, 1.0, L ** -4.0 * (1.0 / np.maximum(L, r)) ** (d - 4))


def _cum_count_1d(t: int, R: int) -> np.ndarray:
    """c[a, b] = #{y in [-R, R] : |y| <= a, |t - y| <= b} for a, b in 0..R."""
    a = np.arange(R + 1)[:, None]
    b = np.arange(R + 1)[None, :]
    lo = np.maximum(-a, t - b)
    hi = np.minimum(a, t + b)
    return np.maximum(0, hi - lo + 1).astype(np.int64)


def self_convolution_on_ray(f_rad: np.ndarray, d: int, k: int, t: int) -> float:
    """(f * f)(x) for x = t (1,...,1,0,...,0) with k ones, f radial and supported on Lambda_R.

    Counts pairs (|y|, |x - y|) by a product over coordinates of cumulative
    interval intersections, then differences them in both arguments.
    """
    R = len(f_rad) - 1
    ct = _cum_count_1d(t, R).astype(float)
    c0 = _cum_count_1d(0, R).astype(float)
    cum = ct ** k * c0 ** (d - k)
    exact = cum.copy()
    exact[1:, :] -= cum[:-1, :]
    exact[:, 1:] -= cum[:, :-1]
    exact[1:, 1:] += cum[:-1, :-1]
    return float(f_rad @ exact @ f_rad)


def _fitted_A(d: int, L: int, R: int, C: float) -> tuple[float, dict]:
    f = radial_hypothesis(d, L, C, R)
    prof = {}
    best = 0.0
    for k in range(1, d + 1):
        for t in range(0, R + 1):
            if k > 1 and t == 0:
                continue
            v = self_convolution_on_ray(f, d, k, t)
            ratio = v / float(conclusion_shape(d, L, t))
            prof[(k, t)] = v
            best = max(best, ratio)
    return best, prof


def verify_convolution(d: int, L: int, R: int, C: float = 1.0, tol: float = 0.2) -> ConvolutionResult:
    """Stability of the smallest admissible A under window doubling R -> 2R.

    f saturates the hypothesis on Lambda_R (and vanishes outside); (f * f)
    is evaluated exactly on the rays t (1^k, 0^(d-k)); A_R is the largest
    ratio of (f * f) to the conclusion's shape on the window. The report
    has lhs = |A_R / A_2R - 1| and rhs = ``tol``.
    """
    if d <= 4:
        raise UsageError("the convolution estimate needs d > 4")
    if 2 * R > 4096:
        raise CapacityError("window too large")
    a1, prof = _fitted_A(d, L, R, C)
    a2, _ = _fitted_A(d, L, 2 * R, C)
    rep = InequalityReport("convolution", (d, L, R, C), abs(a1 / a2 - 1.0), tol, tol=0.0)
    return ConvolutionResult(d, L, R, a1, a2, rep, prof)
