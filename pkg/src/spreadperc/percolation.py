"""Finite substrates, exact enumeration, cluster exploration and disjoint occurrence.

Exact routines enumerate all 2^E edge configurations of a small graph and
record, for every configuration, the connected-component label of each site.
Probabilities of connectivity events are then weighted sums over that table.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import CapacityError, UsageError
from .lattice import SpreadOutModel, as_point, edge_probability, linf, spread_out_neighborhood, sub

MAX_ENUM_EDGES = 30
MAX_TABLE_EDGES = 22
MAX_MULTI_OPEN = 20


@dataclass(frozen=True)
class FiniteGraph:
    """Explicit sites and undirected edges, each edge open independently with its probability."""

    sites: tuple
    edges: tuple
    probs: tuple

    def __post_init__(self):
        sites = tuple(as_point(s) for s in self.sites)
        if len(set(sites)) != len(sites):
            raise UsageError("duplicate sites")
        index = {s: i for i, s in enumerate(sites)}
        seen = set()
        edges = []
        for a, b in self.edges:
            a, b = as_point(a), as_point(b)
            if a not in index or b not in index:
                raise UsageError(f"edge endpoint not a site: {a}-{b}")
            if a == b:
                raise UsageError("self-loop")
            key = frozenset((a, b))
            if key in seen:
                raise UsageError(f"duplicate edge {a}-{b}")
            seen.add(key)
            edges.append((a, b))
        if len(self.probs) != len(edges):
            raise UsageError("one probability per edge required")
        for q in self.probs:
            if not (0.0 <= q <= 1.0):
                raise UsageError("edge probabilities must lie in [0, 1]")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "edges", tuple(edges))
        object.__setattr__(self, "probs", tuple(float(q) for q in self.probs))

    @classmethod
    def induced(cls, model: SpreadOutModel, sites) -> "FiniteGraph":
        """All spread-out edges between the given sites, with model probabilities."""
        sites = [as_point(s) for s in sites]
        edges, probs = [], []
        for a, b in itertools.combinations(sites, 2):
            if 1 <= linf(sub(a, b)) <= model.L:
                edges.append((a, b))
                probs.append(edge_probability(model, a, b))
        return cls(tuple(sites), tuple(edges), tuple(probs))

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def index(self, x) -> int:
        try:
            return self.sites.index(as_point(x))
        except ValueError:
            raise UsageError(f"{x} is not a site of the graph") from None

    def edge_arrays(self):
        idx = {s: i for i, s in enumerate(self.sites)}
        ei = np.array([idx[a] for a, _ in self.edges], np.int64)
        ej = np.array([idx[b] for _, b in self.edges], np.int64)
        return ei, ej, np.array(self.probs, np.float64)

    def allowed(self, region) -> np.ndarray:
        """Boolean mask of sites lying in ``region`` (None means every site)."""
        if region is None:
            return np.ones(len(self.sites), bool)
        return np.array([region.contains(s) for s in self.sites], bool)


# EdgeConfig is a plain int bitmask: bit i set iff edge i is open.


def config_weight(g: FiniteGraph, config: int) -> float:
    w = 1.0
    for i, q in enumerate(g.probs):
        w *= q if (config >> i) & 1 else 1.0 - q
    return w


# --------------------------------------------------------------------------
# Enumeration kernels


@njit(cache=True)
def _find_root(parent, a):
    while parent[a] != a:
        parent[a] = parent[parent[a]]
        a = parent[a]
    return a


@njit(cache=True)
def _labels_table(n, ei, ej, probs, allowed):
    """Component labels per configuration using only edges inside ``allowed``."""
    E = ei.shape[0]
    nconf = 1 << E
    labels = np.empty((nconf, n), np.int8)
    weights = np.empty(nconf)
    parent = np.empty(n, np.int64)
    for c in range(nconf):
        w = 1.0
        for s in range(n):
            parent[s] = s
        for e in range(E):
            if (c >> e) & 1:
                w *= probs[e]
                if allowed[ei[e]] and allowed[ej[e]]:
                    ra = _find_root(parent, ei[e])
                    rb = _find_root(parent, ej[e])
                    if ra != rb:
                        parent[ra] = rb
            else:
                w *= 1.0 - probs[e]
        weights[c] = w
        for s in range(n):
            labels[c, s] = _find_root(parent, s)
    return labels, weights


@njit(cache=True)
def _conn_matrix_stream(n, ei, ej, probs, allowed):
    E = ei.shape[0]
    out = np.zeros((n, n))
    parent = np.empty(n, np.int64)
    for c in range(1 << E):
        w = 1.0
        for s in range(n):
            parent[s] = s
        for e in range(E):
            if (c >> e) & 1:
                w *= probs[e]
                if allowed[ei[e]] and allowed[ej[e]]:
                    ra = _find_root(parent, ei[e])
                    rb = _find_root(parent, ej[e])
                    if ra != rb:
                        parent[ra] = rb
            else:
                w *= 1.0 - probs[e]
        for a in range(n):
            ra = _find_root(parent, a)
            for b in range(n):
                if ra == _find_root(parent, b):
                    out[a, b] += w
    return out


class ConfigTable:
    """Per-configuration component labels of a graph under a site restriction."""

    def __init__(self, g: FiniteGraph, region=None):
        if g.n_edges > MAX_TABLE_EDGES:
            raise CapacityError(f"{g.n_edges} edges exceed the table limit {MAX_TABLE_EDGES}")
        self.graph = g
        self.allowed = g.allowed(region)
        ei, ej, probs = g.edge_arrays()
        self.labels, self.weights = _labels_table(len(g.sites), ei, ej, probs, self.allowed)

    def connected(self, a: int, b: int) -> np.ndarray:
        """Boolean vector over configurations: a and b connected (a == b counts)."""
        if a == b:
            return np.ones(len(self.weights), bool)
        if not (self.allowed[a] and self.allowed[b]):
            return np.zeros(len(self.weights), bool)
        return self.labels[:, a] == self.labels[:, b]

    def prob(self, event: np.ndarray) -> float:
        return float(self.weights[event].sum())

    def matrix(self) -> np.ndarray:
        """P[a <-> b] for all site pairs, both endpoints restricted to the region."""
        n = len(self.graph.sites)
        out = np.empty((n, n))
        for a in range(n):
            for b in range(a, n):
                out[a, b] = out[b, a] = self.prob(self.connected(a, b))
        return out


def connectivity_matrix(g: FiniteGraph, region=None) -> np.ndarray:
    """Exact P[a <-> b in region] for every pair of sites (diagonal is 1)."""
    if g.n_edges > MAX_ENUM_EDGES:
        raise CapacityError(f"{g.n_edges} edges exceed the enumeration limit {MAX_ENUM_EDGES}")
    allowed = g.allowed(region)
    if g.n_edges <= MAX_TABLE_EDGES:
        m = ConfigTable(g, region).matrix()
    else:
        ei, ej, probs = g.edge_arrays()
        m = _conn_matrix_stream(len(g.sites), ei, ej, probs, allowed)
    # sites outside the region connect only to themselves
    out = np.where(np.outer(allowed, allowed), m, 0.0)
    np.fill_diagonal(out, 1.0)
    return out


def enumerate_connect_prob(g: FiniteGraph, region, x, y) -> float:
    """Exact P[x <-> y] using only edges with both endpoints in ``region``."""
    if g.n_edges > MAX_ENUM_EDGES:
        raise CapacityError(f"{g.n_edges} edges exceed the enumeration limit {MAX_ENUM_EDGES}")
    a, b = g.index(x), g.index(y)
    if a == b:
        return 1.0
    return float(connectivity_matrix(g, region)[a, b])


# --------------------------------------------------------------------------
# Python-level exploration with an explicit edge record


@dataclass
class ClusterSample:
    origin: tuple
    region: object
    sites: set
    touched_edges: dict = field(default_factory=dict)
    capped: bool = False


def explore_cluster(model: SpreadOutModel, region, origin, rng, cap: int = 1_000_000) -> ClusterSample:
    """Breadth-first exploration of the open cluster of ``origin`` inside ``region``.

    Each edge is sampled the first time one of its endpoints is processed and
    stored in ``touched_edges`` under its unordered key; later encounters read
    the stored outcome. ``rng`` is a numpy Generator. This is the reference
    implementation; the estimators use the compiled engine.
    """
    origin = as_point(origin)
    if cap < 1:
        raise UsageError("cap must be >= 1")
    if not region.contains(origin):
        raise UsageError("origin must lie in the region")
    sample = ClusterSample(origin, region, {origin})
    queue = [origin]
    head = 0
    p = model.p
    while head < len(queue):
        y = queue[head]
        head += 1
        for v in spread_out_neighborhood(model, y):
            if not region.contains(v):
                continue
            key = frozenset((y, v))
            is_open = sample.touched_edges.get(key)
            if is_open is None:
                is_open = bool(rng.random() < p)
                sample.touched_edges[key] = is_open
            if is_open and v not in sample.sites:
                if len(sample.sites) >= cap:
                    sample.capped = True
                    return sample
                sample.sites.add(v)
                queue.append(v)
    return sample


# --------------------------------------------------------------------------
# Disjoint occurrence of connectivity events


@njit(cache=True)
def _connected_in(n, ei, ej, usable, allowed, x, y, parent):
    if x == y:
        return True
    for s in range(n):
        parent[s] = s
    for e in range(ei.shape[0]):
        if usable[e] and allowed[ei[e]] and allowed[ej[e]]:
            ra = _find_root(parent, ei[e])
            rb = _find_root(parent, ej[e])
            if ra != rb:
                parent[ra] = rb
    return _find_root(parent, x) == _find_root(parent, y)


@njit(cache=True)
def _pair_disjoint(n, ei, ej, open_, allowA, allowB, x1, y1, x2, y2):
    """Search simple open paths x1 -> y1 inside allowA, each leaving B a witness."""
    E = ei.shape[0]
    parent = np.empty(n, np.int64)
    usable = open_.copy()
    if x1 == y1:
        return _connected_in(n, ei, ej, usable, allowB, x2, y2, parent)
    if not (allowA[x1] and allowA[y1]):
        return False
    # iterative DFS over simple paths; stack holds the next edge index to try per depth
    on_path = np.zeros(n, np.bool_)
    path_edges = np.empty(n, np.int64)
    next_edge = np.zeros(n + 1, np.int64)
    verts = np.empty(n + 1, np.int64)
    depth = 0
    verts[0] = x1
    on_path[x1] = True
    next_edge[0] = 0
    while depth >= 0:
        u = verts[depth]
        advanced = False
        e = next_edge[depth]
        while e < E:
            if open_[e] and allowA[ei[e]] and allowA[ej[e]] and (ei[e] == u or ej[e] == u):
                w = ej[e] if ei[e] == u else ei[e]
                if not on_path[w]:
                    next_edge[depth] = e + 1
                    path_edges[depth] = e
                    if w == y1:
                        for k in range(depth + 1):
                            usable[path_edges[k]] = False
                        ok = _connected_in(n, ei, ej, usable, allowB, x2, y2, parent)
                        for k in range(depth + 1):
                            usable[path_edges[k]] = True
                        if ok:
                            return True
                        e += 1
                        continue
                    depth += 1
                    verts[depth] = w
                    on_path[w] = True
                    next_edge[depth] = 0
                    advanced = True
                    break
            e += 1
        if not advanced:
            on_path[verts[depth]] = False
            depth -= 1
    return False


def _open_mask(g: FiniteGraph, config: int) -> np.ndarray:
    return np.array([(config >> i) & 1 for i in range(g.n_edges)], np.bool_)


def _event_indices(g, event):
    x, y = event[0], event[1]
    region = event[2] if len(event) > 2 else None
    return g.index(x), g.index(y), g.allowed(region)


def disjoint_occurrence_pair(g: FiniteGraph, config: int, ev1, ev2) -> bool:
    """Whether {x1 <-> y1} and {x2 <-> y2} occur on edge-disjoint open witnesses.

    Events are ``(x, y)`` or ``(x, y, region)``; a region restricts the event
    to edges with both endpoints inside it. Witnesses of an increasing
    connectivity event can be taken to be simple open paths, so the search
    runs over simple paths for the first event and asks for a connection in
    the leftover open edges for the second.
    """
    x1, y1, a1 = _event_indices(g, ev1)
    x2, y2, a2 = _event_indices(g, ev2)
    ei, ej, _ = g.edge_arrays()
    return bool(_pair_disjoint(len(g.sites), ei, ej, _open_mask(g, config), a1, a2, x1, y1, x2, y2))


@njit(cache=True)
def _multi_assign(n, ei, ej, open_idx, xs, ys, allows):
    """Try every assignment of open edges to events; True if each event holds."""
    k = xs.shape[0]
    m = open_idx.shape[0]
    E = ei.shape[0]
    parent = np.empty(n, np.int64)
    usable = np.zeros(E, np.bool_)
    owner = np.zeros(m, np.int64)
    total = 1
    for _ in range(m):
        total *= k
    for code in range(total):
        c = code
        for i in range(m):
            owner[i] = c % k
            c //= k
        ok = True
        for t in range(k):
            usable[:] = False
            for i in range(m):
                if owner[i] == t:
                    usable[open_idx[i]] = True
            if not _connected_in(n, ei, ej, usable, allows[t], xs[t], ys[t], parent):
                ok = False
                break
        if ok:
            return True
    return False


def disjoint_occurrence_multi(g: FiniteGraph, config: int, events) -> bool:
    """Disjoint occurrence of up to three connectivity events by exhaustive assignment."""
    events = list(events)
    if len(events) > 3:
        raise UsageError("at most three events")
    if not events:
        return True
    open_idx = np.array([i for i in range(g.n_edges) if (config >> i) & 1], np.int64)
    if len(open_idx) > MAX_MULTI_OPEN:
        raise CapacityError(f"{len(open_idx)} open edges exceed the limit {MAX_MULTI_OPEN}")
    idx = [_event_indices(g, ev) for ev in events]
    xs = np.array([a for a, _, _ in idx], np.int64)
    ys = np.array([b for _, b, _ in idx], np.int64)
    allows = np.array([m for _, _, m in idx], np.bool_)
    if all(x == y for x, y in zip(xs, ys)):
        return True
    ei, ej, _ = g.edge_arrays()
    if len(open_idx) == 0:
        return bool(np.all(xs == ys))
    return bool(_multi_assign(len(g.sites), ei, ej, open_idx, xs, ys, allows))


def disjoint_probability(g: FiniteGraph, ev1, ev2) -> float:
    """Exact P[ev1 o ev2] by enumeration."""
    if g.n_edges > MAX_ENUM_EDGES:
        raise CapacityError("too many edges")
    x1, y1, a1 = _event_indices(g, ev1)
    x2, y2, a2 = _event_indices(g, ev2)
    ei, ej, probs = g.edge_arrays()
    return float(_disjoint_prob(len(g.sites), ei, ej, probs, a1, a2, x1, y1, x2, y2))


@njit(cache=True)
def _disjoint_prob(n, ei, ej, probs, a1, a2, x1, y1, x2, y2):
    E = ei.shape[0]
    open_ = np.zeros(E, np.bool_)
    tot = 0.0
    for c in range(1 << E):
        w = 1.0
        for e in range(E):
            if (c >> e) & 1:
                open_[e] = True
                w *= probs[e]
            else:
                open_[e] = False
                w *= 1.0 - probs[e]
        if _pair_disjoint(n, ei, ej, open_, a1, a2, x1, y1, x2, y2):
            tot += w
    return tot
