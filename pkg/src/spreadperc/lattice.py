"""Lattice geometry, regions and the spread-out kernel.

Points are plain tuples of ints. Regions are small frozen dataclasses with a
``contains`` method and, for the axis-aligned ones, integer face bounds that
the compiled exploration engine consumes directly. Unbounded faces are
encoded by the sentinel ``INF`` so every block-like region is handled by the
same code path.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import UsageError

Point = tuple[int, ...]

# Sentinel for an unbounded face. Far above any coordinate we ever store,
# far below int64 overflow when added to L or multiplied out in overlaps.
INF = 1 << 40


def as_point(x: Sequence[int]) -> Point:
    return tuple(int(c) for c in x)


def origin(d: int) -> Point:
    return (0,) * d


def unit(d: int, j: int = 0, scale: int = 1) -> Point:
    """``scale`` times the j-th unit vector (0-based axis)."""
    e = [0] * d
    e[j] = scale
    return tuple(e)


def linf(x: Sequence[int]) -> int:
    return max((abs(c) for c in x), default=0)


def add(x: Sequence[int], y: Sequence[int]) -> Point:
    _check_dims(x, y)
    return tuple(a + b for a, b in zip(x, y))


def sub(x: Sequence[int], y: Sequence[int]) -> Point:
    _check_dims(x, y)
    return tuple(a - b for a, b in zip(x, y))


def neg(x: Sequence[int]) -> Point:
    return tuple(-a for a in x)


def _check_dims(x, y):
    if len(x) != len(y):
        raise UsageError(f"dimension mismatch: {len(x)} vs {len(y)}")


def _clip_bound(b) -> int:
    if b == math.inf or (isinstance(b, int) and b >= INF):
        return INF
    if b == -math.inf or (isinstance(b, int) and b <= -INF):
        return -INF
    return int(b)


# --------------------------------------------------------------------------
# Regions


@dataclass(frozen=True)
class Box:
    """Lambda_n(center): sites at l-infinity distance at most ``radius``."""

    center: Point
    radius: int

    def __post_init__(self):
        if self.radius < 0:
            raise UsageError("box radius must be >= 0")
        object.__setattr__(self, "center", as_point(self.center))

    @classmethod
    def around_origin(cls, d: int, n: int) -> "Box":
        return cls(origin(d), n)

    def contains(self, x) -> bool:
        return linf(sub(x, self.center)) <= self.radius

    def bounds(self, d: int):
        c = self.center
        if len(c) != d:
            raise UsageError("box dimension mismatch")
        return [ci - self.radius for ci in c], [ci + self.radius for ci in c]

    @property
    def finite(self) -> bool:
        return True


@dataclass(frozen=True)
class HalfSpace:
    """H_n = {x : x_1 >= -n}."""

    shift: int = 0

    def contains(self, x) -> bool:
        return x[0] >= -self.shift

    def bounds(self, d: int):
        lo = [-INF] * d
        hi = [INF] * d
        lo[0] = -self.shift
        return lo, hi

    @property
    def finite(self) -> bool:
        return False


@dataclass(frozen=True)
class GeneralizedBlock:
    """Product of intervals [a_i, b_i] with a_i <= 0 <= b_i; faces may be infinite."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(_clip_bound(a) for a in self.lower)
        hi = tuple(_clip_bound(b) for b in self.upper)
        if len(lo) != len(hi):
            raise UsageError("block bounds have different lengths")
        for a, b in zip(lo, hi):
            if not (a <= 0 <= b):
                raise UsageError("generalized block must satisfy a_i <= 0 <= b_i")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def contains(self, x) -> bool:
        _check_dims(x, self.lower)
        return all(a <= c <= b for a, c, b in zip(self.lower, x, self.upper))

    def bounds(self, d: int):
        if len(self.lower) != d:
            raise UsageError("block dimension mismatch")
        return list(self.lower), list(self.upper)

    @property
    def finite(self) -> bool:
        return all(abs(a) < INF for a in self.lower) and all(b < INF for b in self.upper)


@dataclass(frozen=True)
class Full:
    def contains(self, x) -> bool:
        return True

    def bounds(self, d: int):
        return [-INF] * d, [INF] * d

    @property
    def finite(self) -> bool:
        return False


@dataclass(frozen=True)
class Torus:
    """Discrete torus of even side; coordinates wrap into [-side/2, side/2)."""

    side: int

    def __post_init__(self):
        if self.side < 2 or self.side % 2:
            raise UsageError("torus side must be an even integer >= 2")

    def wrap(self, x) -> Point:
        h = self.side // 2
        return tuple((c + h) % self.side - h for c in x)

    def contains(self, x) -> bool:
        h = self.side // 2
        return all(-h <= c < h for c in x)

    def bounds(self, d: int):
        h = self.side // 2
        return [-h] * d, [h - 1] * d

    @property
    def finite(self) -> bool:
        return True


@dataclass(frozen=True)
class Sites:
    """An explicit finite set of sites (used by the exact oracles)."""

    points: frozenset

    def __init__(self, points):
        object.__setattr__(self, "points", frozenset(as_point(p) for p in points))

    def contains(self, x) -> bool:
        return as_point(x) in self.points

    def bounds(self, d: int):
        if not self.points:
            raise UsageError("empty site set")
        arr = np.array(sorted(self.points), dtype=np.int64).reshape(-1, d)
        return arr.min(axis=0).tolist(), arr.max(axis=0).tolist()

    @property
    def finite(self) -> bool:
        return True


Region = Box | HalfSpace | GeneralizedBlock | Full | Torus | Sites


def region_membership(region, x) -> bool:
    return region.contains(as_point(x))


def as_block(region, d: int) -> GeneralizedBlock:
    """View a box/half-space/full region as a generalized block around 0."""
    lo, hi = region.bounds(d)
    return GeneralizedBlock(tuple(lo), tuple(hi))


def region_boundary_distance(block, x) -> float:
    """l-infinity distance from ``x`` to the boundary of an axis-aligned region.

    Equals min over finite faces of the distance to that face, so ``x`` lies
    on the k-boundary exactly when this returns k. Returns ``math.inf`` when
    the region has no finite face.
    """
    x = as_point(x)
    if not block.contains(x):
        raise UsageError(f"{x} is not in the region")
    lo, hi = block.bounds(len(x))
    best = math.inf
    for a, c, b in zip(lo, x, hi):
        if a > -INF:
            best = min(best, c - a)
        if b < INF:
            best = min(best, b - c)
    return best


def in_boundary(region, x) -> bool:
    """x in S with some l-infinity neighbour at distance 1 outside S."""
    x = as_point(x)
    if not region.contains(x):
        return False
    for off in itertools.product((-1, 0, 1), repeat=len(x)):
        if any(off) and not region.contains(add(x, off)):
            return True
    return False


def box_points(lo: Sequence[int], hi: Sequence[int]) -> Iterator[Point]:
    return itertools.product(*(range(a, b + 1) for a, b in zip(lo, hi)))


def k_boundary(block, k: int, d: int | None = None) -> list[Point]:
    """All points of a finite block at boundary distance exactly k."""
    if not block.finite:
        raise UsageError("k_boundary enumerates finite regions only")
    if d is None:
        d = region_dim(block)
    lo, hi = block.bounds(d)
    return [x for x in box_points(lo, hi) if block.contains(x) and region_boundary_distance(block, x) == k]


def region_dim(region) -> int:
    if isinstance(region, Box):
        return len(region.center)
    if isinstance(region, GeneralizedBlock):
        return len(region.lower)
    if isinstance(region, Sites) and region.points:
        return len(next(iter(region.points)))
    raise UsageError("cannot infer dimension of region")


# --------------------------------------------------------------------------
# Model


@dataclass(frozen=True)
class SpreadOutModel:
    """Spread-out Bernoulli percolation with range L at inverse temperature beta."""

    d: int
    L: int
    beta: float

    def __post_init__(self):
        if self.d < 1:
            raise UsageError("dimension must be >= 1")
        if self.L < 1:
            raise UsageError("range L must be >= 1")
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise UsageError("beta must be a finite real >= 0")

    @property
    def n_neighbors(self) -> int:
        """|Lambda_L^*| = (2L+1)^d - 1."""
        return (2 * self.L + 1) ** self.d - 1

    @property
    def c_L(self) -> float:
        return 1.0 / self.n_neighbors

    @property
    def p(self) -> float:
        """Edge probability on the kernel support, 1 - exp(-beta c_L)."""
        return -math.expm1(-self.beta * self.c_L)

    p_beta = p

    def with_beta(self, beta: float) -> "SpreadOutModel":
        return SpreadOutModel(self.d, self.L, beta)


def kernel(model: SpreadOutModel, u, v) -> float:
    """J(u, v) = c_L if 1 <= |u - v| <= L, else 0."""
    if len(u) != model.d or len(v) != model.d:
        raise UsageError(f"points must have dimension {model.d}")
    r = linf(sub(u, v))
    return model.c_L if 1 <= r <= model.L else 0.0


def edge_probability(model: SpreadOutModel, u, v) -> float:
    j = kernel(model, u, v)
    return -math.expm1(-model.beta * j) if j else 0.0


def spread_out_neighborhood(model: SpreadOutModel, x) -> Iterator[Point]:
    """Points v with 1 <= |v - x| <= L, lexicographic in the offset."""
    x = as_point(x)
    if len(x) != model.d:
        raise UsageError(f"point must have dimension {model.d}")
    rng = range(-model.L, model.L + 1)
    for off in itertools.product(rng, repeat=model.d):
        if any(off):
            yield tuple(a + b for a, b in zip(x, off))
