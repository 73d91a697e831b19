"""Compiled cluster-exploration kernels.

Everything here works on plain numpy arrays so numba can compile it. A
cluster is grown by breadth-first search; the site array doubles as the BFS
queue and an open-addressing hash table maps coordinates to site indices.
Edge outcomes are drawn with geometric skips over the offset indices of
Lambda_L^*, so the cost per site is about one uniform draw per open edge
rather than one per neighbour.

Regions arrive encoded as per-axis bounds (``lo``/``hi``, with a large
sentinel for unbounded faces), an optional torus side, and an optional
membership mask over the bounding box for arbitrary finite site sets.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .lattice import INF, Box, Full, GeneralizedBlock, HalfSpace, Sites, Torus
from .errors import UsageError

EMPTY = -1


# --------------------------------------------------------------------------
# Region encoding


def encode_region(region, d: int):
    """Return (lo, hi, torus_side, mask, mask_shape) for the kernels."""
    empty_mask = np.zeros(0, dtype=np.uint8)
    no_shape = np.zeros(d, dtype=np.int64)
    if isinstance(region, Torus):
        lo, hi = region.bounds(d)
        return (np.array(lo, np.int64), np.array(hi, np.int64), region.side, empty_mask, no_shape)
    if isinstance(region, (Box, HalfSpace, GeneralizedBlock, Full)):
        lo, hi = region.bounds(d)
        return (np.array(lo, np.int64), np.array(hi, np.int64), 0, empty_mask, no_shape)
    if isinstance(region, Sites):
        lo, hi = region.bounds(d)
        lo = np.array(lo, np.int64)
        hi = np.array(hi, np.int64)
        shape = hi - lo + 1
        if int(np.prod(shape)) > 50_000_000:
            raise UsageError("site set bounding box too large for a mask")
        mask = np.zeros(int(np.prod(shape)), dtype=np.uint8)
        for p in region.points:
            mask[_flat_index_py(np.array(p, np.int64) - lo, shape)] = 1
        return lo, hi, 0, mask, shape
    raise UsageError(f"unsupported region {region!r}")


def _flat_index_py(rel, shape):
    idx = 0
    for j in range(len(shape)):
        idx = idx * int(shape[j]) + int(rel[j])
    return idx


def table_size(cap: int) -> int:
    size = 16
    while size < 2 * (cap + 1):
        size *= 2
    return size


# --------------------------------------------------------------------------
# Hash table on int32 coordinate rows


@njit(cache=True, inline="always")
def _hash(v, d, tmask):
    h = np.int64(-3750763034362895579)
    for j in range(d):
        h = (h ^ np.int64(v[j])) * np.int64(1099511628211)
    h ^= h >> 29
    h *= np.int64(-4658895280553007687)
    h ^= h >> 32
    return h & tmask


@njit(cache=True)
def _find(sites, table, v, d, tmask):
    """Slot holding v, or the empty slot where v would go (negated minus one)."""
    h = _hash(v, d, tmask)
    while True:
        s = table[h]
        if s == EMPTY:
            return -h - 1
        same = True
        for j in range(d):
            if sites[s, j] != v[j]:
                same = False
                break
        if same:
            return h
        h = (h + 1) & tmask


@njit(cache=True)
def _contains(sites, table, v, d, tmask):
    return _find(sites, table, v, d, tmask) >= 0


@njit(cache=True)
def _clear(table, slots, n):
    for i in range(n):
        table[slots[i]] = EMPTY


# --------------------------------------------------------------------------
# Region membership


@njit(cache=True)
def _in_region(v, d, lo, hi, torus_side, mask, mshape):
    """Membership test; wraps v in place on a torus."""
    if torus_side > 0:
        h = torus_side // 2
        for j in range(d):
            v[j] = (v[j] + h) % torus_side - h
        return True
    for j in range(d):
        if v[j] < lo[j] or v[j] > hi[j]:
            return False
    if mask.shape[0] > 0:
        idx = 0
        for j in range(d):
            idx = idx * mshape[j] + (v[j] - lo[j])
        return mask[idx] != 0
    return True


@njit(cache=True)
def _decode_offset(j, d, L, center, out):
    idx = j if j < center else j + 1
    nb = 2 * L + 1
    for k in range(d):
        out[k] = idx % nb - L
        idx //= nb


@njit(cache=True)
def _count_out(y, d, L, lo, hi, torus_side, mask, mshape, nbd, tmp):
    """Number of z with |z - y| <= L, z != y, lying outside the region."""
    if torus_side > 0:
        return 0
    if mask.shape[0] == 0:
        inside = 1
        for j in range(d):
            a = max(np.int64(y[j]) - L, lo[j])
            b = min(np.int64(y[j]) + L, hi[j])
            inside *= max(np.int64(0), b - a + 1)
        return nbd - inside
    out = 0
    center = (nbd - 1) // 2
    for jj in range(nbd - 1):
        _decode_offset(jj, d, L, center, tmp)
        for k in range(d):
            tmp[k] += y[k]
        if not _in_region(tmp, d, lo, hi, torus_side, mask, mshape):
            out += 1
    return out


# --------------------------------------------------------------------------
# Single-cluster exploration


@njit(cache=True)
def _explore(rng, d, L, p, origin, lo, hi, torus_side, mask, mshape, cap, sites, table, slots, tmask):
    """Grow the open cluster of ``origin``; returns (n_sites, capped)."""
    nb = 2 * L + 1
    nbd = 1
    for _ in range(d):
        nbd *= nb
    M = nbd - 1
    center = M // 2
    v = np.empty(d, np.int64)
    off = np.empty(d, np.int64)
    for j in range(d):
        v[j] = origin[j]
    slot = -_find(sites, table, v, d, tmask) - 1
    for j in range(d):
        sites[0, j] = v[j]
    table[slot] = 0
    slots[0] = slot
    n = 1
    if p <= 0.0:
        return n, False
    lq = math.log1p(-p) if p < 1.0 else -np.inf
    head = 0
    while head < n:
        j = -1
        while True:
            if p >= 1.0:
                j += 1
            else:
                u = 1.0 - rng.random()
                s = math.log(u) / lq
                if s >= M:
                    break
                j += 1 + int(s)
            if j >= M:
                break
            _decode_offset(j, d, L, center, off)
            for k in range(d):
                v[k] = sites[head, k] + off[k]
            if not _in_region(v, d, lo, hi, torus_side, mask, mshape):
                continue
            f = _find(sites, table, v, d, tmask)
            if f >= 0:
                continue
            if n >= cap:
                return n, True
            slot = -f - 1
            for k in range(d):
                sites[n, k] = v[k]
            table[slot] = n
            slots[n] = slot
            n += 1
        head += 1
    return n, False


@njit(cache=True)
def _linf_row(sites, i, d):
    r = 0
    for j in range(d):
        a = abs(np.int64(sites[i, j]))
        if a > r:
            r = a
    return r


@njit(cache=True)
def explore_batch(rng, n_clusters, d, L, p, origin, lo, hi, torus_side, mask, mshape, cap,
                  targets, r_hist, face, use_face, r_face):
    """Explore ``n_clusters`` independent clusters and reduce their functionals.

    Returns sizes, capped flags, exit counts (number of (y, z) pairs with y in
    the cluster and z a spread-out neighbour outside the region), a target
    hit matrix, and sum / sum-of-squares accumulators for the l-infinity
    radial histogram and the face histogram (sites with x_1 == face other
    than the origin, binned by l-infinity norm). Histograms skip capped
    clusters; the last bin of each histogram collects overflow.
    """
    tsize = 16
    while tsize < 2 * (cap + 1):
        tsize *= 2
    tmask = np.int64(tsize - 1)
    sites = np.empty((cap + 1, d), np.int32)
    table = np.full(tsize, EMPTY, np.int32)
    slots = np.empty(cap + 1, np.int64)
    nb = 2 * L + 1
    nbd = 1
    for _ in range(d):
        nbd *= nb
    T = targets.shape[0]
    sizes = np.zeros(n_clusters, np.int64)
    capped = np.zeros(n_clusters, np.uint8)
    exits = np.zeros(n_clusters, np.int64)
    hits = np.zeros((n_clusters, T), np.uint8)
    nh = r_hist + 2
    nf = r_face + 2
    h_sum = np.zeros(nh)
    h_sq = np.zeros(nh)
    hc_sum = np.zeros(nh)
    hc_sq = np.zeros(nh)
    f_sum = np.zeros(nf)
    f_sq = np.zeros(nf)
    fc_sum = np.zeros(nf)
    fc_sq = np.zeros(nf)
    hist = np.zeros(nh, np.int64)
    fh = np.zeros(nf, np.int64)
    tmp = np.empty(d, np.int64)
    tv = np.empty(d, np.int64)
    for c in range(n_clusters):
        n, cp = _explore(rng, d, L, p, origin, lo, hi, torus_side, mask, mshape, cap,
                         sites, table, slots, tmask)
        sizes[c] = n
        if cp:
            capped[c] = 1
        else:
            ex = 0
            hist[:] = 0
            fh[:] = 0
            for i in range(n):
                ex += _count_out(sites[i], d, L, lo, hi, torus_side, mask, mshape, nbd, tmp)
                r = _linf_row(sites, i, d)
                if r <= r_hist:
                    hist[r] += 1
                else:
                    hist[nh - 1] += 1
                if use_face and sites[i, 0] == face:
                    is_origin = True
                    for j in range(d):
                        if sites[i, j] != origin[j]:
                            is_origin = False
                            break
                    if not is_origin:
                        if r <= r_face:
                            fh[r] += 1
                        else:
                            fh[nf - 1] += 1
            exits[c] = ex
            for t in range(T):
                for j in range(d):
                    tv[j] = targets[t, j]
                if _contains(sites, table, tv, d, tmask):
                    hits[c, t] = 1
            acc = 0
            for b in range(nh):
                x = hist[b]
                h_sum[b] += x
                h_sq[b] += x * x
                acc += x
                hc_sum[b] += acc
                hc_sq[b] += acc * acc
            acc = 0
            for b in range(nf):
                x = fh[b]
                f_sum[b] += x
                f_sq[b] += x * x
                acc += x
                fc_sum[b] += acc
                fc_sq[b] += acc * acc
        _clear(table, slots, n)
    return sizes, capped, exits, hits, h_sum, h_sq, hc_sum, hc_sq, f_sum, f_sq, fc_sum, fc_sq


@njit(cache=True)
def explore_sites(rng, d, L, p, origin, lo, hi, torus_side, mask, mshape, cap):
    """One exploration returning the explicit site array and the capped flag."""
    tsize = 16
    while tsize < 2 * (cap + 1):
        tsize *= 2
    tmask = np.int64(tsize - 1)
    sites = np.empty((cap + 1, d), np.int32)
    table = np.full(tsize, EMPTY, np.int32)
    slots = np.empty(cap + 1, np.int64)
    n, cp = _explore(rng, d, L, p, origin, lo, hi, torus_side, mask, mshape, cap,
                     sites, table, slots, tmask)
    return sites[:n].copy(), cp


@njit(cache=True)
def capped_count(rng, n_clusters, d, L, p, cap, stop_after):
    """Explore full-lattice clusters of 0 and count how many hit ``cap``.

    Stops early once ``stop_after`` capped clusters are seen; returns
    (capped, explored).
    """
    tsize = 16
    while tsize < 2 * (cap + 1):
        tsize *= 2
    tmask = np.int64(tsize - 1)
    sites = np.empty((cap + 1, d), np.int32)
    table = np.full(tsize, EMPTY, np.int32)
    slots = np.empty(cap + 1, np.int64)
    origin = np.zeros(d, np.int64)
    lo = np.full(d, -INF, np.int64)
    hi = np.full(d, INF, np.int64)
    mask = np.zeros(0, np.uint8)
    mshape = np.zeros(d, np.int64)
    k = 0
    for c in range(n_clusters):
        n, cp = _explore(rng, d, L, p, origin, lo, hi, 0, mask, mshape, cap,
                         sites, table, slots, tmask)
        _clear(table, slots, n)
        if cp:
            k += 1
            if k >= stop_after:
                return k, c + 1
    return k, n_clusters


# --------------------------------------------------------------------------
# Nested exploration: one configuration, growing regions


@njit(cache=True)
def nested_batch(rng, n_clusters, d, L, p, halfspace, K, cap):
    """phi and face statistics for the regions R_0 within R_1 within ... R_K.

    ``halfspace`` False: R_k = Lambda_k. True: R_k = {x_1 >= -k}. One
    configuration per cluster serves every k: open edges that leave the
    current region are parked and re-examined when the region grows.

    Returns per-k arrays: n_ok (clusters uncapped through stage k), sums and
    sums of squares of the exit count, and of the face count (sites with
    x_1 = -k other than 0; half-space mode only).
    """
    tsize = 16
    while tsize < 2 * (cap + 1):
        tsize *= 2
    tmask = np.int64(tsize - 1)
    sites = np.empty((cap + 1, d), np.int32)
    table = np.full(tsize, EMPTY, np.int32)
    slots = np.empty(cap + 1, np.int64)
    dcap = 4 * cap + 64
    dpos = np.empty((dcap, d), np.int32)
    dlev = np.empty(dcap, np.int64)
    nb = 2 * L + 1
    nbd = 1
    for _ in range(d):
        nbd *= nb
    M = nbd - 1
    center = M // 2
    nlat = nbd // nb
    # per-level linked lists of sites (box mode)
    lhead = np.full(K + 1, -1, np.int64)
    lnext = np.empty(cap + 1, np.int64)
    # x_1 histogram over [-K, L] (half-space mode)
    xcnt = np.zeros(K + L + 2, np.int64)
    n_ok = np.zeros(K + 1, np.int64)
    e_sum = np.zeros(K + 1)
    e_sq = np.zeros(K + 1)
    f_sum = np.zeros(K + 1)
    f_sq = np.zeros(K + 1)
    v = np.empty(d, np.int64)
    off = np.empty(d, np.int64)
    lo = np.empty(d, np.int64)
    hi = np.empty(d, np.int64)
    lq = math.log1p(-p) if 0.0 < p < 1.0 else -np.inf
    for c in range(n_clusters):
        lhead[:] = -1
        xcnt[:] = 0
        # origin
        for j in range(d):
            v[j] = 0
        slot = -_find(sites, table, v, d, tmask) - 1
        for j in range(d):
            sites[0, j] = 0
        table[slot] = 0
        slots[0] = slot
        lnext[0] = -1
        lhead[0] = 0
        xcnt[K] += 1
        n = 1
        head = 0
        ndef = 0
        capped = False
        for k in range(K + 1):
            # release parked edges whose endpoint is now inside
            keep = 0
            for i in range(ndef):
                if dlev[i] == k and not capped:
                    for j in range(d):
                        v[j] = dpos[i, j]
                    f = _find(sites, table, v, d, tmask)
                    if f < 0:
                        if n >= cap:
                            capped = True
                        else:
                            slot = -f - 1
                            for j in range(d):
                                sites[n, j] = v[j]
                            table[slot] = n
                            slots[n] = slot
                            lnext[n] = lhead[k]
                            lhead[k] = n
                            x0 = v[0]
                            if x0 <= L:
                                xcnt[x0 + K] += 1
                            n += 1
                elif dlev[i] > k:
                    if keep != i:
                        for j in range(d):
                            dpos[keep, j] = dpos[i, j]
                        dlev[keep] = dlev[i]
                    keep += 1
            ndef = keep
            while head < n and not capped and p > 0.0:
                j = -1
                while True:
                    if p >= 1.0:
                        j += 1
                    else:
                        u = 1.0 - rng.random()
                        s = math.log(u) / lq
                        if s >= M:
                            break
                        j += 1 + int(s)
                    if j >= M:
                        break
                    _decode_offset(j, d, L, center, off)
                    for q in range(d):
                        v[q] = sites[head, q] + off[q]
                    if halfspace:
                        lev = max(np.int64(0), -v[0])
                    else:
                        lev = 0
                        for q in range(d):
                            a = abs(v[q])
                            if a > lev:
                                lev = a
                    if lev > k:
                        if lev <= K:
                            if ndef >= dcap:
                                capped = True
                                break
                            for q in range(d):
                                dpos[ndef, q] = v[q]
                            dlev[ndef] = lev
                            ndef += 1
                        continue
                    f = _find(sites, table, v, d, tmask)
                    if f >= 0:
                        continue
                    if n >= cap:
                        capped = True
                        break
                    slot = -f - 1
                    for q in range(d):
                        sites[n, q] = v[q]
                    table[slot] = n
                    slots[n] = slot
                    lnext[n] = lhead[lev]
                    lhead[lev] = n
                    x0 = v[0]
                    if x0 <= L:
                        xcnt[x0 + K] += 1
                    n += 1
                head += 1
            if capped:
                break
            # stage statistics
            n_ok[k] += 1
            if halfspace:
                ex = 0
                for y0 in range(-k, L - k):
                    ex += xcnt[y0 + K] * (L - k - y0)
                ex *= nlat
                fc = xcnt[K - k]
                if k == 0:
                    fc -= 1
            else:
                for q in range(d):
                    lo[q] = -k
                    hi[q] = k
                ex = 0
                for lev2 in range(max(0, k - L + 1), k + 1):
                    i = lhead[lev2]
                    while i >= 0:
                        inside = 1
                        for q in range(d):
                            a = max(np.int64(sites[i, q]) - L, lo[q])
                            b = min(np.int64(sites[i, q]) + L, hi[q])
                            inside *= b - a + 1
                        ex += nbd - inside
                        i = lnext[i]
                fc = 0
            e_sum[k] += ex
            e_sq[k] += float(ex) * float(ex)
            f_sum[k] += fc
            f_sq[k] += float(fc) * float(fc)
        _clear(table, slots, n)
    return n_ok, e_sum, e_sq, f_sum, f_sq


# --------------------------------------------------------------------------
# Symmetry-class tables for the triangle diagram


@njit(cache=True)
def _binom(n, k):
    if k < 0 or k > n:
        return np.int64(0)
    r = np.int64(1)
    for i in range(1, k + 1):
        r = r * (n - k + i) // i
    return r


def n_classes(d: int, rmax: int) -> int:
    return math.comb(rmax + d, d)


@njit(cache=True)
def _class_rank(w, d, srt):
    """Rank of the sorted absolute coordinates among multisets of size d."""
    for j in range(d):
        srt[j] = abs(w[j])
    # insertion sort, d is small
    for i in range(1, d):
        x = srt[i]
        j = i - 1
        while j >= 0 and srt[j] > x:
            srt[j + 1] = srt[j]
            j -= 1
        srt[j + 1] = x
    r = np.int64(0)
    for i in range(d):
        r += _binom(srt[i] + i, i + 1)
    return r


@njit(cache=True)
def _class_size(srt, d):
    """Number of lattice points sharing the sorted absolute coordinates ``srt``."""
    num = np.int64(1)
    for i in range(2, d + 1):
        num *= i
    run = 1
    for i in range(1, d + 1):
        if i < d and srt[i] == srt[i - 1]:
            run += 1
        else:
            f = np.int64(1)
            for t in range(2, run + 1):
                f *= t
            num //= f
            run = 1
    nz = 0
    for i in range(d):
        if srt[i] != 0:
            nz += 1
    return num * (np.int64(1) << nz)


@njit(cache=True)
def gtable_fill(rng, n_clusters, d, L, p, cap, rmax, counts):
    """Add class-binned site counts of full-lattice clusters within Lambda_rmax.

    Returns the number of capped clusters (those contribute nothing).
    """
    tsize = 16
    while tsize < 2 * (cap + 1):
        tsize *= 2
    tmask = np.int64(tsize - 1)
    sites = np.empty((cap + 1, d), np.int32)
    table = np.full(tsize, EMPTY, np.int32)
    slots = np.empty(cap + 1, np.int64)
    origin = np.zeros(d, np.int64)
    lo = np.full(d, -INF, np.int64)
    hi = np.full(d, INF, np.int64)
    mask = np.zeros(0, np.uint8)
    mshape = np.zeros(d, np.int64)
    srt = np.empty(d, np.int64)
    w = np.empty(d, np.int64)
    ncap = 0
    for c in range(n_clusters):
        n, cp = _explore(rng, d, L, p, origin, lo, hi, 0, mask, mshape, cap,
                         sites, table, slots, tmask)
        if cp:
            ncap += 1
        else:
            for i in range(n):
                if _linf_row(sites, i, d) <= rmax:
                    for j in range(d):
                        w[j] = sites[i, j]
                    counts[_class_rank(w, d, srt)] += 1
        _clear(table, slots, n)
    return ncap


@njit(cache=True)
def _g_lookup(counts, n_table, w, d, srt):
    r = _class_rank(w, d, srt)
    return counts[r] / (n_table * _class_size(srt, d))


@njit(cache=True)
def triangle_pairs(rng, n_pairs, d, L, p, cap, windows, counts, n_table):
    """Pair estimator of the windowed triangle sums.

    For independent clusters C1, C2 of 0 this accumulates
    sum_{x in C1, z in C2} G(x - z) over x, z in Lambda_R for each window R,
    with G read from the class table. Returns per-window sums and sums of
    squares, the same for consecutive-window increments, and the number of
    pairs discarded because a cluster was capped.
    """
    tsize = 16
    while tsize < 2 * (cap + 1):
        tsize *= 2
    tmask = np.int64(tsize - 1)
    sites = np.empty((cap + 1, d), np.int32)
    table = np.full(tsize, EMPTY, np.int32)
    slots = np.empty(cap + 1, np.int64)
    origin = np.zeros(d, np.int64)
    lo = np.full(d, -INF, np.int64)
    hi = np.full(d, INF, np.int64)
    mask = np.zeros(0, np.uint8)
    mshape = np.zeros(d, np.int64)
    srt = np.empty(d, np.int64)
    w = np.empty(d, np.int64)
    nw = windows.shape[0]
    rmax = windows[nw - 1]
    a1 = np.empty((cap + 1, d), np.int32)
    r1 = np.empty(cap + 1, np.int64)
    a2 = np.empty((cap + 1, d), np.int32)
    r2 = np.empty(cap + 1, np.int64)
    s_sum = np.zeros(nw)
    s_sq = np.zeros(nw)
    i_sum = np.zeros(nw)
    i_sq = np.zeros(nw)
    byw = np.zeros(nw)
    ndrop = 0
    for c in range(n_pairs):
        n, cp = _explore(rng, d, L, p, origin, lo, hi, 0, mask, mshape, cap,
                         sites, table, slots, tmask)
        m1 = 0
        if not cp:
            for i in range(n):
                r = _linf_row(sites, i, d)
                if r <= rmax:
                    for j in range(d):
                        a1[m1, j] = sites[i, j]
                    r1[m1] = r
                    m1 += 1
        _clear(table, slots, n)
        n, cp2 = _explore(rng, d, L, p, origin, lo, hi, 0, mask, mshape, cap,
                          sites, table, slots, tmask)
        m2 = 0
        if not cp2:
            for i in range(n):
                r = _linf_row(sites, i, d)
                if r <= rmax:
                    for j in range(d):
                        a2[m2, j] = sites[i, j]
                    r2[m2] = r
                    m2 += 1
        _clear(table, slots, n)
        if cp or cp2:
            ndrop += 1
            continue
        byw[:] = 0.0
        for i1 in range(m1):
            for i2 in range(m2):
                rr = max(r1[i1], r2[i2])
                for j in range(d):
                    w[j] = a1[i1, j] - a2[i2, j]
                g = _g_lookup(counts, n_table, w, d, srt)
                for b in range(nw):
                    if rr <= windows[b]:
                        byw[b] += g
                        break
        acc = 0.0
        for b in range(nw):
            inc = byw[b]
            acc += inc
            s_sum[b] += acc
            s_sq[b] += acc * acc
            i_sum[b] += inc
            i_sq[b] += inc * inc
    return s_sum, s_sq, i_sum, i_sq, ndrop
