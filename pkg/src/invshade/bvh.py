"""Binary BVH with watertight any-hit ray queries (numba)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .geom import TriangleMesh

LEAF_SIZE = 4


@dataclass
class BVH:
    tris: np.ndarray  # (F, 3, 3) in leaf order
    box_min: np.ndarray  # (N, 3)
    box_max: np.ndarray
    child: np.ndarray  # (N, 2) child node ids, -1 for leaves
    start: np.ndarray  # (N,) first triangle of a leaf
    count: np.ndarray  # (N,) triangle count of a leaf, 0 for inner nodes
    order: np.ndarray  # leaf order -> original face id


@njit(cache=True)
def _build(centroids, lo, hi, leaf_size):
    n = centroids.shape[0]
    max_nodes = 2 * n + 1
    box_min = np.empty((max_nodes, 3))
    box_max = np.empty((max_nodes, 3))
    child = np.full((max_nodes, 2), -1, dtype=np.int64)
    start = np.zeros(max_nodes, dtype=np.int64)
    count = np.zeros(max_nodes, dtype=np.int64)
    order = np.arange(n)
    stack_node = np.empty(max_nodes, dtype=np.int64)
    stack_a = np.empty(max_nodes, dtype=np.int64)
    stack_b = np.empty(max_nodes, dtype=np.int64)
    n_nodes = 1
    sp = 0
    stack_node[0] = 0
    stack_a[0] = 0
    stack_b[0] = n
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        a = stack_a[sp]
        b = stack_b[sp]
        bmin = np.full(3, np.inf)
        bmax = np.full(3, -np.inf)
        cmin = np.full(3, np.inf)
        cmax = np.full(3, -np.inf)
        for q in range(a, b):
            f = order[q]
            for c in range(3):
                bmin[c] = min(bmin[c], lo[f, c])
                bmax[c] = max(bmax[c], hi[f, c])
                cmin[c] = min(cmin[c], centroids[f, c])
                cmax[c] = max(cmax[c], centroids[f, c])
        box_min[node] = bmin
        box_max[node] = bmax
        ext = cmax - cmin
        axis = 0
        if ext[1] > ext[axis]:
            axis = 1
        if ext[2] > ext[axis]:
            axis = 2
        if b - a <= leaf_size or ext[axis] <= 0.0:
            start[node] = a
            count[node] = b - a
            continue
        keys = np.empty(b - a)
        for q in range(a, b):
            keys[q - a] = centroids[order[q], axis]
        srt = np.argsort(keys, kind="mergesort")
        seg = order[a:b].copy()
        for q in range(b - a):
            order[a + q] = seg[srt[q]]
        mid = (a + b) // 2
        left = n_nodes
        right = n_nodes + 1
        n_nodes += 2
        child[node, 0] = left
        child[node, 1] = right
        stack_node[sp] = left
        stack_a[sp] = a
        stack_b[sp] = mid
        sp += 1
        stack_node[sp] = right
        stack_a[sp] = mid
        stack_b[sp] = b
        sp += 1
    return box_min[:n_nodes], box_max[:n_nodes], child[:n_nodes], start[:n_nodes], count[:n_nodes], order


def build_bvh(mesh: TriangleMesh) -> BVH:
    tris = mesh.positions[mesh.faces]
    lo = tris.min(axis=1)
    hi = tris.max(axis=1)
    pad = 1e-9 * max(mesh.bbox_diagonal(), 1.0)
    bmin, bmax, child, start, count, order = _build(tris.mean(axis=1), lo, hi, LEAF_SIZE)
    return BVH(np.ascontiguousarray(tris[order]), bmin - pad, bmax + pad, child, start, count, order)


@njit(cache=True)
def _hit_triangle(o, d, kx, ky, kz, sx, sy, sz, v0, v1, v2, tmax):
    """Watertight ray/triangle test (Woop, Benthin, Wald 2013); hit iff 0 < t < tmax."""
    ax = v0[kx] - o[kx]
    ay = v0[ky] - o[ky]
    az = v0[kz] - o[kz]
    bx = v1[kx] - o[kx]
    by = v1[ky] - o[ky]
    bz = v1[kz] - o[kz]
    cx = v2[kx] - o[kx]
    cy = v2[ky] - o[ky]
    cz = v2[kz] - o[kz]
    ax -= sx * az
    ay -= sy * az
    bx -= sx * bz
    by -= sy * bz
    cx -= sx * cz
    cy -= sy * cz
    u = cx * by - cy * bx
    v = ax * cy - ay * cx
    w = bx * ay - by * ax
    if (u < 0 or v < 0 or w < 0) and (u > 0 or v > 0 or w > 0):
        return False
    det = u + v + w
    if det == 0.0:
        return False
    t = sz * (u * az + v * bz + w * cz)
    if det < 0:
        t = -t
        det = -det
    return t > 0.0 and t < tmax * det


@njit(cache=True)
def _ray_setup(d):
    kz = 0
    if abs(d[1]) > abs(d[kz]):
        kz = 1
    if abs(d[2]) > abs(d[kz]):
        kz = 2
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if d[kz] < 0:
        kx, ky = ky, kx
    return kx, ky, kz, d[kx] / d[kz], d[ky] / d[kz], 1.0 / d[kz]


@njit(cache=True)
def _slab(o, inv, bmin, bmax, tmax):
    t0 = 0.0
    t1 = tmax
    for c in range(3):
        lo = (bmin[c] - o[c]) * inv[c]
        hi = (bmax[c] - o[c]) * inv[c]
        if lo > hi:
            lo, hi = hi, lo
        # NaN from 0 * inf means the ray runs inside the slab plane: keep the interval
        if lo == lo and lo > t0:
            t0 = lo
        if hi == hi and hi < t1:
            t1 = hi
        if t0 > t1 * (1.0 + 1e-12):
            return False
    return True


@njit(cache=True)
def _any_hit(tris, bmin, bmax, child, start, count, o, d, tmax, stack):
    kx, ky, kz, sx, sy, sz = _ray_setup(d)
    inv = 1.0 / d
    sp = 0
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not _slab(o, inv, bmin[node], bmax[node], tmax):
            continue
        if count[node] > 0:
            for q in range(start[node], start[node] + count[node]):
                if _hit_triangle(o, d, kx, ky, kz, sx, sy, sz, tris[q, 0], tris[q, 1], tris[q, 2], tmax):
                    return True
        else:
            stack[sp] = child[node, 0]
            stack[sp + 1] = child[node, 1]
            sp += 2
    return False


@njit(parallel=True, cache=True)
def _any_hit_batch(tris, bmin, bmax, child, start, count, origins, dirs, tmax):
    n = origins.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    for r in prange(n):
        stack = np.empty(128, dtype=np.int64)
        out[r] = _any_hit(tris, bmin, bmax, child, start, count, origins[r], dirs[r], tmax[r], stack)
    return out


@njit(parallel=True, cache=True)
def _brute_batch(tris, origins, dirs, tmax):
    n = origins.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    for r in prange(n):
        o = origins[r]
        d = dirs[r]
        kx, ky, kz, sx, sy, sz = _ray_setup(d)
        for q in range(tris.shape[0]):
            if _hit_triangle(o, d, kx, ky, kz, sx, sy, sz, tris[q, 0], tris[q, 1], tris[q, 2], tmax[r]):
                out[r] = True
                break
    return out


@njit(parallel=True, cache=True)
def _visibility_kernel(tris, bmin, bmax, child, start, count, points, dirs, eps):
    npix = points.shape[0]
    nd = dirs.shape[0]
    out = np.zeros((npix, nd), dtype=np.bool_)
    for p in prange(npix):
        stack = np.empty(128, dtype=np.int64)
        o = np.empty(3)
        for i in range(nd):
            d = dirs[i]
            for c in range(3):
                o[c] = points[p, c] + eps * d[c]
            out[p, i] = not _any_hit(tris, bmin, bmax, child, start, count, o, d, np.inf, stack)
    return out


def _as_rays(origins, dirs, tmax):
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    if tmax is None:
        tmax = np.full(len(origins), np.inf)
    tmax = np.ascontiguousarray(np.broadcast_to(np.asarray(tmax, dtype=np.float64), (len(origins),)))
    return origins, dirs, tmax


def any_hit(bvh: BVH, origins, dirs, tmax=None) -> np.ndarray:
    """True where the segment origin + t * dir, 0 < t < tmax, hits a triangle."""
    o, d, t = _as_rays(origins, dirs, tmax)
    return _any_hit_batch(bvh.tris, bvh.box_min, bvh.box_max, bvh.child, bvh.start, bvh.count, o, d, t)


def any_hit_brute_force(mesh: TriangleMesh, origins, dirs, tmax=None) -> np.ndarray:
    o, d, t = _as_rays(origins, dirs, tmax)
    return _brute_batch(np.ascontiguousarray(mesh.positions[mesh.faces]), o, d, t)


def unoccluded(bvh: BVH, points: np.ndarray, dirs: np.ndarray, eps: float) -> np.ndarray:
    """(P, N) bool: ray from point + eps * dir along each dir escapes the mesh."""
    return _visibility_kernel(bvh.tris, bvh.box_min, bvh.box_max, bvh.child, bvh.start, bvh.count,
                              np.ascontiguousarray(points, dtype=np.float64),
                              np.ascontiguousarray(dirs, dtype=np.float64), float(eps))
