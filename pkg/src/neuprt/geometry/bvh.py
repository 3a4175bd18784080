"""Median-split BVH over triangles and numba ray kernels.

Ties on equal hit distance are broken towards the lowest triangle index so the
BVH answer is identical to the brute-force loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

LEAF_SIZE = 4
DET_EPS = 1e-14


@dataclass(frozen=True)
class BVH:
    lo: np.ndarray       # (nodes, 3)
    hi: np.ndarray       # (nodes, 3)
    left: np.ndarray     # child index, -1 on leaves
    right: np.ndarray
    start: np.ndarray    # leaf range into ``order``
    count: np.ndarray
    order: np.ndarray    # triangle indices in leaf order
    v0: np.ndarray
    v1: np.ndarray
    v2: np.ndarray

    @property
    def arrays(self):
        return (self.lo, self.hi, self.left, self.right, self.start, self.count,
                self.order, self.v0, self.v1, self.v2)


@numba.njit(cache=True)
def _build(v0, v1, v2, leaf_size):
    n = v0.shape[0]
    cent = (v0 + v1 + v2) / 3.0
    tlo = np.minimum(np.minimum(v0, v1), v2)
    thi = np.maximum(np.maximum(v0, v1), v2)
    order = np.arange(n)
    cap = max(1, 2 * n)
    lo = np.empty((cap, 3))
    hi = np.empty((cap, 3))
    left = -np.ones(cap, dtype=np.int64)
    right = -np.ones(cap, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)
    stack_node = np.empty(cap, dtype=np.int64)
    stack_s = np.empty(cap, dtype=np.int64)
    stack_e = np.empty(cap, dtype=np.int64)
    nodes = 1
    sp = 0
    stack_node[0] = 0
    stack_s[0] = 0
    stack_e[0] = n
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack_node[sp]
        s = stack_s[sp]
        e = stack_e[sp]
        for k in range(3):
            lo[node, k] = np.inf
            hi[node, k] = -np.inf
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for ii in range(s, e):
            t = order[ii]
            for k in range(3):
                lo[node, k] = min(lo[node, k], tlo[t, k])
                hi[node, k] = max(hi[node, k], thi[t, k])
                clo[k] = min(clo[k], cent[t, k])
                chi[k] = max(chi[k], cent[t, k])
        start[node] = s
        count[node] = e - s
        if e - s <= leaf_size:
            continue
        axis = 0
        ext = chi - clo
        if ext[1] > ext[axis]:
            axis = 1
        if ext[2] > ext[axis]:
            axis = 2
        if ext[axis] <= 0.0:
            continue
        sub = order[s:e].copy()
        keys = cent[sub, axis]
        idx = np.argsort(keys, kind="mergesort")
        order[s:e] = sub[idx]
        mid = (s + e) // 2
        l_node = nodes
        r_node = nodes + 1
        nodes += 2
        left[node] = l_node
        right[node] = r_node
        count[node] = 0
        stack_node[sp] = l_node
        stack_s[sp] = s
        stack_e[sp] = mid
        sp += 1
        stack_node[sp] = r_node
        stack_s[sp] = mid
        stack_e[sp] = e
        sp += 1
    return lo[:nodes].copy(), hi[:nodes].copy(), left[:nodes].copy(), right[:nodes].copy(), \
        start[:nodes].copy(), count[:nodes].copy(), order


def build_bvh(mesh) -> BVH:
    tri = mesh.triangles
    v0 = np.ascontiguousarray(mesh.vertices[tri[:, 0]])
    v1 = np.ascontiguousarray(mesh.vertices[tri[:, 1]])
    v2 = np.ascontiguousarray(mesh.vertices[tri[:, 2]])
    lo, hi, left, right, start, count, order = _build(v0, v1, v2, LEAF_SIZE)
    return BVH(lo, hi, left, right, start, count, order, v0, v1, v2)


@numba.njit(cache=True, inline="always")
def tri_intersect(ox, oy, oz, dx, dy, dz, a, b, c):
    """Moller-Trumbore, two-sided. Returns (t, u, v); t = inf on miss."""
    e1x = b[0] - a[0]
    e1y = b[1] - a[1]
    e1z = b[2] - a[2]
    e2x = c[0] - a[0]
    e2y = c[1] - a[1]
    e2z = c[2] - a[2]
    px = dy * e2z - dz * e2y
    py = dz * e2x - dx * e2z
    pz = dx * e2y - dy * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < DET_EPS:
        return np.inf, 0.0, 0.0
    inv = 1.0 / det
    tx = ox - a[0]
    ty = oy - a[1]
    tz = oz - a[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < 0.0 or u > 1.0:
        return np.inf, 0.0, 0.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (dx * qx + dy * qy + dz * qz) * inv
    if v < 0.0 or u + v > 1.0:
        return np.inf, 0.0, 0.0
    t = (e2x * qx + e2y * qy + e2z * qz) * inv
    return t, u, v


@numba.njit(cache=True, inline="always")
def _box_entry(ox, oy, oz, dx, dy, dz, lo, hi, t_lo, t_hi):
    t0 = t_lo
    t1 = t_hi
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    for k in range(3):
        if d[k] == 0.0:
            if o[k] < lo[k] or o[k] > hi[k]:
                return np.inf
        else:
            inv = 1.0 / d[k]
            a = (lo[k] - o[k]) * inv
            b = (hi[k] - o[k]) * inv
            if a > b:
                a, b = b, a
            if a > t0:
                t0 = a
            if b < t1:
                t1 = b
            if t0 > t1:
                return np.inf
    return t0


@numba.njit(cache=True)
def bvh_closest(ox, oy, oz, dx, dy, dz, t_min, t_max, lo, hi, left, right, start, count,
                order, v0, v1, v2):
    best_t = np.inf
    best_i = -1
    best_u = 0.0
    best_v = 0.0
    stack = np.empty(128, dtype=np.int64)
    sp = 0
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        lim = min(t_max, best_t)
        if _box_entry(ox, oy, oz, dx, dy, dz, lo[node], hi[node], t_min, lim) == np.inf:
            continue
        if left[node] < 0:
            for ii in range(start[node], start[node] + count[node]):
                tri = order[ii]
                t, u, v = tri_intersect(ox, oy, oz, dx, dy, dz, v0[tri], v1[tri], v2[tri])
                if t > t_min and t < t_max:
                    if t < best_t or (t == best_t and tri < best_i):
                        best_t = t
                        best_i = tri
                        best_u = u
                        best_v = v
        else:
            stack[sp] = left[node]
            sp += 1
            stack[sp] = right[node]
            sp += 1
    return best_t, best_i, best_u, best_v


@numba.njit(cache=True)
def bvh_occluded(ox, oy, oz, dx, dy, dz, t_min, t_max, lo, hi, left, right, start, count,
                 order, v0, v1, v2):
    stack = np.empty(128, dtype=np.int64)
    stack[0] = 0
    sp = 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if _box_entry(ox, oy, oz, dx, dy, dz, lo[node], hi[node], t_min, t_max) == np.inf:
            continue
        if left[node] < 0:
            for ii in range(start[node], start[node] + count[node]):
                tri = order[ii]
                t, u, v = tri_intersect(ox, oy, oz, dx, dy, dz, v0[tri], v1[tri], v2[tri])
                if t > t_min and t < t_max:
                    return True
        else:
            stack[sp] = left[node]
            sp += 1
            stack[sp] = right[node]
            sp += 1
    return False


@numba.njit(cache=True)
def bvh_closest_many(origins, dirs, t_min, t_max, lo, hi, left, right, start, count, order,
                     v0, v1, v2):
    n = origins.shape[0]
    ts = np.empty(n)
    tris = np.empty(n, dtype=np.int64)
    uv = np.empty((n, 2))
    for i in range(n):
        t, k, u, v = bvh_closest(origins[i, 0], origins[i, 1], origins[i, 2],
                                 dirs[i, 0], dirs[i, 1], dirs[i, 2], t_min, t_max,
                                 lo, hi, left, right, start, count, order, v0, v1, v2)
        ts[i] = t
        tris[i] = k
        uv[i, 0] = u
        uv[i, 1] = v
    return ts, tris, uv


@numba.njit(cache=True)
def brute_closest_many(origins, dirs, t_min, t_max, v0, v1, v2):
    n = origins.shape[0]
    ts = np.full(n, np.inf)
    tris = -np.ones(n, dtype=np.int64)
    uv = np.zeros((n, 2))
    for i in range(n):
        for k in range(v0.shape[0]):
            t, u, v = tri_intersect(origins[i, 0], origins[i, 1], origins[i, 2],
                                    dirs[i, 0], dirs[i, 1], dirs[i, 2], v0[k], v1[k], v2[k])
            if t > t_min and t < t_max and t < ts[i]:
                ts[i] = t
                tris[i] = k
                uv[i, 0] = u
                uv[i, 1] = v
    return ts, tris, uv
