"""Bounding-volume hierarchy for ray casting.

Median-split binary BVH over triangle centroids, flattened to plain arrays.
Traversal and the Moller-Trumbore triangle test run as numba kernels (the
per-ray loop is the hot path of the renderer); if numba is unavailable the
same code runs interpreted, slow but correct.

``t`` is measured in units of the ray direction length; hits closer than
T_MIN are ignored, so callers offset shadow-ray origins themselves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def wrap(f):
            return f

        return wrap


T_MIN = 1e-12
DET_EPS = 1e-14
LEAF_SIZE = 4
MAX_STACK = 64


@dataclass
class Bvh:
    node_lo: np.ndarray  # (M, 3)
    node_hi: np.ndarray  # (M, 3)
    node_left: np.ndarray  # (M,) child index (internal) or triangle offset (leaf)
    node_count: np.ndarray  # (M,) 0 for internal nodes, triangle count for leaves
    tri_index: np.ndarray  # (T,) original triangle ids in traversal order
    v0: np.ndarray  # (T, 3) per-triangle origin vertex (traversal order)
    e1: np.ndarray  # (T, 3)
    e2: np.ndarray  # (T, 3)

    @property
    def n_triangles(self) -> int:
        return len(self.tri_index)


@dataclass
class Hit:
    t: float
    tri: int
    u: float
    v: float


def build_bvh(mesh, leaf_size: int = LEAF_SIZE) -> Bvh:
    """Build a median-split BVH over a TriMesh."""
    faces = mesh.faces
    if len(faces) == 0:
        raise ValueError("cannot build a BVH over an empty mesh")
    tri = mesh.vertices[faces]  # (T, 3, 3)
    tri_lo = tri.min(axis=1)
    tri_hi = tri.max(axis=1)
    centroids = tri.mean(axis=1)

    order = np.arange(len(faces))
    node_lo, node_hi, node_left, node_count = [], [], [], []

    def new_node():
        node_lo.append(None)
        node_hi.append(None)
        node_left.append(0)
        node_count.append(0)
        return len(node_lo) - 1

    stack = [(new_node(), 0, len(faces))]
    while stack:
        idx, start, end = stack.pop()
        seg = order[start:end]
        node_lo[idx] = tri_lo[seg].min(axis=0)
        node_hi[idx] = tri_hi[seg].max(axis=0)
        n = end - start
        cen = centroids[seg]
        extent = cen.max(axis=0) - cen.min(axis=0)
        if n <= leaf_size or extent.max() <= 0.0:
            node_left[idx] = start
            node_count[idx] = n
            continue
        axis = int(np.argmax(extent))
        mid = n // 2
        part = np.argpartition(cen[:, axis], mid)
        order[start:end] = seg[part]
        child = new_node()
        new_node()  # right child lives at child + 1
        node_left[idx] = child
        stack.append((child + 1, start + mid, end))
        stack.append((child, start, start + mid))

    ordered = tri[order]
    return Bvh(
        node_lo=np.ascontiguousarray(node_lo, dtype=np.float64),
        node_hi=np.ascontiguousarray(node_hi, dtype=np.float64),
        node_left=np.asarray(node_left, dtype=np.int64),
        node_count=np.asarray(node_count, dtype=np.int64),
        tri_index=order.astype(np.int64),
        v0=np.ascontiguousarray(ordered[:, 0]),
        e1=np.ascontiguousarray(ordered[:, 1] - ordered[:, 0]),
        e2=np.ascontiguousarray(ordered[:, 2] - ordered[:, 0]),
    )


@njit(cache=True, error_model="numpy")
def _traverse(node_lo, node_hi, node_left, node_count, v0, e1, e2,
              origins, dirs, any_hit, t_max, out_t, out_tri, out_u, out_v):
    n_rays = origins.shape[0]
    stack = np.empty(MAX_STACK, np.int64)
    for r in range(n_rays):
        ox, oy, oz = origins[r, 0], origins[r, 1], origins[r, 2]
        dx, dy, dz = dirs[r, 0], dirs[r, 1], dirs[r, 2]
        ix = 1.0 / dx if dx != 0.0 else np.inf
        iy = 1.0 / dy if dy != 0.0 else np.inf
        iz = 1.0 / dz if dz != 0.0 else np.inf
        best_t = t_max
        best_tri = -1
        best_u = 0.0
        best_v = 0.0
        top = 0
        stack[top] = 0
        top += 1
        while top > 0:
            top -= 1
            node = stack[top]
            # slab test against the node box
            tn = T_MIN
            tf = best_t
            t1 = (node_lo[node, 0] - ox) * ix
            t2 = (node_hi[node, 0] - ox) * ix
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tn:
                tn = t1
            if t2 < tf:
                tf = t2
            t1 = (node_lo[node, 1] - oy) * iy
            t2 = (node_hi[node, 1] - oy) * iy
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tn:
                tn = t1
            if t2 < tf:
                tf = t2
            t1 = (node_lo[node, 2] - oz) * iz
            t2 = (node_hi[node, 2] - oz) * iz
            if t1 > t2:
                t1, t2 = t2, t1
            if t1 > tn:
                tn = t1
            if t2 < tf:
                tf = t2
            if tn > tf:
                continue
            count = node_count[node]
            if count == 0:
                child = node_left[node]
                stack[top] = child
                top += 1
                stack[top] = child + 1
                top += 1
                continue
            start = node_left[node]
            for k in range(start, start + count):
                # Moller-Trumbore
                px = dy * e2[k, 2] - dz * e2[k, 1]
                py = dz * e2[k, 0] - dx * e2[k, 2]
                pz = dx * e2[k, 1] - dy * e2[k, 0]
                det = e1[k, 0] * px + e1[k, 1] * py + e1[k, 2] * pz
                if det > -DET_EPS and det < DET_EPS:
                    continue
                inv = 1.0 / det
                tx = ox - v0[k, 0]
                ty = oy - v0[k, 1]
                tz = oz - v0[k, 2]
                u = (tx * px + ty * py + tz * pz) * inv
                if u < 0.0 or u > 1.0:
                    continue
                qx = ty * e1[k, 2] - tz * e1[k, 1]
                qy = tz * e1[k, 0] - tx * e1[k, 2]
                qz = tx * e1[k, 1] - ty * e1[k, 0]
                v = (dx * qx + dy * qy + dz * qz) * inv
                if v < 0.0 or u + v > 1.0:
                    continue
                t = (e2[k, 0] * qx + e2[k, 1] * qy + e2[k, 2] * qz) * inv
                if t > T_MIN and t < best_t:
                    best_t = t
                    best_tri = k
                    best_u = u
                    best_v = v
                    if any_hit:
                        top = 0
                        break
        out_t[r] = best_t
        out_tri[r] = best_tri
        out_u[r] = best_u
        out_v[r] = best_v


def intersect_batch(bvh: Bvh, origins: np.ndarray, dirs: np.ndarray):
    """Nearest hits for a batch of rays.

    Returns (t, tri, u, v) arrays; ``tri`` is the original triangle index or
    -1 for a miss.
    """
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    out_t = np.empty(n)
    out_tri = np.empty(n, np.int64)
    out_u = np.empty(n)
    out_v = np.empty(n)
    _traverse(bvh.node_lo, bvh.node_hi, bvh.node_left, bvh.node_count,
              bvh.v0, bvh.e1, bvh.e2, origins, dirs, False, np.inf,
              out_t, out_tri, out_u, out_v)
    miss = out_tri < 0
    tri = np.where(miss, -1, bvh.tri_index[np.where(miss, 0, out_tri)])
    out_t[miss] = np.inf
    return out_t, tri, out_u, out_v


def any_hit_batch(bvh: Bvh, origins: np.ndarray, dirs: np.ndarray, t_max: float = np.inf):
    """Boolean occlusion query per ray (early-exit traversal)."""
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    out_t = np.empty(n)
    out_tri = np.empty(n, np.int64)
    out_u = np.empty(n)
    out_v = np.empty(n)
    _traverse(bvh.node_lo, bvh.node_hi, bvh.node_left, bvh.node_count,
              bvh.v0, bvh.e1, bvh.e2, origins, dirs, True, float(t_max),
              out_t, out_tri, out_u, out_v)
    return out_tri >= 0


def bvh_intersect(bvh: Bvh, origin, direction) -> Hit | None:
    """Nearest intersection of a single ray, or None on a miss."""
    direction = np.asarray(direction, dtype=np.float64)
    if not np.any(direction != 0.0):
        raise ValueError("ray direction must be nonzero")
    t, tri, u, v = intersect_batch(bvh, np.asarray(origin)[None], direction[None])
    if tri[0] < 0:
        return None
    return Hit(t=float(t[0]), tri=int(tri[0]), u=float(u[0]), v=float(v[0]))
