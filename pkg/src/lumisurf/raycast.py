"""Triangle-mesh ray intersection for the exported real-time path: a
median-split BVH with a stack-based traversal kernel and, as an alternative
backend, a perspective z-buffer rasterizer. Both return per-pixel face ids and
barycentric coordinates so the shading path downstream is identical."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

_LEAF_SIZE = 4
_EPS = 1e-7


@dataclass
class TriangleBvh:
    """Flattened BVH over a triangle soup.

    Triangles are stored in leaf-contiguous order; face_index maps back to the
    original face array. Internal nodes have count == 0.
    """

    v0: np.ndarray  # (F, 3) float32
    v1: np.ndarray
    v2: np.ndarray
    face_index: np.ndarray  # (F,) int64
    node_min: np.ndarray  # (M, 3) float32
    node_max: np.ndarray
    node_left: np.ndarray  # (M,) int32, -1 for leaves
    node_right: np.ndarray
    node_start: np.ndarray  # (M,) int32
    node_count: np.ndarray  # (M,) int32, 0 for internal nodes

    @property
    def n_faces(self) -> int:
        return len(self.v0)


def build_bvh(vertices: np.ndarray, faces: np.ndarray, leaf_size: int = _LEAF_SIZE) -> TriangleBvh:
    """Median-split BVH over triangle centroids (longest axis)."""
    v = np.ascontiguousarray(vertices, dtype=np.float32)
    f = np.ascontiguousarray(faces, dtype=np.int64)
    if f.ndim != 2 or f.shape[1] != 3 or len(f) == 0:
        raise ValueError(f"faces must be a non-empty (F, 3) array, got {f.shape}")
    tri = v[f]  # (F, 3, 3)
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    cent = tri.mean(axis=1)
    order = np.arange(len(f))

    node_min: list[np.ndarray] = []
    node_max: list[np.ndarray] = []
    node_left: list[int] = []
    node_right: list[int] = []
    node_start: list[int] = []
    node_count: list[int] = []

    def build(start: int, count: int) -> int:
        idx = len(node_min)
        seg = order[start : start + count]
        node_min.append(lo[seg].min(axis=0))
        node_max.append(hi[seg].max(axis=0))
        node_left.append(-1)
        node_right.append(-1)
        node_start.append(start)
        node_count.append(count)
        if count <= leaf_size:
            return idx
        c = cent[seg]
        extent = c.max(axis=0) - c.min(axis=0)
        axis = int(np.argmax(extent))
        if extent[axis] < 1e-12:
            return idx  # coincident centroids: keep as a fat leaf
        half = count // 2
        part = np.argpartition(c[:, axis], half)
        order[start : start + count] = seg[part]
        left = build(start, half)
        right = build(start + half, count - half)
        node_left[idx] = left
        node_right[idx] = right
        node_count[idx] = 0
        return idx

    import sys

    old_limit = sys.getrecursionlimit()
    sys.setrecursionlimit(max(old_limit, 10000))
    try:
        build(0, len(f))
    finally:
        sys.setrecursionlimit(old_limit)

    tri_sorted = tri[order]
    return TriangleBvh(
        v0=np.ascontiguousarray(tri_sorted[:, 0]),
        v1=np.ascontiguousarray(tri_sorted[:, 1]),
        v2=np.ascontiguousarray(tri_sorted[:, 2]),
        face_index=order.astype(np.int64),
        node_min=np.asarray(node_min, dtype=np.float32),
        node_max=np.asarray(node_max, dtype=np.float32),
        node_left=np.asarray(node_left, dtype=np.int32),
        node_right=np.asarray(node_right, dtype=np.int32),
        node_start=np.asarray(node_start, dtype=np.int32),
        node_count=np.asarray(node_count, dtype=np.int32),
    )


@njit(cache=True, error_model="numpy")
def _traverse(o, d, v0, v1, v2, nmin, nmax, nleft, nright, nstart, ncount, t_min, t_max, out_t, out_face, out_u, out_v):
    n_rays = o.shape[0]
    stack = np.empty(128, np.int32)
    for r in range(n_rays):
        ox, oy, oz = o[r, 0], o[r, 1], o[r, 2]
        dx, dy, dz = d[r, 0], d[r, 1], d[r, 2]
        ix = 1.0 / dx
        iy = 1.0 / dy
        iz = 1.0 / dz
        best_t = t_max
        best_f = -1
        best_u = 0.0
        best_v = 0.0
        sp = 0
        stack[sp] = 0
        sp += 1
        while sp > 0:
            sp -= 1
            n = stack[sp]
            # Slab test against the node box.
            t1 = (nmin[n, 0] - ox) * ix
            t2 = (nmax[n, 0] - ox) * ix
            tlo = min(t1, t2)
            thi = max(t1, t2)
            t1 = (nmin[n, 1] - oy) * iy
            t2 = (nmax[n, 1] - oy) * iy
            tlo = max(tlo, min(t1, t2))
            thi = min(thi, max(t1, t2))
            t1 = (nmin[n, 2] - oz) * iz
            t2 = (nmax[n, 2] - oz) * iz
            tlo = max(tlo, min(t1, t2))
            thi = min(thi, max(t1, t2))
            if thi < tlo or tlo > best_t or thi < t_min:
                continue
            if ncount[n] > 0:
                for k in range(nstart[n], nstart[n] + ncount[n]):
                    ax, ay, az = v0[k, 0], v0[k, 1], v0[k, 2]
                    e1x = v1[k, 0] - ax
                    e1y = v1[k, 1] - ay
                    e1z = v1[k, 2] - az
                    e2x = v2[k, 0] - ax
                    e2y = v2[k, 1] - ay
                    e2z = v2[k, 2] - az
                    px = dy * e2z - dz * e2y
                    py = dz * e2x - dx * e2z
                    pz = dx * e2y - dy * e2x
                    det = e1x * px + e1y * py + e1z * pz
                    if abs(det) < 1e-12:
                        continue
                    inv = 1.0 / det
                    sx = ox - ax
                    sy = oy - ay
                    sz = oz - az
                    u = (sx * px + sy * py + sz * pz) * inv
                    if u < -_EPS or u > 1.0 + _EPS:
                        continue
                    qx = sy * e1z - sz * e1y
                    qy = sz * e1x - sx * e1z
                    qz = sx * e1y - sy * e1x
                    vv = (dx * qx + dy * qy + dz * qz) * inv
                    if vv < -_EPS or u + vv > 1.0 + _EPS:
                        continue
                    t = (e2x * qx + e2y * qy + e2z * qz) * inv
                    if t_min < t < best_t:
                        best_t = t
                        best_f = k
                        best_u = u
                        best_v = vv
            else:
                stack[sp] = nleft[n]
                sp += 1
                stack[sp] = nright[n]
                sp += 1
        out_t[r] = best_t if best_f >= 0 else np.inf
        out_face[r] = best_f
        out_u[r] = best_u
        out_v[r] = best_v


def intersect_rays(
    bvh: TriangleBvh,
    origins: np.ndarray,
    directions: np.ndarray,
    t_min: float = 0.0,
    t_max: float = np.inf,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Nearest triangle hit per ray.

    Args:
        origins/directions: (..., 3); directions need not be normalized, t is
            in units of the given direction length.

    Returns:
        (t, face, u, v) with t = inf and face = -1 on misses. face indexes the
        ORIGINAL face array; (u, v) are barycentric weights of the second and
        third triangle vertices.
    """
    shp = origins.shape[:-1]
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(directions, dtype=np.float64).reshape(-1, 3)
    n = o.shape[0]
    out_t = np.empty(n, np.float64)
    out_face = np.empty(n, np.int64)
    out_u = np.empty(n, np.float64)
    out_v = np.empty(n, np.float64)
    _traverse(
        o, d,
        bvh.v0.astype(np.float64), bvh.v1.astype(np.float64), bvh.v2.astype(np.float64),
        bvh.node_min.astype(np.float64), bvh.node_max.astype(np.float64),
        bvh.node_left, bvh.node_right, bvh.node_start, bvh.node_count,
        t_min, t_max, out_t, out_face, out_u, out_v,
    )
    hit = out_face >= 0
    out_face[hit] = bvh.face_index[out_face[hit]]
    return out_t.reshape(shp), out_face.reshape(shp), out_u.reshape(shp), out_v.reshape(shp)


@njit(cache=True, error_model="numpy")
def _rasterize(v_cam, faces, fx, fy, cx, cy, width, height, depth, face_id, bary_u, bary_v):
    for f in range(faces.shape[0]):
        i0, i1, i2 = faces[f, 0], faces[f, 1], faces[f, 2]
        z0, z1, z2 = v_cam[i0, 2], v_cam[i1, 2], v_cam[i2, 2]
        if z0 <= 1e-9 or z1 <= 1e-9 or z2 <= 1e-9:
            continue  # behind the camera; scene geometry is fully in front
        x0 = fx * v_cam[i0, 0] / z0 + cx
        y0 = fy * v_cam[i0, 1] / z0 + cy
        x1 = fx * v_cam[i1, 0] / z1 + cx
        y1 = fy * v_cam[i1, 1] / z1 + cy
        x2 = fx * v_cam[i2, 0] / z2 + cx
        y2 = fy * v_cam[i2, 1] / z2 + cy
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        min_x = max(int(np.floor(min(x0, min(x1, x2)) - 0.5)), 0)
        max_x = min(int(np.ceil(max(x0, max(x1, x2)) - 0.5)), width - 1)
        min_y = max(int(np.floor(min(y0, min(y1, y2)) - 0.5)), 0)
        max_y = min(int(np.ceil(max(y0, max(y1, y2)) - 0.5)), height - 1)
        inv_area = 1.0 / area
        iz0 = 1.0 / z0
        iz1 = 1.0 / z1
        iz2 = 1.0 / z2
        for py in range(min_y, max_y + 1):
            sy = py + 0.5
            for px in range(min_x, max_x + 1):
                sx = px + 0.5
                w1 = ((sx - x0) * (y2 - y0) - (x2 - x0) * (sy - y0)) * inv_area
                w2 = ((x1 - x0) * (sy - y0) - (sx - x0) * (y1 - y0)) * inv_area
                w0 = 1.0 - w1 - w2
                if w0 < -_EPS or w1 < -_EPS or w2 < -_EPS:
                    continue
                # Perspective-correct interpolation via reciprocal depth.
                izp = w0 * iz0 + w1 * iz1 + w2 * iz2
                z = 1.0 / izp
                if z < depth[py, px]:
                    depth[py, px] = z
                    face_id[py, px] = f
                    bary_u[py, px] = w1 * iz1 * z
                    bary_v[py, px] = w2 * iz2 * z


def rasterize_mesh(
    vertices: np.ndarray,
    faces: np.ndarray,
    intrinsics: np.ndarray,
    rotation: np.ndarray,
    translation: np.ndarray,
    width: int,
    height: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Z-buffer the mesh into a camera.

    Returns:
        (depth (H, W) camera-z, inf on misses; face (H, W) int64, -1 misses;
        u, v perspective-corrected barycentric weights of vertices 1 and 2).
    """
    v = np.asarray(vertices, dtype=np.float64)
    f = np.ascontiguousarray(faces, dtype=np.int64)
    r_mat = np.asarray(rotation, dtype=np.float64)
    t_vec = np.asarray(translation, dtype=np.float64)
    k_mat = np.asarray(intrinsics, dtype=np.float64)
    v_cam = v @ r_mat.T + t_vec
    depth = np.full((height, width), np.inf, dtype=np.float64)
    face_id = np.full((height, width), -1, dtype=np.int64)
    bary_u = np.zeros((height, width), dtype=np.float64)
    bary_v = np.zeros((height, width), dtype=np.float64)
    _rasterize(
        v_cam, f, k_mat[0, 0], k_mat[1, 1], k_mat[0, 2], k_mat[1, 2], width, height,
        depth, face_id, bary_u, bary_v,
    )
    return depth, face_id, bary_u, bary_v


def barycentric_points(
    vertices: np.ndarray, faces: np.ndarray, face_id: np.ndarray, u: np.ndarray, v: np.ndarray
) -> np.ndarray:
    """World-space points from per-pixel face ids and barycentrics (zeros on
    misses)."""
    out = np.zeros(face_id.shape + (3,), dtype=np.float64)
    hit = face_id >= 0
    if not hit.any():
        return out
    tri = np.asarray(vertices, dtype=np.float64)[np.asarray(faces, dtype=np.int64)[face_id[hit]]]
    uu = u[hit][:, None]
    vv = v[hit][:, None]
    out[hit] = tri[:, 0] * (1.0 - uu - vv) + tri[:, 1] * uu + tri[:, 2] * vv
    return out
