"""Shared triangle-surface geometry: integrals, manifold checks, inside tests
and exact point-to-surface distances."""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "triangle_normals",
    "triangle_areas",
    "surface_area",
    "enclosed_volume",
    "edge_use_counts",
    "is_watertight",
    "euler_characteristic",
    "points_inside_surface",
    "point_triangle_distances",
    "points_to_surface_distance",
]


def triangle_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    return np.cross(b - a, c - a)


def triangle_areas(vertices, triangles) -> np.ndarray:
    return 0.5 * np.linalg.norm(triangle_normals(vertices, triangles), axis=1)


def surface_area(vertices, triangles) -> float:
    return float(triangle_areas(vertices, triangles).sum())


def enclosed_volume(vertices, triangles) -> float:
    """Signed volume via the divergence theorem; positive for outward normals."""
    a, b, c = (vertices[triangles[:, i]] for i in range(3))
    return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)


def edge_use_counts(triangles: np.ndarray):
    """Map from undirected edge (i, j), i < j, to the number of using triangles."""
    tri = np.asarray(triangles)
    e = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    e = np.sort(e, axis=1)
    keys, counts = np.unique(e, axis=0, return_counts=True)
    return keys, counts


def is_watertight(triangles) -> bool:
    _, counts = edge_use_counts(triangles)
    return bool(np.all(counts == 2))


def euler_characteristic(vertices, triangles) -> int:
    keys, _ = edge_use_counts(triangles)
    nv = len(np.unique(np.asarray(triangles).ravel()))
    return nv - len(keys) + len(triangles)


def _ray_crossings(points: np.ndarray, vertices: np.ndarray, triangles: np.ndarray):
    """Count +x ray/surface crossings per query point (watertight input assumed).

    Query (y, z) coordinates are jittered by a tiny fixed offset so rays do
    not pass exactly through triangle edges or vertices.
    """
    pts = np.asarray(points, dtype=np.float64)
    verts = vertices.astype(np.float64)
    scale = max(verts.max(axis=0) - verts.min(axis=0)) if len(verts) else 1.0
    jitter = np.array([0.0, 0.5641895835477563e-6, 0.8213210241473353e-6]) * scale
    pts = pts + jitter

    crossings = np.zeros(len(pts), dtype=np.int64)
    if len(triangles) == 0:
        return crossings
    tree = cKDTree(pts[:, 1:3])
    a, b, c = verts[triangles[:, 0]], verts[triangles[:, 1]], verts[triangles[:, 2]]
    centers = (a + b + c)[:, 1:3] / 3.0
    radii = np.maximum.reduce(
        [np.linalg.norm(v[:, 1:3] - centers, axis=1) for v in (a, b, c)]
    )
    for k in range(len(triangles)):
        idx = tree.query_ball_point(centers[k], radii[k] + 1e-12)
        if not idx:
            continue
        idx = np.asarray(idx)
        p = pts[idx]
        # 2D barycentric test in the (y, z) projection
        v0 = b[k, 1:3] - a[k, 1:3]
        v1 = c[k, 1:3] - a[k, 1:3]
        den = v0[0] * v1[1] - v0[1] * v1[0]
        if abs(den) < 1e-300:
            continue
        w = p[:, 1:3] - a[k, 1:3]
        s = (w[:, 0] * v1[1] - w[:, 1] * v1[0]) / den
        t = (v0[0] * w[:, 1] - v0[1] * w[:, 0]) / den
        hit = (s > 0.0) & (t > 0.0) & (s + t < 1.0)
        if not np.any(hit):
            continue
        # x coordinate of the intersection with the triangle plane
        s_h, t_h = s[hit], t[hit]
        x_int = a[k, 0] + s_h * (b[k, 0] - a[k, 0]) + t_h * (c[k, 0] - a[k, 0])
        sel = idx[hit]
        crossings[sel] += (x_int > pts[sel, 0]).astype(np.int64)
    return crossings


def points_inside_surface(points, vertices, triangles) -> np.ndarray:
    """Odd-parity ray test; boolean per query point."""
    return _ray_crossings(points, vertices, triangles) % 2 == 1


def point_triangle_distances(points: np.ndarray, a, b, c) -> np.ndarray:
    """Exact distance from points[i] to triangle (a[i], b[i], c[i])."""
    # Eberly's region decomposition, vectorized
    p = np.asarray(points, dtype=np.float64)
    E0 = b - a
    E1 = c - a
    D = a - p
    aa = np.einsum("ij,ij->i", E0, E0)
    bb = np.einsum("ij,ij->i", E0, E1)
    cc = np.einsum("ij,ij->i", E1, E1)
    dd = np.einsum("ij,ij->i", E0, D)
    ee = np.einsum("ij,ij->i", E1, D)
    det = np.maximum(aa * cc - bb * bb, 1e-300)
    s = bb * ee - cc * dd
    t = bb * dd - aa * ee
    inside = (s + t <= det) & (s >= 0) & (t >= 0)
    s_i = np.where(inside, s / det, 0.0)
    t_i = np.where(inside, t / det, 0.0)
    # clamp to edges for the outside regions by brute-force candidate projection
    out = ~inside
    if np.any(out):
        cand_s = []
        # edge a-b: t = 0
        s0 = np.clip(-dd / np.maximum(aa, 1e-300), 0.0, 1.0)
        cand_s.append((s0, np.zeros_like(s0)))
        # edge a-c: s = 0
        t0 = np.clip(-ee / np.maximum(cc, 1e-300), 0.0, 1.0)
        cand_s.append((np.zeros_like(t0), t0))
        # edge b-c: s + t = 1
        num = cc + ee - bb - dd
        den = np.maximum(aa - 2 * bb + cc, 1e-300)
        s1 = np.clip(num / den, 0.0, 1.0)
        cand_s.append((s1, 1.0 - s1))
        best = np.full(len(p), np.inf)
        bs = np.zeros(len(p))
        bt = np.zeros(len(p))
        for scand, tcand in cand_s:
            q = a + scand[:, None] * E0 + tcand[:, None] * E1
            d2 = np.einsum("ij,ij->i", q - p, q - p)
            better = d2 < best
            best = np.where(better, d2, best)
            bs = np.where(better, scand, bs)
            bt = np.where(better, tcand, bt)
        s_i = np.where(out, bs, s_i)
        t_i = np.where(out, bt, t_i)
    q = a + s_i[:, None] * E0 + t_i[:, None] * E1
    return np.linalg.norm(q - p, axis=1)


def points_to_surface_distance(points, vertices, triangles, batch: int = 2048) -> np.ndarray:
    """Exact minimum distance from each point to a triangle surface.

    A KD-tree on triangle centroids prunes candidates; an upper bound from
    the nearest few triangles plus the largest centroid-to-corner radius
    makes the pruning exact.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    verts = np.asarray(vertices, dtype=np.float64)
    tris = np.asarray(triangles)
    if len(tris) == 0:
        raise ValueError("empty surface")
    a, b, c = verts[tris[:, 0]], verts[tris[:, 1]], verts[tris[:, 2]]
    centers = (a + b + c) / 3.0
    rmax = float(
        np.max(np.maximum.reduce([np.linalg.norm(v - centers, axis=1) for v in (a, b, c)]))
    )
    tree = cKDTree(centers)
    out = np.empty(len(pts))
    k = min(8, len(tris))
    for lo in range(0, len(pts), batch):
        chunk = pts[lo : lo + batch]
        _, nearest = tree.query(chunk, k=k)
        nearest = np.atleast_2d(nearest.reshape(len(chunk), -1))
        ub = np.full(len(chunk), np.inf)
        for col in range(nearest.shape[1]):
            tid = nearest[:, col]
            d = point_triangle_distances(chunk, a[tid], b[tid], c[tid])
            ub = np.minimum(ub, d)
        for i, p in enumerate(chunk):
            cand = tree.query_ball_point(p, ub[i] + rmax + 1e-12)
            cand = np.asarray(cand)
            d = point_triangle_distances(
                np.broadcast_to(p, (len(cand), 3)), a[cand], b[cand], c[cand]
            )
            out[lo + i] = d.min()
    return out
