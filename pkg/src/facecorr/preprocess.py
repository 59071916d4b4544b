"""Scan normalisation: nose tip, pose correction, cropping and hole filling."""

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve
from scipy.spatial import Delaunay

from .mesh import Mesh, MeshError


@dataclass
class PreprocessConfig:
    crop_radius: float = 80.0
    grid_spacing: float = 1.0
    smoothing_weight: float = 0.1
    max_pose_iters: int = 10

    def __post_init__(self):
        if self.crop_radius <= 0 or self.grid_spacing <= 0:
            raise ValueError("crop_radius and grid_spacing must be positive")
        if self.smoothing_weight < 0:
            raise ValueError("smoothing_weight must be non-negative")


def detect_nose_tip(mesh, override=None):
    """Vertex with the largest z inside the central half of the xy box.

    A manual ``override`` point is returned unchanged.
    """
    if override is not None:
        return np.asarray(override, dtype=np.float64)
    v = mesh.vertices
    if len(v) == 0:
        raise MeshError("nose tip not found")
    lo, hi = v[:, :2].min(0), v[:, :2].max(0)
    q = 0.25 * (hi - lo)
    inside = np.all((v[:, :2] >= lo + q) & (v[:, :2] <= hi - q), axis=1)
    if not inside.any():
        raise MeshError("nose tip not found")
    ids = np.flatnonzero(inside)
    return v[ids[np.argmax(v[ids, 2])]].copy()


def _hotelling_rotation(centered):
    cov = centered.T @ centered / len(centered)
    vals, vecs = np.linalg.eigh(cov)  # ascending
    if vals[0] <= 1e-12 * max(vals[-1], 1e-300):
        raise MeshError("degenerate geometry")
    y_axis, x_axis, z_axis = vecs[:, 2], vecs[:, 1], vecs[:, 0]
    # Hotelling leaves signs free: keep the nose (+z) and the vertical (+y)
    # on the side they already point to, which holds for near-frontal input.
    if z_axis[2] < 0:
        z_axis = -z_axis
    if y_axis[1] < 0:
        y_axis = -y_axis
    x_axis = np.cross(y_axis, z_axis)
    return np.vstack([x_axis, y_axis, z_axis])


def pose_normalize(mesh, max_iters=10):
    """Centre at the vertex mean and rotate onto the principal axes.

    The largest-variance axis becomes +y and the smallest +z. Iterates until
    the rotation update is within 1e-6 of identity.

    Returns
    -------
    mesh : Mesh
        Normalised mesh, ``R @ (v - v.mean(0))``.
    rotation : (3, 3) ndarray
        The accumulated rotation ``R``.
    """
    v = mesh.vertices
    if len(v) < 3:
        raise MeshError("degenerate geometry")
    total = np.eye(3)
    cur = v - v.mean(axis=0)
    for _ in range(max(1, int(max_iters))):
        cur = cur - cur.mean(axis=0)
        step = _hotelling_rotation(cur)
        cur = cur @ step.T
        total = step @ total
        if np.abs(step - np.eye(3)).max() < 1e-6:
            break
    tri = mesh.triangles
    out = Mesh(cur, tri)
    if len(tri) and out.face_normals[:, 2].sum() < 0:
        out = Mesh(cur, tri[:, ::-1])
    return out, total


def _second_differences(ny, nx, keep):
    idx = -np.ones((ny, nx), dtype=np.int64)
    idx[keep] = np.arange(keep.sum())
    rows, cols, vals = [], [], []
    r = 0
    for a, b, c in ((idx[:, :-2], idx[:, 1:-1], idx[:, 2:]), (idx[:-2, :], idx[1:-1, :], idx[2:, :])):
        ok = (a >= 0) & (b >= 0) & (c >= 0)
        a, b, c = a[ok], b[ok], c[ok]
        n = len(a)
        rr = r + np.arange(n)
        rows += [rr, rr, rr]
        cols += [a, b, c]
        vals += [np.ones(n), -2 * np.ones(n), np.ones(n)]
        r += n
    if r == 0:
        return sparse.csr_matrix((0, keep.sum()))
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(r, keep.sum())
    )


def crop_and_fill(mesh, nose_tip, cfg=None):
    """Crop a sphere around the nose tip and resample onto a regular grid.

    Heights at grid nodes solve a least-squares problem: bilinear
    interpolation of the grid must reproduce the scan heights, with a
    second-difference smoothness penalty that also fills holes.
    """
    cfg = cfg or PreprocessConfig()
    tip = np.asarray(nose_tip, dtype=np.float64)
    v = mesh.vertices
    keep = np.linalg.norm(v - tip, axis=1) <= cfg.crop_radius
    pts = v[keep]
    if len(pts) < 100:
        raise MeshError("crop too aggressive")
    h = cfg.grid_spacing
    lo = np.floor(pts[:, :2].min(0) / h) * h
    hi = np.ceil(pts[:, :2].max(0) / h) * h
    nx = int(round((hi[0] - lo[0]) / h)) + 1
    ny = int(round((hi[1] - lo[1]) / h)) + 1
    gx = lo[0] + h * np.arange(nx)
    gy = lo[1] + h * np.arange(ny)
    GX, GY = np.meshgrid(gx, gy)
    nodes = np.column_stack([GX.ravel(), GY.ravel()])

    hull = Delaunay(pts[:, :2])
    inside = hull.find_simplex(nodes, tol=1e-9) >= 0
    in_disc = np.linalg.norm(nodes - tip[:2], axis=1) <= cfg.crop_radius
    node_keep = (inside & in_disc).reshape(ny, nx)
    # bilinear support of every data point must be solvable: keep its cell corners
    fx = np.clip((pts[:, 0] - lo[0]) / h, 0, nx - 1 - 1e-9)
    fy = np.clip((pts[:, 1] - lo[1]) / h, 0, ny - 1 - 1e-9)
    # points on grid lines must pick the same cell under rounding noise
    ix, iy = np.floor(fx + 1e-7).astype(int), np.floor(fy + 1e-7).astype(int)
    ix = np.clip(ix, 0, nx - 2)
    iy = np.clip(iy, 0, ny - 2)
    for dy in (0, 1):
        for dx in (0, 1):
            node_keep[iy + dy, ix + dx] = True
    col = -np.ones((ny, nx), dtype=np.int64)
    col[node_keep] = np.arange(node_keep.sum())

    tx, ty = np.clip(fx - ix, 0, 1), np.clip(fy - iy, 0, 1)
    rows = np.repeat(np.arange(len(pts)), 4)
    cols = np.column_stack([col[iy, ix], col[iy, ix + 1], col[iy + 1, ix], col[iy + 1, ix + 1]]).ravel()
    vals = np.column_stack([(1 - tx) * (1 - ty), tx * (1 - ty), (1 - tx) * ty, tx * ty]).ravel()
    A = sparse.csr_matrix((vals, (rows, cols)), shape=(len(pts), node_keep.sum()))
    D = _second_differences(ny, nx, node_keep)
    lam = max(cfg.smoothing_weight, 1e-6) * len(pts) / max(D.shape[0], 1)
    lhs = (A.T @ A + lam * (D.T @ D)).tocsc()
    z = spsolve(lhs, A.T @ pts[:, 2])

    verts = np.column_stack([GX[node_keep], GY[node_keep], z])
    a = col[:-1, :-1]
    b = col[:-1, 1:]
    c = col[1:, 1:]
    d = col[1:, :-1]
    ok = (a >= 0) & (b >= 0) & (c >= 0) & (d >= 0)
    a, b, c, d = a[ok], b[ok], c[ok], d[ok]
    tris = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    used = np.zeros(len(verts), bool)
    used[tris.ravel()] = True
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(used.sum())
    return Mesh(verts[used], remap[tris])


def preprocess(mesh, cfg=None, nose_override=None, resample=True):
    """Pose-normalise, then crop and fill around the detected nose tip."""
    cfg = cfg or PreprocessConfig()
    out, _ = pose_normalize(mesh, cfg.max_pose_iters)
    tip = detect_nose_tip(out, nose_override)
    if resample:
        out = crop_and_fill(out, tip, cfg)
    return out
