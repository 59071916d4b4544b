"""Small vectorised geometric helpers."""

import numpy as np


def closest_point_on_triangle(p, a, b, c):
    """Closest point on triangles ``abc`` to points ``p`` (all ``(m, 3)``).

    Returns the closest points and their barycentric coordinates.
    Region tests follow Ericson, *Real-Time Collision Detection*, 5.1.5.
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64).reshape(-1, 3) for x in (p, a, b, c))
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    m = len(p)
    bary = np.zeros((m, 3))
    done = np.zeros(m, bool)

    def assign(mask, u, v, w):
        nonlocal done
        mask = mask & ~done
        bary[mask] = np.column_stack([u, v, w])[mask]
        done = done | mask

    with np.errstate(divide="ignore", invalid="ignore"):
        one, zero = np.ones(m), np.zeros(m)
        assign((d1 <= 0) & (d2 <= 0), one, zero, zero)
        assign((d3 >= 0) & (d4 <= d3), zero, one, zero)
        t = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), 1 - t, t, zero)
        assign((d6 >= 0) & (d5 <= d6), zero, zero, one)
        t = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), 1 - t, zero, t)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), zero, 1 - t, t)
        denom = 1.0 / (va + vb + vc)
        v = vb * denom
        w = vc * denom
        assign(np.ones(m, bool), 1 - v - w, v, w)
    q = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return q, bary


def closest_triangles(mesh, points, k=8):
    """Closest surface point on ``mesh`` for each query point.

    Candidate triangles are those touching the ``k`` nearest vertices.

    Returns
    -------
    tri : (q,) int array
    closest : (q, 3) ndarray
    bary : (q, 3) ndarray
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    k = min(k, len(mesh.vertices))
    _, nn = mesh.index._tree.query(pts, k=k)
    nn = np.atleast_2d(nn).reshape(len(pts), -1)
    inc = mesh.vertex_triangles
    v, t = mesh.vertices, mesh.triangles
    tri_out = np.zeros(len(pts), dtype=np.int64)
    q_out = np.zeros_like(pts)
    b_out = np.zeros_like(pts)
    for i, p in enumerate(pts):
        cand = np.unique(np.concatenate([inc.indices[inc.indptr[j]:inc.indptr[j + 1]] for j in nn[i]]))
        tt = t[cand]
        q, bary = closest_point_on_triangle(np.broadcast_to(p, (len(cand), 3)), v[tt[:, 0]], v[tt[:, 1]], v[tt[:, 2]])
        d = np.einsum("ij,ij->i", q - p, q - p)
        j = int(np.argmin(d))
        tri_out[i], q_out[i], b_out[i] = cand[j], q[j], bary[j]
    return tri_out, q_out, b_out


def triangle_frames(a, b, c):
    """Columns ``(b - a, c - a, unit normal)`` for each triangle, shape ``(m, 3, 3)``."""
    e1, e2 = b - a, c - a
    n = np.cross(e1, e2)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return np.stack([e1, e2, n], axis=-1)


def point_in_triangle(p, a, b, c, tol=1e-9):
    """True where the projection of ``p`` onto the plane of ``abc`` falls inside."""
    p, a, b, c = (np.asarray(x, dtype=np.float64).reshape(-1, 3) for x in (p, a, b, c))
    frames = triangle_frames(a, b, c)
    coef = np.linalg.solve(frames, (p - a)[..., None])[..., 0]
    u, v = coef[:, 0], coef[:, 1]
    return (u >= -tol) & (v >= -tol) & (u + v <= 1 + tol)


def rotation_about(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
