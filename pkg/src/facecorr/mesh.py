"""Triangle mesh container, resolution, normals, curvature and spatial queries."""

import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

logger = logging.getLogger(__name__)


class MeshError(ValueError):
    """Raised for malformed or degenerate geometry."""


class Mesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    vertices : (n, 3) array_like
        Vertex coordinates in mm.
    triangles : (m, 3) array_like of int
        Vertex indices, counter-clockwise when seen from the outside.
    normals : (n, 3) array_like, optional
        Per-vertex unit normals. Computed from the triangles when omitted.

    Notes
    -----
    Zero-area triangles are dropped at construction; the number dropped is
    logged and kept in ``n_dropped``.
    """

    def __init__(self, vertices, triangles=None, normals=None):
        v = np.array(vertices, dtype=np.float64).reshape(-1, 3)
        if triangles is None:
            t = np.zeros((0, 3), dtype=np.int64)
        else:
            t = np.array(triangles, dtype=np.int64).reshape(-1, 3)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise MeshError("triangle index out of range")
        self.n_dropped = 0
        if t.size:
            area2 = np.linalg.norm(_face_cross(v, t), axis=1)
            keep = (area2 > 0) & (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
            self.n_dropped = int((~keep).sum())
            if self.n_dropped:
                logger.warning("dropped %d degenerate triangles", self.n_dropped)
            t = t[keep]
        v.flags.writeable = False
        t.flags.writeable = False
        self.vertices = v
        self.triangles = t
        if normals is not None:
            nrm = np.array(normals, dtype=np.float64).reshape(-1, 3)
            if nrm.shape != v.shape:
                raise MeshError("normals must match vertices")
            lens = np.linalg.norm(nrm, axis=1, keepdims=True)
            nrm = nrm / np.where(lens > 0, lens, 1.0)
            nrm.flags.writeable = False
            self.__dict__["normals"] = nrm

    def __repr__(self):
        return f"Mesh(n_vertices={len(self.vertices)}, n_triangles={len(self.triangles)})"

    def __len__(self):
        return len(self.vertices)

    @cached_property
    def normals(self):
        """Area-weighted vertex normals."""
        v, t = self.vertices, self.triangles
        fn = _face_cross(v, t)  # length = 2 * area, so summing is area weighting
        n = np.zeros_like(v)
        for k in range(3):
            np.add.at(n, t[:, k], fn)
        lens = np.linalg.norm(n, axis=1, keepdims=True)
        n = n / np.where(lens > 0, lens, 1.0)
        n.flags.writeable = False
        return n

    @cached_property
    def face_normals(self):
        fn = _face_cross(self.vertices, self.triangles)
        return fn / np.linalg.norm(fn, axis=1, keepdims=True)

    @cached_property
    def face_areas(self):
        return 0.5 * np.linalg.norm(_face_cross(self.vertices, self.triangles), axis=1)

    @cached_property
    def edges(self):
        """Unique undirected edges as an (e, 2) array with ``i < j``."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def edge_lengths(self):
        e = self.edges
        return np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)

    @cached_property
    def adjacency(self):
        """Symmetric vertex adjacency as a CSR matrix."""
        e = self.edges
        n = len(self.vertices)
        data = np.ones(2 * len(e))
        a = sparse.coo_matrix(
            (data, (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n)
        )
        return a.tocsr()

    @cached_property
    def vertex_triangles(self):
        """CSR incidence: row i lists the triangles touching vertex i."""
        t = self.triangles
        m = len(t)
        rows = t.ravel()
        cols = np.repeat(np.arange(m), 3)
        inc = sparse.coo_matrix((np.ones(3 * m), (rows, cols)), shape=(len(self.vertices), m))
        return inc.tocsr()

    @cached_property
    def boundary_vertices(self):
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        return np.unique(uniq[counts == 1])

    @cached_property
    def index(self):
        return SpatialIndex(self.vertices)

    def neighbors(self, i):
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    def transformed(self, rotation=None, translation=None):
        """Return ``R @ v + t`` as a new mesh with the same connectivity."""
        v = self.vertices
        if rotation is not None:
            v = v @ np.asarray(rotation).T
        if translation is not None:
            v = v + np.asarray(translation)
        return Mesh(v, self.triangles)

    def with_vertices(self, vertices):
        return Mesh(vertices, self.triangles)


def _face_cross(v, t):
    return np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])


@dataclass(frozen=True)
class LocalPatchStats:
    k1: float
    k2: float
    normal: np.ndarray
    centroid: np.ndarray


class SpatialIndex:
    """k-d tree over a point set with deterministic tie-breaking."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) == 0:
            raise MeshError("empty index")
        self.points = pts
        self._tree = cKDTree(pts)

    def __len__(self):
        return len(self.points)

    def query(self, queries):
        """Nearest neighbour of each query. Ties go to the lowest vertex id.

        Returns
        -------
        ids : (q,) int array
        dist : (q,) float array
        """
        q = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        k = min(4, len(self.points))
        dist, ids = self._tree.query(q, k=k)
        if k == 1:
            return ids.astype(np.int64), dist
        best = dist[:, :1]
        tied = dist == best
        ids = np.where(tied, ids, np.iinfo(np.int64).max)
        return ids.min(axis=1).astype(np.int64), best[:, 0]

    def nearest(self, point):
        ids, dist = self.query(point)
        return int(ids[0]), float(dist[0])

    def within(self, point, radius):
        """Sorted ids of points within ``radius`` of ``point``."""
        return np.array(sorted(self._tree.query_ball_point(np.asarray(point, float), radius)), dtype=np.int64)

    def within_many(self, points, radius):
        return self._tree.query_ball_point(np.asarray(points, float), radius)


def nearest_neighbor(index, query):
    """Closest stored vertex to ``query`` as ``(vertex_id, distance)``."""
    return index.nearest(query)


def mesh_resolution(mesh, vertices=None):
    """Mean edge length.

    With ``vertices`` given, only edges touching those vertices (their
    1-rings) are averaged, which gives the local resolution around an edge
    of a triangulation.
    """
    e = mesh.edges
    if len(e) == 0:
        raise MeshError("no edges")
    lengths = mesh.edge_lengths
    if vertices is None:
        return float(lengths.mean())
    vs = np.atleast_1d(np.asarray(vertices, dtype=np.int64))
    mask = np.isin(e[:, 0], vs) | np.isin(e[:, 1], vs)
    if not mask.any():
        raise MeshError("no edges")
    return float(lengths[mask].mean())


def _tangent_basis(n):
    a = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    t1 = np.cross(n, a)
    t1 /= np.linalg.norm(t1)
    return t1, np.cross(n, t1)


def _quadric_curvatures(local, weights):
    """Principal curvatures at the origin of a height quadric in a normal frame.

    The fit is ``z = a x^2 + b xy + c y^2 + d x + e y + f + g z^2``; the
    ``z^2`` regressor makes spheres and cylinders exact. Positive curvature
    means the surface bends away from the frame normal (convex side out).
    """
    x, y, z = local[:, 0], local[:, 1], local[:, 2]
    sw = np.sqrt(weights)
    A = np.column_stack([x * x, x * y, y * y, x, y, np.ones_like(x), z * z]) * sw[:, None]
    coef = np.linalg.lstsq(A, z * sw, rcond=None)[0]
    a, b, c, d, e, f, g = coef
    # height of the fitted surface above the origin
    if abs(g * f) > 1e-12:
        disc = max(1.0 - 4.0 * g * f, 0.0)
        z0 = (1.0 - np.sqrt(disc)) / (2.0 * g)
    else:
        z0 = f
    gz = 2.0 * g * z0 - 1.0
    zx, zy = -d / gz, -e / gz
    zxx = -(2 * a + 2 * g * zx * zx) / gz
    zxy = -(b + 2 * g * zx * zy) / gz
    zyy = -(2 * c + 2 * g * zy * zy) / gz
    w = np.sqrt(1.0 + zx * zx + zy * zy)
    first = np.array([[1 + zx * zx, zx * zy], [zx * zy, 1 + zy * zy]])
    second = np.array([[zxx, zxy], [zxy, zyy]]) / w
    shape_op = np.linalg.solve(first, second)
    ev = np.linalg.eigvals(shape_op).real
    k = np.sort(-ev)[::-1]
    return float(k[0]), float(k[1])


def _patch_frame(pts, hint):
    centroid = pts.mean(axis=0)
    cov = np.cov((pts - centroid).T, bias=True)
    _, vecs = np.linalg.eigh(cov)
    n = vecs[:, 0]
    if np.dot(n, hint) < 0:
        n = -n
    return n, centroid


def estimate_curvature(mesh, center, radius):
    """Principal curvatures of a weighted local quadric around a vertex.

    Neighbours within ``radius`` (3-D ball) are expressed in the frame of
    the patch normal (smallest principal axis, oriented like the vertex
    normal) and fitted with Gaussian weights of width ``radius / 2``.

    Returns
    -------
    LocalPatchStats
    """
    ids = mesh.index.within(mesh.vertices[center], radius)
    if len(ids) < 6:
        raise MeshError("patch too sparse")
    pts = mesh.vertices[ids]
    n, centroid = _patch_frame(pts, mesh.normals[center])
    k1, k2 = _fit_at(pts, mesh.vertices[center], n, radius)
    return LocalPatchStats(k1=k1, k2=k2, normal=n, centroid=centroid)


def _fit_at(pts, origin, n, radius):
    t1, t2 = _tangent_basis(n)
    d = pts - origin
    local = np.column_stack([d @ t1, d @ t2, d @ n])
    sigma = radius / 2.0
    w = np.exp(-np.einsum("ij,ij->i", d, d) / (2 * sigma * sigma))
    return _quadric_curvatures(local, w)


def vertex_curvatures(mesh, radius):
    """Principal curvatures ``(n, 2)`` at every vertex (``k1 >= k2``).

    Vertices with fewer than six neighbours inside ``radius`` get zeros.
    """
    v = mesh.vertices
    nbrs = mesh.index.within_many(v, radius)
    out = np.zeros((len(v), 2))
    normals = mesh.normals
    for i, ids in enumerate(nbrs):
        if len(ids) < 6:
            continue
        pts = v[ids]
        n, _ = _patch_frame(pts, normals[i])
        out[i] = _fit_at(pts, v[i], n, radius)
    return out


def grid_mesh(nx, ny, spacing=1.0, origin=(0.0, 0.0), height=None, diagonals=True):
    """Regular grid in the xy-plane, triangles counter-clockwise seen from +z.

    ``height`` is an optional callable ``z = f(x, y)``.
    """
    xs = origin[0] + spacing * np.arange(nx)
    ys = origin[1] + spacing * np.arange(ny)
    X, Y = np.meshgrid(xs, ys)
    Z = np.zeros_like(X) if height is None else height(X, Y)
    v = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    idx = np.arange(nx * ny).reshape(ny, nx)
    a = idx[:-1, :-1].ravel()
    b = idx[:-1, 1:].ravel()
    c = idx[1:, 1:].ravel()
    d = idx[1:, :-1].ravel()
    if diagonals:
        t = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    else:
        t = np.zeros((0, 3), dtype=np.int64)
    return Mesh(v, t)


def icosphere(radius=1.0, subdivisions=3):
    """Geodesic sphere with outward-facing triangles."""
    p = (1 + 5 ** 0.5) / 2
    verts = [(-1, p, 0), (1, p, 0), (-1, -p, 0), (1, -p, 0), (0, -1, p), (0, 1, p),
             (0, -1, -p), (0, 1, -p), (p, 0, -1), (p, 0, 1), (-p, 0, -1), (-p, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(x, float) / np.linalg.norm(x) for x in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return Mesh(np.array(verts) * radius, np.array(faces))
