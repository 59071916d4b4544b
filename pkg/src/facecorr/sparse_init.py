"""Initial sparse correspondences from an elliptical hull model."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .mesh import MeshError
from .parallel import pmap


@dataclass
class HullModel:
    points: np.ndarray
    a: float
    b: float
    delta: float

    @property
    def angles(self):
        return self.delta * np.arange(len(self.points))


@dataclass
class SparseCorrespondence:
    """Angle index -> vertex id for every face; -1 marks a dropped index."""

    vertex_ids: np.ndarray  # (N, K)

    @property
    def valid(self):
        return np.all(self.vertex_ids >= 0, axis=0)

    @property
    def indices(self):
        return np.flatnonzero(self.valid)

    def to_csv(self):
        lines = ["face_id,angle_index,vertex_id"]
        for f, row in enumerate(self.vertex_ids):
            for k, vid in enumerate(row):
                if vid >= 0:
                    lines.append(f"{f},{k},{vid}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text, n_angles):
        rows = [tuple(map(int, ln.split(","))) for ln in text.strip().splitlines()[1:]]
        n_faces = max(r[0] for r in rows) + 1
        ids = -np.ones((n_faces, n_angles), dtype=np.int64)
        for f, k, v in rows:
            ids[f, k] = v
        return cls(ids)


def convex_hull_2d_boundary(mesh, subsample_step=4):
    """Vertex ids on the xy convex hull of every ``subsample_step``-th vertex."""
    ids = np.arange(0, len(mesh.vertices), max(1, int(subsample_step)))
    if len(ids) < 3:
        raise MeshError("degenerate hull")
    try:
        hull = ConvexHull(mesh.vertices[ids, :2])
    except QhullError as exc:
        raise MeshError("degenerate hull") from exc
    return ids[hull.vertices]


def hull_model(a, b, delta=np.pi / 36):
    count = int(round(2 * np.pi / delta))
    th = delta * np.arange(count)
    pts = np.column_stack([a * np.cos(th), b * np.sin(th), np.zeros(count)])
    return HullModel(points=pts, a=float(a), b=float(b), delta=float(delta))


def build_hull_model(face, nose_tip, delta=np.pi / 36):
    """Ellipse of half-extents taken from the face's xy extent."""
    v = face.vertices
    a = 0.5 * (v[:, 0].max() - v[:, 0].min())
    b = 0.5 * (v[:, 1].max() - v[:, 1].min())
    return hull_model(a, b, delta)


def rigid_fit(src, dst):
    """Least-squares rotation and translation with ``dst ~ src @ R.T + t``."""
    cs, cd = src.mean(0), dst.mean(0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return R, cd - cs @ R.T


def _param_angle(p, a, b):
    return np.mod(np.arctan2(p[:, 1] / b, p[:, 0] / a), 2 * np.pi)


def _pair_by_angle(model_angles, hull_angles):
    d = np.abs(model_angles[:, None] - hull_angles[None, :])
    d = np.minimum(d, 2 * np.pi - d)
    return np.argmin(d, axis=1)


def register_halves(model, hull_points):
    """Rigidly register the upper and lower halves of the model separately.

    ``hull_points`` are 3-D positions relative to the nose tip. Each model
    point is paired with the hull point of nearest elliptical angle.

    Returns
    -------
    registered : (K, 3) ndarray
    residuals : dict with keys ``upper``, ``lower`` and ``whole``
    """
    th = model.angles
    upper_m = np.sin(th) >= -1e-12
    hang = _param_angle(hull_points, model.a, model.b)
    upper_h = hull_points[:, 1] >= 0
    registered = np.empty_like(model.points)
    residuals = {}
    pairs_all = np.empty(len(th), dtype=np.int64)
    for name, mm, hm in (("upper", upper_m, upper_h), ("lower", ~upper_m, ~upper_h)):
        hidx = np.flatnonzero(hm)
        if len(hidx) < 3:
            raise MeshError("insufficient hull support")
        pair = hidx[_pair_by_angle(th[mm], hang[hidx])]
        pairs_all[mm] = pair
        R, t = rigid_fit(model.points[mm], hull_points[pair])
        registered[mm] = model.points[mm] @ R.T + t
        residuals[name] = float(np.sum((registered[mm] - hull_points[pair]) ** 2))
    R, t = rigid_fit(model.points, hull_points[pairs_all])
    residuals["whole"] = float(np.sum((model.points @ R.T + t - hull_points[pairs_all]) ** 2))
    return registered, residuals


def register_hull_model(model, face, hull_vertices, nose_tip):
    """Sparse correspondences for one face.

    Returns
    -------
    (K,) int array
        Vertex id for each model angle, -1 where a duplicate was removed
        (the closer of two model points claiming one vertex is kept).
    """
    hull_vertices = np.asarray(hull_vertices)
    if len(hull_vertices) == 0:
        raise MeshError("insufficient hull support")
    tip = np.asarray(nose_tip, dtype=np.float64)
    registered, _ = register_halves(model, face.vertices[hull_vertices] - tip)
    ids, dist = face.index.query(registered + tip)
    out = ids.copy()
    order = np.lexsort((np.arange(len(ids)), dist))
    taken = set()
    for k in order:
        if ids[k] in taken:
            out[k] = -1
        else:
            taken.add(int(ids[k]))
    return out


def sparse_correspondences(faces, nose_tips, delta=np.pi / 36, subsample_step=4, workers=1):
    """Hull-model correspondences on every face, reconciled across faces.

    An angle index removed on any face is removed on all of them so every
    face keeps the same index set.
    """

    def one(i):
        face = faces[i]
        model = build_hull_model(face, nose_tips[i], delta)
        hull = convex_hull_2d_boundary(face, subsample_step)
        return register_hull_model(model, face, hull, nose_tips[i])

    ids = np.array(pmap(one, range(len(faces)), workers), dtype=np.int64)
    ids[:, ~np.all(ids >= 0, axis=0)] = -1
    return SparseCorrespondence(ids)
