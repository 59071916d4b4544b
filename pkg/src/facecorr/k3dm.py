"""Statistical deformable model: build, fit, augment, landmarks, recognition."""

import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .correspondence import SPARSE, CorrespondedFaceSet
from .graph import FaceGraph, build_mst, orient_tree, pair_weight
from .mesh import Mesh

logger = logging.getLogger(__name__)

MAGIC = b"K3DM"
FORMAT_VERSION = 1


class FitError(RuntimeError):
    pass


def vectorize(points):
    """``(P, 3)`` points -> ``[x_1..x_P, y_1..y_P, z_1..z_P]``."""
    return np.asarray(points, dtype=np.float64).reshape(-1, 3).T.ravel()


def unvectorize(vec):
    return np.asarray(vec, dtype=np.float64).reshape(3, -1).T


@dataclass
class DeformableModel:
    """Mean shape plus an orthonormal basis of shape variation.

    Attributes
    ----------
    mean : (3P,) ndarray
    basis : (3P, n) ndarray
        Orthonormal columns, ordered by decreasing variance.
    spectrum : (n,) ndarray
        Variances (squared singular values over ``N - 1``) of the columns.
    n_faces : int
        Number of faces the model was built from.
    triangles : (T, 3) int array
        Connectivity shared with every instance.
    index_sets : dict
        Named point-index sets (landmarks, regions, hull seeds).
    total_energy : float
        Sum of all variances before truncation.
    """

    mean: np.ndarray
    basis: np.ndarray
    spectrum: np.ndarray
    n_faces: int
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    index_sets: dict = field(default_factory=dict)
    total_energy: float = 0.0

    @property
    def n_points(self):
        return len(self.mean) // 3

    @property
    def n_components(self):
        return self.basis.shape[1]

    @property
    def retained_energy(self):
        if self.total_energy <= 0:
            return 1.0
        return float(self.spectrum.sum() / self.total_energy)

    def mean_shape(self):
        return unvectorize(self.mean)

    def instance(self, alpha):
        alpha = np.asarray(alpha, dtype=np.float64).reshape(self.n_components)
        return unvectorize(self.mean + self.basis @ alpha)

    def project(self, points):
        """Least-squares shape parameters ``U^T (f - mu)`` of corresponded points."""
        return self.basis.T @ (vectorize(points) - self.mean)

    def mesh(self, alpha=None):
        alpha = np.zeros(self.n_components) if alpha is None else alpha
        return Mesh(self.instance(alpha), self.triangles)


def _decompose(data, energy):
    """PCA of column-vector shapes; returns mean, basis, spectrum, total."""
    N = data.shape[1]
    mu = data.mean(axis=1)
    X = data - mu[:, None]
    U, s, _ = np.linalg.svd(X, full_matrices=False)
    var = s * s / max(N - 1, 1)
    total = float(var.sum())
    tol = max(s[0] if len(s) else 0.0, 1.0) * 1e-10 * max(X.shape)
    nz = int(np.sum(s > tol))
    if nz == 0 or total <= 0:
        return mu, np.zeros((len(mu), 0)), np.zeros(0), 0.0
    frac = np.cumsum(var[:nz]) / total
    n = int(np.searchsorted(frac, energy - 1e-12) + 1)
    n = min(n, nz)
    U = U[:, :n]
    # deterministic signs: largest-magnitude entry of each column positive
    flip = np.sign(U[np.argmax(np.abs(U), axis=0), np.arange(n)])
    U = U * np.where(flip == 0, 1.0, flip)
    return mu, U, var[:n], total


def build_model(faces, energy=0.98, index_sets=None):
    """Deformable model from a corresponded face set.

    Components are kept until ``energy`` of the total variance is reached.
    The point indices of the hull seeds are stored as the ``hull`` set.
    """
    if not isinstance(faces, CorrespondedFaceSet):
        raise TypeError("expected a CorrespondedFaceSet")
    if faces.n_faces < 2:
        raise ValueError("insufficient faces")
    if not 0 < energy <= 1:
        raise ValueError("energy must be in (0, 1]")
    data = np.stack([vectorize(p) for p in faces.points], axis=1)
    mu, U, var, total = _decompose(data, energy)
    sets = {"hull": np.flatnonzero(faces.kinds == SPARSE).astype(np.int64)}
    sets.update({k: np.asarray(v, dtype=np.int64) for k, v in (index_sets or {}).items()})
    return DeformableModel(mu, U, var, faces.n_faces, faces.triangles.copy(), sets, total)


@dataclass
class FitResult:
    alpha: np.ndarray
    registered_query: np.ndarray   # (P, 3), query points at model topology
    residual_trace: list
    inlier_mask: np.ndarray        # (P,) bool
    rotation: np.ndarray           # query -> model frame: q @ R.T + t
    translation: np.ndarray
    instance: np.ndarray           # (P, 3) fitted model points

    @property
    def iterations(self):
        return len(self.residual_trace)

    @property
    def residual(self):
        return self.residual_trace[-1] if self.residual_trace else 0.0


def _kabsch(src, dst):
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = 1.0 if np.linalg.det(Vt.T @ U.T) >= 0 else -1.0
    R = Vt.T @ D @ U.T
    return R, cd - cs @ R.T


def _rows(idx, P):
    idx = np.asarray(idx, dtype=np.int64)
    return np.concatenate([idx, idx + P, idx + 2 * P])


def _query_points(query):
    if isinstance(query, Mesh):
        return query.vertices
    return np.asarray(query, dtype=np.float64).reshape(-1, 3)


def fit(model, query, lam=0.8, eps_f=1e-4, max_iters=100, mask=None, min_inlier_fraction=0.5):
    """Fit the model to a query surface.

    Each iteration pairs every model point with its nearest query point,
    drops pairs farther than ``mean + 3 sd`` and all but the closest pair
    sharing a query point, rigidly aligns the query to the current
    instance, and updates the shape parameters by the ridge step

        (U*^T U* + lam I) alpha = U*^T (q* - mu*) + lam alpha_prev

    on the inlier rows. Iteration stops once the inlier residual
    ``sum |m - q|^2`` is at most ``eps_f`` or after ``max_iters``.

    Parameters
    ----------
    query : Mesh or (m, 3) array_like
    mask : (P,) bool or index array, optional
        Restrict fitting to these model points (region-based fitting).

    Raises
    ------
    FitError
        When fewer than ``min_inlier_fraction`` of the points are inliers.
    """
    Q0 = _query_points(query)
    if len(Q0) == 0:
        raise FitError("empty query")
    P = model.n_points
    allowed = np.ones(P, bool)
    if mask is not None:
        mask = np.asarray(mask)
        allowed = mask.astype(bool) if mask.dtype == bool else np.isin(np.arange(P), mask)
    n = model.n_components
    U = model.basis
    mu = model.mean
    alpha = np.zeros(n)
    m = unvectorize(mu + U @ alpha)
    # start from a translation that matches centroids
    R = np.eye(3)
    t = m[allowed].mean(axis=0) - Q0.mean(axis=0)
    tree = cKDTree(Q0)
    trace = []
    inl = allowed.copy()
    q_r = m.copy()
    for _ in range(max_iters):
        # nearest query point for each model point, in the model frame
        d, j = tree.query((m - t) @ R)
        cand = np.flatnonzero(allowed)
        dc = d[cand]
        t_c = dc.mean() + 3.0 * dc.std()
        inl = np.zeros(P, bool)
        inl[cand[dc <= t_c]] = True
        # collapse duplicates onto the closest model point
        order = np.lexsort((np.arange(P), d))
        seen = set()
        for i in order:
            if not inl[i]:
                continue
            if j[i] in seen:
                inl[i] = False
            else:
                seen.add(j[i])
        if inl.sum() < min_inlier_fraction * allowed.sum() or inl.sum() < 3:
            raise FitError("fit diverged")
        idx = np.flatnonzero(inl)
        R, t = _kabsch(Q0[j[idx]], m[idx])
        q = Q0[j] @ R.T + t
        rows = _rows(idx, P)
        Us = U[rows]
        lhs = Us.T @ Us + lam * np.eye(n)
        rhs = Us.T @ (vectorize(q)[rows] - mu[rows]) + lam * alpha
        alpha = np.linalg.solve(lhs, rhs) if n else alpha
        m = unvectorize(mu + U @ alpha)
        eps = float(np.sum((m[idx] - q[idx]) ** 2))
        trace.append(eps)
        q_r = np.where(inl[:, None], q, m)
        if eps <= eps_f:
            break
    return FitResult(alpha, q_r, trace, inl, R, t, m)


def transfer_landmarks(model, annotations, fit_result, on_surface=False):
    """Positions of annotated model points on a fitted instance.

    ``annotations`` is a mapping or list of ``(name, point_index)``.
    With ``on_surface`` the registered query points are used instead of
    the model instance.
    """
    items = annotations.items() if isinstance(annotations, dict) else annotations
    src = fit_result.registered_query if on_surface else fit_result.instance
    out = {}
    for name, idx in items:
        idx = int(idx)
        if not 0 <= idx < model.n_points:
            raise IndexError(f"landmark index {idx} out of range")
        out[name] = src[idx].copy()
    return out


def recognition_distance(alpha_gallery, alpha_query):
    """Angle between two shape-parameter vectors, in ``[0, pi]``."""
    a = np.asarray(alpha_gallery, dtype=np.float64).ravel()
    b = np.asarray(alpha_query, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("undefined angle")
    return float(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0)))


def recognition_features(model, query, regions=(), region_weight=1.0, **fit_kw):
    """Concatenated shape parameters for recognition.

    The query is fitted once to the whole face and once per region index
    set (names from ``model.index_sets`` or index arrays). Each block is
    scaled to unit length; region blocks are then multiplied by
    ``region_weight``, so with the default all blocks count equally in
    :func:`recognition_distance`.
    """
    blocks = [fit(model, query, **fit_kw).alpha]
    for reg in regions:
        mask = model.index_sets[reg] if isinstance(reg, str) else reg
        blocks.append(fit(model, query, mask=mask, **fit_kw).alpha)
    out = []
    for k, a in enumerate(blocks):
        na = np.linalg.norm(a)
        a = a / na if na > 0 else a
        out.append(a if k == 0 else region_weight * a)
    return np.concatenate(out)


@dataclass
class AugmentReport:
    order: list
    installed: list
    skipped: dict


def augment(model, source, new_faces, energy=0.98, lam=0.8, eps_f=1e-4, return_report=False):
    """Add new faces to the model in minimum-spanning-tree order.

    Every new face is first fitted to the current model; bending energies
    between the fitted hull points (and to the model mean) organise the
    faces into a spanning tree rooted at the face closest to the mean.
    Faces are then fitted, installed and the model rebuilt one at a time.
    Faces whose fit fails are skipped and reported.
    """
    new_faces = list(new_faces)
    if not new_faces:
        out = model
        return (out, AugmentReport([], [], {})) if return_report else out
    hull = model.index_sets.get("hull", np.zeros(0, np.int64))
    if len(hull) < 4:
        hull = np.linspace(0, model.n_points - 1, min(model.n_points, 64)).astype(np.int64)
    skipped = {}
    marks = {}
    for k, face in enumerate(new_faces):
        try:
            marks[k] = fit(model, face, lam, eps_f).registered_query[hull]
        except FitError as exc:
            skipped[k] = str(exc)
    keys = sorted(marks)
    order = []
    if keys:
        mean_marks = model.mean_shape()[hull]
        to_mean = [pair_weight(mean_marks, marks[k]) for k in keys]
        w = np.zeros((len(keys), len(keys)))
        for a in range(len(keys)):
            for b in range(a + 1, len(keys)):
                w[a, b] = w[b, a] = pair_weight(marks[keys[a]], marks[keys[b]])
        tree = build_mst(FaceGraph(w))
        root = int(np.argmin(to_mean))
        adj = {i: [] for i in range(len(keys))}
        for p, c in tree.edges:
            adj[p].append((c, tree.weights[(p, c)]))
            adj[c].append((p, tree.weights[(p, c)]))
        order = [keys[i] for i in orient_tree(adj, root).nodes]
    points = [p for p in source.points]
    current = model
    installed = []
    for k in order:
        try:
            res = fit(current, new_faces[k], lam, eps_f)
        except FitError as exc:
            skipped[k] = str(exc)
            continue
        points.append(res.registered_query)
        data = CorrespondedFaceSet(np.stack(points), source.costs, source.triangles, kinds=source.kinds)
        current = build_model(data, energy, {k2: v for k2, v in model.index_sets.items()})
        installed.append(k)
    report = AugmentReport(order, installed, skipped)
    if skipped:
        logger.warning("augment skipped faces: %s", skipped)
    return (current, report) if return_report else current


def save_model(model, path):
    """Write the little-endian ``K3DM`` container."""
    P, n = model.n_points, model.n_components
    tri = np.asarray(model.triangles, dtype="<i4").reshape(-1, 3)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIII", FORMAT_VERSION, P, n, model.n_faces, len(tri)))
        fh.write(struct.pack("<d", model.total_energy))
        fh.write(np.asarray(model.mean, dtype="<f8").tobytes())
        fh.write(np.asarray(model.basis, dtype="<f8").tobytes(order="C"))
        fh.write(np.asarray(model.spectrum, dtype="<f8").tobytes())
        fh.write(tri.tobytes())
        sets = sorted(model.index_sets.items())
        fh.write(struct.pack("<I", len(sets)))
        for name, idx in sets:
            raw = name.encode("utf-8")
            idx = np.asarray(idx, dtype="<i4").ravel()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", len(idx)))
            fh.write(idx.tobytes())


def load_model(path):
    """Read a model written by :func:`save_model`."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise ValueError("not a K3DM model file")
    off = 4

    def take(fmt):
        nonlocal off
        vals = struct.unpack_from(fmt, buf, off)
        off += struct.calcsize(fmt)
        return vals

    def arr(dtype, count):
        nonlocal off
        a = np.frombuffer(buf, dtype=dtype, count=count, offset=off).copy()
        off += a.nbytes
        return a

    try:
        version, P, n, N, T = take("<IIIII")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported K3DM version {version}")
        (total,) = take("<d")
        mean = arr("<f8", 3 * P)
        basis = arr("<f8", 3 * P * n).reshape(3 * P, n)
        spectrum = arr("<f8", n)
        tri = arr("<i4", 3 * T).reshape(T, 3).astype(np.int64)
        (count,) = take("<I")
        sets = {}
        for _ in range(count):
            (ln,) = take("<I")
            name = buf[off:off + ln].decode("utf-8")
            off += ln
            (m,) = take("<I")
            sets[name] = arr("<i4", m).astype(np.int64)
    except struct.error as exc:
        raise ValueError("truncated K3DM model file") from exc
    if off != len(buf):
        raise ValueError("trailing bytes in K3DM model file")
    return DeformableModel(mean.astype(np.float64), basis.astype(np.float64), spectrum.astype(np.float64),
                           int(N), tri, sets, float(total))
