"""Keypoint-based dense correspondence over a spanning tree of faces."""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .correspondence import KEYPOINT, SPARSE, CorrespondedFaceSet
from .descriptors import batch_descriptors, eigen_ratios, feature_scale, match_keypoints
from .mesh import MeshError, mesh_resolution
from .parallel import pmap
from .tps import DegenerateLandmarks, ThinPlateSpline

logger = logging.getLogger(__name__)


@dataclass
class DenseParams:
    """Tunables of the keypoint loop.

    ``kq_factor`` scales the global mesh resolution into the match
    threshold ``k_q``; ``patch_width`` and ``keypoint_radius`` are in
    multiples of the local resolution.
    """

    t_k: float = 1.2
    kq_factor: float = 2.0
    n_q: int = 80
    t_1: float = 3
    max_iters: int = 10
    patch_width: float = 5.0
    keypoint_radius: float = 5.0
    descriptor_radius: float = 5.0
    normalization: str = "pooled"  # or "global": statistics over whole faces
    workers: int = 1

    def __post_init__(self):
        if self.normalization not in ("global", "pooled"):
            raise ValueError("normalization must be 'global' or 'pooled'")
        if self.t_k < 0 or self.kq_factor < 0 or self.n_q < 0:
            raise ValueError("parameters must be non-negative")
        if self.patch_width <= 0 or self.keypoint_radius <= 0 or self.descriptor_radius <= 0:
            raise ValueError("radii must be positive")


def triangulate_mean(points):
    """Delaunay triangles of the xy projection of the mean shape.

    ``points`` is a CorrespondedFaceSet or an ``(N, P, 3)`` / ``(P, 3)``
    array; the resulting connectivity is shared by every face.
    """
    pts = points.points if isinstance(points, CorrespondedFaceSet) else np.asarray(points, dtype=np.float64)
    mean = pts.mean(axis=0) if pts.ndim == 3 else pts
    xy = mean[:, :2]
    if len(xy) < 3:
        raise MeshError("degenerate triangulation")
    centred = xy - xy.mean(axis=0)
    s = np.linalg.svd(centred, compute_uv=False)
    if s[-1] <= 1e-9 * max(s[0], 1e-300):
        raise MeshError("degenerate triangulation")
    try:
        tri = Delaunay(xy)
    except QhullError as exc:
        raise MeshError("degenerate triangulation") from exc
    t = tri.simplices.astype(np.int64)
    # counter-clockwise in xy
    a, b, c = xy[t[:, 0]], xy[t[:, 1]], xy[t[:, 2]]
    cw = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]) < 0
    t[cw] = t[cw][:, [0, 2, 1]]
    return t[np.lexsort(t.T[::-1])]


def unique_edges(triangles):
    t = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
    e = np.sort(e, axis=1)
    return np.unique(e, axis=0)


@dataclass
class GeodesicPatch:
    """Strip of a face's vertices around the segment between two vertices.

    ``axes`` rows are the patch frame: x along the edge, z the mean patch
    normal made orthogonal to x, y completing a right-handed frame. The
    frame origin is the first endpoint.
    """

    mesh: object
    edge: tuple
    vertex_ids: np.ndarray
    rho: float
    theta: float
    descriptive: bool = True
    axes: np.ndarray = field(default=None, repr=False)

    @property
    def points(self):
        return self.mesh.vertices[self.vertex_ids]

    @property
    def origin(self):
        return self.mesh.vertices[self.edge[0]]

    @property
    def endpoints(self):
        return self.mesh.vertices[list(self.edge)]

    def local(self, points):
        return (np.asarray(points, dtype=np.float64) - self.origin) @ self.axes.T

    def world(self, local):
        return np.asarray(local, dtype=np.float64) @ self.axes + self.origin


def _edge_frame(mesh, edge, ids):
    a, b = mesh.vertices[edge[0]], mesh.vertices[edge[1]]
    ex = b - a
    ex = ex / np.linalg.norm(ex)
    n = mesh.normals[ids].sum(axis=0) if len(ids) else np.array([0.0, 0.0, 1.0])
    ez = n - (n @ ex) * ex
    norm = np.linalg.norm(ez)
    if norm < 1e-12:
        ez = np.array([0.0, 0.0, 1.0]) - ex[2] * ex
        norm = np.linalg.norm(ez)
        if norm < 1e-12:
            ez, norm = np.array([1.0, 0.0, 0.0]), 1.0
    ez = ez / norm
    ey = np.cross(ez, ex)
    return np.vstack([ex, ey, ez])


def extract_geodesic_patch(face, v_a, v_b, width_factor=5.0):
    """Vertices within ``width_factor * rho / 2`` of the edge, between its ends.

    The mesh is rotated about z so that both endpoints share a y
    coordinate; ``rho`` is the resolution of the endpoints' 1-rings. Edges
    shorter than ``rho`` in the xy plane yield the two 1-rings instead.
    """
    v_a, v_b = int(v_a), int(v_b)
    if v_a == v_b:
        raise ValueError("patch endpoints must differ")
    v = face.vertices
    rho = mesh_resolution(face, [v_a, v_b])
    d = v[v_b] - v[v_a]
    theta = float(np.arctan2(d[1], d[0]))
    length = float(np.hypot(d[0], d[1]))
    if length < rho:
        ids = np.unique(np.concatenate([[v_a, v_b], face.neighbors(v_a), face.neighbors(v_b)]))
    else:
        c, s = np.cos(theta), np.sin(theta)
        rel = v[:, :2] - v[v_a, :2]
        x = c * rel[:, 0] + s * rel[:, 1]
        y = -s * rel[:, 0] + c * rel[:, 1]
        half = 0.5 * width_factor * rho
        ids = np.flatnonzero((x >= -1e-9) & (x <= length + 1e-9) & (np.abs(y) <= half))
    patch = GeodesicPatch(face, (v_a, v_b), ids.astype(np.int64), rho, theta, descriptive=len(ids) > 0)
    patch.axes = _edge_frame(face, patch.edge, patch.vertex_ids)
    return patch


@dataclass
class PatchRegistration:
    """Map from patch 2's frame to patch 1's: rigid frame change then planar TPS."""

    target: GeodesicPatch
    source: GeodesicPatch
    tps: ThinPlateSpline = None

    def local(self, points):
        """Registered coordinates, in the target patch frame, of source points."""
        loc = self.source.local(points)
        if self.tps is not None:
            loc = loc.copy()
            loc[:, :2] = self.tps(loc[:, :2])
        return loc

    def __call__(self, points):
        return self.target.world(self.local(points))


def _controls(patch):
    loc = patch.local(patch.endpoints)[:, :2]
    pts = patch.local(patch.points)[:, :2] if len(patch.vertex_ids) else loc
    lo, hi = np.minimum(pts.min(0), loc.min(0)), np.maximum(pts.max(0), loc.max(0))
    corners = np.array([[lo[0], lo[1]], [hi[0], lo[1]], [hi[0], hi[1]], [lo[0], hi[1]]])
    return np.vstack([loc, corners])


def _distinct_pairs(src, dst, tol):
    keep = []
    for i in range(len(src)):
        if all(np.linalg.norm(src[i] - src[j]) > tol and np.linalg.norm(dst[i] - dst[j]) > tol for j in keep):
            keep.append(i)
    return src[keep], dst[keep]


def patch_registration(patch_1, patch_2):
    """Registration of ``patch_2`` onto ``patch_1``.

    Control points are the two endpoints and the bounding-box corners of
    each patch in its own frame; coincident controls are merged. Falls
    back to the rigid frame change alone (with a warning) when the
    controls are degenerate.
    """
    if len(patch_1.vertex_ids) == 0 or len(patch_2.vertex_ids) == 0:
        raise MeshError("empty patch")
    src, dst = _controls(patch_2), _controls(patch_1)
    if np.allclose(src, dst, rtol=0, atol=1e-12):
        return PatchRegistration(patch_1, patch_2, None)
    src, dst = _distinct_pairs(src, dst, 1e-6 * max(patch_1.rho, patch_2.rho))
    try:
        tps = ThinPlateSpline(src, dst)
    except DegenerateLandmarks:
        logger.warning("degenerate patch controls; using rigid registration")
        tps = None
    return PatchRegistration(patch_1, patch_2, tps)


def register_patches(patch_1, patch_2):
    """``patch_2`` warped onto ``patch_1``.

    Returns
    -------
    warped : (m, 3) ndarray
        Registered positions of ``patch_2``'s points, in world coordinates
        of ``patch_1``'s face.
    registration : PatchRegistration
    """
    reg = patch_registration(patch_1, patch_2)
    return reg(patch_2.points), reg


def detect_keypoints(patch, t_k=1.2, radius=None):
    """Vertex ids of patch points whose eigenvalue ratio exceeds ``t_k``.

    The covariance is taken over the face vertices within ``radius``
    (default ``5 * rho``). A patch with fewer than three keypoints is
    marked non-descriptive.
    """
    r = 5.0 * patch.rho if radius is None else radius
    ids = patch.vertex_ids
    if len(ids) == 0:
        patch.descriptive = False
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    ratio = eigen_ratios(patch.mesh, ids, r)
    keep = np.isfinite(ratio) & (ratio > t_k)
    if keep.sum() < 3:
        patch.descriptive = False
    return ids[keep], ratio[keep]


@dataclass
class _PatchFeatures:
    patch: GeodesicPatch
    keypoints: np.ndarray
    desc: np.ndarray  # positions in the own frame; replaced per pairing


def _patch_features(face, edge, params, rho_global):
    patch = extract_geodesic_patch(face, edge[0], edge[1], params.patch_width)
    if not patch.descriptive:
        return None
    kp, _ = detect_keypoints(patch, params.t_k, params.keypoint_radius * patch.rho)
    if not patch.descriptive:
        return None
    pts = face.vertices[kp]
    desc, ok = batch_descriptors(face, pts, params.descriptor_radius * rho_global, patch.axes,
                                 positions=patch.local(pts), vertices=kp)
    kp, desc = kp[ok], desc[ok]
    if len(kp) < 3:
        return None
    return _PatchFeatures(patch, kp, desc)


def _pair_matches(parent, child, k_q, scale=None):
    """Keypoint matches between two faces' patches over the same edge."""
    try:
        reg = patch_registration(parent.patch, child.patch)
    except MeshError:
        return {}
    d2 = child.desc.copy()
    d2[:, :3] = reg.local(child.patch.mesh.vertices[child.keypoints])
    pairs, costs = match_keypoints(parent.desc, d2, k_q, scale=scale)
    return {int(parent.keypoints[i]): (int(child.keypoints[j]), float(c)) for (i, j), c in zip(pairs, costs)}


def chain_matches(tree, features, pair_fn):
    """Compose parent-child matches from the root down the tree.

    Returns ``(vertex id per face, cost)`` tuples for matches that reach
    every face; a chain's cost is the largest link cost along it.
    """
    root = tree.root
    if features[root] is None:
        return []
    chains = {int(v): ({root: int(v)}, 0.0) for v in features[root].keypoints}
    for p, c in tree.edges:
        if not chains:
            break
        if features[p] is None or features[c] is None:
            return []
        m = pair_fn(features[p], features[c])
        nxt = {}
        for key, (ids, cost) in chains.items():
            hit = m.get(ids[p])
            if hit is not None:
                ids = dict(ids)
                ids[c] = hit[0]
                nxt[key] = (ids, max(cost, hit[1]))
        chains = nxt
    out = []
    n = len(features)
    for key in sorted(chains):
        ids, cost = chains[key]
        out.append((np.array([ids[f] for f in range(n)], dtype=np.int64), cost))
    return out


@dataclass
class DenseResult:
    correspondences: CorrespondedFaceSet
    iterations: int
    new_per_iteration: list


def _select_seeds(costs, is_anchor, seeded, n_q):
    cand = np.flatnonzero(~is_anchor & ~seeded)
    order = cand[np.lexsort((cand, costs[cand]))]
    return np.concatenate([np.flatnonzero(is_anchor), order[:n_q]])


def run_dense_correspondence(faces, tree, sparse, params=None, return_details=False):
    """Keypoint-driven dense correspondence (iterated until few new matches).

    Parameters
    ----------
    faces : list of Mesh
        Pose-normalised faces.
    tree : SpanningTree
        Face organisation; matches are found between parents and children
        and composed from the root so every face receives each match.
    sparse : SparseCorrespondence
        Initial hull correspondences; they are kept as anchors and seed
        every iteration's triangulation.
    params : DenseParams

    Returns
    -------
    CorrespondedFaceSet, or DenseResult when ``return_details``.
    """
    params = DenseParams() if params is None else params
    n = len(faces)
    if n < 2:
        raise ValueError("at least two faces are required")
    keep = sparse.indices
    if len(keep) < 3:
        raise MeshError("degenerate triangulation")
    rho = float(np.mean([mesh_resolution(f) for f in faces]))
    k_q = params.kq_factor * rho
    scale = None
    if params.normalization == "global":
        scale = feature_scale(faces, params.descriptor_radius * rho)
    vids = [sparse.vertex_ids[:, keep].T.copy()[i] for i in range(len(keep))]  # one (N,) row per point
    costs = [0.0] * len(keep)  # anchors are accepted without a match cost
    kinds = [SPARSE] * len(keep)
    used = [set() for _ in range(n)]
    for row in vids:
        for f in range(n):
            used[f].add(int(row[f]))
    seeded = np.zeros(len(vids), bool)
    history = []
    it = 0
    while it < params.max_iters:
        it += 1
        V = np.array(vids)
        C = np.array(costs)
        is_anchor = np.array(kinds) == SPARSE
        seeded = np.concatenate([seeded, np.zeros(len(V) - len(seeded), bool)])
        seeds = _select_seeds(C, is_anchor, seeded, params.n_q)
        seeded[seeds] = True
        mean = np.mean([faces[f].vertices[V[seeds, f]] for f in range(n)], axis=0)
        try:
            tri = triangulate_mean(mean)
        except MeshError:
            logger.warning("seed triangulation failed at iteration %d", it)
            break
        edges = unique_edges(tri)
        edge_ids = [(V[seeds[a]], V[seeds[b]]) for a, b in edges]

        def process(ea_eb):
            ids_a, ids_b = ea_eb
            feats = []
            for f in range(n):
                if ids_a[f] == ids_b[f]:
                    feats.append(None)
                    continue
                feats.append(_patch_features(faces[f], (ids_a[f], ids_b[f]), params, rho))
            return chain_matches(tree, feats, lambda a, b: _pair_matches(a, b, k_q, scale))

        results = pmap(process, edge_ids, params.workers)
        cands = [c for r in results for c in r]
        cands.sort(key=lambda t: (t[1], tuple(t[0])))
        new = 0
        for ids, cost in cands:
            if any(int(ids[f]) in used[f] for f in range(n)):
                continue
            for f in range(n):
                used[f].add(int(ids[f]))
            vids.append(ids)
            costs.append(cost)
            kinds.append(KEYPOINT)
            new += 1
        history.append(new)
        logger.info("iteration %d: %d edges, %d new correspondences", it, len(edges), new)
        if new <= params.t_1:
            break
    V = np.array(vids)
    pts = np.stack([faces[f].vertices[V[:, f]] for f in range(n)])
    tri = triangulate_mean(pts)
    out = CorrespondedFaceSet(points=pts, costs=np.array(costs), triangles=tri,
                              vertex_ids=V.T.copy(), kinds=np.array(kinds))
    if return_details:
        return DenseResult(out, it, history)
    return out
