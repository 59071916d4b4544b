"""Keypoint detection, 38-dimensional local descriptors and matching."""

import numpy as np

from .mesh import MeshError, vertex_curvatures

DESCRIPTOR_NAMES = (
    ["x", "y", "z", "nx", "ny", "nz"]
    + [f"hu{k}_{plane}" for plane in ("xy", "yz", "xz") for k in range(1, 8)]
    + ["k1_mean", "k2_mean", "gaussian", "mean", "shape_index_a", "shape_index_b",
       "curvedness", "log_curvedness", "willmore", "shape_curvedness", "log_difference"]
)
DESCRIPTOR_SIZE = len(DESCRIPTOR_NAMES)
CURVATURE_BLOCK = slice(29, 38)  # K .. m_l
assert DESCRIPTOR_SIZE == 38

_LOG_FLOOR = 1e-12


def eigen_ratios(mesh, ids, radius):
    """``s1 / s2`` of the covariance of the mesh vertices within ``radius``.

    The ball is taken around each vertex in ``ids`` on the full mesh.
    Vertices whose ball holds fewer than three points get ratio ``inf``.
    """
    ids = np.asarray(ids, dtype=np.int64)
    v = mesh.vertices
    nbrs = mesh.index.within_many(v[ids], radius)
    counts = np.array([len(n) for n in nbrs])
    if len(ids) == 0:
        return np.zeros(0)
    rows = np.repeat(np.arange(len(ids)), counts)
    cols = np.concatenate([np.asarray(n, dtype=np.int64) for n in nbrs]) if counts.sum() else np.zeros(0, int)
    p = v[cols]
    m = len(ids)
    s = np.zeros((m, 3))
    ss = np.zeros((m, 3, 3))
    for k in range(3):
        s[:, k] = np.bincount(rows, p[:, k], minlength=m)
        for j in range(k, 3):
            ss[:, k, j] = ss[:, j, k] = np.bincount(rows, p[:, k] * p[:, j], minlength=m)
    cnt = np.maximum(counts, 1)[:, None]
    mu = s / cnt
    cov = ss / cnt[..., None] - mu[:, :, None] * mu[:, None, :]
    ev = np.linalg.eigvalsh(cov)  # ascending
    s1, s2 = ev[:, 2], ev[:, 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(s2 > 0, s1 / s2, np.inf)
    ratio[counts < 3] = np.inf
    return ratio


def curvature_field(mesh, radius):
    """Per-vertex principal curvatures, cached on the mesh per radius."""
    cache = mesh.__dict__.setdefault("_curvature_cache", {})
    key = round(float(radius), 9)
    if key not in cache:
        cache[key] = vertex_curvatures(mesh, radius)
    return cache[key]


def hu_moments(hist):
    """Seven moment invariants of normalised 2-D histograms.

    ``hist`` is ``(3, 3)`` or a stack ``(m, 3, 3)``; bins are indexed from 1.
    """
    H = np.asarray(hist, dtype=np.float64)
    single = H.ndim == 2
    H = H.reshape(-1, H.shape[-2], H.shape[-1])
    total = H.sum(axis=(1, 2), keepdims=True)
    H = H / np.where(total > 0, total, 1.0)
    i = np.arange(1, H.shape[1] + 1)[None, :, None]
    j = np.arange(1, H.shape[2] + 1)[None, None, :]
    ib = np.sum(i * H, axis=(1, 2), keepdims=True)
    jb = np.sum(j * H, axis=(1, 2), keepdims=True)
    di, dj = i - ib, j - jb

    def mu(p, q):
        return np.sum(di ** p * dj ** q * H, axis=(1, 2))

    # mu00 = 1, so the scale-normalised moments equal the central ones
    n20, n02, n11 = mu(2, 0), mu(0, 2), mu(1, 1)
    n30, n03, n21, n12 = mu(3, 0), mu(0, 3), mu(2, 1), mu(1, 2)
    a, b = n30 + n12, n21 + n03
    h1 = n20 + n02
    h2 = (n20 - n02) ** 2 + 4 * n11 ** 2
    h3 = (n30 - 3 * n12) ** 2 + (3 * n21 - n03) ** 2
    h4 = a ** 2 + b ** 2
    h5 = (n30 - 3 * n12) * a * (a ** 2 - 3 * b ** 2) + (3 * n21 - n03) * b * (3 * a ** 2 - b ** 2)
    h6 = (n20 - n02) * (a ** 2 - b ** 2) + 4 * n11 * a * b
    h7 = (3 * n21 - n03) * a * (a ** 2 - 3 * b ** 2) - (n30 - 3 * n12) * b * (3 * a ** 2 - b ** 2)
    out = np.column_stack([h1, h2, h3, h4, h5, h6, h7])
    out[total[:, 0, 0] <= 0] = 0.0
    return out[0] if single else out


def curvature_features(k1, k2):
    """The eleven curvature components from mean principal curvatures.

    Works on scalars or arrays; ``k1 >= k2`` is assumed.
    """
    k1 = np.asarray(k1, dtype=np.float64)
    k2 = np.asarray(k2, dtype=np.float64)
    K = k1 * k2
    H = 0.5 * (k1 + k2)
    diff = k1 - k2
    umbilic = np.abs(diff) <= 1e-12 * np.maximum(1.0, np.maximum(np.abs(k1), np.abs(k2)))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(umbilic, 0.0, (k1 + k2) / np.where(umbilic, 1.0, diff))
    # umbilic points (including flat ones) sit at the shape-index midpoint
    s_a = 0.5 - np.arctan(ratio) / np.pi
    s_b = 2.0 / np.pi * np.arctan(ratio)
    c = np.sqrt(0.5 * (k1 * k1 + k2 * k2))
    c_l = 2.0 / np.pi * np.log(np.maximum(c, _LOG_FLOOR))
    e_w = H * H - K
    c_s = s_b * c_l
    m_l = np.log(np.maximum(K - H + 1.0, _LOG_FLOOR))
    return np.stack([k1, k2, K, H, s_a, s_b, c, c_l, e_w, c_s, m_l], axis=-1)


_PLANES = ((0, 1), (1, 2), (0, 2))


def batch_descriptors(mesh, points, radius, axes, positions=None, curvature_radius=None, vertices=None):
    """Descriptors for many points of one mesh.

    Parameters
    ----------
    points : (m, 3) array_like
        Points on or near the surface.
    axes : (3, 3) or (m, 3, 3) array_like
        Local frame rows (x, y, z) used for normals and histograms.
    positions : (m, 3) array_like, optional
        Position components; zeros when omitted.
    vertices : (m,) int array, optional
        Vertex whose normal is used; nearest vertex by default.

    Returns
    -------
    desc : (m, 38) ndarray
    ok : (m,) bool array
        False where fewer than six vertices fall within ``radius``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    m = len(pts)
    A = np.asarray(axes, dtype=np.float64)
    A = np.broadcast_to(A, (m, 3, 3)) if A.ndim == 2 else A.reshape(m, 3, 3)
    out = np.zeros((m, DESCRIPTOR_SIZE))
    if m == 0:
        return out, np.zeros(0, bool)
    if vertices is None:
        vertices = mesh.index.query(pts)[0]
    v = mesh.vertices
    nbrs = mesh.index.within_many(pts, radius)
    counts = np.array([len(n) for n in nbrs], dtype=np.int64)
    ok = counts >= 6
    rows = np.repeat(np.arange(m), counts)
    cols = np.concatenate([np.asarray(n, dtype=np.int64) for n in nbrs]) if counts.sum() else np.zeros(0, np.int64)
    local = np.einsum("rij,rj->ri", A[rows], v[cols] - pts[rows])
    b = np.clip(np.floor((local + radius) * (1.5 / radius)), 0, 2).astype(np.int64)
    hu = []
    for a, c in _PLANES:
        h = np.bincount(rows * 9 + b[:, a] * 3 + b[:, c], minlength=9 * m).reshape(m, 3, 3)
        hu.append(hu_moments(h))
    curv = curvature_field(mesh, radius if curvature_radius is None else curvature_radius)
    cnt = np.maximum(counts, 1)
    k1 = np.bincount(rows, curv[cols, 0], minlength=m) / cnt
    k2 = np.bincount(rows, curv[cols, 1], minlength=m) / cnt
    if positions is not None:
        out[:, :3] = np.asarray(positions, dtype=np.float64).reshape(m, 3)
    out[:, 3:6] = np.einsum("rij,rj->ri", A, mesh.normals[vertices])
    out[:, 6:27] = np.concatenate(hu, axis=1)
    out[:, 27:] = curvature_features(k1, k2)
    return out, ok


def extract_descriptor(mesh, point, radius, frame=None, position=None, curvature_radius=None, vertex=None):
    """38-component descriptor of the surface within ``radius`` of ``point``.

    Parameters
    ----------
    frame : (origin, axes), optional
        Local frame; ``axes`` rows are the frame's x, y, z directions.
        Defaults to the world axes centred on ``point``.
    position : (3,) array_like, optional
        Position component override (e.g. a registered position).
    curvature_radius : float, optional
        Scale of the per-vertex curvature estimates; defaults to ``radius``.
    """
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    if frame is None:
        origin, axes = p[0], np.eye(3)
    else:
        origin, axes = np.asarray(frame[0], float), np.asarray(frame[1], float)
    pos = (p - origin) @ axes.T if position is None else np.asarray(position, float).reshape(1, 3)
    desc, ok = batch_descriptors(mesh, p, radius, axes, pos, curvature_radius,
                                 None if vertex is None else np.array([vertex]))
    if not ok[0]:
        raise MeshError("descriptor support too small")
    return desc[0]


def feature_scale(meshes, radius, step=4):
    """Per-component mean and SD of descriptors over the given faces.

    Descriptors are taken at every ``step``-th vertex of each mesh in the
    world frame. Used to normalise matching costs against the variation
    across a whole face rather than within one small candidate set.
    """
    rows = []
    for m in meshes:
        ids = np.arange(0, len(m.vertices), step)
        d, ok = batch_descriptors(m, m.vertices[ids], radius, np.eye(3), vertices=ids)
        rows.append(d[ok])
    d = np.vstack(rows)
    return d.mean(axis=0), d.std(axis=0)


def normalize_features(d1, d2, scale=None):
    """Put both descriptor lists on the scale used by the match cost.

    Positions stay in mm. Every other component is z-scored and divided
    by the square root of their count, so the feature block adds the
    *mean* squared z-score to the cost while the position block adds
    squared millimetres. ``scale`` is a ``(mean, sd)`` pair as returned by
    :func:`feature_scale`; without it the statistics are pooled over both
    lists.
    """
    d1 = np.atleast_2d(np.asarray(d1, dtype=np.float64))
    d2 = np.atleast_2d(np.asarray(d2, dtype=np.float64))
    if scale is None:
        both = np.vstack([d1, d2])
        mu, sd = both.mean(axis=0), both.std(axis=0)
    else:
        mu, sd = np.array(scale[0], dtype=np.float64), np.array(scale[1], dtype=np.float64)
    sd = np.where(sd > 1e-12, sd, 1.0) * np.sqrt(d1.shape[1] - 3)
    mu[:3] = 0.0
    sd[:3] = 1.0
    return (d1 - mu) / sd, (d2 - mu) / sd


def cost_matrix(d1, d2):
    """Squared Euclidean feature distances."""
    diff = d1[:, None, :] - d2[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def match_keypoints(desc_1, desc_2, k_q, normalize=True, scale=None):
    """Mutual nearest neighbours with cost at most ``k_q``.

    Returns
    -------
    pairs : (m, 2) int array
        Row indices into ``desc_1`` and ``desc_2``, sorted by the first.
    costs : (m,) ndarray
    """
    d1 = np.atleast_2d(np.asarray(desc_1, dtype=np.float64))
    d2 = np.atleast_2d(np.asarray(desc_2, dtype=np.float64))
    if d1.size == 0 or d2.size == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    if normalize:
        d1, d2 = normalize_features(d1, d2, scale)
    C = cost_matrix(d1, d2)
    best12 = np.argmin(C, axis=1)
    best21 = np.argmin(C, axis=0)
    i = np.flatnonzero(best21[best12] == np.arange(len(d1)))
    j = best12[i]
    c = C[i, j]
    ok = c <= k_q
    return np.column_stack([i[ok], j[ok]]).astype(np.int64), c[ok]
