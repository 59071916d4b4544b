"""Geodesic fast marching, iso-curve sampling and smooth-region filling."""

import heapq
import logging
import math
from dataclasses import dataclass

import numpy as np

from .correspondence import LEVELSET
from .descriptors import batch_descriptors, feature_scale, match_keypoints
from .dense import chain_matches, triangulate_mean
from .geometry import closest_triangles, point_in_triangle, triangle_frames
from .mesh import MeshError, mesh_resolution
from .parallel import pmap

logger = logging.getLogger(__name__)


@dataclass
class GeodesicField:
    """Per-vertex geodesic distance from ``source``; ``inf`` where unreached."""

    mesh: object
    distance: np.ndarray
    source: np.ndarray
    source_triangle: int

    def max(self):
        d = self.distance[np.isfinite(self.distance)]
        return float(d.max()) if d.size else 0.0


def _solve(ax, ay, bx, by, da, db, cx, cy):
    """Planar update of C from known A, B (2-D, C above the x axis).

    The virtual source S sits at distances ``da`` / ``db`` from A / B on
    the far side of AB; it is used only when the ray S -> C crosses AB.
    """
    ex, ey = bx - ax, by - ay
    c = math.hypot(ex, ey)
    if c <= 0:
        return math.inf
    ux, uy = ex / c, ey / c
    # coordinates with A at the origin and B on the +x axis
    px = (cx - ax) * ux + (cy - ay) * uy
    py = -(cx - ax) * uy + (cy - ay) * ux
    sx = (da * da - db * db + c * c) / (2 * c)
    s2 = da * da - sx * sx
    if s2 < 0:
        return math.inf
    sy = -math.sqrt(s2) if py >= 0 else math.sqrt(s2)
    if py == sy:
        return math.inf
    t = -sy / (py - sy)
    xcross = sx + (px - sx) * t
    if xcross < 0 or xcross > c:
        return math.inf
    return math.hypot(px - sx, py - sy)


def _flatten(p, q, r):
    """2-D coordinates of triangle ``p, q, r`` with p at 0 and q on +x."""
    ex = [q[i] - p[i] for i in range(3)]
    c = math.sqrt(ex[0] ** 2 + ex[1] ** 2 + ex[2] ** 2)
    w = [r[i] - p[i] for i in range(3)]
    x = (ex[0] * w[0] + ex[1] * w[1] + ex[2] * w[2]) / c
    y = math.sqrt(max(w[0] ** 2 + w[1] ** 2 + w[2] ** 2 - x * x, 0.0))
    return c, x, y


def _unfold(c, px, py, p, q, d):
    """Position of ``d`` (across edge pq from the point at (px, py)) in the same 2-D chart."""
    _, x, y = _flatten(p, q, d)
    return x, -y if py >= 0 else y


def _dist(p, q):
    return math.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2)


class _Marcher:
    def __init__(self, mesh):
        self.v = mesh.vertices.tolist()
        self.t = mesh.triangles.tolist()
        inc = mesh.vertex_triangles
        self.vt = [inc.indices[inc.indptr[i]:inc.indptr[i + 1]].tolist() for i in range(len(self.v))]
        # triangle across each directed edge, for unfolding
        self.opposite = {}
        for k, (a, b, c) in enumerate(self.t):
            for x, y, z in ((a, b, c), (b, c, a), (c, a, b)):
                self.opposite.setdefault((min(x, y), max(x, y)), []).append((k, z))

    def update(self, a, b, c, d):
        """Candidate distance of vertex c from accepted a, b."""
        v = self.v
        da, db = d[a], d[b]
        best = min(da + _dist(v[a], v[c]), db + _dist(v[b], v[c]))
        lab, cx, cy = _flatten(v[a], v[b], v[c])
        val = _solve(0.0, 0.0, lab, 0.0, da, db, cx, cy)
        if val < best:
            return val
        # the wavefront may arrive through the neighbour across ab (obtuse c)
        for _, e in self.opposite.get((min(a, b), max(a, b)), ()):
            if e == c or not math.isfinite(d[e]):
                continue
            ex, ey = _unfold(lab, cx, cy, v[a], v[b], v[e])
            for (px, py, dp) in ((0.0, 0.0, da), (lab, 0.0, db)):
                val = _solve(px, py, ex, ey, dp, d[e], cx, cy)
                if val < best:
                    best = val
        return best

    def run(self, seeds, max_distance=math.inf):
        n = len(self.v)
        d = [math.inf] * n
        done = [False] * n
        heap = []
        for i, di in seeds.items():
            d[i] = di
            heapq.heappush(heap, (di, i))
        frozen = set(seeds)
        while heap:
            di, i = heapq.heappop(heap)
            if di > d[i]:
                continue
            done[i] = True
            if di > max_distance:
                break
            for k in self.vt[i]:
                tri = self.t[k]
                others = [x for x in tri if x != i]
                for j, o in ((others[0], others[1]), (others[1], others[0])):
                    if j in frozen:
                        continue
                    if done[o]:
                        cand = self.update(i, o, j, d)
                    elif done[j]:
                        continue
                    else:
                        cand = di + _dist(self.v[i], self.v[j])
                    # accepted vertices are reopened when a later triangle
                    # gives a shorter path (obtuse triangles break causality)
                    if cand < d[j] - 1e-12:
                        d[j] = cand
                        heapq.heappush(heap, (cand, j))
        out = np.array(d)
        out[~np.array(done)] = np.inf
        if math.isfinite(max_distance):
            out[out > max_distance] = np.inf
        return out


def fast_march(mesh, source, max_distance=np.inf):
    """Geodesic distance from a surface point by fast marching.

    The source is snapped to the closest point of the mesh; the corners of
    its triangle start with their exact in-plane distances. Vertices not
    reached (other components, or beyond ``max_distance``) get ``inf``.
    """
    if len(mesh.triangles) == 0:
        raise MeshError("mesh has no triangles")
    src = np.asarray(source, dtype=np.float64).reshape(3)
    tri, q, _ = closest_triangles(mesh, src[None, :])
    q = q[0]
    corners = mesh.triangles[tri[0]]
    seeds = {int(c): float(np.linalg.norm(mesh.vertices[c] - q)) for c in corners}
    marcher = mesh.__dict__.get("_marcher")
    if marcher is None:
        marcher = mesh.__dict__.setdefault("_marcher", _Marcher(mesh))
    dist = marcher.run(seeds, float(max_distance))
    return GeodesicField(mesh, dist, q, int(tri[0]))


def iso_segments(field, radius):
    """Iso-distance crossing segments, one per crossed triangle.

    Returns a list of ``((edge_key, point), (edge_key, point))`` tuples
    where ``edge_key`` is the sorted vertex pair the crossing lies on.
    """
    d = field.distance
    v = field.mesh.vertices
    t = field.mesh.triangles
    dt = d[t]
    ok = np.all(np.isfinite(dt), axis=1) & (dt.min(axis=1) < radius) & (dt.max(axis=1) >= radius)
    segs = []
    for k in np.flatnonzero(ok):
        tri = t[k]
        pts = []
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            da, db = d[a], d[b]
            if (da < radius) != (db < radius):
                s = (radius - da) / (db - da)
                pts.append(((min(a, b), max(a, b)), v[a] + s * (v[b] - v[a])))
        if len(pts) == 2:
            segs.append((pts[0], pts[1]))
    return segs


def _polylines(segs):
    """Chain segments sharing edge crossings into polylines."""
    by_key = {}
    for i, (p, q) in enumerate(segs):
        by_key.setdefault(p[0], []).append(i)
        by_key.setdefault(q[0], []).append(i)
    used = [False] * len(segs)
    lines = []
    for start in range(len(segs)):
        if used[start]:
            continue
        used[start] = True
        p, q = segs[start]
        keys = [p[0], q[0]]
        pts = [p[1], q[1]]
        closed = False
        for direction in (1, 0):
            while True:
                end = keys[-1] if direction else keys[0]
                nxt = [i for i in by_key[end] if not used[i]]
                if not nxt:
                    break
                i = nxt[0]
                used[i] = True
                a, b = segs[i]
                other = b if a[0] == end else a
                if other[0] == (keys[0] if direction else keys[-1]):
                    closed = True
                    break
                if direction:
                    keys.append(other[0])
                    pts.append(other[1])
                else:
                    keys.insert(0, other[0])
                    pts.insert(0, other[1])
            if closed:
                break
        lines.append((np.array(pts), closed))
    return lines


def _resample(pts, closed, step):
    """Points every ``step`` of arc length along an ordered polyline.

    A closed polyline repeats its first point at the end.
    """
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.r_[0.0, np.cumsum(seg)]
    total = s[-1]
    if total <= 0:
        return pts[:1]
    end = total - 0.5 * step if closed else total + 1e-9
    targets = np.arange(0.0, max(end, 0.0) + 1e-12, step)
    out = np.empty((len(targets), 3))
    for k in range(3):
        out[:, k] = np.interp(targets, s, pts[:, k])
    return out


def _start_on_ray(poly, rel):
    """Reorder a counter-clockwise loop to begin where it crosses angle 0."""
    y0, y1 = rel[:, 1], np.roll(rel[:, 1], -1)
    x0, x1 = rel[:, 0], np.roll(rel[:, 0], -1)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(y1 != y0, -y0 / (y1 - y0), 0.0)
    xc = x0 + s * (x1 - x0)
    hits = np.flatnonzero((y0 < 0) & (y1 >= 0) & (xc > 0))
    m = len(poly)
    if len(hits) == 0:
        ang = np.mod(np.arctan2(rel[:, 1], rel[:, 0]), 2 * np.pi)
        i = int(np.argmin(ang))
        order = np.r_[np.arange(i, m), np.arange(0, i), i]
        return poly[order]
    i = int(hits[np.argmin(xc[hits])])
    j = (i + 1) % m
    cross = poly[i] + s[i] * (poly[j] - poly[i])
    order = np.r_[np.arange(j, m), np.arange(0, j)] if j else np.arange(m)
    return np.vstack([cross, poly[order], cross])


def sample_iso_curves(field, radii, arc_step, frame=None, triangle=None):
    """Equidistant samples on the iso-distance curves of ``field``.

    Parameters
    ----------
    radii : increasing positive floats
    arc_step : float
        Arc length between consecutive samples.
    frame : (3, 3) array, optional
        Rows x, y, z of the angular frame about the source. Samples on each
        curve start at its point of smallest angle from +x, counter-
        clockwise about +z, and proceed counter-clockwise. Defaults to the
        world axes.
    triangle : (3, 3) array, optional
        Corners; when given only samples inside it are returned.

    Returns
    -------
    (m, 3) ndarray
        Samples in order of radius, then walk order.
    """
    radii = np.asarray(radii, dtype=np.float64)
    if np.any(radii <= 0) or np.any(np.diff(radii) <= 0):
        raise ValueError("radii must be positive and increasing")
    F = np.eye(3) if frame is None else np.asarray(frame, dtype=np.float64)
    dmax = field.max()
    out = []
    for r in radii:
        if r > dmax:
            continue
        for poly, closed in _polylines(iso_segments(field, r)):
            rel = (poly - field.source) @ F.T
            if closed:
                area = np.sum(rel[:, 0] * np.roll(rel[:, 1], -1) - np.roll(rel[:, 0], -1) * rel[:, 1])
                if area < 0:
                    poly, rel = poly[::-1], rel[::-1]
                pts = _resample(_start_on_ray(poly, rel), True, arc_step)
            else:
                ang = np.mod(np.arctan2(rel[:, 1], rel[:, 0]), 2 * np.pi)
                pts = _resample(poly if ang[0] <= ang[-1] else poly[::-1], False, arc_step)
            out.append(pts)
    pts = np.vstack(out) if out else np.zeros((0, 3))
    if triangle is not None and len(pts):
        tri = np.asarray(triangle, dtype=np.float64)
        inside = point_in_triangle(pts, *[np.broadcast_to(c, pts.shape) for c in tri])
        pts = pts[inside]
    return pts


@dataclass
class FillParams:
    kq_factor: float = 2.0
    radius_step: float = 1.0       # iso-curve spacing in multiples of rho
    arc_step: float = 1.0          # sample spacing in multiples of rho
    descriptor_radius: float = 5.0
    area_factor: float = 1.0       # t_a = area_factor * mean triangle area
    normalization: str = "pooled"  # or "global": statistics over whole faces
    workers: int = 1


def _tri_frame(a, b, c):
    ex = b - a
    ex = ex / np.linalg.norm(ex)
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    return np.vstack([ex, np.cross(n, ex), n])


def _angular_frame(a, b, c):
    g = (a + b + c) / 3.0
    n = np.cross(b - a, c - a)
    n = n / np.linalg.norm(n)
    x = a - g
    x = x - (x @ n) * n
    x = x / np.linalg.norm(x)
    return np.vstack([x, np.cross(n, x), n])


def _triangle_samples(mesh, corners, radii, arc_step):
    a, b, c = corners
    g = (a + b + c) / 3.0
    reach = max(np.linalg.norm(corners - g, axis=1).max(), radii[-1]) + 2 * arc_step
    field = fast_march(mesh, g, max_distance=reach)
    return sample_iso_curves(field, radii, arc_step, _angular_frame(a, b, c), corners)


@dataclass
class _Samples:
    points: np.ndarray
    desc: np.ndarray

    @property
    def keypoints(self):
        return np.arange(len(self.points))


def _match_samples(parent, child, k_q, scale=None):
    pairs, costs = match_keypoints(parent.desc, child.desc, k_q, scale=scale)
    return {int(i): (int(j), float(c)) for (i, j), c in zip(pairs, costs)}


def fill_smooth_regions(faces, meshes, t_a=None, params=None, tree=None):
    """Append level-set correspondences inside large shared triangles.

    Each triangle whose mean area over the faces exceeds ``t_a`` (default:
    the mean area of all triangles) is processed once: geodesic circles
    around its centroid are sampled on every face, described and matched
    parent to child along ``tree`` (a chain in face order when omitted).
    Sample positions are compared in a common chart, the affine image of
    each face's triangle on the mean triangle.

    Returns a new set with the accepted points appended and the shared
    triangulation rebuilt over all points.
    """
    params = FillParams() if params is None else params
    n = faces.n_faces
    if tree is None:
        from .graph import SpanningTree
        tree = SpanningTree(0, {i: i - 1 for i in range(1, n)}, [(i - 1, i) for i in range(1, n)])
    tris = faces.triangles
    if len(tris) == 0:
        tris = triangulate_mean(faces)
    P = faces.points
    A = np.stack([P[:, tris[:, 0]], P[:, tris[:, 1]], P[:, tris[:, 2]]], axis=2)  # (N, T, 3, 3)
    areas_f = 0.5 * np.linalg.norm(np.cross(A[:, :, 1] - A[:, :, 0], A[:, :, 2] - A[:, :, 0]), axis=-1)
    areas = areas_f.mean(axis=0)
    if t_a is None:
        t_a = params.area_factor * float(areas.mean())
    big = np.flatnonzero(areas > t_a)
    if len(big) == 0:
        return faces
    rho = float(np.mean([mesh_resolution(m) for m in meshes]))
    k_q = params.kq_factor * rho
    step = params.arc_step * rho
    radius = params.descriptor_radius * rho
    scale = feature_scale(meshes, radius) if params.normalization == "global" else None
    Am = A.mean(axis=0)

    def one(k):
        cm = Am[k]
        circ = np.linalg.norm(cm - cm.mean(axis=0), axis=1).max()
        count = int(np.floor(circ / (params.radius_step * rho)))
        if count < 1:
            return []
        radii = params.radius_step * rho * np.arange(1, count + 1)
        chart = triangle_frames(cm[0][None], cm[1][None], cm[2][None])[0]
        feats = []
        for f in range(n):
            corners = A[f, k]
            # radii follow the triangle's size on this face so that the
            # samples land at the same relative positions on every face
            grow = np.sqrt(areas_f[f, k] / areas[k])
            try:
                pts = _triangle_samples(meshes[f], corners, radii * grow, step * grow)
            except (MeshError, np.linalg.LinAlgError, ValueError, FloatingPointError):
                return []
            if len(pts) == 0:
                return []
            fr = triangle_frames(corners[0][None], corners[1][None], corners[2][None])[0]
            coef = np.linalg.solve(fr, (pts - corners[0]).T).T
            desc, ok = batch_descriptors(meshes[f], pts, radius, _tri_frame(*corners),
                                         positions=coef @ chart.T + cm[0])
            if ok.sum() == 0:
                return []
            feats.append(_Samples(pts[ok], desc[ok]))
        chains = chain_matches(tree, feats, lambda p, c: _match_samples(p, c, k_q, scale))
        return [(np.stack([feats[f].points[ids[f]] for f in range(n)]), cost) for ids, cost in chains]

    results = pmap(one, big.tolist(), params.workers)
    found = [r for res in results for r in res]
    if not found:
        return faces
    coords = np.stack([c for c, _ in found], axis=1)  # (N, m, 3)
    out = faces.append(coords, np.array([c for _, c in found]), kinds=LEVELSET)
    out.triangles = triangulate_mean(out)
    return out
