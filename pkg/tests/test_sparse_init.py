import itertools

import numpy as np
import pytest

from facecorr.mesh import Mesh, MeshError, grid_mesh, mesh_resolution
from facecorr.levelset import fast_march
from facecorr.sparse_init import (SparseCorrespondence, build_hull_model, convex_hull_2d_boundary, hull_model,
                                  register_halves, register_hull_model, sparse_correspondences)


def in_triangle(p, a, b, c):
    def cross(o, u, v):
        return (u[0] - o[0]) * (v[1] - o[1]) - (u[1] - o[1]) * (v[0] - o[0])

    d1, d2, d3 = cross(a, b, p), cross(b, c, p), cross(c, a, p)
    neg = d1 < 0 or d2 < 0 or d3 < 0
    pos = d1 > 0 or d2 > 0 or d3 > 0
    return not (neg and pos)


def brute_hull(pts):
    # a point is extreme iff it is inside no triangle of three other points
    keep = []
    for i, p in enumerate(pts):
        others = [j for j in range(len(pts)) if j != i]
        if not any(in_triangle(p, pts[a], pts[b], pts[c]) for a, b, c in itertools.combinations(others, 3)):
            keep.append(i)
    return set(keep)


def test_square_hull_corners_only():
    g = grid_mesh(7, 7)
    ids = convex_hull_2d_boundary(g, 1)
    assert set(ids) == {0, 6, 42, 48}


def test_hull_matches_bruteforce():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1, 1, size=(40, 3))
    got = set(convex_hull_2d_boundary(Mesh(pts), 1))
    assert got == brute_hull(pts[:, :2])


def test_hull_matches_fast_bruteforce_200():
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1, 1, size=(200, 3))
    got = set(convex_hull_2d_boundary(Mesh(pts), 1))
    # a point is on the hull iff some direction makes it the unique maximiser
    ang = np.linspace(0, 2 * np.pi, 20000, endpoint=False)
    dirs = np.column_stack([np.cos(ang), np.sin(ang)])
    expect = set(np.unique(np.argmax(pts[:, :2] @ dirs.T, axis=0)))
    assert got == expect


def test_circle_all_returned():
    th = np.linspace(0, 2 * np.pi, 30, endpoint=False)
    pts = np.column_stack([np.cos(th), np.sin(th), np.zeros(30)])
    assert len(convex_hull_2d_boundary(Mesh(pts), 1)) == 30


def test_collinear_hull_rejected():
    pts = np.column_stack([np.arange(10.0), np.arange(10.0), np.zeros(10)])
    with pytest.raises(MeshError, match="degenerate hull"):
        convex_hull_2d_boundary(Mesh(pts), 1)


def test_hull_model_counts_and_points():
    assert len(hull_model(50, 70).points) == 72
    m = hull_model(1, 1, np.pi / 36)
    assert np.allclose(m.points[0], [1, 0, 0])
    assert np.allclose(np.linalg.norm(m.points, axis=1), 1)
    e = hull_model(2, 1, np.pi / 2)
    assert np.allclose(e.points, [[2, 0, 0], [0, 1, 0], [-2, 0, 0], [0, -1, 0]], atol=1e-12)


def ellipse_face(a=40.0, b=55.0, n_ring=72, n_in=12):
    th = np.pi / 36 * np.arange(n_ring)
    pts = [np.zeros(3)]
    for s in np.linspace(0.1, 1.0, n_in):
        pts += list(np.column_stack([s * a * np.cos(th), s * b * np.sin(th), np.zeros(n_ring)]))
    from scipy.spatial import Delaunay
    pts = np.array(pts)
    return Mesh(pts, Delaunay(pts[:, :2]).simplices)


def test_planar_ellipse_maps_exactly():
    face = ellipse_face()
    model = build_hull_model(face, np.zeros(3))
    hull = convex_hull_2d_boundary(face, 1)
    ids = register_hull_model(model, face, hull, np.zeros(3))
    assert np.all(ids >= 0)
    assert np.allclose(face.vertices[ids], model.points, atol=1e-9)


def test_coarse_mesh_dedup():
    th = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    ring = np.column_stack([30 * np.cos(th), 40 * np.sin(th), np.zeros(12)])
    pts = np.vstack([[0, 0, 0], ring])
    from scipy.spatial import Delaunay
    face = Mesh(pts, Delaunay(pts[:, :2]).simplices)
    ids = register_hull_model(build_hull_model(face, np.zeros(3)), face, convex_hull_2d_boundary(face, 1), np.zeros(3))
    kept = ids[ids >= 0]
    assert len(kept) < 72
    assert len(np.unique(kept)) == len(kept)


def test_split_never_hurts():
    rng = np.random.default_rng(2)
    model = hull_model(40, 55)
    pts = model.points + rng.normal(scale=2.0, size=model.points.shape)
    pts[:, 2] += 0.01 * pts[:, 1] ** 2  # bend the outline out of plane
    _, res = register_halves(model, pts)
    assert res["upper"] + res["lower"] <= res["whole"] + 1e-9


def test_insufficient_half():
    model = hull_model(40, 55)
    pts = np.array([[40, 1, 0], [0, 55, 0], [-40, 1, 0], [0, -55, 0.0]])
    with pytest.raises(MeshError, match="insufficient hull support"):
        register_halves(model, pts)


def test_sparse_consistent_and_duplicate_free(family):
    faces = family.members
    tips = [f.vertices[family.nose_tip_index] for f in faces]
    sp = sparse_correspondences(faces, tips)
    assert sp.vertex_ids.shape == (len(faces), 72)
    for row in sp.vertex_ids:
        kept = row[row >= 0]
        assert len(np.unique(kept)) == len(kept)
    # an index dropped anywhere is dropped everywhere
    assert np.all((sp.vertex_ids >= 0).all(0) | (sp.vertex_ids < 0).all(0))
    back = SparseCorrespondence.from_csv(sp.to_csv(), 72)
    assert np.array_equal(back.vertex_ids, sp.vertex_ids)


def test_sparse_near_ground_truth(family):
    faces = family.members
    tips = [f.vertices[family.nose_tip_index] for f in faces]
    sp = sparse_correspondences(faces, tips)
    rho = mesh_resolution(family.template)
    ids = sp.vertex_ids[:, sp.indices]
    # ground truth is index identity: the angle's vertex on face 0 is the
    # same template vertex on face 1
    field = fast_march(faces[1], faces[1].vertices[ids[0, 0]])
    hits = []
    for k in range(ids.shape[1]):
        d = fast_march(faces[1], faces[1].vertices[ids[0, k]], max_distance=20 * rho).distance[ids[1, k]]
        hits.append(d <= 3 * rho)
    assert field.distance[ids[0, 0]] == 0
    assert np.mean(hits) >= 0.9


def test_sparse_workers_agree(family):
    faces = family.members[:3]
    tips = [f.vertices[family.nose_tip_index] for f in faces]
    a = sparse_correspondences(faces, tips, workers=1)
    b = sparse_correspondences(faces, tips, workers=3)
    assert np.array_equal(a.vertex_ids, b.vertex_ids)
