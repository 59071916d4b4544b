import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facecorr.correspondence import CorrespondedFaceSet, SPARSE
from facecorr.k3dm import (FitError, FitResult, augment, build_model, fit, load_model, recognition_distance,
                           save_model, transfer_landmarks, unvectorize, vectorize)
from facecorr.mesh import Mesh
from facecorr.synth import generate_family, ground_truth_set, make_template


@pytest.fixture(scope="module")
def coarse():
    t, marks = make_template(spacing=5.0)
    fam = generate_family(t, 12, 4.0, seed=5, landmarks=marks, rigid=False)
    return fam


@pytest.fixture(scope="module")
def model(coarse):
    return build_model(ground_truth_set(coarse), energy=1.0)


def test_vectorize_layout():
    p = np.arange(12.0).reshape(4, 3)
    v = vectorize(p)
    np.testing.assert_array_equal(v[:4], p[:, 0])
    np.testing.assert_array_equal(v[4:8], p[:, 1])
    np.testing.assert_array_equal(unvectorize(v), p)


def test_identical_faces_zero_model():
    p = np.random.default_rng(0).normal(size=(30, 3))
    m = build_model(CorrespondedFaceSet(np.stack([p, p, p]), np.zeros(30)))
    np.testing.assert_allclose(m.mean_shape(), p, atol=1e-12)
    assert m.n_components == 0 and m.spectrum.size == 0


def test_two_faces_rank_one():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 30, 3))
    m = build_model(CorrespondedFaceSet(np.stack([a, b]), np.zeros(30)), energy=1.0)
    assert m.n_components == 1
    d = vectorize(a - b)
    assert abs(m.basis[:, 0] @ d) / np.linalg.norm(d) == pytest.approx(1.0, abs=1e-12)
    assert m.spectrum[0] == pytest.approx(d @ d / 2)


def test_insufficient_faces():
    with pytest.raises(ValueError, match="insufficient"):
        build_model(CorrespondedFaceSet(np.zeros((1, 5, 3)), np.zeros(5)))


def test_basis_invariants_and_truncation_bound(coarse):
    gt = ground_truth_set(coarse)
    m = build_model(gt)
    assert np.allclose(m.basis.T @ m.basis, np.eye(m.n_components), atol=1e-8)
    assert np.all(np.diff(m.spectrum) <= 0)
    assert m.retained_energy >= 0.98
    # full-rank oracle: the discarded variance bounds the mean squared
    # reconstruction error of the training set
    X = np.stack([vectorize(p) for p in gt.points], axis=1)
    Xc = X - X.mean(axis=1, keepdims=True)
    s = np.linalg.svd(Xc, compute_uv=False)
    discarded = np.sum(s[m.n_components:] ** 2)
    err = 0.0
    for p in gt.points:
        r = vectorize(p) - (m.mean + m.basis @ m.project(p))
        err += r @ r
    assert err == pytest.approx(discarded, rel=1e-8)
    P = m.n_points
    for p in gt.points:
        r = vectorize(p) - (m.mean + m.basis @ m.project(p))
        assert np.sqrt(r @ r / P) <= np.sqrt(discarded / P) + 1e-9


def test_fit_training_face_recovers_projection(coarse, model):
    gt = ground_truth_set(coarse)
    for k in (0, 7):
        res = fit(model, coarse.members[k])
        proj = model.project(gt.points[k])
        assert np.linalg.norm(res.alpha - proj) <= 1e-3 * np.linalg.norm(proj)
        assert res.residual < 1e-4


def test_fit_mean_is_fixed_point(model):
    res = fit(model, model.mesh())
    assert res.iterations == 1
    np.testing.assert_allclose(res.alpha, 0, atol=1e-6)


def test_huge_regulariser_pins_alpha(coarse, model):
    res = fit(model, coarse.members[2], lam=1e9, max_iters=1)
    np.testing.assert_allclose(res.alpha, 0, atol=1e-6)


def test_fit_translated_query(coarse, model):
    shift = np.array([2.0, -1.0, 3.0])
    res = fit(model, Mesh(coarse.members[3].vertices + shift, coarse.members[3].triangles))
    base = fit(model, coarse.members[3])
    np.testing.assert_allclose(res.translation, -shift, atol=1e-3)
    np.testing.assert_allclose(res.alpha, base.alpha, rtol=1e-3, atol=1e-3)


def test_outliers_barely_move_alpha(coarse, model):
    base = fit(model, coarse.members[4])
    q = coarse.members[4].vertices.copy()
    rng = np.random.default_rng(0)
    idx = rng.choice(len(q), len(q) // 10, replace=False)
    q[idx] += rng.normal(size=(len(idx), 3)) * 15
    res = fit(model, Mesh(q, coarse.members[4].triangles))
    assert np.linalg.norm(res.alpha - base.alpha) < 0.01 * np.linalg.norm(base.alpha)
    assert not res.inlier_mask.all()


def test_residual_trace_mostly_non_increasing(coarse, model):
    rng = np.random.default_rng(9)
    trials, good = 20, 0
    for k in range(trials):
        alpha = rng.normal(size=model.n_components) * np.sqrt(model.spectrum)
        q = model.instance(alpha) + rng.uniform(-3, 3, size=3)
        tr = np.array(fit(model, Mesh(q, model.triangles)).residual_trace)
        good += bool(np.all(np.diff(tr[1:]) <= 0))
    assert good >= 0.95 * trials


def test_noisy_query_plateau_jitter_is_small(coarse, model):
    # with noise the inlier set keeps changing near convergence; the
    # residual may tick up but only marginally
    rng = np.random.default_rng(3)
    face = coarse.members[2]
    q = face.vertices + rng.normal(scale=0.3, size=face.vertices.shape)
    tr = np.array(fit(model, Mesh(q, face.triangles), max_iters=40).residual_trace)
    up = np.diff(tr[1:])
    assert np.all(up <= 0.02 * tr[2:])
    assert tr[-1] < 0.2 * tr[0]


def test_fit_failures():
    m = build_model(CorrespondedFaceSet(np.random.default_rng(0).normal(size=(3, 20, 3)), np.zeros(20)))
    with pytest.raises(FitError):
        fit(m, np.zeros((0, 3)))


def test_region_mask(coarse, model):
    mask = np.flatnonzero(model.mean_shape()[:, 1] > 0)
    res = fit(model, coarse.members[1], mask=mask)
    assert not res.inlier_mask[model.mean_shape()[:, 1] <= 0].any()


def test_transfer_landmarks(coarse, model):
    res = fit(model, model.mesh())
    out = transfer_landmarks(model, {"prn": coarse.nose_tip_index, "a": 0}, res)
    np.testing.assert_allclose(out["prn"], model.mean_shape()[coarse.nose_tip_index], atol=1e-9)
    exact = FitResult(np.zeros(model.n_components), model.mean_shape(), [0.0],
                      np.ones(model.n_points, bool), np.eye(3), np.zeros(3), model.instance(np.zeros(model.n_components)))
    out = transfer_landmarks(model, [("prn", coarse.nose_tip_index)], exact)
    np.testing.assert_array_equal(out["prn"], model.mean_shape()[coarse.nose_tip_index])
    # ground-truth landmark of a training face
    res = fit(model, coarse.members[6])
    lm = transfer_landmarks(model, [("prn", coarse.nose_tip_index)], res)
    truth = coarse.members[6].vertices[coarse.nose_tip_index] @ res.rotation.T + res.translation
    assert np.linalg.norm(lm["prn"] - truth) < 0.05
    again = transfer_landmarks(model, [("prn", coarse.nose_tip_index)], fit(model, coarse.members[6]))
    np.testing.assert_array_equal(lm["prn"], again["prn"])
    with pytest.raises(IndexError):
        transfer_landmarks(model, [("x", model.n_points)], res)


def test_recognition_distance_cases():
    assert recognition_distance([1, 2, 3], [1, 2, 3]) == pytest.approx(0.0, abs=1e-7)
    assert recognition_distance([1, 0], [0, 5]) == pytest.approx(np.pi / 2)
    assert recognition_distance([1, 0], [-2, 0]) == pytest.approx(np.pi)
    with pytest.raises(ValueError):
        recognition_distance([0, 0], [1, 0])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=4, max_size=4), st.floats(0.1, 10))
def test_recognition_distance_scale_invariant(a, s):
    a = np.array(a)
    if np.linalg.norm(a) < 1e-3:
        return
    b = np.roll(a, 1) + 0.5
    if np.linalg.norm(b) < 1e-3:
        return
    assert recognition_distance(a, b) == pytest.approx(recognition_distance(s * a, b), abs=1e-9)


def test_augment_empty_is_identity(coarse, model):
    assert augment(model, ground_truth_set(coarse), []) is model


def test_augment_with_training_copy_shifts_mean(coarse):
    gt = ground_truth_set(coarse)
    m = build_model(gt, energy=1.0)
    new = coarse.members[0]
    out, rep = augment(m, gt, [new], energy=1.0, return_report=True)
    assert rep.installed == [0]
    assert out.n_faces == m.n_faces + 1
    offset = vectorize(gt.points[0]) - m.mean
    np.testing.assert_allclose(out.mean - m.mean, offset / (m.n_faces + 1), atol=1e-4)


def test_save_load_round_trip(tmp_path, model):
    model.index_sets["eyes"] = np.array([1, 2, 3])
    path = tmp_path / "m.k3dm"
    save_model(model, path)
    back = load_model(path)
    np.testing.assert_array_equal(back.mean, model.mean)
    np.testing.assert_array_equal(back.basis, model.basis)
    np.testing.assert_array_equal(back.spectrum, model.spectrum)
    np.testing.assert_array_equal(back.triangles, model.triangles)
    assert back.n_faces == model.n_faces and back.total_energy == model.total_energy
    assert set(back.index_sets) == set(model.index_sets)
    np.testing.assert_array_equal(back.index_sets["eyes"], [1, 2, 3])
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short").write_bytes(raw[:40])
    (tmp_path / "long").write_bytes(raw + b"\0")
    for name in ("bad", "short", "long"):
        with pytest.raises(ValueError):
            load_model(tmp_path / name)


def test_hull_index_set_recorded():
    pts = np.random.default_rng(3).normal(size=(2, 10, 3))
    kinds = np.array([SPARSE] * 4 + [1] * 6)
    m = build_model(CorrespondedFaceSet(pts, np.zeros(10), kinds=kinds))
    np.testing.assert_array_equal(m.index_sets["hull"], [0, 1, 2, 3])


def test_fit_small_rigid_pretransform_invariant(coarse, model):
    from scipy.spatial.transform import Rotation
    face = coarse.members[3]
    base = fit(model, face)
    c = face.vertices.mean(axis=0)
    for deg in (2.0, 4.0):
        R = Rotation.from_euler("xyz", [deg, deg / 2, -deg], degrees=True).as_matrix()
        q = (face.vertices - c) @ R.T + c + [1.0, 2.0, -1.0]
        res = fit(model, Mesh(q, face.triangles), max_iters=200)
        assert np.linalg.norm(res.alpha - base.alpha) <= 1e-3 * np.linalg.norm(base.alpha)


def test_single_step_solves_ridge_normal_equations(coarse, model):
    lam = 0.8
    res = fit(model, coarse.members[5], lam=lam, max_iters=1)
    idx = np.flatnonzero(res.inlier_mask)
    P = model.n_points
    rows = np.concatenate([idx, idx + P, idx + 2 * P])
    Us = model.basis[rows]
    q = vectorize(res.registered_query)[rows]
    lhs = (Us.T @ Us + lam * np.eye(model.n_components)) @ res.alpha
    rhs = Us.T @ (q - model.mean[rows])
    assert np.linalg.norm(lhs - rhs) <= 1e-8 * max(1.0, np.linalg.norm(rhs))


def test_recognition_features_blocks(coarse, model):
    from facecorr.k3dm import recognition_features
    face = coarse.members[1]
    upper = np.flatnonzero(model.mean_shape()[:, 1] > 0)
    f = recognition_features(model, face, regions=[upper])
    n = model.n_components
    assert f.shape == (2 * n,)
    np.testing.assert_allclose(np.linalg.norm(f[:n]), 1.0)
    np.testing.assert_allclose(np.linalg.norm(f[n:]), 1.0)
    np.testing.assert_allclose(f[:n], fit(model, face).alpha / np.linalg.norm(fit(model, face).alpha))
    g = recognition_features(model, face, regions=[upper], region_weight=0.5)
    np.testing.assert_allclose(g[n:], 0.5 * f[n:])
    assert recognition_distance(f, f) == pytest.approx(0.0, abs=1e-7)
