"""Synthetic face families with exact ground truth, and accuracy evaluation."""

from dataclasses import dataclass, field

import numpy as np

from .correspondence import CorrespondedFaceSet
from .geometry import closest_triangles, rotation_about, triangle_frames
from .mesh import Mesh
from .tps import ThinPlateSpline


def _g(x, y, cx, cy, sx, sy):
    return np.exp(-((x - cx) ** 2) / (2 * sx * sx) - ((y - cy) ** 2) / (2 * sy * sy))


def face_height(x, y):
    """Face-like height field in mm on an ellipsoidal base."""
    base = 55.0 * np.sqrt(np.clip(1 - (x / 100.0) ** 2 - (y / 125.0) ** 2, 0, None))
    z = base
    z = z + 22.0 * _g(x, y, 0, -5, 7, 9)                      # nose tip
    z = z + 10.0 * _g(x, y, 0, 18, 5, 12)                     # nasal bridge
    z = z + 3.0 * _g(x, y, 0, -12, 14, 5)                     # alae
    for s in (-1, 1):
        z = z - 9.0 * _g(x, y, s * 32, 28, 11, 8)             # eye sockets
        z = z + 4.0 * _g(x, y, s * 40, 5, 12, 12)             # cheekbones
        z = z + 2.5 * _g(x, y, s * 22, 48, 14, 5)             # brow
    z = z + 5.0 * _g(x, y, 0, -36, 18, 5)                     # lips
    z = z - 3.0 * _g(x, y, 0, -38, 20, 3)                     # mouth line
    z = z + 6.0 * _g(x, y, 0, -68, 15, 9)                     # chin
    return z


LANDMARK_XY = {
    "prn": (0.0, -5.0),        # nose tip
    "n": (0.0, 30.0),          # nasion
    "en_r": (-22.0, 28.0),
    "en_l": (22.0, 28.0),
    "ex_r": (-44.0, 28.0),
    "ex_l": (44.0, 28.0),
    "ch_r": (-22.0, -38.0),
    "ch_l": (22.0, -38.0),
    "sn": (0.0, -17.0),
    "pg": (0.0, -68.0),
}


def make_template(half_width=70.0, half_height=90.0, spacing=2.6):
    """Elliptical face template on a regular grid.

    Returns
    -------
    mesh : Mesh
    landmarks : dict
        Landmark name -> vertex index; ``prn`` is the highest vertex.
    """
    nx = int(np.floor(half_width / spacing))
    ny = int(np.floor(half_height / spacing))
    xs = spacing * np.arange(-nx, nx + 1)
    ys = spacing * np.arange(-ny, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    inside = (X / half_width) ** 2 + (Y / half_height) ** 2 <= 1.0
    col = -np.ones(X.shape, dtype=np.int64)
    col[inside] = np.arange(inside.sum())
    verts = np.column_stack([X[inside], Y[inside], face_height(X[inside], Y[inside])])
    a, b, c, d = col[:-1, :-1], col[:-1, 1:], col[1:, 1:], col[1:, :-1]
    ok = (a >= 0) & (b >= 0) & (c >= 0) & (d >= 0)
    a, b, c, d = a[ok], b[ok], c[ok], d[ok]
    tris = np.concatenate([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    # rim nodes without a full grid cell belong to no triangle
    used = np.unique(tris)
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts, tris = verts[used], remap[tris]
    mesh = Mesh(verts, tris)
    landmarks = {}
    for name, (x, y) in LANDMARK_XY.items():
        landmarks[name] = int(np.argmin((verts[:, 0] - x) ** 2 + (verts[:, 1] - y) ** 2))
    landmarks["prn"] = int(np.argmax(verts[:, 2]))
    return mesh, landmarks


@dataclass
class SyntheticFamily:
    """Warped copies of a template sharing its vertex indexing exactly."""

    template: Mesh
    landmarks: dict
    members: list
    warps: list = field(default_factory=list)

    @property
    def nose_tip_index(self):
        return self.landmarks["prn"]

    def with_members(self, members):
        """Same family with members replaced by re-posed copies (same topology)."""
        return SyntheticFamily(self.template, self.landmarks, list(members), self.warps)


def control_grid(template, n=5):
    v = template.vertices
    lo, hi = v[:, :2].min(0), v[:, :2].max(0)
    gx = np.linspace(lo[0], hi[0], n)
    gy = np.linspace(lo[1], hi[1], n)
    GX, GY = np.meshgrid(gx, gy)
    return np.column_stack([GX.ravel(), GY.ravel()])


def apply_warp(template, warp):
    """Template vertices pushed through a stored warp."""
    v = template.vertices
    tps = ThinPlateSpline(warp["controls"], warp["displacements"])
    warped = v + tps(v[:, :2])
    return warped @ np.asarray(warp["rotation"]).T + np.asarray(warp["translation"])


def _flipped(template, verts):
    t = template.triangles
    e1 = verts[t[:, 1], :2] - verts[t[:, 0], :2]
    e2 = verts[t[:, 2], :2] - verts[t[:, 0], :2]
    return np.any(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0] <= 0)


def random_warp(rng, controls, magnitude, max_angle_deg=5.0, max_shift=5.0):
    disp = rng.normal(size=(len(controls), 3))
    rms = np.sqrt(np.mean(np.sum(disp ** 2, axis=1)))
    disp *= magnitude / rms if rms > 0 else 0.0
    axis = rng.normal(size=3)
    angle = np.deg2rad(rng.uniform(0, max_angle_deg))
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return {
        "controls": controls,
        "displacements": disp,
        "rotation": rotation_about(axis, angle),
        "translation": direction * rng.uniform(0, max_shift),
    }


def generate_family(template, n, warp_magnitude=4.0, seed=0, landmarks=None, rigid=True):
    """``n`` members made by random TPS warps plus small rigid motions.

    Displacements on a fixed 5x5 control grid have RMS ``warp_magnitude``;
    rotations are at most 5 degrees and shifts at most 5 mm. A warp that
    folds a triangle is redrawn at 0.8x the magnitude.
    """
    if landmarks is None:
        landmarks = {"prn": int(np.argmax(template.vertices[:, 2]))}
    rng = np.random.default_rng(seed)
    controls = control_grid(template)
    members, warps = [], []
    for _ in range(n):
        mag = float(warp_magnitude)
        while True:
            w = random_warp(rng, controls, mag, 5.0 if rigid else 0.0, 5.0 if rigid else 0.0)
            verts = apply_warp(template, w)
            unrotated = (verts - w["translation"]) @ w["rotation"]
            if not _flipped(template, unrotated):
                break
            mag *= 0.8
        w["magnitude"] = mag
        members.append(Mesh(verts, template.triangles))
        warps.append(w)
    return SyntheticFamily(template, dict(landmarks), members, warps)


def to_template_chart(member, template, points):
    """Map points near a member surface into the template's frame.

    Each point uses the affine map of the member triangle closest to it
    (edge vectors and unit normal mapped onto the template triangle's),
    so rigid copies map exactly, on and off the surface.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tri, _, _ = closest_triangles(member, pts)
    t = member.triangles[tri]
    mv, tv = member.vertices, template.vertices
    fm = triangle_frames(mv[t[:, 0]], mv[t[:, 1]], mv[t[:, 2]])
    ft = triangle_frames(tv[t[:, 0]], tv[t[:, 1]], tv[t[:, 2]])
    coef = np.linalg.solve(fm, (pts - mv[t[:, 0]])[..., None])
    return tv[t[:, 0]] + (ft @ coef)[..., 0]


@dataclass
class EvalReport:
    errors: np.ndarray          # one entry per (point, face pair)
    point_errors: np.ndarray    # mean over pairs, per point
    coverage: float
    thresholds: np.ndarray = field(default_factory=lambda: np.arange(1, 21, dtype=float))

    @property
    def mean(self):
        return float(self.errors.mean()) if self.errors.size else 0.0

    @property
    def sd(self):
        return float(self.errors.std()) if self.errors.size else 0.0

    @property
    def max(self):
        return float(self.errors.max()) if self.errors.size else 0.0

    def cumulative_at(self, d):
        if not self.errors.size:
            return 100.0
        return float(100.0 * np.mean(self.errors <= d))

    @property
    def cumulative(self):
        return np.array([self.cumulative_at(d) for d in self.thresholds])

    def summary(self):
        lines = [
            f"points: {len(self.point_errors)}",
            f"coverage: {100 * self.coverage:.2f}%",
            f"mean error: {self.mean:.4f} mm",
            f"sd error: {self.sd:.4f} mm",
            f"max error: {self.max:.4f} mm",
            f"within 10 mm: {self.cumulative_at(10.0):.2f}%",
        ]
        return "\n".join(lines) + "\n"

    def to_csv(self):
        rows = ["point,mean_error_mm"]
        rows += [f"{i},{e:.9g}" for i, e in enumerate(self.point_errors)]
        return "\n".join(rows) + "\n"


def evaluate_correspondence(family, result, meshes=None):
    """Ground-truth localisation error of a corresponded set.

    Every point is carried into the template chart from each face; the error
    for a face pair is the distance between the two chart positions.
    ``meshes`` are the surfaces the result lives on (defaults to the family
    members); they must share the template's connectivity.
    """
    meshes = family.members if meshes is None else meshes
    n = result.n_faces
    charts = np.stack([to_template_chart(meshes[f], family.template, result.points[f]) for f in range(n)])
    errs = []
    for i in range(n):
        for j in range(i + 1, n):
            errs.append(np.linalg.norm(charts[i] - charts[j], axis=1))
    errs = np.array(errs)  # (pairs, P)
    point_errors = errs.mean(axis=0) if len(errs) else np.zeros(result.n_points)
    return EvalReport(
        errors=errs.T.ravel(),
        point_errors=point_errors,
        coverage=result.n_points / len(family.template.vertices),
    )


def ground_truth_set(family, indices=None, meshes=None):
    """Corresponded set built directly from the known vertex correspondence."""
    meshes = family.members if meshes is None else meshes
    if indices is None:
        indices = np.arange(len(family.template.vertices))
    indices = np.asarray(indices)
    pts = np.stack([m.vertices[indices] for m in meshes])
    return CorrespondedFaceSet(
        points=pts,
        costs=np.zeros(len(indices)),
        triangles=family.template.triangles if len(indices) == len(family.template.vertices) else np.zeros((0, 3), dtype=np.int64),
        vertex_ids=np.tile(indices, (len(meshes), 1)),
    )


def export_morph(model, source_alpha, target_alpha, steps):
    """Meshes interpolated linearly in shape-parameter space."""
    if steps < 2:
        raise ValueError("steps must be at least 2")
    a0 = np.asarray(source_alpha, dtype=np.float64)
    a1 = np.asarray(target_alpha, dtype=np.float64)
    frames = []
    for s in np.linspace(0.0, 1.0, steps):
        alpha = (1 - s) * a0 + s * a1
        frames.append(Mesh(model.instance(alpha), model.triangles))
    return frames
