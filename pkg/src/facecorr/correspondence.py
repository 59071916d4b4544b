"""The corresponded face set shared by the pipeline stages."""

from dataclasses import dataclass, field

import numpy as np

SPARSE, KEYPOINT, LEVELSET = 0, 1, 2


@dataclass
class CorrespondedFaceSet:
    """``P`` points corresponded across ``N`` faces.

    Attributes
    ----------
    points : (N, P, 3) ndarray
        Point ``p`` of face ``j`` is ``points[j, p]``.
    costs : (P,) ndarray
        Match cost at which each point was accepted.
    triangles : (T, 3) ndarray
        Connectivity shared by every face.
    vertex_ids : (N, P) ndarray
        Source-mesh vertex of each point, or -1 for points inside triangles.
    kinds : (P,) ndarray
        How the point was found: 0 hull seed, 1 keypoint, 2 level-set fill.
    """

    points: np.ndarray
    costs: np.ndarray
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    vertex_ids: np.ndarray = None
    kinds: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(self.points.shape[0], -1, 3)
        n, p = self.points.shape[:2]
        self.costs = np.asarray(self.costs, dtype=np.float64).reshape(p)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.vertex_ids is None:
            self.vertex_ids = -np.ones((n, p), dtype=np.int64)
        self.vertex_ids = np.asarray(self.vertex_ids, dtype=np.int64).reshape(n, p)
        if self.kinds is None:
            self.kinds = np.full(p, KEYPOINT, dtype=np.int8)
        self.kinds = np.asarray(self.kinds, dtype=np.int8).reshape(p)

    @property
    def n_faces(self):
        return self.points.shape[0]

    @property
    def n_points(self):
        return self.points.shape[1]

    def mean_shape(self):
        return self.points.mean(axis=0)

    def append(self, points, costs, vertex_ids=None, kinds=LEVELSET):
        """New set with extra points appended (existing order untouched)."""
        points = np.asarray(points, dtype=np.float64).reshape(self.n_faces, -1, 3)
        m = points.shape[1]
        if vertex_ids is None:
            vertex_ids = -np.ones((self.n_faces, m), dtype=np.int64)
        kinds = np.broadcast_to(np.asarray(kinds, dtype=np.int8), (m,))
        return CorrespondedFaceSet(
            points=np.concatenate([self.points, points], axis=1),
            costs=np.concatenate([self.costs, np.asarray(costs, float).reshape(m)]),
            triangles=self.triangles,
            vertex_ids=np.concatenate([self.vertex_ids, vertex_ids], axis=1),
            kinds=np.concatenate([self.kinds, kinds]),
        )

    def subset(self, faces):
        faces = list(faces)
        return CorrespondedFaceSet(self.points[faces], self.costs, self.triangles,
                                   self.vertex_ids[faces], self.kinds)
