"""Planar thin-plate splines: interpolation, warping and bending energy."""

import numpy as np


class DegenerateLandmarks(ValueError):
    pass


def kernel(r2):
    """TPS radial basis ``U = r^2 log r^2`` evaluated on squared distances."""
    r2 = np.asarray(r2, dtype=np.float64)
    out = np.zeros_like(r2)
    pos = r2 > 0
    out[pos] = r2[pos] * np.log(r2[pos])
    return out


def _sqdist(a, b):
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


class ThinPlateSpline:
    """Interpolating TPS from 2-D control points to k-D values.

    Parameters
    ----------
    source : (n, 2) array_like
        Control point locations.
    target : (n, k) array_like
        Values at the control points (``k = 2`` for a planar warp).
    """

    def __init__(self, source, target):
        src = np.asarray(source, dtype=np.float64).reshape(-1, 2)
        tgt = np.asarray(target, dtype=np.float64)
        if tgt.ndim == 1:
            tgt = tgt[:, None]
        n = len(src)
        if len(tgt) != n:
            raise ValueError("source and target counts differ")
        if n < 3:
            raise DegenerateLandmarks("degenerate landmark configuration")
        P = np.column_stack([np.ones(n), src])
        if np.linalg.matrix_rank(P - np.r_[0, src.mean(0)]) < 3:
            raise DegenerateLandmarks("degenerate landmark configuration")
        K = kernel(_sqdist(src, src))
        L = np.zeros((n + 3, n + 3))
        L[:n, :n] = K
        L[:n, n:] = P
        L[n:, :n] = P.T
        rhs = np.zeros((n + 3, tgt.shape[1]))
        rhs[:n] = tgt
        try:
            sol = np.linalg.solve(L, rhs)
        except np.linalg.LinAlgError as exc:
            raise DegenerateLandmarks("degenerate landmark configuration") from exc
        if not np.all(np.isfinite(sol)) or np.linalg.cond(L) > 1e14:
            raise DegenerateLandmarks("degenerate landmark configuration")
        self.source = src
        self.weights = sol[:n]
        self.affine = sol[n:]
        self._K = K

    def __call__(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        U = kernel(_sqdist(pts, self.source))
        return U @ self.weights + self.affine[0] + pts @ self.affine[1:]

    def bending_energy(self):
        """Quadratic form ``sum_k w_k^T K w_k`` over output coordinates."""
        w = self.weights
        return float(max(np.einsum("ik,ij,jk->", w, self._K, w), 0.0))


def tps_bending_energy(source_points, target_points):
    """Bending energy of the TPS interpolating ``source -> target`` (2-D).

    Zero exactly when the target is an affine image of the source.
    """
    src = np.asarray(source_points, dtype=np.float64).reshape(-1, 2)
    tgt = np.asarray(target_points, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(tgt) or len(src) < 4:
        raise ValueError("need equal counts of at least 4 points")
    return ThinPlateSpline(src, tgt).bending_energy()
