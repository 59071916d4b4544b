"""End-to-end dense correspondence over a list of faces."""

import logging
from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .dense import run_dense_correspondence
from .graph import build_mst, weight_matrix
from .levelset import fill_smooth_regions
from .preprocess import detect_nose_tip
from .sparse_init import sparse_correspondences

logger = logging.getLogger(__name__)


@dataclass
class PipelineResult:
    correspondences: object   # CorrespondedFaceSet
    sparse: object            # SparseCorrespondence
    tree: object              # SpanningTree
    weights: np.ndarray
    dense_iterations: list


def correspond(faces, cfg=None, nose_tips=None):
    """Sparse hull init, face tree, keypoint loop and level-set fill.

    Parameters
    ----------
    faces : list of Mesh
        Pose-normalised, cropped faces (at least two).
    cfg : PipelineConfig, optional
    nose_tips : list of (3,) array_like, optional
        Manual nose tips; detected on each face when omitted.

    Returns
    -------
    PipelineResult
    """
    cfg = PipelineConfig() if cfg is None else cfg
    if len(faces) < 2:
        raise ValueError("at least two faces are required")
    if nose_tips is None:
        nose_tips = [detect_nose_tip(f) for f in faces]
    sparse = sparse_correspondences(faces, nose_tips, cfg.delta, cfg.subsample_step, cfg.workers)
    keep = sparse.indices
    landmarks = [f.vertices[sparse.vertex_ids[i, keep]] for i, f in enumerate(faces)]
    graph = weight_matrix(landmarks, cfg.workers)
    tree = build_mst(graph)
    logger.info("tree rooted at face %d, %d sparse points", tree.root, len(keep))
    dense = run_dense_correspondence(faces, tree, sparse, cfg.dense_params(), return_details=True)
    out = dense.correspondences
    if cfg.fill:
        out = fill_smooth_regions(out, faces, params=cfg.fill_params(), tree=tree)
    return PipelineResult(out, sparse, tree, graph.weights, dense.new_per_iteration)
