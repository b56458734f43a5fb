"""End-to-end estimation: scene patches -> features -> votes -> clusters -> ICP.

The database fixes the patch geometry (radius factor, points per patch,
neighbor count) so scene-side processing always mirrors the configuration
the records were built with; the RunConfig controls everything else.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dataio import RunConfig
from .errors import EmptySegment, NoClusterSurvives
from .features import compute_descriptor, fuse_features
from .geometry import RigidTransform
from .metrics import DetectionResult
from .patches import sample_scene_patches
from .regressor import TemplateMatcher
from .voting import PoseVote, aggregate_votes, cast_vote, icp_refine, pose_distance


@dataclass
class EstimationResult:
    detections: list           # DetectionResult, refined and NMS-filtered
    rough_poses: list          # RigidTransform per surviving cluster (pre-ICP)
    clusters: list             # PoseCluster per surviving cluster
    votes: list                # PoseVote per usable scene patch
    n_patches: int
    timings: dict[str, float] = field(default_factory=dict)


def build_predictor(db, cfg: RunConfig) -> TemplateMatcher:
    """Template backend bound to this database and descriptor/fusion config."""
    return TemplateMatcher.from_database(
        db, d_f=cfg.feature_dim, grid=cfg.grid_size, radial_bins=cfg.radial_bins,
        fusion_mode=cfg.fusion_mode, seed=cfg.seed)


def scene_fused_features(patches, cfg: RunConfig) -> np.ndarray:
    """Descriptor + fusion for every sampled scene patch."""
    desc = np.stack([
        compute_descriptor(p.normalized_points, cfg.feature_dim, cfg.grid_size,
                           cfg.radial_bins) for p in patches])
    fused = np.empty_like(desc)
    for i, p in enumerate(patches):
        F = desc[[i] + list(p.neighbor_ids)]
        fused[i] = fuse_features(F, p.neighbor_weights, mode=cfg.fusion_mode,
                                 seed=cfg.seed + p.patch_id)
    return fused


def estimate_poses(db, scene_points, cfg: RunConfig, predictor=None,
                   refine: bool = True) -> EstimationResult:
    """Estimate object pose(s) for one segmented scene cloud.

    Raises EmptySegment when the segment yields no usable patches and
    NoClusterSurvives when vote aggregation prunes everything; both signal
    estimation failure for this segment rather than a broken input file.
    """
    scene = np.asarray(scene_points, dtype=float)
    timings: dict[str, float] = {}

    # m_centers == 0 requests density matching: sample the segment at the
    # same patches-per-point rate as the database, so neighbor-distance
    # statistics (and hence fused features) are comparable at test time
    m = cfg.m_centers
    if m == 0:
        m = max(8, round(len(db.records) * scene.shape[0] / db.model_points.shape[0]))

    t0 = time.perf_counter()
    patches = sample_scene_patches(scene, m, db.radius_factor,
                                   db.n_points, db.k_neighbors, db.diameter,
                                   cfg.seed)
    timings["patches"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    if predictor is None:
        predictor = build_predictor(db, cfg)
        timings["predictor_build"] = time.perf_counter() - t0
        t0 = time.perf_counter()
    fused = scene_fused_features(patches, cfg)
    timings["features"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    preds = (predictor.predict_batch(fused) if hasattr(predictor, "predict_batch")
             else [predictor.predict(row) for row in fused])
    votes = [cast_vote(p.to_lpcf, pred.vector, source_patch=p.patch_id,
                       confidence=pred.confidence)
             for p, pred in zip(patches, preds)]
    timings["votes"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    clusters = aggregate_votes(votes, cfg.kmeans_K, cfg.delta,
                               cfg.min_cluster_frac, db.diameter, cfg.seed,
                               weight_votes=cfg.weight_votes)
    timings["aggregate"] = time.perf_counter() - t0

    rough = [c.pose(db.diameter) for c in clusters]

    t0 = time.perf_counter()
    detections = []
    for cluster, pose in zip(clusters, rough):
        refined = pose
        if refine and cfg.icp_iters > 0:
            refined, _ = icp_refine(db.model_points, scene, pose,
                                    max_iters=cfg.icp_iters,
                                    tol=cfg.icp_tol_factor * db.diameter)
        detections.append(DetectionResult(db.object_id, refined, cluster.score))
    timings["icp"] = time.perf_counter() - t0

    # non-maximum suppression across detections in pose space
    kept = []
    for det in sorted(detections, key=lambda d: -d.score):
        if all(pose_distance(det.estimated, other.estimated, db.diameter) >= cfg.delta
               for other in kept):
            kept.append(det)
    return EstimationResult(detections=kept, rough_poses=rough, clusters=clusters,
                            votes=votes, n_patches=len(patches), timings=timings)
