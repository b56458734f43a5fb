"""Pose vote casting, aggregation in pose space, and ICP refinement.

Each usable scene patch casts one vote for the full object pose by chaining
its own standardization (scene frame -> local patch frame) with the
regressed local-to-object transform and inverting:

    vote = inv(predicted_local_to_object o scene_to_local)

Votes are clustered with seeded K-means on 6-D pose vectors (translation
normalized by the object diameter, axis-angle rotation as-is), nearby
clusters are merged, undersized ones pruned, and every surviving cluster is
refined with point-to-point ICP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoClusterSurvives, NoCorrespondences
from .geometry import (
    RigidTransform,
    compose,
    from_vector,
    invert,
    rotation_angle,
    rotation_vector,
)

KMEANS_MAX_ITERS = 100


@dataclass
class PoseVote:
    """One patch's estimate of the object pose (object frame -> scene frame)."""
    pose: RigidTransform
    source_patch: int = -1
    confidence: float = 1.0


@dataclass
class PoseCluster:
    """A group of mutually close votes; `center` is the mean 6-D pose vector
    in diameter-normalized coordinates."""
    center: np.ndarray
    members: list[int]
    score: float

    def pose(self, diameter: float) -> RigidTransform:
        v = np.asarray(self.center, dtype=float)
        return from_vector(np.concatenate([v[:3] * diameter, v[3:]]))


def cast_vote(t_gl: RigidTransform, t_lo_pred, source_patch: int = -1,
              confidence: float = 1.0) -> PoseVote:
    """Turn a predicted local->object transform into an object-pose vote.

    t_gl standardizes the patch (scene frame -> LPCF); t_lo_pred is the
    6-vector predicted for LPCF -> OCF. The chained map sends scene
    coordinates to object coordinates, so its inverse is the object pose.
    """
    t_lo = t_lo_pred if isinstance(t_lo_pred, RigidTransform) else from_vector(t_lo_pred)
    return PoseVote(pose=invert(compose(t_lo, t_gl)),
                    source_patch=source_patch, confidence=confidence)


def pose_distance(p1: RigidTransform, p2: RigidTransform, diameter: float) -> float:
    """Unit-free pose-space distance: geodesic angle over pi plus translation
    offset over the object diameter. Symmetric, zero iff the poses agree."""
    if diameter <= 0:
        raise ValueError("diameter must be positive")
    ang = rotation_angle(p1.rotation, p2.rotation)
    return ang / np.pi + float(np.linalg.norm(p1.translation - p2.translation)) / diameter


def _vote_vector(pose: RigidTransform, diameter: float) -> np.ndarray:
    rv = rotation_vector(pose.rotation)
    angle = np.linalg.norm(rv)
    if angle >= np.pi - 1e-6 and angle > 0:
        # clamp into the invertible chart; the sub-microradian bias is
        # irrelevant for clustering
        rv = rv * ((np.pi - 1e-6) / angle)
    return np.concatenate([pose.translation / diameter, rv])


def _center_pose(center: np.ndarray, diameter: float) -> RigidTransform:
    return from_vector(np.concatenate([center[:3] * diameter, center[3:]]))


def aggregate_votes(votes, K: int, delta: float, min_frac: float,
                    diameter: float, seed: int,
                    weight_votes: bool = False) -> list[PoseCluster]:
    """Cluster pose votes and return the surviving clusters, best first.

    Seeded K-means over the 6-D vote vectors (seeds drawn from the votes,
    assignment fixpoint or 100 iterations), then clusters whose centers are
    closer than `delta` in pose distance are merged and clusters holding
    fewer than min_frac * len(votes) members are removed. Scores are member
    counts, or confidence sums when weight_votes is set.
    """
    votes = list(votes)
    if not votes:
        raise NoClusterSurvives("no votes to aggregate")
    if K < 1:
        raise ValueError("K must be >= 1")
    V = np.stack([_vote_vector(v.pose, diameter) for v in votes])
    n = V.shape[0]
    rng = np.random.default_rng(seed)
    centers = V[rng.choice(n, size=min(K, n), replace=False)].copy()
    assign = None
    for _ in range(KMEANS_MAX_ITERS):
        d2 = ((V[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)
        new_assign = d2.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(centers.shape[0]):
            sel = assign == c
            if np.any(sel):
                centers[c] = V[sel].mean(axis=0)
    clusters = []
    for c in range(centers.shape[0]):
        members = np.nonzero(assign == c)[0]
        if members.size:
            clusters.append([V[members].mean(axis=0), list(int(i) for i in members)])
    # merge clusters closer than delta in pose space, transitively
    merged = True
    while merged:
        merged = False
        for i in range(len(clusters)):
            for j in range(i + 1, len(clusters)):
                ci = _center_pose(clusters[i][0], diameter)
                cj = _center_pose(clusters[j][0], diameter)
                if pose_distance(ci, cj, diameter) < delta:
                    members = clusters[i][1] + clusters[j][1]
                    center = V[members].mean(axis=0)
                    clusters[i] = [center, members]
                    del clusters[j]
                    merged = True
                    break
            if merged:
                break
    min_members = min_frac * n
    out = []
    for center, members in clusters:
        if len(members) < min_members:
            continue
        if weight_votes:
            score = float(sum(votes[i].confidence for i in members))
        else:
            score = float(len(members))
        out.append(PoseCluster(center=center, members=sorted(members), score=score))
    if not out:
        raise NoClusterSurvives(
            f"no cluster kept >= {min_members:.1f} of {n} votes after merging")
    out.sort(key=lambda c: (-c.score, c.members[0]))
    return out


def _kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform taking src onto dst (SVD, det-corrected)."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T))])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs)


def icp_refine(model, scene, initial: RigidTransform, max_iters: int = 50,
               tol: float = 1e-8, max_pair_dist: float | None = None,
               rmse_log: list | None = None):
    """Point-to-point ICP from an initial pose; returns (pose, final RMSE).

    Each sweep matches transformed model points to their scene nearest
    neighbors, rejects pairs beyond 2.5x the median match distance (and
    beyond max_pair_dist, default the model's bounding-box diagonal), and
    applies the closed-form least-squares update. An update that increases
    the inlier RMSE is discarded and iteration stops, so the accepted RMSE
    sequence never increases; it also stops once the improvement drops
    below tol. Pass rmse_log to capture the accepted RMSE sequence.
    """
    M = np.asarray(model, dtype=float)
    S = np.asarray(scene, dtype=float)
    if M.shape[0] == 0 or S.shape[0] == 0:
        raise ValueError("model and scene must be non-empty")
    if max_pair_dist is None:
        extent = M.max(axis=0) - M.min(axis=0)
        max_pair_dist = float(np.linalg.norm(extent))
    tree = cKDTree(S)

    def alignment(T):
        p = T.apply(M)
        d, j = tree.query(p)
        med = np.median(d)
        inl = (d <= 2.5 * med) & (d <= max_pair_dist)
        if not np.any(inl):
            raise NoCorrespondences(
                f"all nearest-neighbor pairs beyond the rejection radius "
                f"(median {med:.4g}, cap {max_pair_dist:.4g})")
        rmse = float(np.sqrt((d[inl] ** 2).mean()))
        return p, j, inl, rmse

    T = initial
    p, j, inl, rmse = alignment(T)
    if rmse_log is not None:
        rmse_log.append(rmse)
    for _ in range(max_iters):
        update = _kabsch(p[inl], S[j[inl]])
        T_new = compose(update, T)
        _, j2, inl2, rmse_new = alignment(T_new)
        if rmse_new > rmse:
            break
        improvement = rmse - rmse_new
        T, rmse = T_new, rmse_new
        p, j, inl = T.apply(M), j2, inl2
        if rmse_log is not None:
            rmse_log.append(rmse)
        if improvement < tol:
            break
    return T, rmse
