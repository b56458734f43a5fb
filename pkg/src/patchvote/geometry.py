"""Rigid-transform arithmetic, PCA frames, sampling and diameter utilities.

Conventions used throughout the package:

* a transform acts as ``y = R @ x + t``;
* ``compose(a, b)`` applies ``b`` first: ``compose(a, b)(x) == a(b(x))``;
* 6-vectors are ``(tx, ty, tz, rx, ry, rz)`` where ``(rx, ry, rz)`` is an
  axis-angle rotation (axis scaled by angle) with canonical angle in
  ``[0, pi]``;
* clouds are ``(N, 3)`` float arrays in meters.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import AngleNearPi, CountExceedsCloud, DegenerateFrame, InvalidRotation

# Eigenvalue separation required before a patch frame counts as unambiguous.
DEFAULT_DEGENERACY_EPS = 0.05

_DIAMETER_SUBSAMPLE = 5000


class RigidTransform:
    """Proper rigid motion ``y = R x + t``.

    The rotation is snapped to the nearest SO(3) matrix on construction
    (SVD projection); reflections and non-finite input are rejected.
    """

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        R = np.asarray(rotation, dtype=float)
        t = np.asarray(translation, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise InvalidRotation(f"rotation must be 3x3, got {R.shape}")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidRotation("non-finite entries in transform")
        det = np.linalg.det(R)
        if det <= 0.0:
            raise InvalidRotation(f"rotation determinant must be positive, got {det:.6g}")
        U, _, Vt = np.linalg.svd(R)
        Rn = U @ Vt
        if np.linalg.det(Rn) < 0.0:
            # sign ambiguity of SVD with a near-singular input
            U[:, -1] = -U[:, -1]
            Rn = U @ Vt
        self.rotation = Rn
        self.translation = t

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        """Transform one point (3,) or a cloud (N, 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous form."""
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def __repr__(self):
        return f"RigidTransform(R={np.array_str(self.rotation, precision=4)}, t={np.array_str(self.translation, precision=4)})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Chain two transforms; ``b`` acts first: compose(a, b)(x) = a(b(x))."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    R = t.rotation.T
    return RigidTransform(R, -R @ t.translation)


def rotation_vector(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, magnitude <= pi.

    At exactly pi the axis sign is inherently ambiguous; the returned choice
    is deterministic but callers needing a round-trip guarantee should use
    :func:`to_vector`.
    """
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def rotation_angle(R_a, R_b=None) -> float:
    """Geodesic angle of one rotation, or between two rotations, in radians."""
    A = np.asarray(R_a, dtype=float)
    R = A if R_b is None else A.T @ np.asarray(R_b, dtype=float)
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


def to_vector(t: RigidTransform) -> np.ndarray:
    """Encode a transform as (tx, ty, tz, rx, ry, rz) with angle in [0, pi).

    Raises AngleNearPi within 1e-6 of pi, where the axis-angle chart is
    not invertible; callers may perturb the pose and retry.
    """
    rv = rotation_vector(t.rotation)
    angle = float(np.linalg.norm(rv))
    if angle >= np.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {angle:.9f} too close to pi")
    return np.concatenate([t.translation, rv])


def from_vector(v) -> RigidTransform:
    """Decode a 6-vector produced by :func:`to_vector`."""
    v = np.asarray(v, dtype=float).reshape(6)
    if not np.all(np.isfinite(v)):
        raise InvalidRotation("non-finite pose vector")
    R = Rotation.from_rotvec(v[3:]).as_matrix()
    return RigidTransform(R, v[:3])


def random_transform(rng: np.random.Generator, max_translation: float = 1.0) -> RigidTransform:
    """Haar-uniform random rotation plus a uniform translation, for tests/demos."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    R = Rotation.from_quat(q).as_matrix()
    t = rng.uniform(-max_translation, max_translation, size=3)
    return RigidTransform(R, t)


def pca_frame(points, eps_degeneracy: float = DEFAULT_DEGENERACY_EPS) -> RigidTransform:
    """Canonical frame of a cloud: centroid origin, covariance eigenvector axes.

    Returns the transform mapping input coordinates into that frame. Axes are
    sorted by descending eigenvalue. Sign disambiguation: e1 and e2 are
    flipped so the third moment of the projections is non-negative (ties fall
    back to a positive coordinate sum), and e3 = e1 x e2 keeps the frame
    right-handed. This makes the frame unique and rigid-equivariant.

    Raises DegenerateFrame when consecutive eigenvalues are within a factor
    of (1 + eps_degeneracy) of each other, i.e. the frame is rotationally
    ambiguous and any vote derived from it would be unreliable.
    """
    P = np.asarray(points, dtype=float)
    if P.ndim != 2 or P.shape[1] != 3 or P.shape[0] < 4:
        raise DegenerateFrame("need at least 4 points for a stable frame")
    centroid = P.mean(axis=0)
    X = P - centroid
    cov = X.T @ X / P.shape[0]
    evals, evecs = np.linalg.eigh(cov)  # ascending
    evals = evals[::-1]
    evecs = evecs[:, ::-1]
    if not (evals[0] > (1.0 + eps_degeneracy) * evals[1]
            and evals[1] > (1.0 + eps_degeneracy) * evals[2]):
        raise DegenerateFrame(
            f"eigenvalues too close for a unique frame: {evals[0]:.3e} {evals[1]:.3e} {evals[2]:.3e}")
    scale = float(np.sqrt(evals.sum()))
    axes = []
    for i in range(2):
        e = evecs[:, i]
        m3 = float(((X @ e) ** 3).sum())
        if abs(m3) < 1e-12 * scale ** 3:
            if e.sum() < 0.0:
                e = -e
        elif m3 < 0.0:
            e = -e
        axes.append(e)
    e3 = np.cross(axes[0], axes[1])
    R = np.stack([axes[0], axes[1], e3])  # rows: local = R @ (x - centroid)
    return RigidTransform(R, -R @ centroid)


def farthest_point_sample(points, count: int, seed: int) -> list[int]:
    """Greedy max-min subset of the cloud; returns point indices.

    The first index is a seeded draw, each following index maximizes the
    minimum distance to the already-chosen set (ties resolve to the lowest
    index). Deterministic for a given (cloud, count, seed); the sequence for
    a larger count extends the one for a smaller count.
    """
    P = np.asarray(points, dtype=float)
    n = P.shape[0]
    if count < 1:
        raise ValueError("count must be >= 1")
    if count > n:
        raise CountExceedsCloud(f"requested {count} samples from {n} points")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    chosen = [first]
    dist = np.linalg.norm(P - P[first], axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(P - P[nxt], axis=1))
    return chosen


def _max_pairwise_distance(Q: np.ndarray) -> float:
    best = 0.0
    step = 512
    for i in range(0, Q.shape[0], step):
        block = Q[i:i + step]
        d2 = ((block[:, None, :] - Q[None, :, :]) ** 2).sum(axis=-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def object_diameter(points) -> float:
    """Enclosing-ball diameter of the cloud (Ritter approximation).

    The ball is grown from Ritter's two-pass seed by repeated farthest-point
    expansion; the result is checked against the exact farthest-pair distance
    of a <= 5000-point subsample and can overestimate the true minimum
    enclosing ball by a few percent, which is immaterial for its use as a
    normalizer.
    """
    P = np.asarray(points, dtype=float)
    n = P.shape[0]
    if n < 2:
        raise ValueError("need at least 2 points")
    d0 = np.linalg.norm(P - P[0], axis=1)
    y = P[int(np.argmax(d0))]
    dy = np.linalg.norm(P - y, axis=1)
    z = P[int(np.argmax(dy))]
    center = (y + z) / 2.0
    radius = float(np.linalg.norm(y - z)) / 2.0
    while True:
        dist = np.linalg.norm(P - center, axis=1)
        j = int(np.argmax(dist))
        d = float(dist[j])
        if d <= radius * (1.0 + 1e-12) + 1e-300:
            break
        new_radius = (radius + d) / 2.0
        center = center + (d - new_radius) / d * (P[j] - center)
        radius = new_radius
    if n > _DIAMETER_SUBSAMPLE:
        idx = np.unique(np.linspace(0, n - 1, _DIAMETER_SUBSAMPLE).astype(int))
        Q = P[idx]
    else:
        Q = P
    return max(2.0 * radius, _max_pairwise_distance(Q))
