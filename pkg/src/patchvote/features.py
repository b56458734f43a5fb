"""Patch descriptors and weight-guided neighboring feature fusion.

The descriptor is a deterministic stand-in for a learned point-cloud
encoder: an occupancy histogram over a fixed grid, sign-split per-axis
coordinate moments, and a radial histogram, zero-padded to the configured
feature dimension and L2-normalized. Every entry is non-negative, which is
what makes masked max-pooling well behaved (masking can never amplify).

Fusion combines the center patch's feature with its k neighbors' features.
Each neighbor's weight falls linearly with center distance over the object
diameter; in `sampled` mode a weight-w feature is gated by a random binary
reference vector whose entries are 1 with probability w, and the gated
features are max-pooled. `expected` mode replaces each gate by its
expectation (scaling by w) for deterministic inference. `concat` mode is the
fusion-free fallback: concatenation followed by a fixed block-averaging
projection, with no max pool.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, LengthMismatch


def compute_descriptor(normalized_points, d_f: int = 2048, grid: int = 8,
                       radial_bins: int = 32) -> np.ndarray:
    """Describe a normalized (LPCF, unit-radius) patch as a d_f vector.

    Deterministic and permutation-invariant. Components: occupancy fractions
    on a grid^3 lattice over [-1, 1]^3, positive/negative parts of per-axis
    raw moments of orders 1..4, and a radial histogram over [0, 2] with
    radial_bins bins. Points outside the lattice are clipped into the
    boundary cells. Raises DimensionMismatch when d_f is smaller than the
    raw descriptor length (grid^3 + 24 + radial_bins).
    """
    P = np.asarray(normalized_points, dtype=float)
    if P.ndim != 2 or P.shape[1] != 3 or P.shape[0] == 0:
        raise ValueError("normalized_points must be a non-empty (N, 3) array")
    # fix the summation order so permutations of the input are bit-identical
    P = P[np.lexsort((P[:, 2], P[:, 1], P[:, 0]))]
    n = P.shape[0]
    cell = np.clip(((P + 1.0) * (grid / 2.0)).astype(int), 0, grid - 1)
    flat = (cell[:, 0] * grid + cell[:, 1]) * grid + cell[:, 2]
    occupancy = np.bincount(flat, minlength=grid ** 3).astype(float) / n
    powers = np.stack([P, P ** 2, P ** 3, P ** 4])       # (4, N, 3)
    moments = powers.mean(axis=1).reshape(-1)            # orders 1..4, per axis
    moment_parts = np.concatenate([np.maximum(moments, 0.0),
                                   np.maximum(-moments, 0.0)])
    radii = np.linalg.norm(P, axis=1)
    radial = np.histogram(np.clip(radii, 0.0, 2.0), bins=radial_bins,
                          range=(0.0, 2.0))[0].astype(float) / n
    raw = np.concatenate([occupancy, moment_parts, radial])
    if d_f < raw.size:
        raise DimensionMismatch(
            f"feature_dim {d_f} smaller than raw descriptor length {raw.size}")
    out = np.zeros(d_f)
    out[:raw.size] = raw
    return out / np.linalg.norm(out)


def neighbor_weight(c_i, c_0, diameter: float) -> float:
    """Weight of a neighboring patch: 1 - dist(c_i, c_0) / diameter, clamped to [0, 1]."""
    if diameter <= 0:
        raise ValueError("diameter must be positive")
    dist = float(np.linalg.norm(np.asarray(c_i, dtype=float) - np.asarray(c_0, dtype=float)))
    return float(min(1.0, max(0.0, 1.0 - dist / diameter)))


def reference_vector(omega: float, d_f: int, seed: int) -> np.ndarray:
    """Binary gate vector: each entry is 1 with probability omega, seeded."""
    if not 0.0 <= omega <= 1.0:
        raise ValueError(f"omega must be in [0, 1], got {omega}")
    rng = np.random.default_rng(seed)
    return (rng.random(d_f) < omega).astype(float)


def wnff_fuse(features, weights, mode: str = "expected", seed: int = 0) -> np.ndarray:
    """Fuse k+1 patch features into one semi-global feature.

    features is (k+1, d_f) with the center patch first; weights is (k+1,)
    with weights[0] == 1. `sampled` gates feature i by
    reference_vector(weights[i], d_f, seed + i) before the elementwise max;
    `expected` scales feature i by weights[i] instead.
    """
    F = np.asarray(features, dtype=float)
    w = np.asarray(weights, dtype=float).reshape(-1)
    if F.ndim != 2 or F.shape[0] != w.shape[0]:
        raise LengthMismatch(f"{F.shape[0] if F.ndim == 2 else '?'} features vs {w.shape[0]} weights")
    if abs(w[0] - 1.0) > 1e-12:
        raise ValueError("center patch weight must be 1")
    if mode == "expected":
        return (w[:, None] * F).max(axis=0)
    if mode == "sampled":
        d_f = F.shape[1]
        masks = np.stack([reference_vector(float(w[i]), d_f, seed + i)
                          for i in range(F.shape[0])])
        return (masks * F).max(axis=0)
    raise ValueError(f"unknown fusion mode {mode!r}")


def concat_fuse(features) -> np.ndarray:
    """Fusion-free fallback: concatenate, then a fixed linear projection.

    The projection is block averaging of the concatenated vector back to
    d_f; no max pool is involved.
    """
    F = np.asarray(features, dtype=float)
    if F.ndim != 2:
        raise LengthMismatch("features must be (k+1, d_f)")
    return F.mean(axis=0)


def fuse_features(features, weights, mode: str = "expected", seed: int = 0) -> np.ndarray:
    """Dispatch over the three fusion modes: sampled | expected | concat."""
    if mode == "concat":
        return concat_fuse(features)
    return wnff_fuse(features, weights, mode=mode, seed=seed)
