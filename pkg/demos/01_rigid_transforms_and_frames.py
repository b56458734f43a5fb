"""Tour of the geometric substrate: transforms, PCA frames, sampling.

Run from the repo root:  python3 demos/01_rigid_transforms_and_frames.py
"""
import numpy as np

from patchvote import (
    RigidTransform, compose, invert, to_vector, from_vector,
    pca_frame, farthest_point_sample, object_diameter, random_transform,
    rotation_angle,
)
from patchvote.shapes import make_freeform

rng = np.random.default_rng(0)

# --- SE(3) arithmetic ------------------------------------------------------
a = random_transform(rng)
b = random_transform(rng)
x = rng.normal(size=3)
print("compose(a,b) applies b first:",
      np.allclose(compose(a, b).apply(x), a.apply(b.apply(x))))
print("a * inv(a) = identity:",
      np.allclose(compose(a, invert(a)).matrix(), np.eye(4), atol=1e-12))

# --- the 6-vector codec ----------------------------------------------------
v = to_vector(a)
print("round trip through (t, axis-angle):",
      np.allclose(from_vector(v).matrix(), a.matrix(), atol=1e-12))
print("pose vector:", np.round(v, 3))

# --- a canonical frame for a cloud ----------------------------------------
model = make_freeform(2000, seed=1)
T = pca_frame(model)
print("model is already standardized, so its own frame is the identity:",
      rotation_angle(T.rotation) < 1e-6, np.linalg.norm(T.translation) < 1e-6)

moved = random_transform(rng).apply(model)
T_moved = pca_frame(moved)
print("frames are rigid-equivariant: standardized clouds agree to",
      np.abs(T_moved.apply(moved) - model).max())

# --- farthest point sampling and the diameter ------------------------------
idx = farthest_point_sample(model, 12, seed=4)
centers = model[idx]
d = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
print("12 FPS centers, min pairwise spacing:",
      round(float(d[np.triu_indices(12, 1)].min()), 4))
print("object diameter:", round(object_diameter(model), 4), "m")
