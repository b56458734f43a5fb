"""Deterministic synthetic test models.

Three desk-scale stand-ins for scanned rigid objects, used by the test
suite and the demo scripts: an asymmetric L-bracket, a gadget assembled
from primitives in the spirit of household scan targets (box body, tapered
barrel, handle fin, boss), and a random polyhedral rock. Like manufactured
objects, all three carry creases and edges at patch scale, which is what
makes local reference frames well conditioned. Surface point clouds are
returned already standardized into their own PCA frame (the OCF) and
scaled to roughly a 0.24 m diameter.

There is also a smooth lobed potato (`make_potato`) whose large, gently
curved regions make local frames deliberately unstable; the regression
smoke tests use it with large patch radii.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import ConvexHull

from .geometry import object_diameter
from .patches import standardize_model

TARGET_DIAMETER = 0.24


def _box_faces(rng, x0, x1, y0, y1, z0, z1, density):
    """Sample all six faces of a box, area-weighted."""
    dx, dy, dz = x1 - x0, y1 - y0, z1 - z0
    faces = [
        (dx * dy, lambda n: np.column_stack(
            [rng.uniform(x0, x1, n), rng.uniform(y0, y1, n), np.full(n, z0)])),
        (dx * dy, lambda n: np.column_stack(
            [rng.uniform(x0, x1, n), rng.uniform(y0, y1, n), np.full(n, z1)])),
        (dx * dz, lambda n: np.column_stack(
            [rng.uniform(x0, x1, n), np.full(n, y0), rng.uniform(z0, z1, n)])),
        (dx * dz, lambda n: np.column_stack(
            [rng.uniform(x0, x1, n), np.full(n, y1), rng.uniform(z0, z1, n)])),
        (dy * dz, lambda n: np.column_stack(
            [np.full(n, x0), rng.uniform(y0, y1, n), rng.uniform(z0, z1, n)])),
        (dy * dz, lambda n: np.column_stack(
            [np.full(n, x1), rng.uniform(y0, y1, n), rng.uniform(z0, z1, n)])),
    ]
    parts = []
    for area, sampler in faces:
        n = max(4, int(round(area * density)))
        parts.append(sampler(n))
    return np.concatenate(parts)


def _cylinder(rng, center, axis_u, axis_v, axis_w, radius, height, density,
              taper=0.0, egg=0.0, twist=0.0, cap=True):
    """Open cylinder along axis_w with optional taper and egg-shaped section."""
    area = 2 * np.pi * radius * height
    n = max(12, int(round(area * density)))
    s = rng.uniform(0, 1, n)
    phi = rng.uniform(0, 2 * np.pi, n)
    rho = radius * (1.0 - taper * s) * (1.0 + egg * np.cos(phi - twist))
    pts = (np.asarray(center)
           + np.outer(s * height, axis_w)
           + rho[:, None] * (np.cos(phi)[:, None] * axis_u + np.sin(phi)[:, None] * axis_v))
    if not cap:
        return pts
    n_cap = max(8, int(round(np.pi * radius ** 2 * density)))
    rr = radius * (1.0 - taper) * np.sqrt(rng.uniform(0, 1, n_cap))
    tt = rng.uniform(0, 2 * np.pi, n_cap)
    rr = rr * (1.0 + egg * np.cos(tt - twist))
    cap_pts = (np.asarray(center) + np.outer(np.full(n_cap, height), axis_w)
               + rr[:, None] * (np.cos(tt)[:, None] * axis_u + np.sin(tt)[:, None] * axis_v))
    return np.concatenate([pts, cap_pts])


def make_bracket(n_points: int = 4000, seed: int = 0) -> np.ndarray:
    """Asymmetric L-bracket with a fin and a boss; the flat faces and
    repeated straight edges make single patches locally ambiguous."""
    rng = np.random.default_rng(seed)
    density = n_points / 2.6  # total face area is ~2.6 in the unscaled units
    base = _box_faces(rng, 0.0, 1.00, 0.00, 0.60, 0.00, 0.10, density)
    wall = _box_faces(rng, 0.0, 0.12, 0.06, 0.58, 0.10, 0.62, density)
    fin = _box_faces(rng, 0.12, 0.55, 0.30, 0.36, 0.10, 0.34, density)
    z = np.array([0.0, 0.0, 1.0])
    x = np.array([1.0, 0.0, 0.0])
    y = np.array([0.0, 1.0, 0.0])
    boss = _cylinder(rng, [0.78, 0.17, 0.10], x, y, z, 0.11, 0.16, density)
    pts = np.concatenate([base, wall, fin, boss])
    # notch: carve a corner out of the base to kill the near mirror symmetry
    notch = (pts[:, 0] > 0.86) & (pts[:, 1] > 0.46)
    pts = pts[~notch]
    return _finish(pts)


def make_freeform(n_points: int = 4000, seed: int = 1) -> np.ndarray:
    """Free-standing gadget: slab body, tapered egg-section barrel, angled
    handle fin, and a boss, loosely shaped like a handheld scan target."""
    rng = np.random.default_rng(seed)
    density = n_points / 2.1
    body = _box_faces(rng, 0.00, 0.52, 0.00, 0.34, 0.00, 0.20, density)
    x = np.array([1.0, 0.0, 0.0])
    y = np.array([0.0, 1.0, 0.0])
    z = np.array([0.0, 0.0, 1.0])
    # barrel sticking out of the front face
    w = np.array([0.97, 0.08, 0.22]); w /= np.linalg.norm(w)
    u = np.cross(z, w); u /= np.linalg.norm(u)
    v = np.cross(w, u)
    barrel = _cylinder(rng, [0.50, 0.17, 0.12], u, v, w, 0.085, 0.42, density,
                       taper=0.35, egg=0.35, twist=0.7)
    # angled handle fin under the body
    hw = np.array([-0.25, 0.1, -0.96]); hw /= np.linalg.norm(hw)
    handle = _box_faces(rng, 0.0, 0.16, 0.0, 0.30, 0.0, 0.26, density)
    hu = np.cross(y, hw); hu /= np.linalg.norm(hu)
    hv = np.cross(hw, hu)
    handle = handle @ np.stack([hu, hv, hw]) + np.array([0.16, 0.02, 0.0])
    boss = _cylinder(rng, [0.30, 0.17, 0.20], x, y, z, 0.07, 0.09, density,
                     taper=0.2, egg=0.25, twist=2.1)
    pts = np.concatenate([body, barrel, handle, boss])
    return _finish(pts)


def make_blob(n_points: int = 4000, seed: int = 2, n_vertices: int = 14) -> np.ndarray:
    """Random polyhedral rock: the convex hull of seeded random vertices,
    surface-sampled with triangle-area weighting."""
    rng = np.random.default_rng(seed)
    verts = rng.normal(size=(n_vertices, 3)) * [1.2, 1.0, 0.8]
    hull = ConvexHull(verts)
    tris = verts[hull.simplices]
    areas = np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0],
                                    tris[:, 2] - tris[:, 0]), axis=1) / 2
    counts = rng.multinomial(n_points, areas / areas.sum())
    parts = []
    for tri, c in zip(tris, counts):
        if c == 0:
            continue
        a, b = rng.uniform(0, 1, (2, c))
        flip = a + b > 1
        a[flip], b[flip] = 1 - a[flip], 1 - b[flip]
        parts.append(tri[0] + a[:, None] * (tri[1] - tri[0]) + b[:, None] * (tri[2] - tri[0]))
    return _finish(np.concatenate(parts))


def make_potato(n_points: int = 4000, seed: int = 1) -> np.ndarray:
    """Smooth lobed potato; locally ambiguous by design (no creases)."""
    rng = np.random.default_rng(seed)
    dirs = rng.normal(size=(n_points, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    lobes = rng.normal(size=(10, 3))
    lobes /= np.linalg.norm(lobes, axis=1, keepdims=True)
    amps = rng.uniform(0.10, 0.30, 10)
    widths = rng.uniform(0.35, 0.70, 10)
    radius = np.ones(n_points)
    for u, a, s in zip(lobes, amps, widths):
        radius += a * np.exp((dirs @ u - 1.0) / s ** 2)
    pts = dirs * radius[:, None] * np.array([1.30, 1.00, 0.72])
    return _finish(pts)


def _finish(pts: np.ndarray) -> np.ndarray:
    standardized, _ = standardize_model(pts)
    return standardized * (TARGET_DIAMETER / object_diameter(standardized))


FIXTURES = {
    "bracket": make_bracket,
    "freeform": make_freeform,
    "blob": make_blob,
}
