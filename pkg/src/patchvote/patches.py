"""Patch extraction, canonicalization, and the patch database.

The pipeline samples patch centers with farthest point sampling, extracts
r-radius patches, standardizes each into its local PCA frame (the LPCF) and,
for model patches, records the LPCF -> OCF transform as the regression
ground truth. The model itself must already live in its own PCA frame
(the OCF) so that ground-truth transforms and pose votes share one chart.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import (
    AngleNearPi,
    DegenerateFrame,
    EmptySegment,
    ModelNotStandardized,
    ParseError,
    SegmentTooSmallWarning,
    TooFewPoints,
)
from .geometry import (
    RigidTransform,
    farthest_point_sample,
    invert,
    object_diameter,
    pca_frame,
    to_vector,
)
from .features import neighbor_weight

MIN_PATCH_POINTS = 16

_DB_MAGIC = b"PVDB"
_DB_VERSION = 1


@dataclass
class Patch:
    """Points within `radius` of `center`, plus ids of the k nearest patches."""
    points: np.ndarray
    center: np.ndarray
    radius: float
    neighbor_ids: list[int] = field(default_factory=list)


@dataclass
class StandardizedPatch:
    """Patch expressed in its local PCA frame; to_lpcf maps source -> LPCF."""
    points: np.ndarray
    to_lpcf: RigidTransform


@dataclass
class PatchRecord:
    """One database row: canonical patch, network input, and regression target.

    gt_vector encodes the LPCF -> OCF transform, i.e. the inverse of to_lpcf;
    applying it to `standardized.points` reproduces the patch's footprint on
    the model.
    """
    record_id: int
    center: np.ndarray
    standardized: StandardizedPatch
    normalized_points: np.ndarray
    neighbor_ids: list[int]
    neighbor_weights: np.ndarray  # (k+1,), self weight first and equal to 1
    gt_vector: np.ndarray         # (6,)


@dataclass
class PatchDatabase:
    object_id: str
    model_points: np.ndarray          # standardized into the OCF
    model_normals: np.ndarray | None
    diameter: float
    radius_factor: float
    n_points: int
    k_neighbors: int
    seed: int
    records: list[PatchRecord]
    train_ids: np.ndarray
    val_ids: np.ndarray
    dropped: dict[str, int]

    @property
    def radius(self) -> float:
        return self.radius_factor * self.diameter


@dataclass
class ScenePatch:
    """A sampled scene patch ready for description and voting."""
    patch_id: int
    center: np.ndarray
    points: np.ndarray
    to_lpcf: RigidTransform           # GCF -> LPCF
    normalized_points: np.ndarray
    neighbor_ids: list[int] = field(default_factory=list)
    neighbor_weights: np.ndarray = None


def standardize_model(points):
    """Express a model in its own PCA frame (the OCF).

    Returns (standardized cloud, applied transform); idempotent up to 1e-6.
    """
    T = pca_frame(points)
    return T.apply(points), T


def extract_patch(points, center, radius: float, min_points: int = MIN_PATCH_POINTS) -> Patch:
    """All and only the cloud points within `radius` of `center`."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    P = np.asarray(points, dtype=float)
    c = np.asarray(center, dtype=float).reshape(3)
    sel = np.linalg.norm(P - c, axis=1) <= radius + 1e-9
    picked = P[sel]
    if picked.shape[0] < min_points:
        raise TooFewPoints(f"{picked.shape[0]} points within r={radius:.4g} of the center")
    return Patch(points=picked, center=c, radius=radius)


def normalize_patch(patch: Patch, n: int, seed: int) -> np.ndarray:
    """Resample to exactly n points, de-mean, and scale by the patch radius.

    Down-sampling draws a seeded subset; up-sampling keeps every original
    point and appends seeded draws with replacement. The output centroid is
    the origin and coordinates are in units of the patch radius.
    """
    P = np.asarray(patch.points, dtype=float)
    m = P.shape[0]
    if m == 0:
        raise TooFewPoints("cannot normalize an empty patch")
    if m == n:
        picked = P
    elif m > n:
        rng = np.random.default_rng(seed)
        picked = P[rng.choice(m, size=n, replace=False)]
    else:
        rng = np.random.default_rng(seed)
        extra = rng.integers(0, m, size=n - m)
        picked = np.concatenate([P, P[extra]], axis=0)
    centered = picked - picked.mean(axis=0)
    return centered / patch.radius


def standardize_patch(patch: Patch) -> StandardizedPatch:
    """Move a patch into its local PCA frame (Patch Standardization branch)."""
    T = pca_frame(patch.points)
    return StandardizedPatch(points=T.apply(patch.points), to_lpcf=T)


def _check_standardized(model_points, diameter):
    T = pca_frame(model_points)
    angle = float(np.arccos(np.clip((np.trace(T.rotation) - 1) / 2, -1, 1)))
    if angle > 1e-5 or np.linalg.norm(T.translation) > 1e-5 * diameter:
        raise ModelNotStandardized(
            "model is not in its own PCA frame; run standardize_model first")


def _neighbor_graph(centers: np.ndarray, k: int, diameter: float):
    """k nearest patch centers for each patch, plus the Eq.-style weights.

    Returns (neighbor_ids list-of-lists, weights list of (k_eff+1,) arrays);
    the self weight leads each weight vector and equals 1.
    """
    n = centers.shape[0]
    k_eff = min(k, n - 1)
    ids, weights = [], []
    if k_eff == 0:
        return [[] for _ in range(n)], [np.ones(1) for _ in range(n)]
    tree = cKDTree(centers)
    dist, idx = tree.query(centers, k=k_eff + 1)
    for i in range(n):
        neigh = [int(j) for j in idx[i] if j != i][:k_eff]
        ids.append(neigh)
        w = np.empty(len(neigh) + 1)
        w[0] = 1.0
        for slot, j in enumerate(neigh, start=1):
            w[slot] = neighbor_weight(centers[j], centers[i], diameter)
        weights.append(w)
    return ids, weights


def build_patch_database(model_points, num_patches: int, radius_factor: float,
                         n: int, k: int, seed: int, object_id: str = "object",
                         model_normals=None) -> PatchDatabase:
    """Sample patches over a standardized model and build training records.

    Patch radius is radius_factor * diameter. Patches whose PCA frame is
    degenerate, that hold too few points, or whose ground-truth rotation sits
    at the axis-angle singularity are dropped and counted. Neighbors (k
    nearest by center distance) are wired among the surviving records so
    every stored id references a usable patch. Deterministic given the seed.
    """
    model = np.asarray(model_points, dtype=float)
    diameter = object_diameter(model)
    _check_standardized(model, diameter)
    radius = radius_factor * diameter
    order = farthest_point_sample(model, min(num_patches, model.shape[0]), seed)
    tree = cKDTree(model)
    dropped = {"too_few_points": 0, "degenerate": 0, "near_pi": 0}
    records: list[PatchRecord] = []
    for rank, point_idx in enumerate(order):
        center = model[point_idx]
        idx = tree.query_ball_point(center, radius + 1e-9)
        pts = model[np.sort(np.asarray(idx, dtype=int))]
        if pts.shape[0] < MIN_PATCH_POINTS:
            dropped["too_few_points"] += 1
            continue
        patch = Patch(points=pts, center=center.copy(), radius=radius)
        try:
            std = standardize_patch(patch)
        except DegenerateFrame:
            dropped["degenerate"] += 1
            continue
        try:
            gt_vector = to_vector(invert(std.to_lpcf))
        except AngleNearPi:
            dropped["near_pi"] += 1
            continue
        # descriptor input lives in the LPCF: standardize, then normalize
        normalized = normalize_patch(Patch(std.points, np.zeros(3), radius),
                                     n, seed + rank)
        records.append(PatchRecord(
            record_id=rank, center=center.copy(), standardized=std,
            normalized_points=normalized, neighbor_ids=[],
            neighbor_weights=np.ones(1), gt_vector=gt_vector))
    if not records:
        raise EmptySegment("no usable patches on the model")
    centers = np.stack([r.center for r in records])
    ids, weights = _neighbor_graph(centers, k, diameter)
    for rec, nid, w in zip(records, ids, weights):
        rec.neighbor_ids = nid
        rec.neighbor_weights = w
    split_rng = np.random.default_rng(seed)
    perm = split_rng.permutation(len(records))
    n_val = len(records) // 5  # 4:1 train/validation split
    val_ids = np.sort(perm[:n_val])
    train_ids = np.sort(perm[n_val:])
    return PatchDatabase(
        object_id=object_id, model_points=model, model_normals=model_normals,
        diameter=diameter, radius_factor=radius_factor, n_points=n,
        k_neighbors=k, seed=seed, records=records,
        train_ids=train_ids, val_ids=val_ids, dropped=dropped)


def sample_scene_patches(segment, m: int, radius_factor: float, n: int, k: int,
                         diameter: float, seed: int) -> list[ScenePatch]:
    """Sample m center patches on a segmented scene cloud.

    The patch radius comes from the *model* diameter (known per class).
    Unusable patches (too few points, degenerate frame) are dropped; if fewer
    than m usable patches remain a SegmentTooSmallWarning is emitted and the
    shorter list returned. Per-patch resampling seeds are seed + FPS rank so
    parallel workers stay deterministic.
    """
    S = np.asarray(segment, dtype=float)
    if S.shape[0] == 0:
        raise EmptySegment("segment holds no points")
    radius = radius_factor * diameter
    count = min(m, S.shape[0])
    order = farthest_point_sample(S, count, seed)
    tree = cKDTree(S)
    out: list[ScenePatch] = []
    for rank, point_idx in enumerate(order):
        center = S[point_idx]
        idx = tree.query_ball_point(center, radius + 1e-9)
        pts = S[np.sort(np.asarray(idx, dtype=int))]
        if pts.shape[0] < MIN_PATCH_POINTS:
            continue
        patch = Patch(points=pts, center=center.copy(), radius=radius)
        try:
            std = standardize_patch(patch)
        except DegenerateFrame:
            continue
        normalized = normalize_patch(Patch(std.points, np.zeros(3), radius),
                                     n, seed + rank)
        out.append(ScenePatch(
            patch_id=rank, center=center.copy(), points=pts,
            to_lpcf=std.to_lpcf, normalized_points=normalized))
    if not out:
        raise EmptySegment("no usable patches on the segment")
    if len(out) < m:
        warnings.warn(f"only {len(out)} of {m} requested patches are usable",
                      SegmentTooSmallWarning, stacklevel=2)
    centers = np.stack([p.center for p in out])
    ids, weights = _neighbor_graph(centers, k, diameter)
    for p, nid, w in zip(out, ids, weights):
        p.neighbor_ids = nid
        p.neighbor_weights = w
    return out


# ---------------------------------------------------------------------------
# Database persistence (versioned binary; float32 points, float64 transforms)
# ---------------------------------------------------------------------------

def _write_arr(f, arr, dtype):
    f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def save_database(db: PatchDatabase, path):
    with open(path, "wb") as f:
        f.write(_DB_MAGIC + struct.pack("<I", _DB_VERSION))
        oid = db.object_id.encode("utf-8")
        f.write(struct.pack("<I", len(oid)) + oid)
        f.write(struct.pack("<IB", db.model_points.shape[0],
                            0 if db.model_normals is None else 1))
        f.write(struct.pack("<ddIIq", db.diameter, db.radius_factor,
                            db.n_points, db.k_neighbors, db.seed))
        f.write(struct.pack("<III", len(db.records), len(db.train_ids), len(db.val_ids)))
        f.write(struct.pack("<III", db.dropped.get("too_few_points", 0),
                            db.dropped.get("degenerate", 0), db.dropped.get("near_pi", 0)))
        _write_arr(f, db.model_points, "<f4")
        if db.model_normals is not None:
            _write_arr(f, db.model_normals, "<f4")
        _write_arr(f, db.train_ids, "<u4")
        _write_arr(f, db.val_ids, "<u4")
        for rec in db.records:
            f.write(struct.pack("<II", rec.record_id, rec.standardized.points.shape[0]))
            _write_arr(f, rec.center, "<f8")
            _write_arr(f, rec.standardized.points, "<f4")
            _write_arr(f, rec.standardized.to_lpcf.rotation, "<f8")
            _write_arr(f, rec.standardized.to_lpcf.translation, "<f8")
            _write_arr(f, rec.normalized_points, "<f4")
            _write_arr(f, rec.gt_vector, "<f8")
            f.write(struct.pack("<I", len(rec.neighbor_ids)))
            _write_arr(f, np.asarray(rec.neighbor_ids, dtype=np.uint32), "<u4")
            _write_arr(f, rec.neighbor_weights, "<f8")


def _read_exact(f, nbytes, path):
    raw = f.read(nbytes)
    if len(raw) != nbytes:
        raise ParseError(f"{path}: truncated database at byte {f.tell()}")
    return raw


def _read_arr(f, shape, dtype, path):
    dt = np.dtype(dtype)
    n = int(np.prod(shape)) if shape else 1
    raw = _read_exact(f, dt.itemsize * n, path)
    return np.frombuffer(raw, dtype=dt).reshape(shape).astype(
        float if dt.kind == "f" else int)


def load_database(path) -> PatchDatabase:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, path)
        if magic != _DB_MAGIC:
            raise ParseError(f"{path}: not a patch database (magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(f, 4, path))
        if version != _DB_VERSION:
            raise ParseError(f"{path}: unsupported database version {version}")
        (oid_len,) = struct.unpack("<I", _read_exact(f, 4, path))
        object_id = _read_exact(f, oid_len, path).decode("utf-8")
        n_model, has_normals = struct.unpack("<IB", _read_exact(f, 5, path))
        diameter, radius_factor, n_points, k_neighbors, seed = struct.unpack(
            "<ddIIq", _read_exact(f, struct.calcsize("<ddIIq"), path))
        n_records, n_train, n_val = struct.unpack("<III", _read_exact(f, 12, path))
        d_few, d_deg, d_pi = struct.unpack("<III", _read_exact(f, 12, path))
        model_points = _read_arr(f, (n_model, 3), "<f4", path)
        model_normals = _read_arr(f, (n_model, 3), "<f4", path) if has_normals else None
        train_ids = _read_arr(f, (n_train,), "<u4", path)
        val_ids = _read_arr(f, (n_val,), "<u4", path)
        records = []
        for _ in range(n_records):
            rec_id, n_pts = struct.unpack("<II", _read_exact(f, 8, path))
            center = _read_arr(f, (3,), "<f8", path)
            std_pts = _read_arr(f, (n_pts, 3), "<f4", path)
            rot = _read_arr(f, (3, 3), "<f8", path)
            trans = _read_arr(f, (3,), "<f8", path)
            normalized = _read_arr(f, (n_points, 3), "<f4", path)
            gt_vector = _read_arr(f, (6,), "<f8", path)
            (n_neigh,) = struct.unpack("<I", _read_exact(f, 4, path))
            neigh = _read_arr(f, (n_neigh,), "<u4", path)
            w = _read_arr(f, (n_neigh + 1,), "<f8", path)
            records.append(PatchRecord(
                record_id=rec_id, center=center,
                standardized=StandardizedPatch(std_pts, RigidTransform(rot, trans)),
                normalized_points=normalized, neighbor_ids=[int(i) for i in neigh],
                neighbor_weights=w, gt_vector=gt_vector))
    return PatchDatabase(
        object_id=object_id, model_points=model_points, model_normals=model_normals,
        diameter=diameter, radius_factor=radius_factor, n_points=int(n_points),
        k_neighbors=int(k_neighbors), seed=int(seed), records=records,
        train_ids=train_ids.astype(int), val_ids=val_ids.astype(int),
        dropped={"too_few_points": d_few, "degenerate": d_deg, "near_pi": d_pi})
