"""File ingestion and persistence: PLY clouds, PGM depth/mask images,
pinhole back-projection, synthetic scene generation, and the line-oriented
results/annotation format.

Formats (all little-endian where binary):

* clouds/models: PLY, ASCII or binary_little_endian, properties x y z and
  optionally nx ny nz, stored as float32;
* depth images: binary PGM (P5) with maxval 65535, depth in meters =
  pixel * depth_scale;
* masks: binary PGM (P5) with maxval 255, pixel value = class id,
  0 = background;
* annotations/results: UTF-8 text, one record per line,
  ``obj <id> R <9 floats row-major> t <3 floats> [score <float>]``,
  floats printed with 9 significant digits. Vote dumps append
  ``patch <id>``; metric records are ``metric <name> <value>``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import (
    ConfigError,
    DimensionMismatch,
    EmptySegment,
    InvalidRotation,
    ParseError,
    UnsupportedProperty,
)
from .geometry import RigidTransform, object_diameter


@dataclass
class CameraIntrinsics:
    """Pinhole parameters; depth_scale converts stored depth units to meters."""
    fx: float
    fy: float
    cx: float
    cy: float
    depth_scale: float = 1.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("focal lengths must be positive")
        if self.depth_scale <= 0:
            raise ConfigError("depth_scale must be positive")


@dataclass
class SceneAnnotation:
    object_id: str
    gt_pose: RigidTransform
    instance_count: int = 1


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_SCALAR = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


def save_cloud(points, path, normals=None, binary=True):
    """Write a cloud as PLY; coordinates are stored as float32."""
    P = np.asarray(points, dtype=np.float32)
    if P.ndim != 2 or P.shape[1] != 3:
        raise ValueError("points must be (N, 3)")
    N = None if normals is None else np.asarray(normals, dtype=np.float32)
    if N is not None and N.shape != P.shape:
        raise DimensionMismatch("normals shape must match points")
    fmt = "binary_little_endian" if binary else "ascii"
    header = ["ply", f"format {fmt} 1.0", f"element vertex {P.shape[0]}",
              "property float x", "property float y", "property float z"]
    if N is not None:
        header += ["property float nx", "property float ny", "property float nz"]
    header.append("end_header")
    data = P if N is None else np.hstack([P, N])
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            f.write(data.astype("<f4").tobytes())
        else:
            for row in data:
                f.write((" ".join(f"{v:.9g}" for v in row) + "\n").encode("ascii"))


def load_cloud(path):
    """Read a PLY cloud; returns (points, normals) with normals possibly None.

    Only the vertex element is consumed; unknown scalar vertex properties
    (colors etc.) are skipped, list properties are not supported.
    """
    with open(path, "rb") as f:
        elements, fmt, line_no = _parse_ply_header(f, path)
        vertex = next((e for e in elements if e["name"] == "vertex"), None)
        if vertex is None:
            raise ParseError(f"{path}: no vertex element in header")
        if vertex["count"] == 0:
            raise ParseError(f"{path}: empty vertex element")
        for elem in elements:
            if elem is vertex:
                data = _read_ply_element(f, elem, fmt, path, line_no)
                break
            _skip_ply_element(f, elem, fmt, path)
    names = [p[1] for p in vertex["properties"]]
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ParseError(f"{path}: vertex element lacks property '{axis}'")
    points = np.stack([data[a] for a in ("x", "y", "z")], axis=1).astype(float)
    if not np.all(np.isfinite(points)):
        raise ParseError(f"{path}: non-finite vertex coordinates")
    normals = None
    if all(a in names for a in ("nx", "ny", "nz")):
        normals = np.stack([data[a] for a in ("nx", "ny", "nz")], axis=1).astype(float)
        norms = np.linalg.norm(normals, axis=1)
        if np.abs(norms - 1.0).max() > 1e-6:
            raise ParseError(f"{path}: normals are not unit length")
    return points, normals


def _parse_ply_header(f, path):
    def next_line():
        raw = f.readline()
        if not raw:
            raise ParseError(f"{path}: unexpected end of header")
        return raw.decode("ascii", errors="replace").strip()

    line_no = 1
    if next_line() != "ply":
        raise ParseError(f"{path}:1: not a PLY file")
    fmt = None
    elements = []
    while True:
        line_no += 1
        line = next_line()
        if line == "end_header":
            break
        toks = line.split()
        if not toks or toks[0] == "comment":
            continue
        if toks[0] == "format":
            if toks[1] == "ascii":
                fmt = "ascii"
            elif toks[1] == "binary_little_endian":
                fmt = "binary"
            else:
                raise UnsupportedProperty(f"{path}:{line_no}: format {toks[1]} not supported")
        elif toks[0] == "element":
            if len(toks) != 3:
                raise ParseError(f"{path}:{line_no}: malformed element line")
            try:
                count = int(toks[2])
            except ValueError:
                raise ParseError(f"{path}:{line_no}: bad element count") from None
            elements.append({"name": toks[1], "count": count, "properties": []})
        elif toks[0] == "property":
            if not elements:
                raise ParseError(f"{path}:{line_no}: property before any element")
            if toks[1] == "list":
                elements[-1]["properties"].append(("list", toks[-1]))
            else:
                if toks[1] not in _PLY_SCALAR:
                    raise UnsupportedProperty(f"{path}:{line_no}: property type {toks[1]}")
                elements[-1]["properties"].append((_PLY_SCALAR[toks[1]], toks[2]))
    if fmt is None:
        raise ParseError(f"{path}: header has no format line")
    return elements, fmt, line_no


def _element_dtype(elem, path):
    if any(t == "list" for t, _ in elem["properties"]):
        raise UnsupportedProperty(
            f"{path}: list property in element '{elem['name']}' not supported")
    return np.dtype([(name, "<" + t) for t, name in elem["properties"]])


def _read_ply_element(f, elem, fmt, path, header_lines):
    dt = _element_dtype(elem, path)
    if fmt == "binary":
        nbytes = dt.itemsize * elem["count"]
        offset = f.tell()
        raw = f.read(nbytes)
        if len(raw) != nbytes:
            raise ParseError(
                f"{path}: truncated at byte {offset + len(raw)}, expected {nbytes} bytes of vertex data")
        return np.frombuffer(raw, dtype=dt)
    rows = np.empty(elem["count"], dtype=dt)
    names = [name for _, name in elem["properties"]]
    for i in range(elem["count"]):
        line_no = header_lines + 1 + i
        line = f.readline().decode("ascii", errors="replace").strip()
        toks = line.split()
        if len(toks) < len(names):
            raise ParseError(f"{path}:{line_no}: expected {len(names)} values, got {len(toks)}")
        try:
            for name, tok in zip(names, toks):
                rows[name][i] = float(tok)
        except ValueError:
            raise ParseError(f"{path}:{line_no}: bad numeric value") from None
    return rows


def _skip_ply_element(f, elem, fmt, path):
    if fmt == "ascii":
        for _ in range(elem["count"]):
            f.readline()
        return
    dt = _element_dtype(elem, path)  # raises UnsupportedProperty on list props
    f.seek(dt.itemsize * elem["count"], 1)


# ---------------------------------------------------------------------------
# PGM depth / mask images
# ---------------------------------------------------------------------------

def save_pgm(image, path):
    """Write a binary P5 PGM; dtype uint8 -> maxval 255, uint16 -> maxval 65535."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        maxval, data = 255, img.tobytes()
    elif img.dtype == np.uint16:
        maxval, data = 65535, img.astype(">u2").tobytes()  # PGM stores MSB first
    else:
        raise ValueError("image must be uint8 or uint16")
    if img.ndim != 2:
        raise ValueError("image must be 2-D")
    with open(path, "wb") as f:
        f.write(f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii"))
        f.write(data)


def load_pgm(path):
    """Read a binary P5 PGM; returns uint8 (maxval <= 255) or uint16."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic != b"P5":
            raise ParseError(f"{path}: not a binary PGM (magic {magic!r})")

        def token():
            tok = b""
            while True:
                ch = f.read(1)
                if not ch:
                    raise ParseError(f"{path}: truncated PGM header at byte {f.tell()}")
                if ch == b"#":
                    while ch not in (b"\n", b""):
                        ch = f.read(1)
                    continue
                if ch.isspace():
                    if tok:
                        return tok
                    continue
                tok += ch

        try:
            width, height, maxval = (int(token()) for _ in range(3))
        except ValueError:
            raise ParseError(f"{path}: non-numeric PGM header field") from None
        if maxval <= 0 or maxval > 65535:
            raise ParseError(f"{path}: unsupported maxval {maxval}")
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        nbytes = width * height * dtype.itemsize
        offset = f.tell()
        raw = f.read(nbytes)
        if len(raw) != nbytes:
            raise ParseError(f"{path}: truncated at byte {offset + len(raw)}, expected {nbytes} data bytes")
        img = np.frombuffer(raw, dtype=dtype).reshape(height, width)
        return img.astype(np.uint16) if maxval > 255 else img.copy()


def depth_to_cloud(depth, intrinsics: CameraIntrinsics, mask, class_id: int):
    """Back-project labeled pixels with positive depth to a metric cloud.

    Pixel (u, v) with stored depth d maps to
    (z (u - cx) / fx, z (v - cy) / fy, z) with z = d * depth_scale.
    """
    D = np.asarray(depth)
    M = np.asarray(mask)
    if D.shape != M.shape:
        raise DimensionMismatch(f"depth {D.shape} vs mask {M.shape}")
    sel = (M == class_id) & (D > 0)
    if not np.any(sel):
        raise EmptySegment(f"no pixels with class {class_id} and positive depth")
    v, u = np.nonzero(sel)
    z = D[sel].astype(float) * intrinsics.depth_scale
    x = z * (u - intrinsics.cx) / intrinsics.fx
    y = z * (v - intrinsics.cy) / intrinsics.fy
    return np.stack([x, y, z], axis=1)


# ---------------------------------------------------------------------------
# Synthetic scenes
# ---------------------------------------------------------------------------

def synth_scene(model, pose: RigidTransform, noise_sigma: float = 0.0,
                crop_fraction: float = 0.0, seed: int = 0,
                diameter: float | None = None, object_id: str = "object"):
    """Pose the model and degrade it: half-space crop plus Gaussian noise.

    The crop removes the floor(crop_fraction * N) points farthest along a
    seeded random direction (a deterministic stand-in for occlusion /
    partial views); noise is isotropic with sigma = noise_sigma * diameter.
    Point order of the survivors is preserved. Deterministic given the seed.
    """
    if not 0.0 <= crop_fraction < 1.0:
        raise ValueError("crop_fraction must be in [0, 1)")
    P = np.asarray(model, dtype=float)
    rng = np.random.default_rng(seed)
    pts = pose.apply(P)
    if crop_fraction > 0.0:
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        proj = pts @ direction
        n_drop = int(np.floor(crop_fraction * pts.shape[0]))
        if n_drop > 0:
            keep = np.sort(np.argsort(proj, kind="stable")[:pts.shape[0] - n_drop])
            pts = pts[keep]
    if noise_sigma > 0.0:
        d = object_diameter(P) if diameter is None else diameter
        pts = pts + rng.normal(0.0, noise_sigma * d, size=pts.shape)
    return pts, SceneAnnotation(object_id, pose, 1)


# ---------------------------------------------------------------------------
# Results / annotations text format
# ---------------------------------------------------------------------------

def _format_pose_fields(pose: RigidTransform):
    vals = list(pose.rotation.reshape(9)) + list(pose.translation)
    r = " ".join(f"{v:.9g}" for v in vals[:9])
    t = " ".join(f"{v:.9g}" for v in vals[9:])
    return f"R {r} t {t}"


def format_record(object_id: str, pose: RigidTransform, score=None, patch=None):
    line = f"obj {object_id} {_format_pose_fields(pose)}"
    if score is not None:
        line += f" score {score:.9g}"
    if patch is not None:
        line += f" patch {patch}"
    return line


def _parse_record(toks, path, line_no):
    def fail(msg):
        raise ParseError(f"{path}:{line_no}: {msg}")

    if len(toks) < 16 or toks[0] != "obj" or toks[2] != "R" or toks[12] != "t":
        fail("malformed record line")
    try:
        rot = np.array([float(v) for v in toks[3:12]]).reshape(3, 3)
        trans = np.array([float(v) for v in toks[13:16]])
    except ValueError:
        fail("bad numeric field")
    score = None
    patch = None
    rest = toks[16:]
    while rest:
        if rest[0] == "score" and len(rest) >= 2:
            try:
                score = float(rest[1])
            except ValueError:
                fail("bad score value")
        elif rest[0] == "patch" and len(rest) >= 2:
            try:
                patch = int(rest[1])
            except ValueError:
                fail("bad patch id")
        else:
            fail(f"unknown field '{rest[0]}'")
        rest = rest[2:]
    R = np.asarray(rot)
    if abs(np.linalg.det(R) - 1.0) > 1e-6 or np.abs(R @ R.T - np.eye(3)).max() > 1e-6:
        fail("rotation is not orthonormal with determinant +1")
    try:
        pose = RigidTransform(rot, trans)
    except InvalidRotation as exc:
        fail(str(exc))
    return toks[1], pose, score, patch


def save_results(path, detections=(), votes=(), metrics=(), comment="results"):
    """Write detections, optional per-vote records, and metric lines.

    detections iterate as objects with object_id / estimated / score
    attributes; votes as (object_id, pose, score, patch_id) tuples. The only
    timestamp lives in the leading comment; everything below it is
    deterministic for identical inputs.
    """
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# patchvote {comment} {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        for det in detections:
            f.write(format_record(det.object_id, det.estimated, score=det.score) + "\n")
        for object_id, pose, score, patch_id in votes:
            f.write(format_record(object_id, pose, score=score, patch=patch_id) + "\n")
        for name, value in metrics:
            f.write(f"metric {name} {value:.9g}\n")


def load_results(path):
    """Parse a results file; returns (pose_records, metrics).

    pose_records is a list of (object_id, pose, score, patch) with score and
    patch possibly None; metrics is a list of (name, value).
    """
    records = []
    metrics = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            toks = line.split()
            if not toks or toks[0].startswith("#"):
                continue
            if toks[0] == "metric":
                if len(toks) != 3:
                    raise ParseError(f"{path}:{line_no}: malformed metric line")
                try:
                    metrics.append((toks[1], float(toks[2])))
                except ValueError:
                    raise ParseError(f"{path}:{line_no}: bad metric value") from None
                continue
            records.append(_parse_record(toks, path, line_no))
    return records, metrics


def save_annotations(path, annotations):
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# patchvote annotations {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        for ann in annotations:
            f.write(format_record(ann.object_id, ann.gt_pose) + "\n")


def load_annotations(path):
    """Read ground-truth annotations; one SceneAnnotation per record line.

    instance_count is filled with the number of records sharing the object id.
    """
    records, _ = load_results(path)
    counts = {}
    for object_id, _, _, _ in records:
        counts[object_id] = counts.get(object_id, 0) + 1
    return [SceneAnnotation(object_id, pose, counts[object_id])
            for object_id, pose, _, _ in records]


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    """All pipeline tunables; parsed from `key = value` text and CLI flags."""
    radius_factor: float = 0.15      # patch radius as a fraction of the model diameter
    n_points: int = 256              # points per normalized patch
    k_neighbors: int = 8             # neighboring patches fused per center patch
    feature_dim: int = 2048          # descriptor dimension d_f
    grid_size: int = 8               # occupancy grid resolution per axis
    radial_bins: int = 32
    fusion_mode: str = "expected"    # sampled | expected | concat
    backend: str = "template"        # template | mlp
    num_patches: int = 3000          # database patches sampled on the model
    m_centers: int = 100             # scene patches per segment; 0 = density-matched
    kmeans_K: int = 10
    delta: float = 0.15              # pose-space merge / NMS threshold
    min_cluster_frac: float = 0.05
    icp_iters: int = 50
    icp_tol_factor: float = 1e-6     # ICP stop tolerance as a fraction of the diameter
    weight_votes: bool = False       # score clusters by confidence sum instead of count
    coeff: float = 0.1               # ADD(-S) correctness coefficient
    seed: int = 0
    depth_scale: float = 1e-3
    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        checks = [
            (0.0 < self.radius_factor <= 1.0, "radius_factor must be in (0, 1]"),
            (self.n_points >= 16, "n_points must be >= 16"),
            (self.k_neighbors >= 0, "k_neighbors must be >= 0"),
            (self.feature_dim >= 8, "feature_dim must be >= 8"),
            (self.grid_size >= 1, "grid_size must be >= 1"),
            (self.radial_bins >= 1, "radial_bins must be >= 1"),
            (self.fusion_mode in ("sampled", "expected", "concat"), "bad fusion_mode"),
            (self.backend in ("template", "mlp"), "bad backend"),
            (self.num_patches >= 1, "num_patches must be >= 1"),
            (self.m_centers >= 0, "m_centers must be >= 0 (0 = density-matched)"),
            (self.kmeans_K >= 1, "kmeans_K must be >= 1"),
            (self.delta > 0.0, "delta must be positive"),
            (0.0 <= self.min_cluster_frac < 1.0, "min_cluster_frac must be in [0, 1)"),
            (self.icp_iters >= 0, "icp_iters must be >= 0"),
            (self.icp_tol_factor > 0.0, "icp_tol_factor must be positive"),
            (0.0 < self.coeff, "coeff must be positive"),
            (self.depth_scale > 0.0, "depth_scale must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    def intrinsics(self) -> CameraIntrinsics:
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError("config does not define camera intrinsics (fx, fy)")
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.depth_scale)


_CONFIG_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _parse_config_value(name: str, raw: str):
    kind = _CONFIG_FIELDS[name]
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"bad boolean for {name}: {raw!r}")
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"bad integer for {name}: {raw!r}") from None
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"bad float for {name}: {raw!r}") from None
    return raw


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    """Parse a `key = value` config file; unknown keys are rejected."""
    overrides = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in _CONFIG_FIELDS:
                raise ConfigError(f"{path}:{line_no}: unknown key '{key}'")
            overrides[key] = _parse_config_value(key, raw)
    cfg = base if base is not None else RunConfig()
    return replace(cfg, **overrides)
