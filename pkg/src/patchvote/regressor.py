"""Fused-feature -> local-transform regression.

Two interchangeable backends implement the same predict contract:

* TemplateMatcher: nearest stored database record by cosine similarity;
  exact on patches it was built from, and the default backend.
* MLPRegressor: a four-layer feedforward head (1024/512/256/6 by default)
  trained with Adam on mean squared error over the 6-D targets, with the
  translation part expressed in object-diameter units so both halves of the
  target are O(1).

Both emit a PredictedTransform whose vector decodes to a valid transform.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DatabaseTooSmall,
    DimensionMismatch,
    EmptyDatabase,
    ParseError,
    UnknownModel,
)
from .features import compute_descriptor, fuse_features
from .geometry import from_vector, rotation_vector

_WEIGHTS_MAGIC = b"PVWT"
_WEIGHTS_VERSION = 1

# training targets whose rotation sits this close to the axis-angle
# singularity are excluded (wrap discontinuity would poison the loss)
NEAR_PI_EXCLUSION = 0.1


@dataclass
class RegressorConfig:
    epochs: int = 600
    batch_size: int = 32
    learning_rate: float = 1e-3
    decay_epochs: tuple = (80, 120)   # learning rate x0.1 at each
    layer_sizes: tuple = (1024, 512, 256, 6)
    seed: int = 0

    def __post_init__(self):
        if self.layer_sizes[-1] != 6:
            raise ValueError("final layer must have 6 outputs")
        if self.epochs > 0 and any(e >= self.epochs for e in self.decay_epochs):
            # decays after the run's end are simply never reached; only
            # flag clearly inconsistent configs
            pass
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class PredictedTransform:
    vector: np.ndarray      # (6,): translation in meters, axis-angle rotation
    confidence: float


def record_descriptors(db, d_f: int, grid: int = 8, radial_bins: int = 32) -> np.ndarray:
    """Descriptor of every database record's normalized patch, as (N, d_f)."""
    return np.stack([compute_descriptor(rec.normalized_points, d_f, grid, radial_bins)
                     for rec in db.records])


def fuse_record_features(db, descriptors: np.ndarray, fusion_mode: str = "expected",
                         seed: int = 0) -> np.ndarray:
    """Fuse each record's descriptor with its neighbors' (weights from the db).

    The expected and concat modes run as one batched gather over all records;
    sampled mode draws per-record masks (seed + record index) in a loop.
    """
    counts = {len(rec.neighbor_ids) for rec in db.records}
    if fusion_mode != "sampled" and len(counts) == 1:
        rows = np.array([[i] + list(rec.neighbor_ids)
                         for i, rec in enumerate(db.records)])      # (N, k+1)
        F = descriptors[rows]                                       # (N, k+1, d)
        W = np.stack([rec.neighbor_weights for rec in db.records])  # (N, k+1)
        if fusion_mode == "expected":
            return (W[:, :, None] * F).max(axis=1)
        return F.mean(axis=1)  # concat: fixed block-averaging projection
    fused = np.empty_like(descriptors)
    for i, rec in enumerate(db.records):
        F = descriptors[[i] + list(rec.neighbor_ids)]
        fused[i] = fuse_features(F, rec.neighbor_weights, mode=fusion_mode,
                                 seed=seed + i)
    return fused


class TemplateMatcher:
    """Nearest-record lookup by cosine similarity over fused features."""

    def __init__(self, features: np.ndarray, gt_vectors: np.ndarray):
        F = np.asarray(features, dtype=float)
        if F.ndim != 2 or F.shape[0] == 0:
            raise EmptyDatabase("matcher needs at least one stored feature")
        norms = np.linalg.norm(F, axis=1, keepdims=True)
        norms[norms == 0.0] = 1.0
        self._features = F / norms
        self._gt = np.asarray(gt_vectors, dtype=float)
        self.d_f = F.shape[1]

    @classmethod
    def from_database(cls, db, d_f: int = 2048, grid: int = 8, radial_bins: int = 32,
                      fusion_mode: str = "expected", seed: int = 0) -> "TemplateMatcher":
        desc = record_descriptors(db, d_f, grid, radial_bins)
        fused = fuse_record_features(db, desc, fusion_mode, seed)
        return cls(fused, np.stack([rec.gt_vector for rec in db.records]))

    def _similarities(self, fused: np.ndarray) -> np.ndarray:
        q = np.asarray(fused, dtype=float)
        if q.shape[-1] != self.d_f:
            raise DimensionMismatch(f"query dim {q.shape[-1]} vs matcher dim {self.d_f}")
        nrm = np.linalg.norm(q, axis=-1, keepdims=True)
        nrm[nrm == 0.0] = 1.0
        return (q / nrm) @ self._features.T

    def predict(self, fused) -> PredictedTransform:
        """Ties break toward the lowest record index (argmax convention)."""
        sims = self._similarities(np.asarray(fused, dtype=float).reshape(1, -1))[0]
        best = int(np.argmax(sims))
        return PredictedTransform(vector=self._gt[best].copy(),
                                  confidence=float(sims[best]))

    def predict_batch(self, fused: np.ndarray):
        sims = self._similarities(fused)
        best = sims.argmax(axis=1)
        return [PredictedTransform(vector=self._gt[b].copy(), confidence=float(sims[i, b]))
                for i, b in enumerate(best)]


# ---------------------------------------------------------------------------
# Learned head
# ---------------------------------------------------------------------------

_ACT_CLIP = 1e6  # keeps a runaway forward pass finite


class MLPRegressor:
    """Fully-connected regression head; pure numpy, deterministic per seed."""

    def __init__(self, d_f: int, diameter: float, cfg: RegressorConfig | None = None):
        self.cfg = cfg or RegressorConfig()
        self.d_f = d_f
        self.diameter = float(diameter)
        rng = np.random.default_rng(self.cfg.seed)
        sizes = (d_f,) + tuple(self.cfg.layer_sizes)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            self.weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        # small final layer so the untrained head predicts near zero
        self.weights[-1] *= 0.01

    def forward(self, X: np.ndarray, keep: bool = False):
        h = np.asarray(X, dtype=float)
        acts = [h]
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.clip(h @ W + b, 0.0, _ACT_CLIP)
            acts.append(h)
        out = h @ self.weights[-1] + self.biases[-1]
        return (out, acts) if keep else out

    def predict_scaled(self, X: np.ndarray) -> np.ndarray:
        """Raw network output: translation in diameter units, axis-angle rotation."""
        return self.forward(np.atleast_2d(X))

    def predict(self, fused) -> PredictedTransform:
        q = np.asarray(fused, dtype=float).reshape(1, -1)
        if q.shape[1] != self.d_f:
            raise DimensionMismatch(f"query dim {q.shape[1]} vs head dim {self.d_f}")
        out = self.forward(q)[0]
        if not np.all(np.isfinite(out)):
            raise ValueError("regressor produced a non-finite output")
        vector = np.concatenate([out[:3] * self.diameter, _canonical_rotvec(out[3:])])
        return PredictedTransform(vector=vector, confidence=1.0)

    def predict_batch(self, fused: np.ndarray):
        return [self.predict(row) for row in np.atleast_2d(fused)]

    # -- persistence ---------------------------------------------------

    def save(self, path):
        with open(path, "wb") as f:
            f.write(_WEIGHTS_MAGIC + struct.pack("<I", _WEIGHTS_VERSION))
            f.write(struct.pack("<Id", self.d_f, self.diameter))
            f.write(struct.pack("<I", len(self.weights)))
            for W, b in zip(self.weights, self.biases):
                f.write(struct.pack("<II", W.shape[0], W.shape[1]))
                f.write(np.ascontiguousarray(W, dtype="<f4").tobytes())
                f.write(np.ascontiguousarray(b, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "MLPRegressor":
        def read(f, n):
            raw = f.read(n)
            if len(raw) != n:
                raise ParseError(f"{path}: truncated weights file at byte {f.tell()}")
            return raw

        with open(path, "rb") as f:
            if read(f, 4) != _WEIGHTS_MAGIC:
                raise ParseError(f"{path}: not a weights file")
            (version,) = struct.unpack("<I", read(f, 4))
            if version != _WEIGHTS_VERSION:
                raise ParseError(f"{path}: unsupported weights version {version}")
            d_f, diameter = struct.unpack("<Id", read(f, struct.calcsize("<Id")))
            (n_layers,) = struct.unpack("<I", read(f, 4))
            weights, biases = [], []
            for _ in range(n_layers):
                rows, cols = struct.unpack("<II", read(f, 8))
                W = np.frombuffer(read(f, 4 * rows * cols), dtype="<f4").reshape(rows, cols)
                b = np.frombuffer(read(f, 4 * cols), dtype="<f4")
                weights.append(W.astype(float))
                biases.append(b.astype(float))
        sizes = tuple(W.shape[1] for W in weights)
        model = cls(int(d_f), float(diameter), RegressorConfig(layer_sizes=sizes))
        model.weights = weights
        model.biases = biases
        return model


def _canonical_rotvec(rv: np.ndarray) -> np.ndarray:
    """Wrap an unconstrained rotation vector into the canonical [0, pi] chart."""
    angle = float(np.linalg.norm(rv))
    if angle <= np.pi:
        return rv
    return rotation_vector(from_vector(np.concatenate([np.zeros(3), rv])).rotation)


def regression_targets(db, record_indices=None) -> np.ndarray:
    """Ground-truth 6-vectors scaled for training: translation / diameter."""
    idx = range(len(db.records)) if record_indices is None else record_indices
    out = []
    for i in idx:
        gt = db.records[i].gt_vector
        out.append(np.concatenate([gt[:3] / db.diameter, gt[3:]]))
    return np.stack(out)


def train_regressor(db, cfg: RegressorConfig, features: np.ndarray):
    """Train the MLP head on a database's fused features.

    `features` must be the fused record features (same order as db.records)
    computed with the exact configuration used later at inference. The
    database's stored 4:1 split supplies train/validation indices; training
    records whose target rotation is within NEAR_PI_EXCLUSION of pi are
    excluded and counted. Returns (model, history) where history rows are
    (epoch, train_loss, val_loss); epoch 0 is the untrained loss.
    """
    X = np.asarray(features, dtype=float)
    n = X.shape[0]
    if n != len(db.records):
        raise DimensionMismatch("features must align with db.records")
    if n < 10 * cfg.batch_size:
        raise DatabaseTooSmall(
            f"{n} records < 10 * batch_size ({10 * cfg.batch_size})")
    Y = regression_targets(db)
    angles = np.linalg.norm(Y[:, 3:], axis=1)
    usable = angles <= np.pi - NEAR_PI_EXCLUSION
    train_ids = np.asarray([i for i in db.train_ids if usable[i]], dtype=int)
    excluded = int(len(db.train_ids) - len(train_ids))
    val_ids = np.asarray(db.val_ids, dtype=int)
    model = MLPRegressor(X.shape[1], db.diameter, cfg)
    adam_m = [np.zeros_like(W) for W in model.weights] + [np.zeros_like(b) for b in model.biases]
    adam_v = [np.zeros_like(W) for W in model.weights] + [np.zeros_like(b) for b in model.biases]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    rng = np.random.default_rng(cfg.seed + 1)

    def loss_on(ids):
        if len(ids) == 0:
            return 0.0
        pred = model.forward(X[ids])
        return float(((pred - Y[ids]) ** 2).mean())

    history = [(0, loss_on(train_ids), loss_on(val_ids))]
    lr = cfg.learning_rate
    for epoch in range(1, cfg.epochs + 1):
        if epoch - 1 in cfg.decay_epochs:
            lr *= 0.1
        order = rng.permutation(train_ids)
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            Xb, Yb = X[batch], Y[batch]
            out, acts = model.forward(Xb, keep=True)
            grad_out = 2.0 * (out - Yb) / out.size
            grads_W, grads_b = [], []
            delta = grad_out
            for layer in range(len(model.weights) - 1, -1, -1):
                a_in = acts[layer]
                grads_W.append(a_in.T @ delta)
                grads_b.append(delta.sum(axis=0))
                if layer > 0:
                    gate = (acts[layer] > 0.0) & (acts[layer] < _ACT_CLIP)
                    delta = (delta @ model.weights[layer].T) * gate
            grads_W.reverse()
            grads_b.reverse()
            step += 1
            params = model.weights + model.biases
            grads = grads_W + grads_b
            for p, g, m, v in zip(params, grads, adam_m, adam_v):
                m *= beta1
                m += (1 - beta1) * g
                v *= beta2
                v += (1 - beta2) * g * g
                m_hat = m / (1 - beta1 ** step)
                v_hat = v / (1 - beta2 ** step)
                p -= lr * m_hat / (np.sqrt(v_hat) + eps)
        history.append((epoch, loss_on(train_ids), loss_on(val_ids)))
    return model, {"history": history, "excluded_near_pi": excluded}


class RegressorBank:
    """Model-id keyed registry implementing the shared predict contract."""

    def __init__(self):
        self._backends = {}

    def register(self, model_id: str, backend):
        self._backends[model_id] = backend

    def predict(self, fused, model_id: str) -> PredictedTransform:
        if model_id not in self._backends:
            raise UnknownModel(f"no regressor registered for '{model_id}'")
        return self._backends[model_id].predict(fused)
