"""Pose-error metrics and detection scoring: ADD, ADD-S, accuracy at a
diameter fraction, and precision/recall/F1 over matched detections."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidTransform, object_diameter


@dataclass
class DetectionResult:
    object_id: str
    estimated: RigidTransform
    score: float = 0.0


@dataclass
class ObjectEval:
    n_gt: int
    n_det: int
    tp: int
    add_accuracy: float
    precision: float
    recall: float
    f1: float


@dataclass
class EvalReport:
    per_object: dict[str, ObjectEval] = field(default_factory=dict)

    def overall(self) -> ObjectEval:
        n_gt = sum(o.n_gt for o in self.per_object.values())
        n_det = sum(o.n_det for o in self.per_object.values())
        tp = sum(o.tp for o in self.per_object.values())
        p = tp / n_det if n_det else 0.0
        r = tp / n_gt if n_gt else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return ObjectEval(n_gt, n_det, tp, r, p, r, f1)

    def render(self) -> str:
        header = f"{'object':<12} {'n_gt':>5} {'n_det':>5} {'tp':>4} {'add_acc':>8} {'prec':>6} {'recall':>7} {'f1':>6}"
        lines = [header, "-" * len(header)]
        for name in sorted(self.per_object):
            o = self.per_object[name]
            lines.append(f"{name:<12} {o.n_gt:>5} {o.n_det:>5} {o.tp:>4} "
                         f"{o.add_accuracy:>8.3f} {o.precision:>6.3f} {o.recall:>7.3f} {o.f1:>6.3f}")
        o = self.overall()
        lines.append("-" * len(header))
        lines.append(f"{'ALL':<12} {o.n_gt:>5} {o.n_det:>5} {o.tp:>4} "
                     f"{o.add_accuracy:>8.3f} {o.precision:>6.3f} {o.recall:>7.3f} {o.f1:>6.3f}")
        return "\n".join(lines)

    def metric_records(self):
        """Machine-readable (name, value) pairs for the results file format."""
        out = []
        for name in sorted(self.per_object):
            o = self.per_object[name]
            out += [(f"{name}.add_accuracy", o.add_accuracy),
                    (f"{name}.precision", o.precision),
                    (f"{name}.recall", o.recall),
                    (f"{name}.f1", o.f1)]
        o = self.overall()
        out += [("all.add_accuracy", o.add_accuracy), ("all.precision", o.precision),
                ("all.recall", o.recall), ("all.f1", o.f1)]
        return out


def add_metric(model, gt: RigidTransform, est: RigidTransform) -> float:
    """Mean distance between corresponding model points under the two poses."""
    P = np.asarray(model, dtype=float)
    return float(np.linalg.norm(gt.apply(P) - est.apply(P), axis=1).mean())


def adds_metric(model, gt: RigidTransform, est: RigidTransform) -> float:
    """Closest-point variant for symmetric objects: mean over gt-posed points
    of the distance to the nearest est-posed point."""
    P = np.asarray(model, dtype=float)
    tree = cKDTree(est.apply(P))
    d, _ = tree.query(gt.apply(P))
    return float(d.mean())


def pose_error(model, gt, est, symmetric: bool) -> float:
    return adds_metric(model, gt, est) if symmetric else add_metric(model, gt, est)


def add_accuracy(results, coeff: float = 0.1) -> float:
    """Fraction of (model, gt, est, symmetric) cases whose ADD(-S) is below
    coeff times that model's diameter."""
    if coeff <= 0:
        raise ValueError("coeff must be positive")
    results = list(results)
    if not results:
        return 0.0
    diameters: dict[int, float] = {}
    hits = 0
    for model, gt, est, symmetric in results:
        key = id(model)
        if key not in diameters:
            diameters[key] = object_diameter(model)
        if pose_error(model, gt, est, symmetric) < coeff * diameters[key]:
            hits += 1
    return hits / len(results)


def match_detections(detections, annotations, models, coeff: float = 0.1):
    """Greedy matching by score: each ground truth claims at most one detection.

    detections: DetectionResult list; annotations: SceneAnnotation-like list
    with object_id and gt_pose; models: dict object_id -> (points, diameter,
    symmetric flag). Returns a list of (detection, matched annotation or None).
    """
    remaining = {}
    for i, ann in enumerate(annotations):
        remaining.setdefault(ann.object_id, []).append(i)
    matched = [None] * len(detections)
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    ann_list = list(annotations)
    for i in order:
        det = detections[i]
        if det.object_id not in models:
            continue
        pts, diameter, symmetric = models[det.object_id]
        candidates = remaining.get(det.object_id, [])
        best_j, best_err = None, None
        for j in candidates:
            err = pose_error(pts, ann_list[j].gt_pose, det.estimated, symmetric)
            if err < coeff * diameter and (best_err is None or err < best_err):
                best_j, best_err = j, err
        if best_j is not None:
            matched[i] = best_j
            candidates.remove(best_j)
    return [(detections[i], None if matched[i] is None else ann_list[matched[i]])
            for i in range(len(detections))]


def f1_score(detections, annotations, models, coeff: float = 0.1):
    """(precision, recall, F1) with correctness = ADD(-S) < coeff * diameter."""
    pairs = match_detections(detections, annotations, models, coeff)
    tp = sum(1 for _, ann in pairs if ann is not None)
    n_det = len(detections)
    n_gt = len(list(annotations))
    precision = tp / n_det if n_det else 0.0
    recall = tp / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def evaluate_detections(detections, annotations, models, coeff: float = 0.1) -> EvalReport:
    """Per-object report; add_accuracy is the fraction of ground-truth
    instances recovered within the threshold (equals recall under greedy
    one-to-one matching)."""
    report = EvalReport()
    ids = sorted({ann.object_id for ann in annotations}
                 | {det.object_id for det in detections})
    for object_id in ids:
        dets = [d for d in detections if d.object_id == object_id]
        anns = [a for a in annotations if a.object_id == object_id]
        pairs = match_detections(dets, anns, models, coeff) if object_id in models else []
        tp = sum(1 for _, ann in pairs if ann is not None)
        p = tp / len(dets) if dets else 0.0
        r = tp / len(anns) if anns else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        report.per_object[object_id] = ObjectEval(
            n_gt=len(anns), n_det=len(dets), tp=tp,
            add_accuracy=r, precision=p, recall=r, f1=f1)
    return report
