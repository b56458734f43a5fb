import numpy as np
import pytest

from patchvote.dataio import SceneAnnotation
from patchvote.geometry import (
    RigidTransform,
    compose,
    object_diameter,
    random_transform,
)
from patchvote.metrics import (
    DetectionResult,
    add_accuracy,
    add_metric,
    adds_metric,
    evaluate_detections,
    f1_score,
)


def rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@pytest.fixture(scope="module")
def model():
    rng = np.random.default_rng(0)
    return rng.normal(size=(400, 3)) * [0.08, 0.05, 0.03]


def brute_force_adds(model, gt, est):
    a = gt.apply(model)
    b = est.apply(model)
    d = np.linalg.norm(a[:, None] - b[None], axis=-1)
    return d.min(axis=1).mean()


class TestAdd:
    def test_exact_pose_zero(self, model):
        T = random_transform(np.random.default_rng(1))
        assert add_metric(model, T, T) == 0.0

    def test_pure_shift_is_distance(self, model):
        gt = random_transform(np.random.default_rng(2))
        shift = RigidTransform(np.eye(3), [0.017, 0.0, 0.0])
        est = compose(shift, gt)
        assert add_metric(model, gt, est) == pytest.approx(0.017, abs=1e-12)

    def test_matches_direct_summation(self, model):
        rng = np.random.default_rng(3)
        gt, est = random_transform(rng), random_transform(rng)
        direct = np.mean([np.linalg.norm(gt.apply(p) - est.apply(p)) for p in model])
        assert add_metric(model, gt, est) == pytest.approx(direct, rel=1e-12)

    def test_left_composition_invariance(self, model):
        rng = np.random.default_rng(4)
        gt, est, Q = (random_transform(rng) for _ in range(3))
        a = add_metric(model, gt, est)
        b = add_metric(model, compose(Q, gt), compose(Q, est))
        assert a == pytest.approx(b, abs=1e-9)


class TestAddS:
    def test_exact_pose_zero(self, model):
        T = random_transform(np.random.default_rng(5))
        assert adds_metric(model, T, T) == 0.0

    def test_never_exceeds_add(self, model):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            gt, est = random_transform(rng), random_transform(rng)
            assert adds_metric(model, gt, est) <= add_metric(model, gt, est) + 1e-12

    def test_matches_brute_force(self, model):
        rng = np.random.default_rng(7)
        for _ in range(5):
            gt, est = random_transform(rng), random_transform(rng)
            assert adds_metric(model, gt, est) == pytest.approx(
                brute_force_adds(model, gt, est), rel=1e-12)

    def test_symmetry_axis_rotation(self):
        # cylinder surface: rotating about its axis leaves ADD-S near zero
        # while ADD sees the full displacement
        theta = np.linspace(0, 2 * np.pi, 72, endpoint=False)
        levels = np.linspace(-0.02, 0.02, 10)
        tt, zz = np.meshgrid(theta, levels)
        ring = np.column_stack([0.05 * np.cos(tt.ravel()), 0.05 * np.sin(tt.ravel()),
                                zz.ravel()])
        gt = RigidTransform.identity()
        est = RigidTransform(rot_z(np.pi / 3), np.zeros(3))
        assert add_metric(ring, gt, est) > 0.01
        assert adds_metric(ring, gt, est) < 1e-3


class TestAddAccuracy:
    def test_all_perfect(self, model):
        T = random_transform(np.random.default_rng(8))
        results = [(model, T, T, False)] * 5
        assert add_accuracy(results, 0.1) == 1.0

    def test_all_shifted_beyond(self, model):
        d = object_diameter(model)
        gt = RigidTransform.identity()
        est = RigidTransform(np.eye(3), [0.2 * d, 0.0, 0.0])
        results = [(model, gt, est, False)] * 4
        assert add_accuracy(results, 0.1) == 0.0

    def test_mixed_matches_hand_count(self, model):
        d = object_diameter(model)
        gt = RigidTransform.identity()
        results = []
        offsets = [0.01, 0.05, 0.09, 0.11, 0.15, 0.02, 0.3, 0.08, 0.25, 0.099]
        for f in offsets:
            est = RigidTransform(np.eye(3), [f * d, 0.0, 0.0])
            results.append((model, gt, est, False))
        expected = sum(1 for f in offsets if f < 0.1) / len(offsets)
        assert add_accuracy(results, 0.1) == pytest.approx(expected)


class TestF1:
    def _models(self, model):
        return {"obj": (model, object_diameter(model), False)}

    def test_perfect_single_detection(self, model):
        T = random_transform(np.random.default_rng(9))
        dets = [DetectionResult("obj", T, score=1.0)]
        anns = [SceneAnnotation("obj", T)]
        assert f1_score(dets, anns, self._models(model)) == (1.0, 1.0, 1.0)

    def test_half_correct(self, model):
        d = object_diameter(model)
        rng = np.random.default_rng(10)
        T1, T2 = random_transform(rng), random_transform(rng)
        far = compose(RigidTransform(np.eye(3), [d, 0, 0]), T2)
        dets = [DetectionResult("obj", T1, 0.9), DetectionResult("obj", far, 0.8)]
        anns = [SceneAnnotation("obj", T1), SceneAnnotation("obj", T2)]
        p, r, f1 = f1_score(dets, anns, self._models(model))
        assert (p, r, f1) == (0.5, 0.5, 0.5)

    def test_each_gt_claimed_once(self, model):
        T = random_transform(np.random.default_rng(11))
        dets = [DetectionResult("obj", T, 0.9), DetectionResult("obj", T, 0.8)]
        anns = [SceneAnnotation("obj", T)]
        p, r, f1 = f1_score(dets, anns, self._models(model))
        assert p == 0.5 and r == 1.0

    def test_degenerate_zero(self, model):
        assert f1_score([], [], self._models(model)) == (0.0, 0.0, 0.0)

    def test_order_invariant_with_distinct_scores(self, model):
        rng = np.random.default_rng(12)
        T1, T2 = random_transform(rng), random_transform(rng)
        dets = [DetectionResult("obj", T1, 0.9), DetectionResult("obj", T2, 0.8)]
        anns = [SceneAnnotation("obj", T2), SceneAnnotation("obj", T1)]
        a = f1_score(dets, anns, self._models(model))
        b = f1_score(list(reversed(dets)), anns, self._models(model))
        assert a == b


class TestEvalReport:
    def test_report_fields(self, model):
        rng = np.random.default_rng(13)
        T = random_transform(rng)
        models = {"obj": (model, object_diameter(model), False)}
        dets = [DetectionResult("obj", T, 1.0)]
        anns = [SceneAnnotation("obj", T)]
        report = evaluate_detections(dets, anns, models)
        o = report.per_object["obj"]
        assert o.f1 == 1.0 and o.add_accuracy == 1.0
        text = report.render()
        assert "obj" in text and "ALL" in text
        names = [n for n, _ in report.metric_records()]
        assert "obj.f1" in names and "all.add_accuracy" in names

    def test_bounds(self, model):
        rng = np.random.default_rng(14)
        models = {"obj": (model, object_diameter(model), False)}
        dets = [DetectionResult("obj", random_transform(rng), 0.5) for _ in range(3)]
        anns = [SceneAnnotation("obj", random_transform(rng)) for _ in range(2)]
        report = evaluate_detections(dets, anns, models)
        o = report.per_object["obj"]
        for value in (o.precision, o.recall, o.f1, o.add_accuracy):
            assert 0.0 <= value <= 1.0
