import numpy as np
import pytest

from patchvote.errors import NoClusterSurvives, NoCorrespondences
from patchvote.geometry import (
    RigidTransform,
    compose,
    from_vector,
    invert,
    object_diameter,
    random_transform,
    rotation_angle,
    to_vector,
)
from patchvote.shapes import make_freeform
from patchvote.voting import (
    PoseVote,
    aggregate_votes,
    cast_vote,
    icp_refine,
    pose_distance,
)


def rot_x(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


class TestCastVote:
    def test_identity_chain(self):
        vote = cast_vote(RigidTransform.identity(), np.zeros(6))
        assert rotation_angle(vote.pose.rotation) < 1e-12
        assert np.linalg.norm(vote.pose.translation) < 1e-12

    def test_pure_translation_chain(self):
        a = np.array([0.1, -0.2, 0.3])
        b = np.array([0.05, 0.4, -0.1])
        t_gl = RigidTransform(np.eye(3), a)
        vote = cast_vote(t_gl, np.concatenate([b, np.zeros(3)]))
        assert np.allclose(vote.pose.translation, -(a + b))
        assert np.allclose(vote.pose.rotation, np.eye(3))

    def test_frame_chain_recovers_true_pose(self):
        # synthetic chain: known object pose, exact local prediction
        rng = np.random.default_rng(0)
        for _ in range(20):
            true_pose = random_transform(rng, max_translation=0.5)
            t_ol = random_transform(rng, max_translation=0.2)  # OCF -> LPCF
            t_gl = compose(t_ol, invert(true_pose))            # GCF -> LPCF
            pred = to_vector(invert(t_ol))                     # LPCF -> OCF
            vote = cast_vote(t_gl, pred)
            # compare matrices directly: arccos cannot resolve angles < ~2e-8
            assert np.abs(vote.pose.rotation - true_pose.rotation).max() < 1e-9
            assert np.linalg.norm(vote.pose.translation - true_pose.translation) < 1e-9


class TestPoseDistance:
    D = 0.5

    def test_identical(self):
        T = random_transform(np.random.default_rng(1))
        assert pose_distance(T, T, self.D) == 0.0

    def test_half_turn(self):
        a = RigidTransform.identity()
        b = RigidTransform(rot_x(np.pi), np.zeros(3))
        assert pose_distance(a, b, self.D) == pytest.approx(1.0)

    def test_diameter_translation(self):
        a = RigidTransform.identity()
        b = RigidTransform(np.eye(3), [self.D, 0.0, 0.0])
        assert pose_distance(a, b, self.D) == pytest.approx(1.0)

    def test_symmetric_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            a, b = random_transform(rng), random_transform(rng)
            dab = pose_distance(a, b, self.D)
            dba = pose_distance(b, a, self.D)
            assert dab == pytest.approx(dba, abs=1e-12)
            assert dab >= 0.0


def jittered_votes(rng, base, n, trans_scale, angle_scale, diameter):
    votes = []
    for _ in range(n):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        wobble = from_vector(np.concatenate([
            rng.normal(scale=trans_scale * diameter, size=3), axis * abs(rng.normal(scale=angle_scale))]))
        votes.append(PoseVote(pose=compose(wobble, base)))
    return votes


class TestAggregateVotes:
    D = 0.4

    def test_all_identical_votes(self):
        T = random_transform(np.random.default_rng(3), max_translation=0.2)
        votes = [PoseVote(pose=T) for _ in range(30)]
        clusters = aggregate_votes(votes, K=5, delta=0.15, min_frac=0.05,
                                   diameter=self.D, seed=0)
        assert len(clusters) == 1
        assert sorted(clusters[0].members) == list(range(30))
        pose = clusters[0].pose(self.D)
        assert rotation_angle(pose.rotation, T.rotation) < 1e-9
        assert np.linalg.norm(pose.translation - T.translation) < 1e-9

    def test_two_tight_groups(self):
        rng = np.random.default_rng(4)
        a = RigidTransform(np.eye(3), [0.0, 0.0, 0.0])
        b = RigidTransform(rot_x(2.0), [3 * self.D, 0.0, 0.0])
        votes = (jittered_votes(rng, a, 100, 1e-3, 1e-3, self.D)
                 + jittered_votes(rng, b, 100, 1e-3, 1e-3, self.D))
        clusters = aggregate_votes(votes, K=5, delta=0.15, min_frac=0.05,
                                   diameter=self.D, seed=1)
        assert len(clusters) == 2
        sizes = sorted(len(c.members) for c in clusters)
        assert sizes == [100, 100]
        # brute-force grouping oracle: membership must split exactly at 100
        for c in clusters:
            groups = {i < 100 for i in c.members}
            assert len(groups) == 1

    def test_outliers_only_no_survivor(self):
        rng = np.random.default_rng(5)
        votes = [PoseVote(pose=random_transform(rng, max_translation=5 * self.D))
                 for _ in range(10)]
        with pytest.raises(NoClusterSurvives):
            aggregate_votes(votes, K=10, delta=0.05, min_frac=0.2,
                            diameter=self.D, seed=2)

    def test_deterministic_and_partition(self):
        rng = np.random.default_rng(6)
        base = random_transform(rng, max_translation=0.2)
        votes = jittered_votes(rng, base, 40, 5e-3, 5e-3, self.D)
        a = aggregate_votes(votes, K=4, delta=0.15, min_frac=0.05, diameter=self.D, seed=3)
        b = aggregate_votes(votes, K=4, delta=0.15, min_frac=0.05, diameter=self.D, seed=3)
        assert [c.members for c in a] == [c.members for c in b]
        all_members = sorted(i for c in a for i in c.members)
        assert len(all_members) == len(set(all_members))

    def test_confidence_weighting_flag(self):
        T = random_transform(np.random.default_rng(7), max_translation=0.1)
        votes = [PoseVote(pose=T, confidence=0.5) for _ in range(10)]
        plain = aggregate_votes(votes, K=2, delta=0.1, min_frac=0.0,
                                diameter=self.D, seed=0)
        weighted = aggregate_votes(votes, K=2, delta=0.1, min_frac=0.0,
                                   diameter=self.D, seed=0, weight_votes=True)
        assert plain[0].score == 10.0
        assert weighted[0].score == pytest.approx(5.0)

    def test_empty_votes(self):
        with pytest.raises(NoClusterSurvives):
            aggregate_votes([], K=3, delta=0.1, min_frac=0.1, diameter=self.D, seed=0)


class TestIcpRefine:
    @pytest.fixture(scope="class")
    def model(self):
        return make_freeform(1500, seed=21)

    def test_fixpoint_at_ground_truth(self, model):
        pose = random_transform(np.random.default_rng(8), max_translation=0.3)
        scene = pose.apply(model)
        refined, rmse = icp_refine(model, scene, pose, max_iters=20, tol=1e-12)
        assert rotation_angle(refined.rotation, pose.rotation) < 1e-9
        assert np.linalg.norm(refined.translation - pose.translation) < 1e-9
        assert rmse < 1e-12

    def test_converges_from_perturbed_start(self, model):
        d = object_diameter(model)
        rng = np.random.default_rng(9)
        pose = random_transform(rng, max_translation=0.3)
        scene = pose.apply(model)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        nudge = from_vector(np.concatenate([
            rng.normal(size=3) / np.sqrt(3) * 0.02 * d, axis * np.deg2rad(5.0)]))
        start = compose(nudge, pose)
        refined, _ = icp_refine(model, scene, start, max_iters=60, tol=1e-9 * d)
        assert rotation_angle(refined.rotation, pose.rotation) < np.deg2rad(0.1)
        assert np.linalg.norm(refined.translation - pose.translation) < 1e-4 * d

    def test_disjoint_clouds(self, model):
        far = model + np.array([100.0, 0.0, 0.0])
        with pytest.raises(NoCorrespondences):
            icp_refine(model, far, RigidTransform.identity(), max_iters=5)

    def test_rmse_monotone(self, model):
        d = object_diameter(model)
        rng = np.random.default_rng(10)
        pose = random_transform(rng, max_translation=0.2)
        scene, _ = __import__("patchvote.dataio", fromlist=["synth_scene"]).synth_scene(
            model, pose, noise_sigma=0.005, crop_fraction=0.3, seed=4, diameter=d)
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        start = compose(from_vector(np.concatenate([
            rng.normal(size=3) / np.sqrt(3) * 0.03 * d, axis * np.deg2rad(8.0)])), pose)
        log = []
        icp_refine(model, scene, start, max_iters=40, tol=1e-9 * d, rmse_log=log)
        assert len(log) >= 2
        assert all(a >= b - 1e-15 for a, b in zip(log, log[1:]))
