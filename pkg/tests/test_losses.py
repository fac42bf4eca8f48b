import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridmem.errors import DataError, DegenerateError, PoseError
from hybridmem.geometry import PoseSE3, random_rotation, se3_compose
from hybridmem.gradcheck import random_batch
from hybridmem.losses import (LossWeights, SupervisionBatch, default_pairs, global_pointmap_loss, huber,
                              local_objective, local_pointmap_loss, pose_loss, rotation_distance,
                              solve_sequence_scale, total_loss, weighted_lower_median)
from hybridmem.numerics import make_rng


def _perfect(rng, n=3):
    b = random_batch(rng, n_frames=n)
    return SupervisionBatch(b.gt_points.copy(), b.gt_points, list(b.gt_poses), b.gt_poses, pairs=b.pairs)


class TestScale:
    def test_perfect_is_one(self, rng):
        assert solve_sequence_scale(_perfect(rng)) == 1.0

    def test_double_prediction(self, rng):
        b = _perfect(rng)
        b.pred_points = 2.0 * b.gt_points
        assert solve_sequence_scale(b) == 0.5

    @pytest.mark.parametrize("seed", range(10))
    def test_beats_grid_search(self, seed):
        b = random_batch(make_rng(seed))
        s = solve_sequence_scale(b)
        best = local_objective(b, s)
        grid = np.logspace(-2, 2, 10_000)
        assert all(best <= local_objective(b, g) + 1e-12 for g in grid)

    def test_scale_invariance_at_optimum(self, rng):
        b = random_batch(rng)
        l0 = local_pointmap_loss(b, solve_sequence_scale(b))
        b.pred_points = 3.7 * b.pred_points
        assert abs(local_pointmap_loss(b, solve_sequence_scale(b)) - l0) < 1e-12

    def test_all_invalid(self, rng):
        b = random_batch(rng)
        b.valid[:] = False
        with pytest.raises(DegenerateError):
            solve_sequence_scale(b)

    def test_weighted_lower_median(self):
        assert weighted_lower_median(np.array([3.0, 1.0, 2.0]), np.ones(3)) == 2.0
        assert weighted_lower_median(np.array([1.0, 4.0]), np.ones(2)) == 1.0
        assert weighted_lower_median(np.array([1.0, 4.0]), np.array([1.0, 3.0])) == 4.0


class TestLocal:
    def test_perfect(self, rng):
        assert local_pointmap_loss(_perfect(rng), 1.0) == 0.0

    def test_hand_evaluation(self):
        b = SupervisionBatch(np.array([1.0, 0, 0]).reshape(1, 1, 1, 3), np.zeros((1, 1, 1, 3)),
                             [PoseSE3.identity()], [PoseSE3.identity()], gt_depth=np.full((1, 1, 1), 2.0))
        assert local_pointmap_loss(b, 1.0) == 0.5

    def test_doubling_depth_halves_loss(self, rng):
        b = random_batch(rng)
        l0 = local_pointmap_loss(b, 1.0)
        b.gt_depth = 2.0 * b.gt_points[..., 2]
        assert local_pointmap_loss(b, 1.0) == pytest.approx(l0 / 2, rel=1e-14)

    def test_bad_depth(self, rng):
        b = random_batch(rng)
        b.gt_points[0, 0, 0, 2] = -1.0
        with pytest.raises(DataError):
            local_pointmap_loss(b, 1.0)


class TestPose:
    def test_perfect(self, rng):
        assert pose_loss(_perfect(rng), 1.0) == 0.0

    def test_quadratic_huber_branch(self):
        gt = [PoseSE3.identity(), PoseSE3(np.eye(3), [1.0, 0.0, 0.0])]
        pred = [PoseSE3.identity(), PoseSE3(np.eye(3), [1.3, 0.4, 0.0])]
        pts = np.ones((2, 1, 1, 3))
        r = np.hypot(0.3, 0.4)
        assert pose_loss(SupervisionBatch(pts, pts, pred, gt), 1.0) == pytest.approx(10.0 * r * r / 2, abs=1e-14)

    def test_linear_huber_branch(self):
        assert huber(3.0, 1.0) == 2.5 and huber(0.5, 1.0) == 0.125

    def test_global_gauge_invariance(self, rng):
        b = random_batch(rng)
        l0 = pose_loss(b, 0.8)
        g = PoseSE3.random(rng)
        b.pred_poses = [se3_compose(g, p) for p in b.pred_poses]
        b.gt_poses = [se3_compose(g, p) for p in b.gt_poses]
        assert abs(pose_loss(b, 0.8) - l0) < 1e-12

    def test_invalid_rotation(self, rng):
        b = random_batch(rng)
        b.pred_poses[0] = PoseSE3(1.5 * np.eye(3), np.zeros(3))
        with pytest.raises(PoseError):
            pose_loss(b, 1.0)

    def test_geodesic_option(self, rng):
        r = random_rotation(rng)
        assert rotation_distance(r, r, "geodesic") == pytest.approx(0.0, abs=1e-7)
        rz = np.array([[0.0, -1, 0], [1, 0, 0], [0, 0, 1]])
        assert rotation_distance(np.eye(3), rz, "geodesic") == pytest.approx(np.pi / 2)
        assert rotation_distance(np.eye(3), rz) == pytest.approx(2.0)

    def test_default_pairs(self):
        assert default_pairs([[0, 1, 2], [2, 3]], [(1, 2)]) == [(0, 1), (1, 2), (2, 3)]


class TestGlobal:
    def test_perfect(self, rng):
        assert global_pointmap_loss(_perfect(rng), 1.0) == 0.0

    def test_identity_poses_direct_sum(self, rng):
        b = random_batch(rng)
        b.pred_poses = b.gt_poses = [PoseSE3.identity()] * 3
        s = 0.9
        direct = sum(abs(s * b.pred_points[idx] - b.gt_points[idx]).sum() for idx in np.ndindex(b.valid.shape))
        assert global_pointmap_loss(b, s) * b.n_valid() == pytest.approx(direct, rel=1e-13)

    def test_pure_translation_error(self, rng):
        b = _perfect(rng)
        d = np.array([0.3, -0.2, 0.1])
        b.pred_poses = [PoseSE3(p.R, p.t + d) for p in b.gt_poses]
        assert global_pointmap_loss(b, 1.0) / 3 == pytest.approx(np.abs(d).mean(), rel=1e-12)


class TestTotal:
    def test_defaults(self):
        w = LossWeights()
        assert (w.lambda_rot, w.lambda_trans, w.lambda_global) == (0.1, 10.0, 1.0)

    def test_perfect(self, rng):
        total, parts = total_loss(_perfect(rng))
        assert total == 0.0 and parts["local"] == parts["pose"] == parts["global"] == 0.0

    def test_breakdown_recombines(self, rng):
        w = LossWeights(lambda_global=0.7)
        total, parts = total_loss(random_batch(rng), w)
        assert total == parts["local"] + parts["pose"] + w.lambda_global * parts["global"]
        assert parts["total"] == total

    def test_no_global_weight(self, rng):
        total, parts = total_loss(random_batch(rng), LossWeights(lambda_global=0.0))
        assert total == parts["local"] + parts["pose"]

    def test_weight_validation(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_rot=-1)
        with pytest.raises(ValueError):
            LossWeights(rot_kind="quaternion")


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), noise=st.floats(0.0, 1.0))
def test_terms_non_negative(seed, noise):
    b = random_batch(make_rng(seed), noise=noise)
    _, parts = total_loss(b)
    assert parts["local"] >= 0 and parts["pose"] >= 0 and parts["global"] >= 0 and parts["scale"] > 0
