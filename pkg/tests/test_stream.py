import numpy as np
import pytest

from hybridmem.blocks import HybridStack, StackConfig, stack_forward
from hybridmem.errors import ConfigError
from hybridmem.numerics import make_rng
from hybridmem.stream import (OracleConfig, OracleModel, chunk_count, generate_scene, oracle_predict,
                              partition_chunks, patch_features, read_predictions_jsonl, recall_task,
                              run_stream, write_predictions_jsonl)
from hybridmem.swa import ChunkWindow, OverlapStatus
from hybridmem.ttt import TTTConfig

SMALL = StackConfig(model_dim=16, n_blocks=2, heads=2, swa_depths=(2,), tokens_per_frame=4,
                    ttt=TTTConfig(lr=0.02, head_dim=8))


def _stack_scene(n, seed=0):
    return generate_scene(n, "mixed", seed, image_hw=(4, 4))


class TestPartition:
    def test_small_example(self):
        plan = partition_chunks(10, 4, 1)
        assert plan.chunks == ((0, 1, 2, 3), (3, 4, 5, 6), (6, 7, 8, 9))

    def test_single_chunk(self):
        assert partition_chunks(5, 8, 2).chunks == ((0, 1, 2, 3, 4),)

    def test_preset(self):
        plan = partition_chunks(500, 64, 3)
        assert len(plan) == 9 == chunk_count(500, 64, 3)
        for a, b in zip(plan.chunks, plan.chunks[1:]):
            assert len(set(a) & set(b)) == 3
        assert set().union(*plan.chunks) == set(range(500))
        assert len(plan.chunks[-1]) >= 4

    def test_bad_overlap(self):
        with pytest.raises(ConfigError):
            partition_chunks(10, 4, 4)
        with pytest.raises(ConfigError):
            partition_chunks(10, 4, 0)

    def test_statuses(self):
        plan = partition_chunks(10, 4, 1)
        P, N, X = OverlapStatus.OVERLAPS_PREVIOUS, OverlapStatus.NO_OVERLAP, OverlapStatus.OVERLAPS_NEXT
        assert plan.statuses(0) == (N, N, N, X)
        assert plan.statuses(1) == (P, N, N, X)
        assert plan.statuses(2) == (P, N, N, N)


class TestScene:
    def test_reproducible(self):
        a, b = generate_scene(20, "mixed", 3), generate_scene(20, "mixed", 3)
        for p, q in zip(a.pointmaps, b.pointmaps):
            assert p.points.tobytes() == q.points.tobytes()
        assert a.trajectory.centers().tobytes() == b.trajectory.centers().tobytes()

    def test_loop_closes(self):
        c = generate_scene(60, "loop", 0).trajectory.centers()
        diameter = np.max(np.linalg.norm(c[:, None] - c[None], axis=-1))
        assert np.linalg.norm(c[0] - c[-1]) <= 0.01 * diameter

    @pytest.mark.parametrize("motion", ["straight", "turn", "loop", "mixed"])
    def test_depth_range(self, motion):
        s = generate_scene(30, motion, 1, z_range=(2.0, 8.0))
        z = np.stack([pm.depth for pm in s.pointmaps])
        assert z.min() >= 2.0 and z.max() <= 8.0

    def test_bounded_motion(self):
        c = generate_scene(40, "mixed", 2).trajectory.centers()
        assert np.linalg.norm(np.diff(c, axis=0), axis=1).max() < 1.5

    def test_unknown_motion(self):
        with pytest.raises(ConfigError):
            generate_scene(5, "spiral", 0)

    def test_patch_features(self):
        s = generate_scene(3, "straight", 0, image_hw=(4, 6))
        f = patch_features(s.pointmaps)
        assert f.shape == (3, 6, 12)
        np.testing.assert_array_equal(f[0, 0, :3], s.pointmaps[0].points[0, 0])


class TestOracle:
    def test_no_gauge_is_truth(self):
        s = generate_scene(20, "turn", 0)
        for c in oracle_predict(s, partition_chunks(20, 6, 2), OracleConfig("none")):
            for f, p, pm in zip(c.frame_ids, c.poses, c.pointmaps):
                np.testing.assert_array_equal(p.R, s.pose(f).R)
                np.testing.assert_array_equal(p.t, s.pose(f).t)
                np.testing.assert_array_equal(pm.points, s.pointmaps[f].points)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            OracleConfig("global")
        with pytest.raises(ConfigError):
            OracleConfig(scale_noise=-0.1)


class TestRunStream:
    def test_single_chunk_equals_stack_forward(self):
        s = _stack_scene(6)
        plan = partition_chunks(6, 8, 2)
        stack = HybridStack(SMALL, 0)
        res = run_stream(stack, s, plan, align_mode="rigid")
        feats = patch_features(s.pointmaps)
        out, _ = stack_forward(stack, ChunkWindow(feats, tuple(range(6)), plan.statuses(0), 0),
                               stack.init_state(), reset_period=0)
        for a, b in zip(res.trajectory().poses, out.poses):
            assert a.R.tobytes() == b.R.tobytes() and a.t.tobytes() == b.t.tobytes()

    def test_reset_restores_snapshot_bitwise(self):
        s = _stack_scene(4 + 11 * 3)
        stack = HybridStack(SMALL, 1)
        for b in stack.blocks:
            b.ttt_proj.wv *= 3.0
        snapshot = [f.copy() for f in stack.init_state().fast_weights]
        starts = {}
        run_stream(stack, s, partition_chunks(s.n_frames, 4, 1), 5,
                   on_chunk_start=lambda m, st: starts.__setitem__(m + 1, [f.copy() for f in st.fast_weights]))
        for chunk in (1, 6, 11):
            assert all(a.equals(b) for a, b in zip(starts[chunk], snapshot))
        assert not all(a.equals(b) for a, b in zip(starts[5], snapshot))

    def test_reset_seams_agree_on_oracle(self):
        s = generate_scene(4 + 11 * 3, "mixed", 0)
        res = run_stream(OracleModel(s, OracleConfig("per_segment_se3", seed=3)), s,
                         partition_chunks(s.n_frames, 4, 1), 5, "none")
        chunks = res.aligned.chunks
        for m in (5, 10):
            prev, cur = chunks[m - 1], chunks[m]
            assert res.diagnostics[m].reset
            k = prev.frame_ids[-1]
            a, b = prev.poses[-1], cur.poses[cur.frame_ids.index(k)]
            assert np.abs(a.t - b.t).max() < 1e-9 and np.abs(a.R - b.R).max() < 1e-9

    def test_per_chunk_time_flat(self):
        s = _stack_scene(8 + 49 * 6)
        res = run_stream(HybridStack(SMALL, 0), s, partition_chunks(s.n_frames, 8, 2), 5)
        t = [d.seconds for d in res.diagnostics]
        assert len(t) == 50
        early, late = np.median(t[1:16]), np.median(t[-15:])
        assert abs(late / early - 1.0) <= 0.25

    def test_constant_state_bytes(self):
        s = _stack_scene(4 + 99 * 3)
        res = run_stream(HybridStack(SMALL, 0), s, partition_chunks(s.n_frames, 4, 1), 5)
        assert len(res.diagnostics) == 100
        assert len({d.state_bytes for d in res.diagnostics}) == 1

    def test_causality(self):
        s = _stack_scene(4 + 5 * 3)
        plan = partition_chunks(s.n_frames, 4, 1)
        feats = patch_features(s.pointmaps)
        base = run_stream(HybridStack(SMALL, 0), s, plan, 5, features=feats)
        changed = feats.copy()
        changed[10:] += make_rng(0).normal(size=changed[10:].shape)
        other = run_stream(HybridStack(SMALL, 0), s, plan, 5, features=changed)
        # frames of chunks 0..2 (ids 0..9) never see frames >= 10
        for m in range(3):
            for a, b in zip(base.aligned.chunks[m].poses, other.aligned.chunks[m].poses):
                assert a.t.tobytes() == b.t.tobytes()
        assert any(a.t.tobytes() != b.t.tobytes()
                   for a, b in zip(base.aligned.chunks[4].poses, other.aligned.chunks[4].poses))

    def test_deterministic(self):
        s = _stack_scene(20)
        plan = partition_chunks(20, 6, 2)
        a = run_stream(HybridStack(SMALL, 5), s, plan, 2, "sim3")
        b = run_stream(HybridStack(SMALL, 5), s, plan, 2, "sim3")
        for p, q in zip(a.trajectory().poses, b.trajectory().poses):
            assert p.t.tobytes() == q.t.tobytes() and p.R.tobytes() == q.R.tobytes()

    def test_bad_align_mode(self):
        s = _stack_scene(8)
        with pytest.raises(ConfigError):
            run_stream(HybridStack(SMALL, 0), s, partition_chunks(8, 4, 1), align_mode="icp")


class TestJsonl:
    def test_round_trip(self, tmp_path):
        s = generate_scene(14, "mixed", 0)
        preds = oracle_predict(s, partition_chunks(14, 6, 2), OracleConfig("per_chunk_sim3", seed=1))
        write_predictions_jsonl(preds, tmp_path / "p.jsonl", pointmap_dir=tmp_path)
        back = read_predictions_jsonl(tmp_path / "p.jsonl")
        assert [c.frame_ids for c in back] == [c.frame_ids for c in preds]
        for a, b in zip(back, preds):
            for p, q in zip(a.poses, b.poses):
                np.testing.assert_allclose(p.t, q.t, rtol=0, atol=1e-15)
            for p, q in zip(a.pointmaps, b.pointmaps):
                np.testing.assert_array_equal(p.points, q.points)


def test_recall_rejects_empty():
    with pytest.raises(ConfigError):
        recall_task(0, 8)
