import json
from dataclasses import replace

import numpy as np
import pytest

from conftest import loop_attention
from hybridmem.blocks import (BlockParams, HybridStack, StackConfig, block_forward, chunk_attention,
                              frame_attention, load_config, reset_due, stack_forward)
from hybridmem.errors import ConfigError, ShapeError
from hybridmem.numerics import full_mask, layer_norm, make_rng
from hybridmem.swa import ChunkWindow, OverlapStatus, SwaCache
from hybridmem.ttt import TTTConfig

NONE = OverlapStatus.NO_OVERLAP
SMALL = StackConfig(model_dim=16, n_blocks=2, heads=2, swa_depths=(2,), tokens_per_frame=4,
                    ttt=TTTConfig(lr=0.02, head_dim=8))


def _window(rng, cfg, n_frames=2, index=0, raw=False):
    shape = (n_frames, cfg.tokens_per_frame, cfg.patch_features) if raw else (n_frames * cfg.tokens_per_frame, cfg.model_dim)
    return ChunkWindow(rng.normal(size=shape), tuple(range(n_frames)), (NONE,) * n_frames, index)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            StackConfig(swa_depths=(5,))
        with pytest.raises(ConfigError):
            StackConfig(tokens_per_frame=0)
        with pytest.raises(ConfigError):
            StackConfig(model_dim=30, heads=4)

    def test_dict_round_trip(self):
        assert StackConfig.from_dict(json.loads(json.dumps(SMALL.to_dict()))) == SMALL

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            StackConfig.from_dict({"bogus": 1})

    def test_load_json_and_toml(self, tmp_path):
        (tmp_path / "c.json").write_text(json.dumps({"model_dim": 32, "swa_depths": [1], "ttt": {"lr": 0.1}}))
        (tmp_path / "c.toml").write_text('model_dim = 32\nswa_depths = [1]\n[ttt]\nlr = 0.1\nreset_period = 3\n')
        a, b = load_config(tmp_path / "c.json"), load_config(tmp_path / "c.toml")
        assert a.model_dim == b.model_dim == 32 and a.swa_depths == (1,)
        assert a.ttt.lr == b.ttt.lr == 0.1 and b.ttt.reset_period == 3


class TestBlock:
    def test_swa_present_only_at_depths(self):
        rng = make_rng(0)
        assert BlockParams.init(SMALL, 1, rng).swa is None
        assert BlockParams.init(SMALL, 2, rng).swa is not None

    def test_new_layers_are_noops_at_init(self):
        stack = HybridStack(SMALL, 0)
        block = stack.blocks[1]
        w = _window(make_rng(1), SMALL)
        state = stack.init_state()
        out, cache, fast = block_forward(block, SMALL, w, SwaCache(), state.fast_weights[1])
        ref = chunk_attention(block, frame_attention(block, w.cur_tokens, w.n_frames))
        np.testing.assert_allclose(out, ref, atol=1e-14)
        assert fast.chunks_absorbed == 1 and not cache.empty

    def test_plain_bidirectional_attention(self):
        cfg = replace(SMALL, swa_depths=(), ttt_enabled=False)
        stack = HybridStack(cfg, 2)
        block = stack.blocks[0]
        block.frame_attn.wo[:] = 0.0
        w = _window(make_rng(3), cfg, n_frames=3)
        out, _, _ = block_forward(block, cfg, w, None, None)
        x = layer_norm(w.cur_tokens, *block.chunk_ln)
        a, hd = block.chunk_attn, cfg.model_dim // cfg.heads
        heads = [loop_attention((x @ a.wq.T)[:, h * hd:(h + 1) * hd], (x @ a.wk.T)[:, h * hd:(h + 1) * hd],
                                (x @ a.wv.T)[:, h * hd:(h + 1) * hd], full_mask(len(x), len(x)))
                 for h in range(cfg.heads)]
        np.testing.assert_allclose(out, w.cur_tokens + np.hstack(heads) @ a.wo.T, atol=1e-12, rtol=0)

    def test_deterministic(self):
        outs = []
        for _ in range(2):
            stack = HybridStack(SMALL, 4)
            w = _window(make_rng(5), SMALL)
            outs.append(block_forward(stack.blocks[1], SMALL, w, SwaCache(), stack.init_state().fast_weights[1])[0])
        assert outs[0].tobytes() == outs[1].tobytes()

    def test_frame_attention_never_mixes_frames(self):
        stack = HybridStack(SMALL, 6)
        block = stack.blocks[0]
        h = make_rng(7).normal(size=(3 * 4, 16))
        h2 = h.copy()
        h2[:4] = 0.0
        h2[8:] = 0.0
        np.testing.assert_array_equal(frame_attention(block, h, 3)[4:8], frame_attention(block, h2, 3)[4:8])

    def test_wrong_width(self):
        stack = HybridStack(SMALL, 0)
        w = ChunkWindow(np.zeros((8, 5)), (0, 1), (NONE, NONE))
        with pytest.raises(ShapeError):
            block_forward(stack.blocks[0], SMALL, w, None, None)


class TestStack:
    def test_output_shapes_and_counters(self):
        stack = HybridStack(SMALL, 0)
        state = stack.init_state()
        out, state = stack_forward(stack, _window(make_rng(1), SMALL, n_frames=3, raw=True), state)
        assert len(out.poses) == 3 and out.pointmaps.shape == (3, 4, 3) and out.confidence.shape == (3, 4)
        assert (out.confidence > 1).all()
        assert [f.chunks_absorbed for f in state.fast_weights] == [1, 1]

    def test_rotation_head_is_valid(self):
        stack = HybridStack(SMALL, 0)
        out, _ = stack_forward(stack, _window(make_rng(2), SMALL, n_frames=4, raw=True), stack.init_state())
        for p in out.poses:
            assert np.abs(p.R.T @ p.R - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(p.R) - 1.0) < 1e-9

    def test_reset_period_five(self):
        stack = HybridStack(SMALL, 3)
        # make the memory write something so that resets are observable
        for b in stack.blocks:
            b.ttt_proj.wv *= 3.0
        state = stack.init_state()
        rng = make_rng(4)
        seen = {}
        for m in range(12):
            w = ChunkWindow(rng.normal(size=(2, 4, 12)), (2 * m, 2 * m + 1), (NONE, NONE), m)
            _, state = stack_forward(stack, w, state, reset_period=5)
            seen[m + 1] = (state.reset_applied, [f.copy() for f in state.fast_weights])
        # the reset fires before chunks 6 and 11, so after those chunks exactly one update is absorbed
        assert [m for m, (r, _) in seen.items() if r] == [6, 11]
        assert all(f.chunks_absorbed == 1 for f in seen[6][1] + seen[11][1])
        assert all(f.chunks_absorbed == 5 for f in seen[5][1])

    def test_reset_due(self):
        assert [c for c in range(16) if reset_due(c, 5)] == [5, 10, 15]
        assert not any(reset_due(c, 0) for c in range(10))
