"""Residual blocks with hybrid memory and the full desk-scale backbone.

One block, applied to the token sequence of the current chunk:

1. per-frame self-attention,
2. sliding-window attention over the previous and current chunk (only at
   the configured depths),
3. fast-weight memory: apply, then update,
4. bidirectional attention across the whole chunk.

:class:`HybridStack` stacks blocks between a linear patch embedding and
small pointmap / pose / confidence heads.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .geometry import PoseSE3, rotation_from_6d
from .numerics import AttentionParams, layer_norm, make_rng, multihead_attention
from .swa import ChunkWindow, SwaCache, SwaParams, swa_forward
from .ttt import (FastWeightState, TTTConfig, TTTProjections, reset_state, ttt_apply,
                  ttt_update)


@dataclass(frozen=True)
class StackConfig:
    model_dim: int = 64
    n_blocks: int = 4
    heads: int = 4
    swa_depths: tuple = (2, 4)
    tokens_per_frame: int = 4
    patch_features: int = 12
    ttt_enabled: bool = True
    ttt: TTTConfig = field(default_factory=lambda: TTTConfig(lr=0.02, head_dim=16))

    def __post_init__(self):
        object.__setattr__(self, "swa_depths", tuple(sorted(int(d) for d in self.swa_depths)))
        if any(d < 1 or d > self.n_blocks for d in self.swa_depths):
            raise ConfigError(f"swa_depths {self.swa_depths} outside 1..{self.n_blocks}")
        if self.tokens_per_frame < 1:
            raise ConfigError("tokens_per_frame must be at least 1")
        if self.model_dim % self.heads:
            raise ConfigError("model_dim must be divisible by heads")
        if self.ttt_enabled and self.model_dim % self.ttt.head_dim:
            raise ConfigError("model_dim must be a multiple of the TTT head_dim")

    @property
    def ttt_heads(self) -> int:
        return self.model_dim // self.ttt.head_dim

    def to_dict(self) -> dict:
        d = asdict(self)
        d["swa_depths"] = list(self.swa_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StackConfig":
        d = dict(d)
        ttt = dict(d.pop("ttt", {}) or {})
        default_ttt = cls.__dataclass_fields__["ttt"].default_factory()
        ttt_cfg = replace(default_ttt, **ttt)
        if "swa_depths" in d:
            d["swa_depths"] = tuple(d["swa_depths"])
        known = set(cls.__dataclass_fields__) - {"ttt"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(ttt=ttt_cfg, **d)


def load_config(path) -> StackConfig:
    """Read a model config from ``.json`` or ``.toml``."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        data = tomllib.loads(text)
    else:
        data = json.loads(text)
    return StackConfig.from_dict(data)


@dataclass
class BlockParams:
    frame_ln: tuple
    frame_attn: AttentionParams
    chunk_ln: tuple
    chunk_attn: AttentionParams
    ttt_ln: tuple | None = None
    ttt_proj: TTTProjections | None = None
    swa: SwaParams | None = None

    @classmethod
    def init(cls, cfg: StackConfig, depth: int, rng: np.random.Generator) -> "BlockParams":
        d = cfg.model_dim

        def ln():
            return (np.ones(d), np.zeros(d))

        return cls(
            frame_ln=ln(),
            frame_attn=AttentionParams.init(d, cfg.heads, rng),
            chunk_ln=ln(),
            chunk_attn=AttentionParams.init(d, cfg.heads, rng),
            ttt_ln=ln() if cfg.ttt_enabled else None,
            ttt_proj=TTTProjections.init(d, cfg.ttt_heads, rng) if cfg.ttt_enabled else None,
            swa=SwaParams.init(d, cfg.heads, rng) if depth in cfg.swa_depths else None,
        )


@dataclass
class PredictionHeads:
    points: np.ndarray  # (3, dim)
    points_bias: np.ndarray
    conf: np.ndarray  # (1, dim)
    pose: np.ndarray  # (9, dim): 6 rotation values + translation
    pose_bias: np.ndarray

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator) -> "PredictionHeads":
        std = 1.0 / np.sqrt(dim)
        return cls(rng.normal(0, std, (3, dim)), np.array([0.0, 0.0, 2.0]),
                   rng.normal(0, std, (1, dim)),
                   rng.normal(0, 0.1 * std, (9, dim)),
                   np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]))


@dataclass
class StackOutput:
    poses: list  # PoseSE3 per frame
    pointmaps: np.ndarray  # (F, P, 3)
    confidence: np.ndarray  # (F, P)


@dataclass
class StreamState:
    """Everything a stream carries between chunks."""

    fast_weights: list  # FastWeightState per block (None when TTT disabled)
    caches: list  # SwaCache per block (None when the block has no SWA)
    chunks_seen: int = 0
    reset_applied: bool = False

    def nbytes(self) -> int:
        total = sum(s.nbytes() for s in self.fast_weights if s is not None)
        return total + sum(c.nbytes() for c in self.caches if c is not None)


def frame_attention(block: BlockParams, h: np.ndarray, n_frames: int) -> np.ndarray:
    """Residual self-attention restricted to each frame's own tokens."""
    x = layer_norm(h, *block.frame_ln).reshape(n_frames, -1, h.shape[-1])
    return h + multihead_attention(block.frame_attn, x, x).reshape(h.shape)


def chunk_attention(block: BlockParams, h: np.ndarray) -> np.ndarray:
    x = layer_norm(h, *block.chunk_ln)
    return h + multihead_attention(block.chunk_attn, x, x)


def block_forward(block: BlockParams, cfg: StackConfig, window: ChunkWindow,
                  cache: SwaCache | None, fast: FastWeightState | None):
    """Run one block on ``window.cur_tokens``.

    Returns (tokens, new cache, new fast-weight state).
    """
    h = np.asarray(window.cur_tokens, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != cfg.model_dim:
        raise ShapeError(f"tokens {h.shape} do not match model_dim {cfg.model_dim}")
    h = frame_attention(block, h, window.n_frames)
    if block.swa is not None:
        h, cache = swa_forward(replace(window, cur_tokens=h), cache or SwaCache(), block.swa)
    if fast is not None:
        hn = layer_norm(h, *block.ttt_ln)
        h = h + ttt_apply(fast, hn, block.ttt_proj)
        fast = ttt_update(fast, hn, cfg.ttt, block.ttt_proj)
    return chunk_attention(block, h), cache, fast


class HybridStack:
    """Desk-scale backbone: patch embedding, residual blocks, heads."""

    def __init__(self, cfg: StackConfig = StackConfig(), seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = make_rng(seed)
        d = cfg.model_dim
        self.embed = rng.normal(0.0, 1.0 / np.sqrt(cfg.patch_features), (d, cfg.patch_features))
        self.embed_bias = np.zeros(d)
        self.blocks = [BlockParams.init(cfg, i + 1, rng) for i in range(cfg.n_blocks)]
        self.final_ln = (np.ones(d), np.zeros(d))
        self.heads = PredictionHeads.init(d, rng)
        fw_rng = make_rng(seed + 1)
        self._initial_fast = [FastWeightState.init(cfg.ttt_heads, cfg.ttt, fw_rng)
                              if cfg.ttt_enabled else None for _ in self.blocks]

    def init_state(self) -> StreamState:
        return StreamState(fast_weights=[s.copy() if s is not None else None for s in self._initial_fast],
                           caches=[SwaCache() if b.swa is not None else None for b in self.blocks])

    def load_fast_weights(self, states: list) -> None:
        """Start future streams from a saved fast-weight snapshot."""
        expected = [s for s in self._initial_fast if s is not None]
        if len(states) != len(expected):
            raise ConfigError(f"snapshot has {len(states)} blocks, model has {len(expected)}")
        for got, want in zip(states, expected):
            if [a.shape for a in got._all_arrays()] != [a.shape for a in want._all_arrays()]:
                raise ConfigError("snapshot shapes do not match the model config")
        it = iter(states)
        self._initial_fast = [next(it) if s is not None else None for s in self._initial_fast]

    def reset(self, state: StreamState) -> StreamState:
        return StreamState([reset_state(s) if s is not None else None for s in state.fast_weights],
                           [SwaCache() if c is not None else None for c in state.caches],
                           state.chunks_seen, True)

    def embed_features(self, features: np.ndarray) -> np.ndarray:
        f = np.asarray(features, dtype=np.float64)
        if f.ndim != 3 or f.shape[1:] != (self.cfg.tokens_per_frame, self.cfg.patch_features):
            raise ShapeError(f"features must be (frames, {self.cfg.tokens_per_frame}, "
                             f"{self.cfg.patch_features}), got {f.shape}")
        return f.reshape(-1, f.shape[-1]) @ self.embed.T + self.embed_bias

    def decode(self, h: np.ndarray, n_frames: int) -> StackOutput:
        x = layer_norm(h, *self.final_ln)
        p = self.cfg.tokens_per_frame
        pts = (x @ self.heads.points.T + self.heads.points_bias).reshape(n_frames, p, 3)
        conf = (1.0 + np.exp(x @ self.heads.conf.T)).reshape(n_frames, p)
        pooled = x.reshape(n_frames, p, -1).mean(axis=1)
        raw = pooled @ self.heads.pose.T + self.heads.pose_bias
        poses = [PoseSE3(rotation_from_6d(r[:6]), r[6:]) for r in raw]
        return StackOutput(poses, pts, conf)

    def forward(self, window: ChunkWindow, state: StreamState,
                reset_period: int | None = None) -> tuple[StackOutput, StreamState]:
        """Process one chunk; ``window.cur_tokens`` holds (F, P, features)."""
        return stack_forward(self, window, state, reset_period)


def reset_due(chunks_seen: int, period: int) -> bool:
    """True at the start of chunks period+1, 2*period+1, ... (1-based)."""
    return bool(period) and chunks_seen > 0 and chunks_seen % period == 0


def maybe_reset(stack: HybridStack, state: StreamState, period: int) -> StreamState:
    if reset_due(state.chunks_seen, period):
        return stack.reset(state)
    return replace(state, reset_applied=False)


def stack_forward(stack: HybridStack, window: ChunkWindow, state: StreamState,
                  reset_period: int | None = None) -> tuple[StackOutput, StreamState]:
    period = stack.cfg.ttt.reset_period if reset_period is None else reset_period
    state = maybe_reset(stack, state, period)
    reset = state.reset_applied
    h = stack.embed_features(window.cur_tokens)
    fast_out, caches_out = [], []
    for block, fast, cache in zip(stack.blocks, state.fast_weights, state.caches):
        bw = replace(window, cur_tokens=h, chunk_index=state.chunks_seen)
        h, cache, fast = block_forward(block, stack.cfg, bw, cache, fast)
        fast_out.append(fast)
        caches_out.append(cache)
    out = stack.decode(h, window.n_frames)
    return out, StreamState(fast_out, caches_out, state.chunks_seen + 1, reset)
