"""Sliding-window attention across the previous and current chunk.

Queries come from the current chunk; keys and values come from both
chunks. The previous chunk's keys/values are kept in a :class:`SwaCache`
so that streaming never re-projects old tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import CacheError, ShapeError
from .numerics import (AttentionParams, attend_heads, full_mask, layer_norm,
                       multihead_attention, split_heads)


class OverlapStatus(IntEnum):
    OVERLAPS_PREVIOUS = 0
    NO_OVERLAP = 1
    OVERLAPS_NEXT = 2


@dataclass
class OverlapEmbeddings:
    """One learnable vector per :class:`OverlapStatus`, rows in enum order."""

    table: np.ndarray  # (3, dim)

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, scale: float = 0.02) -> "OverlapEmbeddings":
        return cls(rng.normal(0.0, scale, size=(3, dim)))

    @classmethod
    def zeros(cls, dim: int) -> "OverlapEmbeddings":
        return cls(np.zeros((3, dim)))

    def __post_init__(self):
        if self.table.ndim != 2 or self.table.shape[0] != 3:
            raise ShapeError("overlap embeddings need exactly three rows")


@dataclass
class ChunkWindow:
    """Tokens of the current chunk plus (optionally) the previous one.

    Tokens are (frames * tokens_per_frame, dim), frame-major.
    """

    cur_tokens: np.ndarray
    cur_frame_ids: tuple
    cur_statuses: tuple
    chunk_index: int = 0
    prev_tokens: np.ndarray | None = None
    prev_frame_ids: tuple = ()
    prev_statuses: tuple = ()

    def __post_init__(self):
        for ids in (self.prev_frame_ids, self.cur_frame_ids):
            if any(b <= a for a, b in zip(ids, ids[1:])):
                raise ShapeError("frame ids must be strictly increasing")
        if len(self.cur_statuses) != len(self.cur_frame_ids):
            raise ShapeError("one overlap status per current frame is required")

    @property
    def n_frames(self) -> int:
        return len(self.cur_frame_ids)

    @property
    def tokens_per_frame(self) -> int:
        return self.cur_tokens.shape[0] // self.n_frames


@dataclass
class SwaParams:
    attn: AttentionParams
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    emb: OverlapEmbeddings

    @classmethod
    def init(cls, dim: int, heads: int, rng: np.random.Generator,
             zero_out: bool = True) -> "SwaParams":
        return cls(AttentionParams.init(dim, heads, rng, zero_out=zero_out),
                   np.ones(dim), np.zeros(dim), OverlapEmbeddings.init(dim, rng))


@dataclass
class SwaCache:
    """Projected keys/values (heads, n, head_dim) of one chunk at one depth."""

    k: np.ndarray | None = None
    v: np.ndarray | None = None
    chunk_index: int = -1

    @property
    def empty(self) -> bool:
        return self.k is None

    def nbytes(self) -> int:
        return 0 if self.empty else self.k.nbytes + self.v.nbytes


def apply_overlap_embeddings(tokens: np.ndarray, statuses, emb: OverlapEmbeddings) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.float64)
    n_frames = len(statuses)
    if n_frames == 0 or tokens.shape[0] % n_frames:
        raise ShapeError(f"{tokens.shape[0]} tokens cannot be split over {n_frames} frames")
    per_frame = tokens.shape[0] // n_frames
    idx = np.repeat(np.asarray([int(s) for s in statuses]), per_frame)
    return tokens + emb.table[idx]


def build_swa_mask(window: ChunkWindow) -> np.ndarray:
    """Current-chunk queries see every previous- and current-chunk key."""
    nq = window.cur_tokens.shape[0]
    n_prev = 0 if window.prev_tokens is None else window.prev_tokens.shape[0]
    return full_mask(nq, n_prev + nq)


def _swa_input(params: SwaParams, tokens: np.ndarray, statuses) -> np.ndarray:
    return apply_overlap_embeddings(layer_norm(tokens, params.ln_gain, params.ln_bias),
                                    statuses, params.emb)


def swa_forward(window: ChunkWindow, cache: SwaCache, params: SwaParams) -> tuple[np.ndarray, SwaCache]:
    """Residual SWA update of the current chunk, reading the previous chunk
    from ``cache``. Returns the new tokens and this chunk's cache."""
    if not cache.empty and cache.chunk_index != window.chunk_index - 1:
        raise CacheError(f"cache belongs to chunk {cache.chunk_index}, "
                         f"expected {window.chunk_index - 1}")
    h = window.cur_tokens
    x = _swa_input(params, h, window.cur_statuses)
    a = params.attn
    k = split_heads(x, a.wk, a.heads)
    v = split_heads(x, a.wv, a.heads)
    new_cache = SwaCache(k, v, window.chunk_index)
    if not cache.empty:
        k = np.concatenate([cache.k, k], axis=-2)
        v = np.concatenate([cache.v, v], axis=-2)
    mask = full_mask(h.shape[0], k.shape[-2])
    return h + attend_heads(a, x, k, v, mask), new_cache


def swa_recompute(window: ChunkWindow, params: SwaParams) -> np.ndarray:
    """Stateless reference: attention over the concatenated two-chunk tokens,
    keeping only the current-chunk rows."""
    h = window.cur_tokens
    x_cur = _swa_input(params, h, window.cur_statuses)
    if window.prev_tokens is None or window.prev_tokens.shape[0] == 0:
        x_all = x_cur
    else:
        x_prev = _swa_input(params, window.prev_tokens, window.prev_statuses)
        x_all = np.concatenate([x_prev, x_cur], axis=0)
    n_prev = x_all.shape[0] - x_cur.shape[0]
    out = multihead_attention(params.attn, x_all, x_all, full_mask(x_all.shape[0], x_all.shape[0]))
    return h + out[n_prev:]
