"""Dense kernels shared by every layer: masked attention, layer norm,
SwiGLU with analytic gradients, a central-difference checker and seeded RNG.

Everything works on float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import MaskedOutError, NumericalError, ShapeError

LN_EPS = 1e-6


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; the stream for a given seed is platform independent."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def fork_rng(rng: np.random.Generator) -> np.random.Generator:
    """Deterministic child stream; advances the parent by one draw."""
    return make_rng(int(rng.integers(0, 2**63 - 1)))


# ---------------------------------------------------------------------------
# attention


def full_mask(nq: int, nk: int) -> np.ndarray:
    return np.ones((nq, nk), dtype=bool)


def block_diagonal_mask(group_sizes) -> np.ndarray:
    """Mask letting each token see only the tokens of its own group."""
    n = int(sum(group_sizes))
    mask = np.zeros((n, n), dtype=bool)
    start = 0
    for size in group_sizes:
        mask[start:start + size, start:start + size] = True
        start += size
    return mask


def attention_weights(q: np.ndarray, k: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-stochastic softmax(q k^T / sqrt(d)) restricted to ``mask``.

    ``q`` is (..., nq, d), ``k`` is (..., nk, d); ``mask`` broadcasts
    against (..., nq, nk).
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.ndim < 2 or k.ndim < 2 or q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"incompatible query/key shapes {q.shape} and {k.shape}")
    d = q.shape[-1]
    if d == 0:
        raise ShapeError("attention needs a positive feature dimension")
    logits = (q @ np.swapaxes(k, -1, -2)) / np.sqrt(d)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape[-2:] != logits.shape[-2:]:
            raise ShapeError(f"mask shape {mask.shape} does not match logits {logits.shape}")
        if not mask.any(axis=-1).all():
            raise MaskedOutError("a query row has no allowed key")
        logits = np.where(mask, logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


def masked_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                     mask: np.ndarray | None = None) -> np.ndarray:
    """Scaled dot-product attention; masked logits are -inf before softmax."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-2] != np.shape(k)[-2]:
        raise ShapeError(f"keys {np.shape(k)} and values {v.shape} disagree on length")
    return attention_weights(q, k, mask) @ v


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x: np.ndarray, gain: np.ndarray | None = None, bias: np.ndarray | None = None,
               eps: float = LN_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 1 or x.shape[-1] < 2:
        raise ShapeError("layer_norm needs at least two features per row")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    y = (x - mu) / np.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


# ---------------------------------------------------------------------------
# SwiGLU


@dataclass
class SwigluParams:
    """f(x) = W_down (silu(W_gate x) * (W_up x)), applied row-wise."""

    w_gate: np.ndarray  # (hidden, dim)
    w_up: np.ndarray  # (hidden, dim)
    w_down: np.ndarray  # (dim, hidden)

    @property
    def dim(self) -> int:
        return self.w_gate.shape[1]

    @property
    def hidden(self) -> int:
        return self.w_gate.shape[0]

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.w_gate, self.w_up, self.w_down

    def copy(self) -> "SwigluParams":
        return SwigluParams(self.w_gate.copy(), self.w_up.copy(), self.w_down.copy())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, theta: np.ndarray, dim: int, hidden: int) -> "SwigluParams":
        n = hidden * dim
        return cls(theta[:n].reshape(hidden, dim).copy(),
                   theta[n:2 * n].reshape(hidden, dim).copy(),
                   theta[2 * n:3 * n].reshape(dim, hidden).copy())

    @classmethod
    def init(cls, dim: int, expansion: int, rng: np.random.Generator,
             zero_down: bool = True) -> "SwigluParams":
        hidden = expansion * dim
        std = 1.0 / np.sqrt(dim)
        w_gate = rng.normal(0.0, std, size=(hidden, dim))
        w_up = rng.normal(0.0, std, size=(hidden, dim))
        if zero_down:
            w_down = np.zeros((dim, hidden))
        else:
            w_down = rng.normal(0.0, 1.0 / np.sqrt(hidden), size=(dim, hidden))
        return cls(w_gate, w_up, w_down)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x: np.ndarray) -> np.ndarray:
    return x * sigmoid(x)


def _check_swiglu(p: SwigluParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h, d = p.w_gate.shape
    if p.w_up.shape != (h, d) or p.w_down.shape != (d, h):
        raise ShapeError("inconsistent SwiGLU parameter shapes")
    if x.ndim != 2 or x.shape[1] != d:
        raise ShapeError(f"expected input of shape (n, {d}), got {x.shape}")
    return x


def swiglu_forward(p: SwigluParams, x: np.ndarray) -> np.ndarray:
    x = _check_swiglu(p, x)
    return (silu(x @ p.w_gate.T) * (x @ p.w_up.T)) @ p.w_down.T


def swiglu_grad(p: SwigluParams, x: np.ndarray, target: np.ndarray,
                loss_kind: str = "squared_error") -> tuple[SwigluParams, float]:
    """Gradient of mean((f(x) - target)**2) w.r.t. the three matrices.

    Returns the gradients packed as a :class:`SwigluParams` and the loss.
    """
    if loss_kind != "squared_error":
        raise ValueError(f"unsupported inner loss {loss_kind!r}")
    x = _check_swiglu(p, x)
    target = np.asarray(target, dtype=np.float64)
    a = x @ p.w_gate.T
    b = x @ p.w_up.T
    sa = sigmoid(a)
    g = a * sa
    m = g * b
    y = m @ p.w_down.T
    if target.shape != y.shape:
        raise ShapeError(f"target shape {target.shape} != output shape {y.shape}")
    r = y - target
    loss = float(np.mean(r * r))
    dy = 2.0 * r / r.size
    d_down = dy.T @ m
    dm = dy @ p.w_down
    da = dm * b * (sa * (1.0 + a * (1.0 - sa)))
    db = dm * g
    return SwigluParams(da.T @ x, db.T @ x, d_down), loss


def swiglu_loss(p: SwigluParams, x: np.ndarray, target: np.ndarray) -> float:
    r = swiglu_forward(p, x) - target
    return float(np.mean(r * r))


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(f: Callable[[np.ndarray], float], theta: np.ndarray,
                     step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if step <= 0:
        raise ValueError("step must be positive")
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(theta)
        flat[i] = orig - step
        fm = f(theta)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericalError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """||a - b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / scale)


# ---------------------------------------------------------------------------
# multi-head attention layer


@dataclass
class AttentionParams:
    """Multi-head attention weights; every matrix is (dim, dim)."""

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    heads: int

    @classmethod
    def init(cls, dim: int, heads: int, rng: np.random.Generator,
             zero_out: bool = False) -> "AttentionParams":
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        std = 1.0 / np.sqrt(dim)
        wq, wk, wv = (rng.normal(0.0, std, size=(dim, dim)) for _ in range(3))
        wo = np.zeros((dim, dim)) if zero_out else rng.normal(0.0, std, size=(dim, dim))
        return cls(wq, wk, wv, wo, heads)

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


def split_heads(x: np.ndarray, w: np.ndarray, heads: int) -> np.ndarray:
    """Project (..., n, dim) tokens and split into (..., heads, n, head_dim)."""
    z = x @ w.T
    hd = z.shape[-1] // heads
    z = z.reshape(z.shape[:-1] + (heads, hd))
    return np.moveaxis(z, -2, -3)


def merge_heads(z: np.ndarray) -> np.ndarray:
    z = np.moveaxis(z, -3, -2)
    return z.reshape(z.shape[:-2] + (z.shape[-2] * z.shape[-1],))


def attend_heads(params: AttentionParams, xq: np.ndarray, k: np.ndarray, v: np.ndarray,
                 mask: np.ndarray | None = None) -> np.ndarray:
    """Attention of projected queries against already-split keys/values."""
    q = split_heads(xq, params.wq, params.heads)
    return merge_heads(masked_attention(q, k, v, mask)) @ params.wo.T


def multihead_attention(params: AttentionParams, xq: np.ndarray, xkv: np.ndarray,
                        mask: np.ndarray | None = None) -> np.ndarray:
    k = split_heads(xkv, params.wk, params.heads)
    v = split_heads(xkv, params.wv, params.heads)
    return attend_heads(params, xq, k, v, mask)
