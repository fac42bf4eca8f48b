"""Fast-weight memory updated at inference time.

Each TTT layer owns frozen projections (queries, keys, values) and a
:class:`FastWeightState` holding one SwiGLU network per head. A chunk is
processed apply-then-update: the chunk reads the memory written by earlier
chunks, then one Muon step on the chunk's key->value regression writes it.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError
from .numerics import SwigluParams, swiglu_forward, swiglu_grad

# quintic Newton-Schulz coefficients (fast growth of small singular values)
NS_COEFFS = (3.4445, -4.7750, 2.0315)


@dataclass(frozen=True)
class TTTConfig:
    lr: float = 0.05
    momentum: float = 0.0
    ns_iters: int = 5
    polish_iters: int = 4
    head_dim: int = 16
    expansion: int = 4
    reset_period: int = 5

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("TTT learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.ns_iters < 1:
            raise ConfigError("need at least one Newton-Schulz iteration")
        if self.polish_iters < 0 or self.reset_period < 0:
            raise ConfigError("iteration counts must be non-negative")
        if self.head_dim < 1 or self.expansion < 1:
            raise ConfigError("head_dim and expansion must be positive")


@dataclass
class TTTProjections:
    """Frozen per-layer maps from model tokens to per-head q/k/v.

    Each matrix is (heads * head_dim, model_dim); the apply output of all
    heads is concatenated back to heads * head_dim == model_dim features.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    heads: int

    @classmethod
    def init(cls, model_dim: int, heads: int, rng: np.random.Generator) -> "TTTProjections":
        if model_dim % heads:
            raise ConfigError("model_dim must be divisible by the number of TTT heads")
        mats = []
        for _ in range(3):
            a = rng.normal(size=(model_dim, model_dim))
            qmat, r = np.linalg.qr(a)
            mats.append(qmat * np.sign(np.diag(r)))
        return cls(*mats, heads=heads)

    @property
    def head_dim(self) -> int:
        return self.wq.shape[0] // self.heads


@dataclass
class ProjectedTokens:
    q: list
    k: list
    v: list


def project_tokens(proj: TTTProjections, tokens: np.ndarray) -> ProjectedTokens:
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2 or tokens.shape[1] != proj.wq.shape[1]:
        raise ShapeError(f"tokens {tokens.shape} do not match projection input {proj.wq.shape[1]}")
    hd = proj.head_dim

    def split(w):
        z = tokens @ w.T
        return [z[:, h * hd:(h + 1) * hd] for h in range(proj.heads)]

    return ProjectedTokens(split(proj.wq), split(proj.wk), split(proj.wv))


@dataclass
class FastWeightState:
    params: list  # SwigluParams per head
    momentum: list  # SwigluParams-shaped buffers per head
    initial_params: list
    chunks_absorbed: int = 0

    @classmethod
    def init(cls, heads: int, cfg: TTTConfig, rng: np.random.Generator) -> "FastWeightState":
        params = [SwigluParams.init(cfg.head_dim, cfg.expansion, rng) for _ in range(heads)]
        return cls(params=params,
                   momentum=[_zeros_like(p) for p in params],
                   initial_params=[p.copy() for p in params])

    @property
    def heads(self) -> int:
        return len(self.params)

    def copy(self) -> "FastWeightState":
        return FastWeightState([p.copy() for p in self.params],
                               [m.copy() for m in self.momentum],
                               [p.copy() for p in self.initial_params],
                               self.chunks_absorbed)

    def nbytes(self) -> int:
        return sum(a.nbytes for group in (self.params, self.momentum, self.initial_params)
                   for p in group for a in p.arrays())

    def equals(self, other: "FastWeightState") -> bool:
        """Bitwise equality of every array and the counter."""
        if self.chunks_absorbed != other.chunks_absorbed or self.heads != other.heads:
            return False
        for mine, theirs in zip(self._all_arrays(), other._all_arrays()):
            if mine.shape != theirs.shape or mine.tobytes() != theirs.tobytes():
                return False
        return True

    def params_equal_initial(self) -> bool:
        return all(a.tobytes() == b.tobytes()
                   for p, q in zip(self.params, self.initial_params)
                   for a, b in zip(p.arrays(), q.arrays()))

    def _all_arrays(self):
        for group in (self.params, self.momentum, self.initial_params):
            for p in group:
                yield from p.arrays()


def _zeros_like(p: SwigluParams) -> SwigluParams:
    return SwigluParams(*(np.zeros_like(a) for a in p.arrays()))


# ---------------------------------------------------------------------------
# Muon


def newton_schulz(g: np.ndarray, iters: int = 5, polish_iters: int = 4) -> np.ndarray:
    """Approximate the orthogonal polar factor U V^T of ``g``.

    The tuned quintic iteration quickly lifts small singular values into
    roughly [0.7, 1.2] but does not converge to 1; the cubic polish steps
    (1.5 X - 0.5 X X^T X) then converge quadratically on that band.
    """
    g = np.asarray(g, dtype=np.float64)
    norm = np.linalg.norm(g)
    if norm == 0.0:
        return np.zeros_like(g)
    tall = g.shape[0] > g.shape[1]
    x = g.T if tall else g
    x = x / (norm + 1e-12)
    a, b, c = NS_COEFFS
    for _ in range(iters):
        s = x @ x.T
        x = a * x + (b * s + c * s @ s) @ x
    for _ in range(polish_iters):
        x = 1.5 * x - 0.5 * (x @ x.T) @ x
    return x.T if tall else x


def muon_step(grad: np.ndarray, momentum: np.ndarray, cfg: TTTConfig) -> tuple[np.ndarray, np.ndarray]:
    """Returns (update direction, new momentum); the caller scales by the lr."""
    new_momentum = cfg.momentum * momentum + grad
    return newton_schulz(new_momentum, cfg.ns_iters, cfg.polish_iters), new_momentum


# ---------------------------------------------------------------------------
# apply / update / reset


def ttt_apply(state: FastWeightState, tokens_normed: np.ndarray,
              proj: TTTProjections) -> np.ndarray:
    """Read the memory: concat_h f_{W_h}(q_h). Leaves ``state`` untouched."""
    if proj.heads != state.heads:
        raise ShapeError("projection heads do not match fast-weight heads")
    pt = project_tokens(proj, tokens_normed)
    return np.concatenate([swiglu_forward(p, q) for p, q in zip(state.params, pt.q)], axis=1)


def inner_loss(state: FastWeightState, tokens_normed: np.ndarray, proj: TTTProjections) -> float:
    """Mean over heads of the key->value regression error."""
    pt = project_tokens(proj, tokens_normed)
    total = 0.0
    for p, k, v in zip(state.params, pt.k, pt.v):
        r = swiglu_forward(p, k) - v
        total += float(np.mean(r * r))
    return total / state.heads


def ttt_update(state: FastWeightState, chunk_tokens: np.ndarray, cfg: TTTConfig,
               proj: TTTProjections) -> FastWeightState:
    """One Muon step on the chunk-mean inner loss; returns a new state."""
    chunk_tokens = np.asarray(chunk_tokens, dtype=np.float64)
    if chunk_tokens.ndim != 2 or chunk_tokens.shape[0] < 1:
        raise ShapeError("a TTT update needs at least one token")
    pt = project_tokens(proj, chunk_tokens)
    new_params, new_momentum = [], []
    for p, mom, k, v in zip(state.params, state.momentum, pt.k, pt.v):
        grads, _ = swiglu_grad(p, k, v)
        if not all(np.isfinite(g).all() for g in grads.arrays()):
            raise NumericalError("non-finite fast-weight gradient")
        upd, moms = [], []
        for w, g, m in zip(p.arrays(), grads.arrays(), mom.arrays()):
            direction, m_new = muon_step(g, m, cfg)
            upd.append(w - cfg.lr * direction)
            moms.append(m_new)
        new_params.append(SwigluParams(*upd))
        new_momentum.append(SwigluParams(*moms))
    return FastWeightState(new_params, new_momentum,
                           state.initial_params, state.chunks_absorbed + 1)


def reset_state(state: FastWeightState) -> FastWeightState:
    return FastWeightState([p.copy() for p in state.initial_params],
                           [_zeros_like(p) for p in state.initial_params],
                           state.initial_params, 0)


# ---------------------------------------------------------------------------
# snapshot serialization

_MAGIC = b"FWS1"
_NAMES = ("w_gate", "w_up", "w_down")


def serialize_states(states) -> bytes:
    """Pack fast-weight states as: magic, u64 header length, JSON header,
    then per state a u64 counter followed by little-endian float64 arrays
    (params, momentum, initial params; head-major)."""
    header = {"format": "fast-weights", "version": 1, "blocks": []}
    for st in states:
        header["blocks"].append({
            "heads": st.heads,
            "shapes": {n: list(a.shape) for n, a in zip(_NAMES, st.params[0].arrays())},
        })
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<Q", len(hbytes)))
    buf.write(hbytes)
    for st in states:
        buf.write(struct.pack("<Q", st.chunks_absorbed))
        for a in st._all_arrays():
            buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return buf.getvalue()


def deserialize_states(data: bytes) -> list:
    if data[:4] != _MAGIC:
        raise ShapeError("not a fast-weight snapshot")
    (hlen,) = struct.unpack("<Q", data[4:12])
    header = json.loads(data[12:12 + hlen])
    pos = 12 + hlen
    states = []
    for blk in header["blocks"]:
        (count,) = struct.unpack("<Q", data[pos:pos + 8])
        pos += 8
        groups = []
        for _ in range(3):
            group = []
            for _ in range(blk["heads"]):
                arrs = []
                for name in _NAMES:
                    shape = tuple(blk["shapes"][name])
                    n = int(np.prod(shape))
                    arrs.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos)
                                .reshape(shape).astype(np.float64))
                    pos += 8 * n
                group.append(SwigluParams(*arrs))
            groups.append(group)
        states.append(FastWeightState(groups[0], groups[1], groups[2], count))
    if pos != len(data):
        raise ShapeError("trailing bytes in fast-weight snapshot")
    return states
