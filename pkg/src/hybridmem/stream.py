"""Chunked streaming: partitioning, synthetic scenes, oracle predictors,
the streaming loop with periodic memory resets, and a key-value recall probe.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import (AlignedChunk, AlignedStream, ChunkPrediction, align_chunk_rigid,
                        align_chunk_sim3, passthrough)
from .blocks import reset_due
from .errors import ConfigError
from .geometry import (Pointmap, PoseSE3, SimilaritySim3, Trajectory, axis_angle, se3_compose,
                       sim3_apply)
from .numerics import make_rng
from .swa import ChunkWindow, OverlapStatus
from .ttt import FastWeightState, TTTConfig, TTTProjections, ttt_apply, ttt_update

# ---------------------------------------------------------------------------
# partitioning


@dataclass(frozen=True)
class PartitionPlan:
    n_frames: int
    chunk_size: int
    overlap: int
    chunks: tuple  # tuple of tuples of frame ids

    def __len__(self) -> int:
        return len(self.chunks)

    def statuses(self, m: int) -> tuple:
        """Overlap status of every frame of chunk ``m`` (previous wins over next)."""
        prev = set(self.chunks[m - 1]) if m > 0 else set()
        nxt = set(self.chunks[m + 1]) if m + 1 < len(self.chunks) else set()
        out = []
        for f in self.chunks[m]:
            if f in prev:
                out.append(OverlapStatus.OVERLAPS_PREVIOUS)
            elif f in nxt:
                out.append(OverlapStatus.OVERLAPS_NEXT)
            else:
                out.append(OverlapStatus.NO_OVERLAP)
        return tuple(out)


def chunk_count(n_frames: int, chunk_size: int, overlap: int) -> int:
    return 1 + math.ceil(max(0, n_frames - chunk_size) / (chunk_size - overlap))


def partition_chunks(n_frames: int, chunk_size: int, overlap: int) -> PartitionPlan:
    """Split frames 0..n-1 into chunks sharing ``overlap`` frames at each seam."""
    if n_frames < 1:
        raise ConfigError("need at least one frame")
    if overlap < 1 or overlap >= chunk_size:
        raise ConfigError(f"overlap must satisfy 1 <= overlap < chunk_size, got {overlap}, {chunk_size}")
    stride = chunk_size - overlap
    m = chunk_count(n_frames, chunk_size, overlap)
    chunks = tuple(tuple(range(i * stride, min(i * stride + chunk_size, n_frames))) for i in range(m))
    return PartitionPlan(n_frames, chunk_size, overlap, chunks)


# ---------------------------------------------------------------------------
# synthetic scenes

MOTIONS = ("straight", "turn", "loop", "mixed")


@dataclass
class SyntheticScene:
    trajectory: Trajectory
    pointmaps: list  # Pointmap per frame, local camera coordinates
    motion: str
    seed: int
    z_range: tuple = (2.0, 8.0)

    @property
    def n_frames(self) -> int:
        return len(self.trajectory)

    def pose(self, frame_id: int) -> PoseSE3:
        return self.trajectory.poses[frame_id]


def _yaw_rates(n: int, motion: str, rng: np.random.Generator) -> np.ndarray:
    if motion == "straight":
        return 0.02 * np.sin(np.linspace(0, 4 * np.pi, n))
    if motion == "turn":
        rates = np.zeros(n)
        third = max(1, n // 3)
        rates[third:2 * third] = (np.pi / 2) / third
        return rates
    if motion == "loop":
        return np.full(n, 2 * np.pi / max(n - 1, 1))
    if motion == "mixed":
        rates = np.zeros(n)
        i = 0
        while i < n:
            seg = int(rng.integers(8, 24))
            if rng.random() < 0.5:
                rates[i:i + seg] = rng.uniform(-0.08, 0.08)
            i += seg
        return rates
    raise ConfigError(f"unknown motion model {motion!r}; choose from {MOTIONS}")


def generate_scene(n_frames: int, motion: str = "mixed", seed: int = 0, image_hw=(4, 4),
                   z_range=(2.0, 8.0), step: float = 1.0) -> SyntheticScene:
    """Camera trajectory plus a smooth random depth surface per frame.

    Cameras look along their local +z axis; the heading turns about the
    world y axis and the height oscillates so trajectories are never planar
    or collinear.
    """
    if n_frames < 1:
        raise ConfigError("need at least one frame")
    rng = make_rng(seed)
    rates = _yaw_rates(n_frames, motion, rng)
    heading = np.concatenate([[0.0], np.cumsum(rates[:-1])])
    period = max(n_frames - 1, 1)
    phase = np.arange(n_frames) * 2 * np.pi / period
    height = 0.5 * np.sin(phase) * step
    pos = np.zeros((n_frames, 3))
    for t in range(1, n_frames):
        th = heading[t - 1]
        pos[t, [0, 2]] = pos[t - 1, [0, 2]] + step * np.array([np.sin(th), np.cos(th)])
    pos[:, 1] = height
    poses = [PoseSE3(axis_angle([0, 1, 0], heading[t]) @ axis_angle([1, 0, 0], 0.05 * np.sin(3 * phase[t])),
                     pos[t]) for t in range(n_frames)]

    h, w = image_hw
    v, u = np.meshgrid(np.linspace(-0.5, 0.5, h), np.linspace(-0.5, 0.5, w), indexing="ij")
    z_min, z_max = z_range
    pointmaps = []
    for _ in range(n_frames):
        amp = rng.uniform(0.1, 0.5, size=2)
        freq = rng.uniform(1.0, 3.0, size=2)
        ph = rng.uniform(0, 2 * np.pi, size=2)
        base = rng.uniform(0.3, 0.7)
        shape = base + 0.5 * (amp[0] * np.sin(freq[0] * u * np.pi + ph[0])
                              + amp[1] * np.cos(freq[1] * v * np.pi + ph[1]))
        z = z_min + (z_max - z_min) * np.clip(shape, 0.0, 1.0)
        pointmaps.append(Pointmap(np.stack([u * z, v * z, z], axis=-1)))
    return SyntheticScene(Trajectory(list(range(n_frames)), poses), pointmaps, motion, seed,
                          tuple(z_range))


def patch_features(pointmaps, patch: int = 2) -> np.ndarray:
    """(F, P, patch*patch*3) token features from full-resolution pointmaps."""
    arr = np.stack([pm.points for pm in pointmaps])
    f, h, w, _ = arr.shape
    arr = arr.reshape(f, h // patch, patch, w // patch, patch, 3).transpose(0, 1, 3, 2, 4, 5)
    return arr.reshape(f, (h // patch) * (w // patch), patch * patch * 3)


# ---------------------------------------------------------------------------
# oracle predictors

GAUGE_MODES = ("none", "per_chunk_se3", "per_chunk_sim3", "per_segment_se3")


@dataclass(frozen=True)
class OracleConfig:
    gauge_mode: str = "per_chunk_se3"
    pose_noise_t: float = 0.0
    pose_noise_rot: float = 0.0
    scale_noise: float = 0.0
    seed: int = 0
    gauge_log_scale_std: float = 0.5

    def __post_init__(self):
        if self.gauge_mode not in GAUGE_MODES:
            raise ConfigError(f"gauge_mode must be one of {GAUGE_MODES}")
        if min(self.pose_noise_t, self.pose_noise_rot, self.scale_noise) < 0:
            raise ConfigError("noise levels must be non-negative")


def _gauge(cfg: OracleConfig, key: int) -> SimilaritySim3:
    if cfg.gauge_mode == "none":
        return SimilaritySim3.identity()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 7919, key])))
    g = SimilaritySim3.random(rng, cfg.gauge_log_scale_std)
    if cfg.gauge_mode != "per_chunk_sim3":
        g = SimilaritySim3(1.0, g.R, g.t)
    return g


def _predict_frames(scene: SyntheticScene, frame_ids, g: SimilaritySim3, cfg: OracleConfig,
                    key: int, lead_overlap=()) -> tuple[list, list]:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 104729, key])))
    eta = float(np.exp(rng.normal(0.0, cfg.scale_noise))) if cfg.scale_noise > 0 else 1.0
    poses, pms = [], []
    for f in frame_ids:
        p = sim3_apply(g, scene.pose(f))
        if cfg.pose_noise_rot > 0:
            p = PoseSE3(axis_angle(rng.normal(size=3), rng.normal(0.0, cfg.pose_noise_rot)) @ p.R, p.t)
        if cfg.pose_noise_t > 0:
            p = PoseSE3(p.R, p.t + g.s * rng.normal(0.0, cfg.pose_noise_t, size=3))
        poses.append(p)
        pm = scene.pointmaps[f].scaled(g.s)
        # scale noise: the seam frames disagree with the rest of the chunk
        pms.append(pm.scaled(eta) if f in lead_overlap else pm)
    return poses, pms


def oracle_predict(scene: SyntheticScene, plan: PartitionPlan, cfg: OracleConfig) -> list:
    """Ground truth re-expressed in an independent random gauge per chunk."""
    out = []
    for m, frames in enumerate(plan.chunks):
        lead = set(plan.chunks[m - 1]) & set(frames) if m > 0 else set()
        key = 0 if cfg.gauge_mode == "per_segment_se3" else m
        poses, pms = _predict_frames(scene, frames, _gauge(cfg, key), cfg, m, lead)
        out.append(ChunkPrediction(m, list(frames), poses, pms))
    return out


@dataclass
class OracleState:
    chunks_seen: int = 0
    segment: int = 0
    reset_applied: bool = False

    def nbytes(self) -> int:
        return 0


@dataclass
class OracleOutput:
    poses: list
    pointmaps: list


class OracleModel:
    """Stands in for the network inside :func:`run_stream`.

    Predictions are exact (or noised) truth expressed in a gauge that is
    fixed within a memory segment and redrawn at every reset, which is what
    a model with working long-range memory would emit.
    """

    def __init__(self, scene: SyntheticScene, cfg: OracleConfig = OracleConfig("per_segment_se3")):
        self.scene = scene
        self.cfg = cfg

    def init_state(self) -> OracleState:
        return OracleState()

    def reset(self, state: OracleState) -> OracleState:
        return OracleState(state.chunks_seen, state.segment + 1, True)

    def forward(self, window: ChunkWindow, state: OracleState, reset_period: int = 0):
        if reset_due(state.chunks_seen, reset_period):
            state = self.reset(state)
        else:
            state = OracleState(state.chunks_seen, state.segment, False)
        key = state.segment if self.cfg.gauge_mode == "per_segment_se3" else state.chunks_seen
        poses, pms = _predict_frames(self.scene, window.cur_frame_ids, _gauge(self.cfg, key),
                                     self.cfg, state.chunks_seen)
        return OracleOutput(poses, pms), OracleState(state.chunks_seen + 1, state.segment,
                                                     state.reset_applied)


# ---------------------------------------------------------------------------
# streaming loop

ALIGN_MODES = ("none", "rigid", "sim3")


@dataclass
class ChunkDiagnostics:
    index: int
    frame_ids: list
    seconds: float
    state_bytes: int
    reset: bool
    scale: float


@dataclass
class StreamResult:
    aligned: AlignedStream
    raw: list  # ChunkPrediction per chunk
    diagnostics: list = field(default_factory=list)
    final_state: object = None

    def trajectory(self) -> Trajectory:
        return self.aligned.trajectory()

    @property
    def frame_ids(self) -> list:
        return self.trajectory().frame_ids


def _to_pointmaps(pms) -> list:
    if isinstance(pms, np.ndarray):
        # (F, P, 3) patch-level predictions become (P, 1, 3) pointmaps
        return [Pointmap(p.reshape(-1, 1, 3)) for p in pms]
    return list(pms)


def working_set_bytes(model, state, window: ChunkWindow) -> int:
    """State bytes plus the chunk's token activations and attention scores."""
    total = state.nbytes()
    cfg = getattr(model, "cfg", None)
    if cfg is not None and hasattr(cfg, "model_dim"):
        n_tok = len(window.cur_frame_ids) * cfg.tokens_per_frame
        total += n_tok * cfg.model_dim * 8
        keys = 2 * n_tok if cfg.swa_depths else n_tok
        total += cfg.heads * n_tok * keys * 8
    return int(total)


def run_stream(model, scene: SyntheticScene, plan: PartitionPlan, reset_period: int = 5,
               align_mode: str = "rigid", features=None, on_chunk_start=None) -> StreamResult:
    """Process chunks left to right, resetting memory every ``reset_period`` chunks.

    ``align_mode`` selects seam handling: ``rigid`` chains an SE(3) transform
    at every seam, ``sim3`` additionally rescales each chunk, ``none`` keeps
    raw poses and only re-anchors (rigidly) at reset boundaries.
    ``on_chunk_start(m, state)`` is called after any reset, before chunk m runs.
    """
    if align_mode not in ALIGN_MODES:
        raise ConfigError(f"align_mode must be one of {ALIGN_MODES}")
    if features is None:
        features = patch_features(scene.pointmaps)
    state = model.init_state()
    result = StreamResult(AlignedStream(), [])
    carried = PoseSE3.identity()
    for m, frames in enumerate(plan.chunks):
        window = ChunkWindow(features[list(frames)], tuple(frames), plan.statuses(m), m)
        if reset_due(state.chunks_seen, reset_period):
            state = model.reset(state)
            forced = True
        else:
            forced = False
        if on_chunk_start is not None:
            on_chunk_start(m, state)
        t0 = time.perf_counter()
        out, state = model.forward(window, state, reset_period=0)
        seconds = time.perf_counter() - t0
        raw = ChunkPrediction(m, list(frames), list(out.poses), _to_pointmaps(out.pointmaps))
        if m == 0:
            aligned = passthrough(raw)
        elif align_mode == "rigid":
            aligned = align_chunk_rigid(result.aligned.chunks[-1], raw)
        elif align_mode == "sim3":
            aligned = align_chunk_sim3(result.aligned.chunks[-1], raw)
        elif forced:
            aligned = align_chunk_rigid(result.aligned.chunks[-1], raw)
            carried = aligned.transform
        else:
            aligned = AlignedChunk(m, list(frames), [se3_compose(carried, p) for p in raw.poses],
                                   raw.pointmaps, carried, 1.0)
        result.raw.append(raw)
        result.aligned.chunks.append(aligned)
        result.diagnostics.append(ChunkDiagnostics(m, list(frames), seconds,
                                                   working_set_bytes(model, state, window),
                                                   forced, aligned.scale))
    result.final_state = state
    return result


# ---------------------------------------------------------------------------
# JSON-lines dumps


def pose_row(pose: PoseSE3) -> list:
    return np.hstack([pose.R, pose.t[:, None]]).ravel().tolist()


def write_predictions_jsonl(chunks, path, pointmap_dir=None) -> None:
    """One line per (chunk, frame): chunk, frame_id, 12 pose floats, optional .npy path."""
    path = Path(path)
    lines = []
    for c in chunks:
        for i, (fid, pose) in enumerate(zip(c.frame_ids, c.poses)):
            rec = {"chunk": c.index, "frame_id": fid, "pose": pose_row(pose)}
            if pointmap_dir is not None and c.pointmaps is not None:
                pm_path = Path(pointmap_dir) / f"chunk{c.index:04d}_frame{fid:06d}.npy"
                np.save(pm_path, c.pointmaps[i].points)
                rec["pointmap"] = str(pm_path)
            lines.append(json.dumps(rec))
    path.write_text("\n".join(lines) + "\n")


def read_predictions_jsonl(path) -> list:
    from .evaluation import pose_from_row

    by_chunk: dict = {}
    base = Path(path).parent
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        rec = json.loads(line)
        pose = pose_from_row(rec["pose"], line=n)
        pm = None
        if rec.get("pointmap"):
            p = Path(rec["pointmap"])
            pm = Pointmap(np.load(p if p.is_absolute() else base / p))
        by_chunk.setdefault(int(rec["chunk"]), []).append((int(rec["frame_id"]), pose, pm))
    out = []
    for idx in sorted(by_chunk):
        rows = sorted(by_chunk[idx], key=lambda r: r[0])
        pms = [r[2] for r in rows]
        out.append(ChunkPrediction(idx, [r[0] for r in rows], [r[1] for r in rows],
                                   pms if all(p is not None for p in pms) else None))
    return out


def write_scene_jsonl(scene: SyntheticScene, path) -> None:
    lines = [json.dumps({"frame_id": f, "pose": pose_row(p)})
             for f, p in zip(scene.trajectory.frame_ids, scene.trajectory.poses)]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# key-value recall


@dataclass
class RecallReport:
    n_pairs: int
    dims: int
    before: float
    after: float
    per_pair_before: np.ndarray
    per_pair_after: np.ndarray


def recall_pairs(n_pairs: int, dims: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Keys with orthogonal directions (when n_pairs <= dims) and Gaussian values."""
    rng = make_rng(seed)
    if n_pairs <= dims:
        q, _ = np.linalg.qr(rng.normal(size=(dims, dims)))
        keys = q.T[:n_pairs] * np.sqrt(dims)
    else:
        keys = rng.normal(size=(n_pairs, dims))
    values = rng.normal(size=(n_pairs, dims))
    return keys, values


def recall_task(n_pairs: int, dims: int, seed: int = 0, lr: float = 0.05, passes: int = 1,
                chunk_size: int | None = None, expansion: int = 4) -> RecallReport:
    """Write key->value pairs into a fresh fast-weight memory chunk by chunk,
    then read every key back.

    Tokens are [key | value] with projections selecting the halves, so the
    regular update/apply path is exercised unchanged.
    """
    if n_pairs < 1:
        raise ConfigError("need at least one pair")
    keys, values = recall_pairs(n_pairs, dims, seed)
    eye, zero = np.eye(dims), np.zeros((dims, dims))
    proj = TTTProjections(wq=np.hstack([eye, zero]), wk=np.hstack([eye, zero]),
                          wv=np.hstack([zero, eye]), heads=1)
    cfg = TTTConfig(lr=lr, head_dim=dims, expansion=expansion, reset_period=0)
    state = FastWeightState.init(1, cfg, make_rng(seed + 1))
    tokens = np.hstack([keys, values])

    def errors(st):
        r = ttt_apply(st, tokens, proj) - values
        return (r * r).mean(axis=1)

    before = errors(state)
    step = chunk_size or n_pairs
    for _ in range(passes):
        for i in range(0, n_pairs, step):
            state = ttt_update(state, tokens[i:i + step], cfg, proj)
    after = errors(state)
    return RecallReport(n_pairs, dims, float(before.mean()), float(after.mean()), before, after)
