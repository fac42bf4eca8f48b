"""Feedforward stitching of per-chunk predictions through overlap frames.

Rigid mode chains one SE(3) transform per seam, computed from the pose of
an overlap frame as seen by both chunks. Similarity mode first rescales the
incoming chunk by the median ratio of overlap pointmap norms, then applies
the same rigid chaining to the rescaled poses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateError, StitchError
from .geometry import Pointmap, PoseSE3, Trajectory, se3_compose, se3_inverse, transform_pointmap

NORM_EPS = 1e-9
MODES = ("rigid", "similarity")


@dataclass
class ChunkPrediction:
    index: int
    frame_ids: list
    poses: list  # PoseSE3 per frame, raw (chunk gauge)
    pointmaps: list | None = None  # Pointmap per frame, raw

    def __post_init__(self):
        self.frame_ids = [int(i) for i in self.frame_ids]
        if len(self.poses) != len(self.frame_ids):
            raise ValueError("one pose per frame")
        if self.pointmaps is not None and len(self.pointmaps) != len(self.frame_ids):
            raise ValueError("one pointmap per frame")

    def position(self, frame_id: int) -> int:
        return self.frame_ids.index(frame_id)


@dataclass
class AlignedChunk:
    index: int
    frame_ids: list
    poses: list  # aligned camera-to-world poses
    pointmaps: list | None  # scale-adjusted local pointmaps
    transform: PoseSE3
    scale: float = 1.0


@dataclass
class AlignedStream:
    chunks: list = field(default_factory=list)  # AlignedChunk per input chunk

    @property
    def transforms(self) -> list:
        return [c.transform for c in self.chunks]

    @property
    def scales(self) -> list:
        return [c.scale for c in self.chunks]

    def frame_poses(self) -> dict:
        """Frame id -> aligned pose; an overlap frame keeps its earliest chunk's pose."""
        out = {}
        for c in self.chunks:
            for fid, pose in zip(c.frame_ids, c.poses):
                out.setdefault(fid, pose)
        return out

    def trajectory(self) -> Trajectory:
        poses = self.frame_poses()
        ids = sorted(poses)
        return Trajectory(ids, [poses[i] for i in ids])

    def frame_pointmaps(self) -> dict:
        """Frame id -> scale-adjusted local pointmap (earliest chunk wins)."""
        out = {}
        for c in self.chunks:
            for fid, pm in zip(c.frame_ids, c.pointmaps or ()):
                out.setdefault(fid, pm)
        return out

    def world_pointmaps(self) -> dict:
        """Frame id -> world points of the scale-adjusted pointmap under the aligned pose."""
        out = {}
        for c in self.chunks:
            if c.pointmaps is None:
                continue
            for fid, pose, pm in zip(c.frame_ids, c.poses, c.pointmaps):
                if fid not in out:
                    out[fid] = transform_pointmap(pose, pm)
        return out


def align_chunk_se3(prev_aligned_overlap_pose: PoseSE3, cur_raw_overlap_pose: PoseSE3) -> PoseSE3:
    """A such that A @ cur_raw_overlap_pose == prev_aligned_overlap_pose."""
    prev_aligned_overlap_pose.validate()
    cur_raw_overlap_pose.validate()
    return se3_compose(prev_aligned_overlap_pose, se3_inverse(cur_raw_overlap_pose))


def _as_list(pm):
    return [pm] if isinstance(pm, Pointmap) else list(pm)


def scale_ratios(prev_adjusted, cur_raw) -> np.ndarray:
    """Per-pixel ||x_prev|| / ||x_cur|| over jointly valid pixels, pooled across frames."""
    ratios = []
    for a, b in zip(_as_list(prev_adjusted), _as_list(cur_raw)):
        na = np.linalg.norm(a.points, axis=-1)
        nb = np.linalg.norm(b.points, axis=-1)
        ok = a.valid & b.valid & (na > NORM_EPS) & (nb > NORM_EPS)
        ratios.append(na[ok] / nb[ok])
    return np.concatenate(ratios) if ratios else np.zeros(0)


def lower_median(values: np.ndarray) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    return float(v[(v.size - 1) // 2])


def truncated_mean(values: np.ndarray, trim: float = 0.1) -> float:
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    cut = int(np.floor(trim * v.size))
    return float(v[cut:v.size - cut].mean())


def estimate_chunk_scale(prev_adjusted_overlap_pm, cur_raw_overlap_pm,
                         estimator: str = "median") -> float:
    """Relative scale of the incoming chunk from overlap pointmap norms.

    Either argument may be a single :class:`Pointmap` or a sequence of them
    (one per overlap frame); pixels are pooled. Even counts take the lower
    median.
    """
    ratios = scale_ratios(prev_adjusted_overlap_pm, cur_raw_overlap_pm)
    if ratios.size == 0:
        raise DegenerateError("no jointly valid overlap pixels for scale estimation")
    if estimator == "median":
        return lower_median(ratios)
    if estimator == "truncated_mean":
        return truncated_mean(ratios)
    raise ValueError(f"unknown scale estimator {estimator!r}")


def _overlap_ids(prev: AlignedChunk, cur: ChunkPrediction) -> list:
    shared = sorted(set(prev.frame_ids) & set(cur.frame_ids))
    if not shared:
        raise StitchError(f"chunks {prev.index} and {cur.index} share no overlap frame")
    return shared


def align_chunk_sim3(prev: AlignedChunk, cur: ChunkPrediction,
                     estimator: str = "median") -> AlignedChunk:
    """Rescale ``cur`` against the previous aligned chunk, then chain rigidly."""
    if cur.pointmaps is None or prev.pointmaps is None:
        raise DegenerateError("similarity alignment needs pointmaps on both sides")
    shared = _overlap_ids(prev, cur)
    s = estimate_chunk_scale([prev.pointmaps[prev.frame_ids.index(f)] for f in shared],
                             [cur.pointmaps[cur.position(f)] for f in shared], estimator)
    scaled_poses = [PoseSE3(p.R, s * p.t) for p in cur.poses]
    k = shared[-1]
    a = align_chunk_se3(prev.poses[prev.frame_ids.index(k)], scaled_poses[cur.position(k)])
    return AlignedChunk(cur.index, list(cur.frame_ids),
                        [se3_compose(a, p) for p in scaled_poses],
                        [pm.scaled(s) for pm in cur.pointmaps], a, s)


def align_chunk_rigid(prev: AlignedChunk, cur: ChunkPrediction) -> AlignedChunk:
    k = _overlap_ids(prev, cur)[-1]
    a = align_chunk_se3(prev.poses[prev.frame_ids.index(k)], cur.poses[cur.position(k)])
    return AlignedChunk(cur.index, list(cur.frame_ids), [se3_compose(a, p) for p in cur.poses],
                        cur.pointmaps, a, 1.0)


def passthrough(chunk: ChunkPrediction) -> AlignedChunk:
    return AlignedChunk(chunk.index, list(chunk.frame_ids), list(chunk.poses),
                        chunk.pointmaps, PoseSE3.identity(), 1.0)


def stitch_stream(chunks, mode: str = "rigid", estimator: str = "median") -> AlignedStream:
    """Chain chunk predictions left to right into one global frame."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    out = AlignedStream()
    for i, chunk in enumerate(chunks):
        if i == 0:
            out.chunks.append(passthrough(chunk))
        elif mode == "rigid":
            out.chunks.append(align_chunk_rigid(out.chunks[-1], chunk))
        else:
            out.chunks.append(align_chunk_sim3(out.chunks[-1], chunk, estimator))
    return out
