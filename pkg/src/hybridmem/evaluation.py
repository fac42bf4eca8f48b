"""Trajectory evaluation, KITTI-style pose files and scaling benchmarks."""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .blocks import HybridStack, StackConfig, stack_forward
from .errors import AlignmentError, DegenerateError, ParseError, PoseError
from .geometry import PoseSE3, SimilaritySim3, Trajectory, project_to_rotation, umeyama_align
from .numerics import make_rng
from .stream import partition_chunks, working_set_bytes
from .swa import ChunkWindow

log = logging.getLogger(__name__)

REORTHO_TOL = 1e-3
EXACT_TOL = 1e-9


@dataclass
class AteReport:
    rmse: float
    errors: np.ndarray
    transform: SimilaritySim3
    n_frames: int
    alignment: str = "sim3"

    def to_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "n_frames": self.n_frames,
            "alignment": self.alignment,
            "scale": self.transform.s,
            "rotation": self.transform.R.tolist(),
            "translation": self.transform.t.tolist(),
            "mean_error": float(self.errors.mean()),
            "max_error": float(self.errors.max()),
        }


def compute_ate(pred: Trajectory, gt: Trajectory, alignment: str = "sim3") -> AteReport:
    """Translation RMSE of camera centers after Umeyama alignment of pred onto gt."""
    if alignment not in ("sim3", "se3"):
        raise ValueError("alignment must be 'sim3' or 'se3'")
    if list(pred.frame_ids) != list(gt.frame_ids):
        raise AlignmentError("predicted and ground-truth frame ids differ")
    if len(gt) < 3:
        raise DegenerateError("ATE needs at least three frames")
    src, dst = pred.centers(), gt.centers()
    g = umeyama_align(src, dst, with_scale=alignment == "sim3")
    err = np.linalg.norm(g.apply(src) - dst, axis=1)
    return AteReport(float(np.sqrt(np.mean(err ** 2))), err, g, len(gt), alignment)


# ---------------------------------------------------------------------------
# pose files


def pose_from_row(values, line=None, stats=None) -> PoseSE3:
    """12 floats, row-major 3x4 [R|t]. Rotations off by <= 1e-3 are projected
    back onto SO(3) (counted in ``stats['reorthonormalized']``)."""
    if len(values) != 12:
        raise ParseError(f"expected 12 values, got {len(values)}", line=line)
    m = np.asarray(values, dtype=np.float64).reshape(3, 4)
    r = m[:, :3]
    if not np.isfinite(m).all():
        raise ParseError("non-finite pose value", line=line)
    dev = max(np.abs(r.T @ r - np.eye(3)).max(), abs(np.linalg.det(r) - 1.0))
    if dev > REORTHO_TOL:
        raise PoseError(f"line {line}: rotation deviates from orthonormal by {dev:.3g}")
    if dev > EXACT_TOL:
        r = project_to_rotation(r)
        if stats is not None:
            stats["reorthonormalized"] = stats.get("reorthonormalized", 0) + 1
        log.warning("line %s: re-orthonormalized rotation (deviation %.3g)", line, dev)
    return PoseSE3(r, m[:, 3])


def read_pose_file(path) -> tuple[Trajectory, dict]:
    """Parse a pose file; returns the trajectory and parse statistics."""
    stats = {"reorthonormalized": 0}
    poses = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            values = [float(tok) for tok in line.split()]
        except ValueError as exc:
            raise ParseError(str(exc), line=n) from None
        poses.append(pose_from_row(values, line=n, stats=stats))
    return Trajectory(list(range(len(poses))), poses), stats


def parse_pose_file(path) -> Trajectory:
    return read_pose_file(path)[0]


def write_pose_file(traj: Trajectory, path) -> None:
    lines = []
    for p in traj.poses:
        m = np.hstack([p.R, p.t[:, None]]).ravel()
        lines.append(" ".join(f"{v:.17g}" for v in m))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# scaling benchmark

BENCH_CONFIGS = ("hybrid", "swa_only", "ttt_only", "full_attention")


def bench_stack_config(name: str, base: StackConfig = StackConfig()) -> StackConfig:
    if name == "hybrid":
        return base
    if name == "swa_only":
        return replace(base, ttt_enabled=False)
    if name == "ttt_only":
        return replace(base, swa_depths=())
    if name == "full_attention":
        return replace(base, swa_depths=(), ttt_enabled=False)
    raise ValueError(f"unknown benchmark config {name!r}; choose from {BENCH_CONFIGS}")


@dataclass
class BenchReport:
    lengths: list
    seconds: dict  # config -> list of median seconds per length
    state_bytes: dict  # config -> list of peak working-set bytes per length
    chunk_latency: dict  # config -> per-chunk seconds at the longest length
    slopes: dict = field(default_factory=dict)

    def rows(self):
        for cfg, times in self.seconds.items():
            for n, t, b in zip(self.lengths, times, self.state_bytes[cfg]):
                yield n, cfg, t, b


def loglog_slope(lengths, times) -> float:
    return float(np.polyfit(np.log(lengths), np.log(times), 1)[0])


def _run_once(stack: HybridStack, features: np.ndarray, chunk_size: int, overlap: int):
    n = features.shape[0]
    plan = partition_chunks(n, min(chunk_size, n), min(overlap, max(min(chunk_size, n) - 1, 1)))
    state = stack.init_state()
    peak = 0
    latencies = []
    for m, frames in enumerate(plan.chunks):
        window = ChunkWindow(features[list(frames)], tuple(frames), plan.statuses(m), m)
        t0 = time.perf_counter()
        _, state = stack_forward(stack, window, state, reset_period=0)
        latencies.append(time.perf_counter() - t0)
        peak = max(peak, working_set_bytes(stack, state, window))
    return sum(latencies), peak, latencies


def bench_scaling(configs=("hybrid", "full_attention"), lengths=(64, 128, 256, 512),
                  chunk_size: int = 16, overlap: int = 2, repeats: int = 3, seed: int = 0,
                  base: StackConfig = StackConfig()) -> BenchReport:
    """Wall time and peak working set versus sequence length.

    Chunked configs process ``chunk_size``-frame chunks; ``full_attention``
    treats the whole sequence as one chunk. Each point is the median of
    ``repeats`` timed runs after one discarded warm-up run.
    """
    lengths = sorted(int(n) for n in lengths)
    if len(lengths) < 3 or lengths[-1] < 4 * lengths[0]:
        raise ValueError("need at least three lengths spanning a 4x range")
    rng = make_rng(seed)
    report = BenchReport(lengths, {}, {}, {})
    for name in configs:
        cfg = bench_stack_config(name, base)
        stack = HybridStack(cfg, seed)
        times, peaks = [], []
        for n in lengths:
            feats = rng.normal(size=(n, cfg.tokens_per_frame, cfg.patch_features))
            cs = n if name == "full_attention" else chunk_size
            _run_once(stack, feats[:min(n, 2 * cs)], cs, overlap)
            runs = [_run_once(stack, feats, cs, overlap) for _ in range(repeats)]
            times.append(statistics.median(r[0] for r in runs))
            peaks.append(max(r[1] for r in runs))
            report.chunk_latency[name] = runs[-1][2]
        report.seconds[name] = times
        report.state_bytes[name] = peaks
        report.slopes[name] = loglog_slope(lengths, times)
    return report


def write_bench_csv(report: BenchReport, path) -> None:
    lines = ["length,config,seconds,state_bytes"]
    lines += [f"{n},{cfg},{t:.9g},{b}" for n, cfg, t, b in report.rows()]
    Path(path).write_text("\n".join(lines) + "\n")
