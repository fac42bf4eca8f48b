"""Training objective: scale-aligned local pointmap loss, relative pose loss,
world-frame pointmap loss and their weighted sum.

Pointmap arrays are (N, H, W, 3) in local camera coordinates; ground-truth
depth is the third coordinate of the ground-truth points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateError, PoseError
from .geometry import PoseSE3, check_rotation


@dataclass(frozen=True)
class LossWeights:
    lambda_rot: float = 0.1
    lambda_trans: float = 10.0
    lambda_global: float = 1.0
    huber_delta: float = 1.0
    rot_kind: str = "frobenius"

    def __post_init__(self):
        if min(self.lambda_rot, self.lambda_trans, self.lambda_global) < 0 or self.huber_delta <= 0:
            raise ValueError("loss weights must be >= 0 and huber_delta > 0")
        if self.rot_kind not in ("frobenius", "geodesic"):
            raise ValueError(f"unknown rotation loss {self.rot_kind!r}")


@dataclass
class SupervisionBatch:
    pred_points: np.ndarray  # (N, H, W, 3)
    gt_points: np.ndarray  # (N, H, W, 3)
    pred_poses: list
    gt_poses: list
    valid: np.ndarray | None = None  # (N, H, W)
    pairs: list = field(default_factory=list)
    gt_depth: np.ndarray | None = None  # (N, H, W); defaults to gt_points[..., 2]

    def __post_init__(self):
        self.pred_points = np.asarray(self.pred_points, dtype=np.float64)
        self.gt_points = np.asarray(self.gt_points, dtype=np.float64)
        if self.pred_points.shape != self.gt_points.shape or self.pred_points.shape[-1] != 3:
            raise ValueError("predicted and ground-truth pointmaps must share an (N, H, W, 3) shape")
        if self.valid is None:
            self.valid = np.ones(self.gt_points.shape[:-1], dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.gt_depth is not None:
            self.gt_depth = np.asarray(self.gt_depth, dtype=np.float64)
            if self.gt_depth.shape != self.gt_points.shape[:-1]:
                raise ValueError("gt_depth must match the pointmap grid")
        if not self.pairs:
            self.pairs = [(i, i + 1) for i in range(len(self.pred_poses) - 1)]

    @property
    def depth(self) -> np.ndarray:
        return self.gt_points[..., 2] if self.gt_depth is None else self.gt_depth

    def n_valid(self) -> int:
        return int(self.valid.sum())


def default_pairs(chunk_frames, overlap_pairs=()) -> list:
    """Adjacent pairs inside every chunk plus any cross-chunk overlap pairs."""
    pairs = []
    for frames in chunk_frames:
        pairs.extend(zip(frames[:-1], frames[1:]))
    pairs.extend(overlap_pairs)
    return sorted(set(map(tuple, pairs)))


def _checked_depth(batch: SupervisionBatch) -> np.ndarray:
    z = batch.depth[batch.valid]
    if (z <= 0).any() or not np.isfinite(z).all():
        raise DataError("ground-truth depth must be positive on valid pixels")
    return z


def weighted_lower_median(values: np.ndarray, weights: np.ndarray) -> float:
    """Smallest v with cumulative weight >= half the total (argmin of sum w|s - v|)."""
    order = np.argsort(values, kind="stable")
    v = values[order]
    c = np.cumsum(weights[order])
    return float(v[np.searchsorted(c, 0.5 * c[-1])])


def solve_sequence_scale(batch: SupervisionBatch) -> float:
    """Scalar s > 0 minimizing sum_p (1/z_p) ||s xhat_p - x_p||_1.

    Per component the objective is (|a|/z) |s - b/a|, so the minimizer is a
    weighted median of the ratios b/a.
    """
    if batch.n_valid() == 0:
        raise DegenerateError("no valid pixels to solve the sequence scale")
    z = _checked_depth(batch)
    a = batch.pred_points[batch.valid]
    b = batch.gt_points[batch.valid]
    w = np.repeat((1.0 / z)[:, None], 3, axis=1) * np.abs(a)
    nz = a != 0
    if not nz.any():
        raise DegenerateError("prediction is identically zero")
    s = weighted_lower_median(b[nz] / a[nz], w[nz])
    if not s > 0:
        raise DegenerateError("optimal sequence scale is not positive")
    return s


def local_objective(batch: SupervisionBatch, s: float) -> float:
    z = _checked_depth(batch)
    r = s * batch.pred_points[batch.valid] - batch.gt_points[batch.valid]
    return float((np.abs(r).sum(axis=1) / z).sum())


def local_pointmap_loss(batch: SupervisionBatch, s: float) -> float:
    """Depth-normalized L1 averaged over all valid pixels of all frames."""
    if not s > 0:
        raise ValueError("scale must be positive")
    n = batch.n_valid()
    if n == 0:
        raise DegenerateError("no valid pixels")
    return local_objective(batch, s) / n


def relative_motion(a: PoseSE3, b: PoseSE3) -> tuple[np.ndarray, np.ndarray]:
    """Pose of b expressed in a's camera frame: (R_a^T R_b, R_a^T (t_b - t_a))."""
    return a.R.T @ b.R, a.R.T @ (b.t - a.t)


def huber(r: float, delta: float) -> float:
    return 0.5 * r * r if r <= delta else delta * (r - 0.5 * delta)


def rotation_distance(ra: np.ndarray, rb: np.ndarray, kind: str = "frobenius") -> float:
    if kind == "frobenius":
        return float(np.linalg.norm(ra - rb))
    cos = np.clip((np.trace(ra.T @ rb) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.arccos(cos))


def pose_loss(batch: SupervisionBatch, s: float, w: LossWeights = LossWeights()) -> float:
    if not batch.pairs:
        raise ValueError("pose loss needs at least one frame pair")
    for p in list(batch.pred_poses) + list(batch.gt_poses):
        try:
            check_rotation(p.R, 1e-6)
        except PoseError as exc:
            raise PoseError(f"invalid rotation in pose loss input: {exc}") from None
    total = 0.0
    for i, j in batch.pairs:
        r_hat, t_hat = relative_motion(batch.pred_poses[i], batch.pred_poses[j])
        r_gt, t_gt = relative_motion(batch.gt_poses[i], batch.gt_poses[j])
        total += w.lambda_rot * rotation_distance(r_hat, r_gt, w.rot_kind)
        total += w.lambda_trans * huber(float(np.linalg.norm(s * t_hat - t_gt)), w.huber_delta)
    return total


def _world(points: np.ndarray, poses) -> np.ndarray:
    return np.stack([pts @ p.R.T + p.t for pts, p in zip(points, poses)])


def global_pointmap_loss(batch: SupervisionBatch, s: float) -> float:
    """L1 between s * (R_hat xhat + t_hat) and (R x + t), averaged over valid pixels."""
    n = batch.n_valid()
    if n == 0:
        raise DegenerateError("no valid pixels")
    r = s * _world(batch.pred_points, batch.pred_poses) - _world(batch.gt_points, batch.gt_poses)
    return float(np.abs(r[batch.valid]).sum() / n)


def total_loss(batch: SupervisionBatch, w: LossWeights = LossWeights(),
               s: float | None = None) -> tuple[float, dict]:
    if s is None:
        s = solve_sequence_scale(batch)
    parts = {
        "local": local_pointmap_loss(batch, s),
        "pose": pose_loss(batch, s, w),
        "global": global_pointmap_loss(batch, s),
    }
    total = parts["local"] + parts["pose"] + w.lambda_global * parts["global"]
    return total, {**parts, "scale": s, "total": total}


def total_loss_gradients(batch: SupervisionBatch, w: LossWeights, s: float) -> dict:
    """Analytic (sub)gradients of the total loss at fixed scale ``s``.

    Keys: ``points`` (N, H, W, 3) w.r.t. predicted local points and
    ``translations`` (N, 3) w.r.t. predicted camera centers.
    """
    n = batch.n_valid()
    valid = batch.valid[..., None]
    z = np.where(batch.valid, batch.depth, 1.0)[..., None]
    r_local = s * batch.pred_points - batch.gt_points
    g_points = np.where(valid, s * np.sign(r_local) / z, 0.0) / n

    r_world = s * _world(batch.pred_points, batch.pred_poses) - _world(batch.gt_points, batch.gt_poses)
    sgn = np.where(valid, np.sign(r_world), 0.0)
    rots = np.stack([p.R for p in batch.pred_poses])
    # d/dx of s * R x is s * R^T applied to the sign vector
    g_points = g_points + w.lambda_global * s * np.einsum("nji,nhwj->nhwi", rots, sgn) / n
    g_trans = w.lambda_global * s * sgn.sum(axis=(1, 2)) / n

    for i, j in batch.pairs:
        pi, pj = batch.pred_poses[i], batch.pred_poses[j]
        _, t_hat = relative_motion(pi, pj)
        _, t_gt = relative_motion(batch.gt_poses[i], batch.gt_poses[j])
        e = s * t_hat - t_gt
        norm = np.linalg.norm(e)
        de = e if norm <= w.huber_delta else w.huber_delta * e / norm
        g = w.lambda_trans * s * (pi.R @ de)
        g_trans[j] += g
        g_trans[i] -= g
    return {"points": g_points, "translations": g_trans}


def loss_at_scale(batch: SupervisionBatch, w: LossWeights, s: float) -> float:
    return total_loss(batch, w, s)[0]
