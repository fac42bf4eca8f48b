"""Finite-difference verification of every analytic gradient in the package."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PoseSE3, random_rotation
from .losses import (LossWeights, SupervisionBatch, loss_at_scale, solve_sequence_scale,
                     total_loss_gradients, _world)
from .numerics import SwigluParams, finite_diff_grad, make_rng, relative_error, swiglu_grad, swiglu_loss

TOLERANCE = 1e-5
KINK_MARGIN = 1e-3


@dataclass
class GradCheck:
    name: str
    seed: int
    rel_error: float

    @property
    def ok(self) -> bool:
        return self.rel_error < TOLERANCE


def check_swiglu(seed: int, dim: int = 4, expansion: int = 2, n: int = 5) -> list:
    rng = make_rng(seed)
    p = SwigluParams.init(dim, expansion, rng, zero_down=False)
    x = rng.normal(size=(n, dim))
    target = rng.normal(size=(n, dim))
    grads, _ = swiglu_grad(p, x, target)
    numeric = finite_diff_grad(
        lambda th: swiglu_loss(SwigluParams.from_flat(th, dim, p.hidden), x, target), p.flat())
    numeric = SwigluParams.from_flat(numeric, dim, p.hidden)
    return [GradCheck(f"swiglu.{name}", seed, relative_error(a, b))
            for name, a, b in zip(("w_gate", "w_up", "w_down"), grads.arrays(), numeric.arrays())]


def random_batch(rng: np.random.Generator, n_frames: int = 3, hw=(3, 3), noise: float = 0.3) -> SupervisionBatch:
    h, w = hw
    gt = rng.normal(size=(n_frames, h, w, 3))
    gt[..., 2] = rng.uniform(1.0, 4.0, size=(n_frames, h, w))
    pred = 0.7 * gt + noise * rng.normal(size=gt.shape)
    gt_poses = [PoseSE3(random_rotation(rng), rng.normal(size=3)) for _ in range(n_frames)]
    pred_poses = [PoseSE3(random_rotation(rng), rng.normal(size=3)) for _ in range(n_frames)]
    pairs = [(i, j) for i in range(n_frames) for j in range(i + 1, n_frames)]
    return SupervisionBatch(pred, gt, pred_poses, gt_poses, pairs=pairs)


def _away_from_kinks(batch: SupervisionBatch, s: float, w: LossWeights) -> np.ndarray:
    """Mask of predicted-point entries whose L1 residuals are not near zero."""
    r_local = np.abs(s * batch.pred_points - batch.gt_points)
    r_world = np.abs(s * _world(batch.pred_points, batch.pred_poses)
                     - _world(batch.gt_points, batch.gt_poses))
    # a local point entry feeds all three world coordinates of its pixel
    pix_ok = r_world.min(axis=-1, keepdims=True) > KINK_MARGIN
    return (r_local > KINK_MARGIN) & pix_ok


def check_losses(seed: int, weights: LossWeights = LossWeights()) -> list:
    rng = make_rng(seed)
    batch = random_batch(rng)
    s = solve_sequence_scale(batch)
    analytic = total_loss_gradients(batch, weights, s)

    pts0 = batch.pred_points.copy()
    mask = _away_from_kinks(batch, s, weights)

    def f_points(theta):
        batch.pred_points = theta.reshape(pts0.shape)
        return loss_at_scale(batch, weights, s)

    num_pts = finite_diff_grad(f_points, pts0.ravel()).reshape(pts0.shape)
    batch.pred_points = pts0

    t0 = np.array([p.t for p in batch.pred_poses])
    rots = [p.R for p in batch.pred_poses]

    def f_trans(theta):
        batch.pred_poses = [PoseSE3(r, t) for r, t in zip(rots, theta.reshape(-1, 3))]
        return loss_at_scale(batch, weights, s)

    num_t = finite_diff_grad(f_trans, t0.ravel()).reshape(t0.shape)
    batch.pred_poses = [PoseSE3(r, t) for r, t in zip(rots, t0)]
    return [GradCheck("loss.points", seed, relative_error(analytic["points"][mask], num_pts[mask])),
            GradCheck("loss.translations", seed, relative_error(analytic["translations"], num_t))]


def run_gradcheck(seeds=range(20)) -> list:
    out = []
    for seed in seeds:
        out.extend(check_swiglu(seed))
        out.extend(check_losses(seed))
    return out
