"""Rigid / similarity transforms, pointmaps and Umeyama alignment.

Poses are camera-to-world: a local point x maps to world as R x + t.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, PoseError

ORTHO_TOL = 1e-9


def check_rotation(r: np.ndarray, tol: float = ORTHO_TOL) -> None:
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3) or not np.isfinite(r).all():
        raise PoseError("rotation must be a finite 3x3 matrix")
    if np.abs(r.T @ r - np.eye(3)).max() > tol or abs(np.linalg.det(r) - 1.0) > tol:
        raise PoseError("matrix is not a proper rotation")


def project_to_rotation(m: np.ndarray) -> np.ndarray:
    """Nearest rotation in Frobenius norm (SVD with det correction)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64))
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_from_6d(a: np.ndarray) -> np.ndarray:
    """Gram-Schmidt on two 3-vectors, third column by cross product."""
    a = np.asarray(a, dtype=np.float64).reshape(2, 3)
    b1 = a[0] / np.linalg.norm(a[0])
    u2 = a[1] - (b1 @ a[1]) * b1
    b2 = u2 / np.linalg.norm(u2)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * k @ k


@dataclass(frozen=True)
class PoseSE3:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def random(cls, rng: np.random.Generator, trans_scale: float = 1.0) -> "PoseSE3":
        return cls(random_rotation(rng), rng.normal(0.0, trans_scale, size=3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return m

    def validate(self, tol: float = ORTHO_TOL) -> "PoseSE3":
        check_rotation(self.R, tol)
        if not np.isfinite(self.t).all():
            raise PoseError("translation must be finite")
        return self

    def apply(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.R.T + self.t

    @property
    def center(self) -> np.ndarray:
        return self.t

    def __matmul__(self, other: "PoseSE3") -> "PoseSE3":
        return se3_compose(self, other)


@dataclass(frozen=True)
class SimilaritySim3:
    s: float
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not self.s > 0:
            raise PoseError("similarity scale must be positive")
        object.__setattr__(self, "R", np.asarray(self.R, dtype=np.float64))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "SimilaritySim3":
        return cls(1.0, np.eye(3), np.zeros(3))

    @classmethod
    def random(cls, rng: np.random.Generator, log_scale_std: float = 0.5) -> "SimilaritySim3":
        return cls(float(np.exp(rng.normal(0.0, log_scale_std))), random_rotation(rng),
                   rng.normal(size=3))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.s * (np.asarray(x) @ self.R.T) + self.t

    def inverse(self) -> "SimilaritySim3":
        r_inv = self.R.T
        return SimilaritySim3(1.0 / self.s, r_inv, -(r_inv @ self.t) / self.s)


@dataclass
class Pointmap:
    """Per-pixel local-camera points (H, W, 3) with a validity mask."""

    points: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[-1] != 3:
            raise ValueError(f"pointmap must be (H, W, 3), got {self.points.shape}")
        if self.valid is None:
            self.valid = np.isfinite(self.points).all(axis=-1) & (self.points[..., 2] > 0)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def depth(self) -> np.ndarray:
        return self.points[..., 2]

    def scaled(self, s: float) -> "Pointmap":
        return Pointmap(self.points * s, self.valid.copy())


@dataclass
class Trajectory:
    frame_ids: list
    poses: list

    def __post_init__(self):
        self.frame_ids = [int(i) for i in self.frame_ids]
        if len(self.frame_ids) != len(self.poses):
            raise ValueError("one pose per frame id")
        if any(b <= a for a, b in zip(self.frame_ids, self.frame_ids[1:])):
            raise ValueError("frame ids must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def centers(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)


# ---------------------------------------------------------------------------
# group operations


def se3_compose(a: PoseSE3, b: PoseSE3) -> PoseSE3:
    a.validate()
    b.validate()
    return PoseSE3(a.R @ b.R, a.R @ b.t + a.t)


def se3_inverse(a: PoseSE3) -> PoseSE3:
    a.validate()
    r_inv = a.R.T
    return PoseSE3(r_inv, -(r_inv @ a.t))


def sim3_apply(g: SimilaritySim3, pose: PoseSE3) -> PoseSE3:
    """Re-express a camera-to-world pose in the frame mapped by ``g``."""
    return PoseSE3(g.R @ pose.R, g.s * (g.R @ pose.t) + g.t)


def transform_pointmap(pose: PoseSE3, pm: Pointmap) -> np.ndarray:
    """World coordinates R x + t of valid pixels; invalid pixels are copied."""
    out = pm.points.copy()
    out[pm.valid] = pose.apply(pm.points[pm.valid])
    return out


# ---------------------------------------------------------------------------
# Umeyama


def umeyama_align(src: np.ndarray, dst: np.ndarray, with_scale: bool = True,
                  rank_tol: float = 1e-10) -> SimilaritySim3:
    """Least-squares similarity (s, R, t) minimizing sum ||s R src + t - dst||^2.

    Points are rows of (n, 3) arrays.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if src.shape != dst.shape:
        raise DegenerateError("source and target point counts differ")
    n = src.shape[0]
    if n < 3:
        raise DegenerateError("need at least three point pairs")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    var_s = float((xs * xs).sum() / n)
    cov = xd.T @ xs / n
    u, d, vt = np.linalg.svd(cov)
    scale_ref = max(d[0], np.sqrt(var_s * (xd * xd).sum() / n), 1e-300)
    # collinear or coincident points leave the rotation undetermined
    if var_s <= 0 or d[1] <= rank_tol * scale_ref:
        raise DegenerateError("point configuration is collinear or degenerate")
    signs = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        signs[2] = -1.0
    r = u @ np.diag(signs) @ vt
    s = float((d * signs).sum() / var_s) if with_scale else 1.0
    if s <= 0:
        raise DegenerateError("non-positive similarity scale")
    t = mu_d - s * (r @ mu_s)
    return SimilaritySim3(s, r, t)


def alignment_residual(g: SimilaritySim3, src: np.ndarray, dst: np.ndarray) -> float:
    """Sum of squared distances between g(src) and dst."""
    r = g.apply(np.asarray(src).reshape(-1, 3)) - np.asarray(dst).reshape(-1, 3)
    return float((r * r).sum())
