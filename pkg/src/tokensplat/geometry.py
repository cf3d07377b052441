"""Rigid poses, quaternions, unit dual quaternions, pinhole cameras and
trajectory-error metrics.

Quaternions are (w, x, y, z) arrays. A ``Pose`` maps camera coordinates to
the canonical (reference-view) frame: ``X_canon = R @ X_cam + t``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

NEAR_PLANE = 0.01


class DegenerateInputError(ValueError):
    pass


class InvalidDualQuaternionError(ValueError):
    pass


class BehindCameraError(ValueError):
    """The point lies on or behind the near plane."""


# -- quaternion algebra (works for numpy arrays and autodiff tensors) --------


def _qmul(a, b, stack):
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def _qconj(q, stack):
    return stack([q[..., 0], -q[..., 1], -q[..., 2], -q[..., 3]], axis=-1)


def _rotmat_entries(q):
    """Row-major rotation-matrix entries of a *unit* quaternion."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]


def quat_mul(a, b) -> np.ndarray:
    return _qmul(np.asarray(a, float), np.asarray(b, float), np.stack)


def quat_conj(q) -> np.ndarray:
    return _qconj(np.asarray(q, float), np.stack)


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise DegenerateInputError("zero quaternion cannot be normalised")
    return q / n


def quat_canonicalize(q) -> np.ndarray:
    """Pick the representative with w > 0 (ties: first nonzero component > 0)."""
    q = np.asarray(q, dtype=np.float64)
    return q * hemisphere_sign(q)[..., None] if q.ndim > 1 else q * hemisphere_sign(q)


def hemisphere_sign(q) -> np.ndarray | float:
    q = np.asarray(q, dtype=np.float64)
    flat = q.reshape(-1, 4)
    signs = np.ones(len(flat))
    for i, row in enumerate(flat):
        nz = np.flatnonzero(row)
        if nz.size and row[nz[0]] < 0:
            signs[i] = -1.0
    return signs.reshape(q.shape[:-1]) if q.ndim > 1 else float(signs[0])


def quat_to_rotmat(q) -> np.ndarray:
    q = quat_normalize(q)
    return np.stack(_rotmat_entries(q), axis=-1).reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_canonicalize(quat_normalize(q))


def axis_angle_to_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def rotation_angle(R) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    c = (np.trace(R) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


# -- poses -----------------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    translation: np.ndarray  # 3-vector

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @staticmethod
    def identity() -> Pose:
        return Pose(np.array([1.0, 0, 0, 0]), np.zeros(3))

    @staticmethod
    def from_matrix(M) -> Pose:
        M = np.asarray(M, dtype=np.float64)
        return Pose(rotmat_to_quat(M[:3, :3]), M[:3, 3])

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.R
        M[:3, 3] = self.translation
        return M

    def compose(self, other: Pose) -> Pose:
        """``self ∘ other``: apply ``other`` first."""
        q = quat_mul(self.rotation, other.rotation)
        t = self.R @ other.translation + self.translation
        return Pose(q, t)

    def inverse(self) -> Pose:
        qi = quat_conj(self.rotation)
        return Pose(qi, -(quat_to_rotmat(qi) @ self.translation))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image")

    @staticmethod
    def from_fov(width: int, height: int, fov_deg: float) -> Intrinsics:
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return Intrinsics(f, f, width / 2, height / 2, width, height)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def normalized(self) -> np.ndarray:
        return np.array([self.fx / self.width, self.fy / self.height, self.cx / self.width, self.cy / self.height])

    def scaled(self, factor: float) -> Intrinsics:
        return Intrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                          int(round(self.width * factor)), int(round(self.height * factor)))


def project(point, pose: Pose, K: Intrinsics, near: float = NEAR_PLANE) -> tuple[float, float, float]:
    """Pixel coordinates and depth of a canonical-frame point seen from ``pose``."""
    X, Y, Z = pose.inverse().apply(np.asarray(point, dtype=np.float64))
    if Z <= near:
        raise BehindCameraError(f"depth {Z:.4g} is not beyond the near plane {near}")
    return K.fx * X / Z + K.cx, K.fy * Y / Z + K.cy, Z


def unproject(u: float, v: float, depth: float, pose: Pose, K: Intrinsics) -> np.ndarray:
    cam = np.array([(u - K.cx) / K.fx * depth, (v - K.cy) / K.fy * depth, depth])
    return pose.apply(cam)


# -- unit dual quaternions -----------------------------------------------------------


@dataclass(frozen=True)
class UnitDualQuaternion:
    real: np.ndarray
    dual: np.ndarray

    def __post_init__(self):
        real = np.asarray(self.real, dtype=np.float64)
        dual = np.asarray(self.dual, dtype=np.float64)
        if abs(np.linalg.norm(real) - 1.0) > 1e-6:
            raise InvalidDualQuaternionError(f"real part norm {np.linalg.norm(real):.8f} != 1")
        if abs(float(real @ dual)) > 1e-6:
            raise InvalidDualQuaternionError(f"<real, dual> = {float(real @ dual):.3g} != 0")
        object.__setattr__(self, "real", real)
        object.__setattr__(self, "dual", dual)

    def __mul__(self, other: UnitDualQuaternion) -> UnitDualQuaternion:
        return UnitDualQuaternion(*dq_mul((self.real, self.dual), (other.real, other.dual)))

    def __neg__(self) -> UnitDualQuaternion:
        return UnitDualQuaternion(-self.real, -self.dual)

    def conj(self) -> UnitDualQuaternion:
        return UnitDualQuaternion(quat_conj(self.real), quat_conj(self.dual))

    def canonical(self) -> UnitDualQuaternion:
        s = hemisphere_sign(self.real)
        return UnitDualQuaternion(s * self.real, s * self.dual)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.real, self.dual])

    @staticmethod
    def identity() -> UnitDualQuaternion:
        return UnitDualQuaternion(np.array([1.0, 0, 0, 0]), np.zeros(4))


def dq_mul(a, b):
    ar, ad = a
    br, bd = b
    return quat_mul(ar, br), quat_mul(ar, bd) + quat_mul(ad, br)


def pose_to_dq(pose: Pose) -> UnitDualQuaternion:
    qr = pose.rotation
    qd = 0.5 * quat_mul(np.concatenate([[0.0], pose.translation]), qr)
    return UnitDualQuaternion(qr, qd)


def dq_to_pose(dq: UnitDualQuaternion) -> Pose:
    t = 2.0 * quat_mul(dq.dual, quat_conj(dq.real))
    return Pose(dq.real, t[1:])


def dq_alignment_loss(p: UnitDualQuaternion, p_hat: UnitDualQuaternion) -> float:
    """``|I - p p_hat*| + |I - p_hat p*|`` on hemisphere-canonical inputs."""
    p, p_hat = p.canonical(), p_hat.canonical()
    ident = UnitDualQuaternion.identity().as_vector()
    a = (p * p_hat.conj()).as_vector()
    b = (p_hat * p.conj()).as_vector()
    return float(np.linalg.norm(ident - a) + np.linalg.norm(ident - b))


# -- trajectories ------------------------------------------------------------------------

Trajectory = list  # list[Pose], reference view first


def _check_pair(pred: Sequence[Pose], gt: Sequence[Pose]) -> None:
    if len(pred) != len(gt):
        raise ValueError(f"trajectory length mismatch: {len(pred)} vs {len(gt)}")
    if len(gt) < 2:
        raise ValueError("trajectories need at least two poses")


def align_se3(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotation and translation minimising ``|R src + t - dst|`` (no scale)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(cov)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt)) or 1.0])
    R = U @ D @ Vt
    return R, mu_d - R @ mu_s


def ate(pred: Sequence[Pose], gt: Sequence[Pose]) -> float:
    _check_pair(pred, gt)
    ps = np.array([p.translation for p in pred])
    gs = np.array([g.translation for g in gt])
    R, t = align_se3(ps, gs)
    res = ps @ R.T + t - gs
    return float(np.sqrt(np.mean(np.sum(res * res, axis=1))))


def _relative_errors(pred: Sequence[Pose], gt: Sequence[Pose]) -> list[Pose]:
    _check_pair(pred, gt)
    errs = []
    for i in range(len(gt) - 1):
        rel_gt = gt[i].inverse().compose(gt[i + 1])
        rel_pred = pred[i].inverse().compose(pred[i + 1])
        errs.append(rel_gt.inverse().compose(rel_pred))
    return errs


def rpe_t(pred: Sequence[Pose], gt: Sequence[Pose]) -> float:
    errs = _relative_errors(pred, gt)
    return float(np.sqrt(np.mean([e.translation @ e.translation for e in errs])))


def rpe_r(pred: Sequence[Pose], gt: Sequence[Pose]) -> float:
    """RMSE of relative rotation errors, degrees."""
    errs = _relative_errors(pred, gt)
    return float(np.sqrt(np.mean([np.degrees(rotation_angle(e.R)) ** 2 for e in errs])))


def save_trajectory(path, poses: Sequence[Pose]) -> None:
    lines = [" ".join(f"{v:.9g}" for v in p.as_vector()) for p in poses]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_pose(text: str) -> Pose:
    parts = text.split()
    if len(parts) != 7:
        raise ValueError(f"pose needs 7 numbers 'qw qx qy qz tx ty tz', got {len(parts)}: {text!r}")
    try:
        vals = [float(v) for v in parts]
    except ValueError as exc:
        raise ValueError(f"pose contains a non-number: {text!r}") from exc
    return Pose(np.array(vals[:4]), np.array(vals[4:]))


def load_trajectory(path) -> list[Pose]:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    return [parse_pose(ln) for ln in lines]
