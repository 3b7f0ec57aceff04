"""Geometry and shading primitives.

Rotations, camera poses, pinhole projection, covariance construction and
real spherical-harmonics color evaluation. Scalar entry points operate on a
single splat; the ``batch_*`` helpers are the vectorized forms used by the
rasterizer together with their vector-Jacobian products.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera

NEAR_PLANE = 0.01
COV2D_REGULARIZER = 0.3

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sh_num_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


@dataclass(frozen=True)
class UnitQuaternion:
    """Rotation quaternion stored scalar-first."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    @classmethod
    def from_array(cls, q) -> "UnitQuaternion":
        q = np.asarray(q, dtype=np.float64)
        return cls(*map(float, q)).normalized()

    @classmethod
    def from_axis_angle(cls, axis, angle: float) -> "UnitQuaternion":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        s = np.sin(0.5 * angle)
        return cls(float(np.cos(0.5 * angle)), *(float(v) for v in s * axis))

    @classmethod
    def from_matrix(cls, R) -> "UnitQuaternion":
        R = np.asarray(R, dtype=np.float64)
        tr = np.trace(R)
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
        elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
            s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
            q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
        elif R[1, 1] > R[2, 2]:
            s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
            q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
            q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
        return cls.from_array(q)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.as_array()))

    def normalized(self) -> "UnitQuaternion":
        q = self.as_array()
        n = np.linalg.norm(q)
        if n == 0.0:
            raise ValueError("cannot normalize a zero quaternion")
        return UnitQuaternion(*(float(v) for v in q / n))

    def to_matrix(self) -> np.ndarray:
        return quat_to_rotmat(self.as_array())

    def slerp(self, other: "UnitQuaternion", t: float) -> "UnitQuaternion":
        a, b = self.as_array(), other.as_array()
        dot = float(a @ b)
        if dot < 0.0:
            b, dot = -b, -dot
        if dot > 0.9995:
            return UnitQuaternion.from_array(a + t * (b - a))
        theta = np.arccos(dot)
        out = (np.sin((1 - t) * theta) * a + np.sin(t * theta) * b) / np.sin(theta)
        return UnitQuaternion.from_array(out)


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a (not necessarily unit) quaternion, normalizing first."""
    q = np.asarray(q, dtype=np.float64)
    return batch_quat_to_rotmat(q[None])[0]


@dataclass(frozen=True)
class CameraView:
    """Pinhole camera with a world-to-camera pose.

    ``x_cam = R(rotation) @ x_world + translation``; the camera looks down
    +z with +y pointing down the image.
    """

    rotation: UnitQuaternion
    translation: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    time: float = 0.0
    _R: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "_R", self.rotation.to_matrix())

    @property
    def R(self) -> np.ndarray:
        return self._R

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self._R.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), **intrinsics) -> "CameraView":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(UnitQuaternion.from_matrix(R), -R @ eye, **intrinsics)

    def with_pose(self, rotation: UnitQuaternion, translation, time: float) -> "CameraView":
        return CameraView(rotation, translation, self.fx, self.fy, self.cx, self.cy,
                          self.width, self.height, time)

    def interpolate(self, other: "CameraView", t: float) -> "CameraView":
        """Pose blend: slerp on rotation, linear on the camera center."""
        rot = self.rotation.slerp(other.rotation, t)
        center = (1 - t) * self.center + t * other.center
        trans = -rot.to_matrix() @ center
        return self.with_pose(rot, trans, (1 - t) * self.time + t * other.time)


def covariance_from_factors(scale, rotation: UnitQuaternion) -> np.ndarray:
    """World-space covariance ``R S S^T R^T`` for per-axis scales ``scale``."""
    M = rotation.to_matrix() * np.asarray(scale, dtype=np.float64)[None, :]
    return M @ M.T


def project_gaussian(mean, cov3d, view: CameraView, near: float = NEAR_PLANE):
    """Project a 3D Gaussian to the image plane (first-order EWA).

    Returns ``(mean2d, cov2d, depth)``; ``cov2d`` includes the low-pass
    regularizer. Raises :class:`BehindCamera` when depth <= ``near``.
    """
    p = view.R @ np.asarray(mean, dtype=np.float64) + view.translation
    x, y, z = p
    if z <= near:
        raise BehindCamera(f"camera-space depth {z:.4g} <= near plane {near}")
    mean2d = np.array([view.fx * x / z + view.cx, view.fy * y / z + view.cy])
    J = np.array([
        [view.fx / z, 0.0, -view.fx * x / z**2],
        [0.0, view.fy / z, -view.fy * y / z**2],
    ])
    T = J @ view.R
    cov2d = T @ np.asarray(cov3d, dtype=np.float64) @ T.T
    cov2d = 0.5 * (cov2d + cov2d.T) + COV2D_REGULARIZER * np.eye(2)
    return mean2d, cov2d, float(z)


def eval_sh(coeffs, view_dir) -> np.ndarray:
    """RGB from SH coefficients of shape ``(K, 3)`` seen along ``view_dir``."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    degree = int(round(np.sqrt(coeffs.shape[0]))) - 1
    basis = sh_basis(np.asarray(view_dir, dtype=np.float64)[None], degree)[0]
    return np.maximum(basis @ coeffs + 0.5, 0.0)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values, shape ``(N, (degree+1)**2)``, for unit ``dirs``."""
    return _sh_basis_and_grad(dirs, degree, want_grad=False)[0]


def sh_basis_grad(dirs: np.ndarray, degree: int):
    """Basis values and their derivative w.r.t. direction, ``(N, K)`` and ``(N, K, 3)``."""
    return _sh_basis_and_grad(dirs, degree, want_grad=True)


def _sh_basis_and_grad(dirs, degree, want_grad):
    if not 0 <= degree <= 3:
        raise ValueError("SH degree must be in 0..3")
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    K = sh_num_coeffs(degree)
    B = np.zeros((n, K))
    G = np.zeros((n, K, 3)) if want_grad else None
    B[:, 0] = SH_C0
    if degree >= 1:
        B[:, 1] = -SH_C1 * y
        B[:, 2] = SH_C1 * z
        B[:, 3] = -SH_C1 * x
        if want_grad:
            G[:, 1, 1] = -SH_C1
            G[:, 2, 2] = SH_C1
            G[:, 3, 0] = -SH_C1
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        B[:, 4] = SH_C2[0] * x * y
        B[:, 5] = SH_C2[1] * y * z
        B[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        B[:, 7] = SH_C2[3] * x * z
        B[:, 8] = SH_C2[4] * (xx - yy)
        if want_grad:
            G[:, 4, 0], G[:, 4, 1] = SH_C2[0] * y, SH_C2[0] * x
            G[:, 5, 1], G[:, 5, 2] = SH_C2[1] * z, SH_C2[1] * y
            G[:, 6, 0], G[:, 6, 1], G[:, 6, 2] = -2 * SH_C2[2] * x, -2 * SH_C2[2] * y, 4 * SH_C2[2] * z
            G[:, 7, 0], G[:, 7, 2] = SH_C2[3] * z, SH_C2[3] * x
            G[:, 8, 0], G[:, 8, 1] = 2 * SH_C2[4] * x, -2 * SH_C2[4] * y
    if degree >= 3:
        B[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        B[:, 10] = SH_C3[1] * x * y * z
        B[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        B[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        B[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        B[:, 14] = SH_C3[5] * z * (xx - yy)
        B[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
        if want_grad:
            G[:, 9, 0] = SH_C3[0] * 6 * x * y
            G[:, 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
            G[:, 10, 0], G[:, 10, 1], G[:, 10, 2] = SH_C3[1] * y * z, SH_C3[1] * x * z, SH_C3[1] * x * y
            G[:, 11, 0] = SH_C3[2] * -2 * x * y
            G[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
            G[:, 11, 2] = SH_C3[2] * 8 * y * z
            G[:, 12, 0] = SH_C3[3] * -6 * x * z
            G[:, 12, 1] = SH_C3[3] * -6 * y * z
            G[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
            G[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
            G[:, 13, 1] = SH_C3[4] * -2 * x * y
            G[:, 13, 2] = SH_C3[4] * 8 * x * z
            G[:, 14, 0], G[:, 14, 1], G[:, 14, 2] = SH_C3[5] * 2 * x * z, SH_C3[5] * -2 * y * z, SH_C3[5] * (xx - yy)
            G[:, 15, 0] = SH_C3[6] * (3 * xx - 3 * yy)
            G[:, 15, 1] = SH_C3[6] * -6 * x * y
    return B, G


# ---------------------------------------------------------------------------
# Batched forms with vector-Jacobian products


def batch_quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """``(N, 4)`` raw quaternions to ``(N, 3, 3)`` rotations (normalized internally)."""
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def batch_rotmat_vjp(q_raw: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. raw quaternions given ``dL/dR`` of shape ``(N, 3, 3)``."""
    norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q = q_raw / norm
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = dR
    dw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    dx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    dy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    dz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    dq = np.stack([dw, dx, dy, dz], axis=1)
    return (dq - q * np.sum(q * dq, axis=1, keepdims=True)) / norm


def batch_covariance(log_scales: np.ndarray, quats: np.ndarray):
    """Covariances ``(N, 3, 3)`` plus the factors needed by the backward pass."""
    R = batch_quat_to_rotmat(quats)
    s = np.exp(log_scales)
    M = R * s[:, None, :]
    return M @ np.transpose(M, (0, 2, 1)), R, s


def batch_covariance_vjp(dcov: np.ndarray, R, s, quats):
    """``(d_log_scale, d_quat)`` from a gradient on the 3D covariances."""
    dcov = 0.5 * (dcov + np.transpose(dcov, (0, 2, 1)))
    M = R * s[:, None, :]
    dM = 2 * dcov @ M
    ds = np.sum(dM * R, axis=1)
    dR = dM * s[:, None, :]
    return ds * s, batch_rotmat_vjp(quats, dR)
