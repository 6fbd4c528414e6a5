"""Camera and UWB measurement models, Jacobians and triangulation.

All Jacobians are taken with respect to a left perturbation of the
estimate, ``X = exp(delta) X_hat``, which is the convention of the filter's
correction step. Residuals are ``z - h(X_hat)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import skew
from .state import RobotState

MIN_DEPTH = 1e-6


class DegenerateGeometry(ValueError):
    """Measurement cannot be linearized at this configuration."""


@dataclass(frozen=True)
class FeatureObservation:
    robot_id: int
    feature_id: int
    z: np.ndarray
    t: float


@dataclass(frozen=True)
class RangeObservation:
    robot_id: int
    anchor_id: int
    d: float
    t: float


@dataclass(frozen=True)
class CameraExtrinsics:
    """IMU-to-camera rotation and the IMU origin expressed in the camera frame."""

    R_CI: np.ndarray = field(default_factory=lambda: np.eye(3))
    p_CI: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True)
class TagExtrinsics:
    p_T: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_u: float = 0.0


def project(p_cam: np.ndarray) -> np.ndarray:
    x, y, z = p_cam
    if z <= MIN_DEPTH:
        raise DegenerateGeometry("point behind or on the camera plane")
    return np.array([x / z, y / z])


def to_camera(R: np.ndarray, p: np.ndarray, p_f: np.ndarray, cam: CameraExtrinsics) -> np.ndarray:
    return cam.R_CI @ (R.T @ (p_f - p)) + cam.p_CI


def projection_jacobian(p_cam: np.ndarray) -> np.ndarray:
    x, y, z = p_cam
    if z <= MIN_DEPTH:
        raise DegenerateGeometry("point behind or on the camera plane")
    return np.array([[1.0 / z, 0.0, -x / z**2], [0.0, 1.0 / z, -y / z**2]])


# -- UWB ---------------------------------------------------------------------


def tag_position(R: np.ndarray, p: np.ndarray, tag: TagExtrinsics) -> np.ndarray:
    return p + R @ tag.p_T


def predict_range(state: RobotState, anchor_index: int, tag: TagExtrinsics) -> float:
    u = state.anchor_position(anchor_index)
    return float(np.linalg.norm(tag_position(state.R, state.p, tag) - u) + tag.b_u)


def range_jacobian(state: RobotState, anchor_index: int, tag: TagExtrinsics) -> np.ndarray:
    """1 x dim row: H_pu [Lambda, 0, I, -I] on (theta, v, p, u_anchor)."""
    u = state.anchor_position(anchor_index)
    d = tag_position(state.R, state.p, tag) - u
    n = np.linalg.norm(d)
    if n < MIN_DEPTH:
        raise DegenerateGeometry("tag coincides with anchor")
    H_pu = d / n
    H = np.zeros(state.dim)
    H[0:3] = H_pu @ skew(-d)
    H[6:9] = H_pu
    H[state.anchor_slice(anchor_index)] = -H_pu
    return H


# -- camera --------------------------------------------------------------------


def feature_jacobians(R: np.ndarray, p: np.ndarray, p_f: np.ndarray,
                      cam: CameraExtrinsics, convention: str = "invariant"):
    """Jacobians of one feature observation from pose (R, p).

    Returns ``(H_theta, H_p, H_f)``, each 2x3. With ``convention="invariant"``
    the feature error shares the pose's rotation error and ``H_theta`` is
    zero; with ``"vector"`` the feature error is a plain difference and
    ``H_theta = H_f [p_f]x``. Both give the same system once the feature
    is projected out.
    """
    p_cam = to_camera(R, p, p_f, cam)
    H_pc = projection_jacobian(p_cam)
    H_f = H_pc @ cam.R_CI @ R.T
    if convention == "invariant":
        H_theta = np.zeros((2, 3))
    elif convention == "vector":
        H_theta = H_f @ skew(p_f)
    else:
        raise ValueError(f"unknown feature error convention {convention!r}")
    return H_theta, -H_f, H_f


def feature_rows(state: RobotState, which, p_f: np.ndarray, cam: CameraExtrinsics,
                 convention: str = "vector"):
    """Full-width 2 x dim Jacobian plus H_f for the current pose or clone ``which``."""
    H = np.zeros((2, state.dim))
    if which == "current":
        R, p = state.R, state.p
        th, ps = slice(0, 3), slice(6, 9)
    else:
        c = state.clones[which]
        R, p = c.R, c.p
        s = state.clone_slice(which).start
        th, ps = slice(s, s + 3), slice(s + 3, s + 6)
    H_theta, H_p, H_f = feature_jacobians(R, p, p_f, cam, convention)
    H[:, th] = H_theta
    H[:, ps] = H_p
    return H, H_f


# -- triangulation ----------------------------------------------------------------


def _camera_center(R, p, cam: CameraExtrinsics) -> np.ndarray:
    return p - R @ cam.R_CI.T @ cam.p_CI


def triangulate(observations, poses, cam: CameraExtrinsics | None = None,
                min_baseline: float = 0.05, max_iter: int = 10):
    """Gauss-Newton reprojection fit from a linear multi-view initial guess.

    ``observations`` are normalized image points, ``poses`` the matching
    (R, p) IMU poses. Returns ``(p_f, valid)``.
    """
    cam = cam or CameraExtrinsics()
    if len(observations) < 2 or len(observations) != len(poses):
        return np.full(3, np.nan), False
    Z = np.array(observations, dtype=float).reshape(-1, 2)
    Rs = np.array([R for R, _ in poses], dtype=float)
    ps = np.array([p for _, p in poses], dtype=float)
    # camera centres and world-frame bearing directions
    centers = ps - np.einsum("nij,j->ni", Rs, cam.R_CI.T @ cam.p_CI)
    if np.max(np.linalg.norm(centers - centers[0], axis=1)) < min_baseline:
        return np.full(3, np.nan), False
    rays = np.column_stack([Z, np.ones(len(Z))]) @ cam.R_CI  # rows: R_CI^T [z; 1]
    b = np.einsum("nij,nj->ni", Rs, rays)
    b /= np.linalg.norm(b, axis=1, keepdims=True)
    Ms = np.eye(3)[None] - b[:, :, None] * b[:, None, :]
    A = Ms.sum(axis=0)
    rhs = np.einsum("nij,nj->i", Ms, centers)
    w = np.linalg.eigvalsh(A)
    if w[0] < 1e-6 * w[-1]:
        return np.full(3, np.nan), False
    x = np.linalg.solve(A, rhs)

    # C_n = R_CI R_n^T maps world offsets into camera n
    C = np.einsum("ij,nkj->nik", cam.R_CI, Rs)
    converged = False
    for _ in range(max_iter):
        pc = np.einsum("nij,nj->ni", C, x - ps) + cam.p_CI
        z = pc[:, 2]
        if np.any(z <= MIN_DEPTH):
            return x, False
        r = (Z - pc[:, :2] / z[:, None]).ravel()
        Hp = np.zeros((len(z), 2, 3))
        Hp[:, 0, 0] = 1.0 / z
        Hp[:, 1, 1] = 1.0 / z
        Hp[:, 0, 2] = -pc[:, 0] / z**2
        Hp[:, 1, 2] = -pc[:, 1] / z**2
        J = np.einsum("nij,njk->nik", Hp, C).reshape(-1, 3)
        dx = np.linalg.solve(J.T @ J, J.T @ r)
        x = x + dx
        if np.linalg.norm(dx) < 1e-10 * (1.0 + np.linalg.norm(x)):
            converged = True
            break
    if not converged:
        return x, False
    pc = np.einsum("nij,nj->ni", C, x - ps) + cam.p_CI
    if np.any(pc[:, 2] <= MIN_DEPTH):
        return x, False
    return x, True
