"""Matrix Lie group arithmetic for SO(3), SE(3) and SE_K(3).

An element of SE_K(3) is stored as a rotation plus K translational columns.
For the IMU state the columns are ordered (v, p, p_u1, ..., p_uL); a pose
clone carries the single column (p). Twists are flat vectors
``[theta, t_1, ..., t_K]`` of length 3(K+1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SMALL_ANGLE = 1e-8
_ORTHO_TOL = 1e-6


def skew(v: np.ndarray) -> np.ndarray:
    """Cross-product matrix, ``skew(a) @ b == np.cross(a, b)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def unskew(S: np.ndarray) -> np.ndarray:
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    a = np.sin(angle) / angle
    b = (1.0 - np.cos(angle)) / angle**2
    return np.eye(3) + a * K + b * K @ K


def is_rotation(R: np.ndarray, tol: float = _ORTHO_TOL) -> bool:
    R = np.asarray(R)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return (
        np.abs(R @ R.T - np.eye(3)).max() < tol
        and abs(np.linalg.det(R) - 1.0) < tol
    )


def so3_log(R: np.ndarray) -> np.ndarray:
    """Principal logarithm of a rotation matrix, norm in [0, pi]."""
    R = np.asarray(R, dtype=float)
    if not is_rotation(R):
        raise ValueError("so3_log: input is not a rotation matrix")
    cos_angle = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    angle = np.arccos(cos_angle)
    if angle < 1e-6:
        # R ~ I + [w] + [w]^2/2; the antisymmetric part is exact to third order
        w = unskew(R - R.T) / 2.0
        return w * (1.0 + np.dot(w, w) / 6.0)
    if np.pi - angle < 1e-4:
        # axis from the symmetric part: sym(R) = c I + (1 - c) a a^T
        B = (0.5 * (R + R.T) - cos_angle * np.eye(3)) / (1.0 - cos_angle)
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.linalg.norm(B[:, k])
        # resolve the sign from the (small) antisymmetric part
        s = unskew(R - R.T)
        if np.dot(s, axis) < 0:
            axis = -axis
        # refine the angle with the antisymmetric magnitude
        sin_angle = 0.5 * np.linalg.norm(s)
        angle = np.arctan2(sin_angle, cos_angle)
        return angle * axis
    return angle / (2.0 * np.sin(angle)) * unskew(R - R.T)


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    a = (1.0 - np.cos(angle)) / angle**2
    b = (angle - np.sin(angle)) / angle**3
    return np.eye(3) + a * K + b * K @ K


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    angle = np.linalg.norm(phi)
    K = skew(phi)
    if angle < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = 0.5 * angle
    c = (1.0 - half / np.tan(half)) / angle**2
    return np.eye(3) - 0.5 * K + c * K @ K


@dataclass(frozen=True)
class ExtendedPose:
    """Element of SE_K(3): rotation ``R`` and a 3xK block of columns."""

    R: np.ndarray
    cols: np.ndarray

    def __post_init__(self):
        R = np.array(self.R, dtype=float)
        cols = np.array(self.cols, dtype=float)
        if cols.ndim == 1:
            cols = cols.reshape(3, 1)
        if R.shape != (3, 3) or cols.shape[0] != 3 or cols.shape[1] < 1:
            raise ValueError("ExtendedPose needs a 3x3 rotation and 3xK columns")
        R.setflags(write=False)
        cols.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "cols", cols)

    @property
    def K(self) -> int:
        return self.cols.shape[1]

    @classmethod
    def identity(cls, K: int) -> "ExtendedPose":
        return cls(np.eye(3), np.zeros((3, K)))

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "ExtendedPose":
        n = M.shape[0]
        return cls(M[:3, :3], M[:3, 3:n])

    def matrix(self) -> np.ndarray:
        K = self.K
        M = np.eye(3 + K)
        M[:3, :3] = self.R
        M[:3, 3:] = self.cols
        return M

    def col(self, j: int) -> np.ndarray:
        return self.cols[:, j]

    def compose(self, other: "ExtendedPose") -> "ExtendedPose":
        _check_same_k(self, other)
        return ExtendedPose(self.R @ other.R, self.R @ other.cols + self.cols)

    __matmul__ = compose

    def inverse(self) -> "ExtendedPose":
        Rt = self.R.T
        return ExtendedPose(Rt, -Rt @ self.cols)


def _check_same_k(A: ExtendedPose, B: ExtendedPose) -> None:
    if A.K != B.K:
        raise ValueError(f"column count mismatch: {A.K} vs {B.K}")


def sek3_compose(A: ExtendedPose, B: ExtendedPose) -> ExtendedPose:
    return A.compose(B)


def sek3_inverse(A: ExtendedPose) -> ExtendedPose:
    return A.inverse()


def twist_dim(K: int) -> int:
    return 3 * (K + 1)


def _k_from_twist(xi: np.ndarray) -> int:
    n = len(xi)
    if n % 3 or n < 6:
        raise ValueError(f"twist length {n} is not 3(K+1) with K >= 1")
    return n // 3 - 1


def wedge(xi: np.ndarray) -> np.ndarray:
    """Map a twist to its (3+K)x(3+K) Lie algebra matrix."""
    xi = np.asarray(xi, dtype=float)
    K = _k_from_twist(xi)
    M = np.zeros((3 + K, 3 + K))
    M[:3, :3] = skew(xi[:3])
    M[:3, 3:] = xi[3:].reshape(K, 3).T
    return M


def vee(M: np.ndarray) -> np.ndarray:
    n = M.shape[0]
    K = n - 3
    return np.concatenate([unskew(M[:3, :3]), M[:3, 3:n].T.reshape(3 * K)])


def sek3_exp(xi: np.ndarray, K: int | None = None) -> ExtendedPose:
    xi = np.asarray(xi, dtype=float)
    k = _k_from_twist(xi)
    if K is not None and K != k:
        raise ValueError(f"twist of length {len(xi)} does not match K={K}")
    phi = xi[:3]
    J = so3_left_jacobian(phi)
    cols = J @ xi[3:].reshape(k, 3).T
    return ExtendedPose(so3_exp(phi), cols)


def sek3_log(X: ExtendedPose) -> np.ndarray:
    phi = so3_log(X.R)
    t = so3_left_jacobian_inv(phi) @ X.cols
    return np.concatenate([phi, t.T.reshape(-1)])


def adjoint(X: ExtendedPose) -> np.ndarray:
    """Adjoint matrix: ``Ad(X) xi == vee(X wedge(xi) X^-1)``.

    Block lower-triangular with R on the diagonal and [t_j]x R in the
    first block column.
    """
    K = X.K
    n = 3 * (K + 1)
    Ad = np.zeros((n, n))
    for j in range(K + 1):
        Ad[3 * j : 3 * j + 3, 3 * j : 3 * j + 3] = X.R
    for j in range(K):
        Ad[3 * (j + 1) : 3 * (j + 2), :3] = skew(X.cols[:, j]) @ X.R
    return Ad


def pose_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) with w >= 0."""
    from scipy.spatial.transform import Rotation

    x, y, z, w = Rotation.from_matrix(R).as_quat()
    q = np.array([w, x, y, z])
    return q if w >= 0 else -q
