"""First-sight UWB anchor initialization and state augmentation.

The anchor position comes from a range-only least-squares fit over a window
of tag positions. Its covariance and cross-covariance with the live error
state come from the linearized window, split by an orthogonal factorization
into the part that carries the anchor and the part that does not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import ExtendedPose, skew
from .sensing import TagExtrinsics, tag_position
from .state import RobotState, symmetrize

MAX_COND = 1e6


@dataclass(frozen=True)
class RangeSample:
    """Range to an anchor together with the pose estimate at that instant.

    ``phi`` is the 15x15 core transition (theta, v, p, b_omega, b_a) from the
    previous sample's epoch to this one; it lets older samples be expressed
    against the current error state.
    """

    R: np.ndarray
    p: np.ndarray
    z: float
    t: float
    phi: np.ndarray | None = None


@dataclass
class RangeWindow:
    anchor_id: int
    samples: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.samples)

    def tag_positions(self, tag: TagExtrinsics) -> np.ndarray:
        return np.array([tag_position(s.R, s.p, tag) for s in self.samples])

    def ranges(self) -> np.ndarray:
        return np.array([s.z for s in self.samples])


@dataclass
class InitResult:
    p_u_hat: np.ndarray
    P_uu: np.ndarray
    P_ux: np.ndarray


class InitDeferred(RuntimeError):
    """Geometry does not determine the anchor yet; keep buffering."""


def linear_trilateration(T: np.ndarray, d: np.ndarray):
    """Closed-form fit by differencing squared ranges against their mean.

    Returns ``(u, cond)`` where ``cond`` is the condition number of the
    differenced system.
    """
    Tm = T.mean(axis=0)
    sq = np.sum(T * T, axis=1)
    A = 2.0 * (T - Tm)
    b = (sq - sq.mean()) - (d * d - np.mean(d * d))
    s = np.linalg.svd(A, compute_uv=False)
    cond = np.inf if s[-1] <= 1e-14 * max(s[0], 1e-300) else s[0] / s[-1]
    if not np.isfinite(cond):
        return np.full(3, np.nan), cond
    u, *_ = np.linalg.lstsq(A, b, rcond=None)
    return u, cond


def solve_anchor_position(T: np.ndarray, z: np.ndarray, b_u: float = 0.0,
                          initial_guess=None, max_iter: int = 25, tol: float = 1e-8,
                          prior=None, sigma_u: float = 0.1):
    """Gauss-Newton fit of sum (z - b_u - |T_k - u|)^2.

    ``prior = (mean, sigma)`` adds a Gaussian pseudo-measurement of the
    anchor position, with range residuals weighted by ``1 / sigma_u``.
    Returns ``(u, converged)``. Raises :class:`InitDeferred` when the tag
    positions are too degenerate to fix the anchor.
    """
    T = np.asarray(T, dtype=float)
    d = np.asarray(z, dtype=float) - b_u
    if len(T) < 4:
        raise InitDeferred("need at least four range samples")
    u, cond = linear_trilateration(T, d)
    if cond > MAX_COND or prior is not None:
        if initial_guess is None and prior is None:
            raise InitDeferred(f"tag geometry degenerate (cond={cond:.3g})")
        if prior is not None:
            u = np.asarray(prior[0], dtype=float).copy()
        elif initial_guess is not None:
            u = np.asarray(initial_guess, dtype=float).copy()
    for _ in range(max_iter):
        diff = T - u
        rng = np.linalg.norm(diff, axis=1)
        if np.any(rng < 1e-9):
            return u, False
        J = diff / rng[:, None]  # d(rng)/d(u) = -J, residual r = d - rng
        r = d - rng
        if prior is not None:
            s = sigma_u / prior[1]
            J = np.vstack([J, -s * np.eye(3)])
            r = np.concatenate([r, s * (np.asarray(prior[0]) - u)])
        sv = np.linalg.svd(J, compute_uv=False)
        if sv[-1] <= sv[0] / MAX_COND:
            raise InitDeferred("range Jacobian rank deficient")
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        u = u + step
        if np.linalg.norm(step) < tol:
            return u, True
    return u, False


def _sample_rows(state: RobotState, window: RangeWindow, p_u_hat, tag):
    """Linearized window: r = H_x x + H_u du + n with du a plain difference."""
    n = window.n
    H_x = np.zeros((n, state.dim))
    H_u = np.zeros((n, 3))
    clone_times = [c.t for c in state.clones]
    core = np.r_[0:9, np.arange(state.bias_slice.start, state.bias_slice.stop)]
    back = np.eye(15)  # maps current core error to the error at sample k
    for k in range(n - 1, -1, -1):
        s = window.samples[k]
        T = tag_position(s.R, s.p, tag)
        diff = T - p_u_hat
        nh = diff / np.linalg.norm(diff)
        H_u[k] = -nh
        dT_dtheta = nh @ skew(-T)
        if s.t in clone_times:
            cs = state.clone_slice(clone_times.index(s.t)).start
            H_x[k, cs : cs + 3] = dT_dtheta
            H_x[k, cs + 3 : cs + 6] = nh
        elif abs(s.t - state.t) < 1e-9:
            H_x[k, 0:3] = dT_dtheta
            H_x[k, 6:9] = nh
        else:
            H_x[k, core] = dT_dtheta @ back[0:3] + nh @ back[6:9]
        if s.phi is not None:
            back = np.linalg.solve(s.phi, back)
    return H_x, H_u


def init_covariance(state: RobotState, window: RangeWindow, p_u_hat: np.ndarray,
                    tag: TagExtrinsics, sigma_u: float, prior=None) -> InitResult:
    """Anchor covariance and cross-covariance, in the filter's anchor error.

    The last sample of ``window`` must be at the state's current time; older
    samples without a clone in the state are mapped back through the stored
    transitions. ``prior = (mean, sigma)`` appends three pseudo-measurement
    rows that are independent of the robot state.
    """
    H_x, H_u = _sample_rows(state, window, p_u_hat, tag)
    H_x = H_x / sigma_u
    H_u = H_u / sigma_u
    if prior is not None:
        H_x = np.vstack([H_x, np.zeros((3, state.dim))])
        H_u = np.vstack([H_u, np.eye(3) / prior[1]])
    Q, R_u = np.linalg.qr(H_u, mode="complete")
    Q1 = Q[:, :3]
    R1 = R_u[:3]
    sv = np.linalg.svd(R1, compute_uv=False)
    if sv[-1] <= sv[0] / MAX_COND:
        raise InitDeferred("anchor block rank deficient")
    H_x1 = Q1.T @ H_x
    R1inv = np.linalg.inv(R1)
    P = state.P
    # du = -R1^-1 (H_x1 x + n1), rows whitened so n1 has unit covariance
    P_ux_vec = -R1inv @ H_x1 @ P
    P_uu_vec = R1inv @ (H_x1 @ P @ H_x1.T + np.eye(3)) @ R1inv.T
    # filter convention: u = u_hat + [dtheta]x u_hat + du_inv
    A = skew(p_u_hat)
    P_ux = P_ux_vec + A @ P[0:3, :]
    P_uu = P_uu_vec + A @ P_ux_vec[:, 0:3].T + P_ux_vec[:, 0:3] @ A.T + A @ P[0:3, 0:3] @ A.T
    return InitResult(np.asarray(p_u_hat, dtype=float), symmetrize(P_uu), P_ux)


def augment_anchor(state: RobotState, result: InitResult, anchor_id) -> RobotState:
    """Insert the anchor column and its covariance rows after existing anchors."""
    if anchor_id in state.anchor_ids:
        raise ValueError(f"anchor {anchor_id} already in the state")
    at = 9 + 3 * state.L
    dim = state.dim
    cols = np.insert(state.imu.cols, 2 + state.L, result.p_u_hat, axis=1)
    P_ux = np.asarray(result.P_ux)
    P_uu = symmetrize(np.asarray(result.P_uu))
    # keep the joint PSD without touching existing entries
    if dim:
        schur = P_uu - P_ux @ np.linalg.pinv(state.P, rcond=1e-12, hermitian=True) @ P_ux.T
        w = np.linalg.eigvalsh(symmetrize(schur)).min()
        if w < 0:
            P_uu = P_uu + (-w + 1e-12) * np.eye(3)
    idx = np.r_[np.arange(at), np.arange(dim, dim + 3), np.arange(at, dim)]
    big = np.zeros((dim + 3, dim + 3))
    big[:dim, :dim] = state.P
    big[dim:, :dim] = P_ux
    big[:dim, dim:] = P_ux.T
    big[dim:, dim:] = P_uu
    P = big[np.ix_(idx, idx)]
    return state.copy(imu=ExtendedPose(state.imu.R, cols),
                      anchor_ids=tuple(state.anchor_ids) + (anchor_id,), P=P)
