"""Local observability matrix of the multi-robot error system.

Analysis configuration: each robot carries one anchor and one feature as
extra columns of its extended pose, i.e. columns (v, p, u, f), giving a
21-dimensional error per robot ordered (theta, v, p, u, f, b_omega, b_a).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .lie import ExtendedPose, skew
from .propagation import GRAVITY, _jacobian_F, expm_series
from .sensing import MIN_DEPTH, CameraExtrinsics, TagExtrinsics, projection_jacobian, to_camera

log = logging.getLogger(__name__)

ROBOT_DIM = 21
SV_TOL = 1e-8


@dataclass
class TruthSample:
    """Linearization point of one robot at one instant."""

    R: np.ndarray
    v: np.ndarray
    p: np.ndarray
    a: np.ndarray | None = None  # specific force, needed for vector-error Jacobians


@dataclass
class ObservabilityMatrix:
    O: np.ndarray
    n_robots: int
    robot_dim: int
    shared_landmarks: bool = False

    @property
    def column_count(self) -> int:
        return self.O.shape[1]


def _pose(s: TruthSample, u, f) -> ExtendedPose:
    return ExtendedPose(s.R, np.column_stack([s.v, s.p, u, f]))


def _feature_block(s: TruthSample, f, cam: CameraExtrinsics):
    """Projection Jacobian w.r.t. the world feature, or None when it is not in view."""
    pc = to_camera(s.R, s.p, f, cam)
    if pc[2] <= MIN_DEPTH:
        return None
    return projection_jacobian(pc) @ cam.R_CI @ s.R.T


def invariant_F(s: TruthSample, u, f) -> np.ndarray:
    return _jacobian_F(_pose(s, u, f))


def invariant_H(s: TruthSample, u, f, cam: CameraExtrinsics, tag: TagExtrinsics) -> np.ndarray:
    """Camera rows (2) and range row (1) over the 21-dim robot error.

    The camera rows are left at zero when the feature is behind the camera.
    """
    H = np.zeros((3, ROBOT_DIM))
    Hf = _feature_block(s, f, cam)
    if Hf is not None:
        H[0:2, 6:9] = -Hf
        H[0:2, 12:15] = Hf
    d = s.p + s.R @ tag.p_T - u
    nh = d / np.linalg.norm(d)
    H[2, 0:3] = nh @ skew(-d)
    H[2, 6:9] = nh
    H[2, 9:12] = -nh
    return H


def vector_F(s: TruthSample) -> np.ndarray:
    """Standard (non-invariant) error dynamics: global angle, plain differences."""
    F = np.zeros((ROBOT_DIM, ROBOT_DIM))
    a = np.zeros(3) if s.a is None else s.a
    F[0:3, 15:18] = -s.R
    F[3:6, 0:3] = -skew(s.R @ a)
    F[3:6, 18:21] = -s.R
    F[6:9, 3:6] = np.eye(3)
    return F


def vector_H(s: TruthSample, u, f, cam: CameraExtrinsics, tag: TagExtrinsics) -> np.ndarray:
    H = np.zeros((3, ROBOT_DIM))
    Hf = _feature_block(s, f, cam)
    if Hf is not None:
        H[0:2, 0:3] = Hf @ skew(f - s.p)
        H[0:2, 6:9] = -Hf
        H[0:2, 12:15] = Hf
    RpT = s.R @ tag.p_T
    d = s.p + RpT - u
    nh = d / np.linalg.norm(d)
    H[2, 0:3] = nh @ skew(-RpT)
    H[2, 6:9] = nh
    H[2, 9:12] = -nh
    return H


def _is_general_motion(traj) -> bool:
    Rs = np.array([s.R for s in traj])
    ps = np.array([s.p for s in traj])
    if len(traj) < 3:
        return False
    rot_spread = np.abs(Rs - Rs[0]).max()
    acc = np.diff(ps, 2, axis=0)
    return rot_spread > 1e-6 and np.linalg.matrix_rank(acc, tol=1e-9) >= 2


def build_observability(trajectories, dt: float, u, f, cam: CameraExtrinsics | None = None,
                        tag: TagExtrinsics | None = None, substeps: int = 1,
                        jacobians: str = "invariant", shared_landmarks: bool = False,
                        linearization=None) -> ObservabilityMatrix:
    """Stack O_k = H_k Phi_{k|0} for every robot and epoch.

    ``trajectories[i]`` is a list of :class:`TruthSample` at
    ``epochs * substeps + 1`` instants spaced ``dt / substeps``; epochs are
    every ``substeps`` samples. ``linearization``, if given, supplies
    alternative samples (e.g. filter estimates) for the Jacobians, as
    ``(phi_points, h_points)`` each shaped like ``trajectories``.
    """
    cam = cam or CameraExtrinsics()
    tag = tag or TagExtrinsics()
    n = len(trajectories)
    h = dt / substeps
    u = np.asarray(u, dtype=float)
    f = np.asarray(f, dtype=float)
    for traj in trajectories:
        if not _is_general_motion(traj):
            log.warning("trajectory lacks general motion; rank claims do not apply")
    phi_pts, h_pts = linearization if linearization is not None else (trajectories, trajectories)

    per_robot = []
    for i in range(n):
        m = len(trajectories[i])
        Phi = np.eye(ROBOT_DIM)
        rows = []
        for k in range(m):
            if k > 0:
                s = phi_pts[i][k - 1]
                F = invariant_F(s, u, f) if jacobians == "invariant" else vector_F(s)
                Phi = expm_series(F * h) @ Phi
            if k % substeps == 0:
                s = h_pts[i][k]
                H = (invariant_H(s, u, f, cam, tag) if jacobians == "invariant"
                     else vector_H(s, u, f, cam, tag))
                rows.append(H @ Phi)
        per_robot.append(np.vstack(rows))

    if not shared_landmarks:
        r = sum(b.shape[0] for b in per_robot)
        O = np.zeros((r, n * ROBOT_DIM))
        row = 0
        for i, B in enumerate(per_robot):
            O[row : row + B.shape[0], i * ROBOT_DIM : (i + 1) * ROBOT_DIM] = B
            row += B.shape[0]
        return ObservabilityMatrix(O, n, ROBOT_DIM)

    # shared landmarks: per robot (theta, v, p, b) plus one common (u, f) in
    # plain-difference coordinates; robot i's invariant landmark error is
    # du_vec + [u]x dtheta_i.
    own = np.r_[0:9, 15:21]
    width = n * 15 + 6
    blocks = []
    for i, B in enumerate(per_robot):
        M = np.zeros((B.shape[0], width))
        M[:, i * 15 : (i + 1) * 15] = B[:, own]
        M[:, i * 15 : i * 15 + 3] += B[:, 9:12] @ skew(u) + B[:, 12:15] @ skew(f)
        M[:, n * 15 : n * 15 + 3] = B[:, 9:12]
        M[:, n * 15 + 3 : n * 15 + 6] = B[:, 12:15]
        blocks.append(M)
    return ObservabilityMatrix(np.vstack(blocks), n, 15, shared_landmarks=True)


def null_basis(n_robots: int, u=None, f=None, shared_landmarks: bool = False) -> np.ndarray:
    """Four unobservable directions: yaw about gravity and global translation."""
    if not shared_landmarks:
        Ni = np.zeros((ROBOT_DIM, 4))
        Ni[0:3, 0] = GRAVITY
        for blk in (6, 9, 12):
            Ni[blk : blk + 3, 1:4] = np.eye(3)
        return np.vstack([Ni] * n_robots)
    N = np.zeros((n_robots * 15 + 6, 4))
    for i in range(n_robots):
        N[i * 15 : i * 15 + 3, 0] = GRAVITY
        N[i * 15 + 6 : i * 15 + 9, 1:4] = np.eye(3)
    s = n_robots * 15
    N[s : s + 3, 0] = -skew(u) @ GRAVITY
    N[s + 3 : s + 6, 0] = -skew(f) @ GRAVITY
    N[s : s + 3, 1:4] = np.eye(3)
    N[s + 3 : s + 6, 1:4] = np.eye(3)
    return N


@dataclass
class NullSpaceReport:
    residual: float
    rank: int
    columns: int
    singular_values: np.ndarray
    per_robot_deficiency: list

    @property
    def deficiency(self) -> int:
        return self.columns - self.rank

    def smallest(self, k: int = 10) -> np.ndarray:
        return np.sort(self.singular_values)[:k]

    def numerical_null_basis(self, O: np.ndarray) -> np.ndarray:
        _, _, Vt = np.linalg.svd(O)
        return Vt[self.rank :].T


def numerical_rank(M: np.ndarray, tol: float = SV_TOL):
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0 or s[0] == 0:
        return 0, s
    return int(np.sum(s > tol * s[0])), s


def check_null_space(obs: ObservabilityMatrix, N: np.ndarray, tol: float = SV_TOL) -> NullSpaceReport:
    O = obs.O
    residual = np.linalg.norm(O @ N) / np.linalg.norm(O)
    rank, s = numerical_rank(O, tol)
    per_robot = []
    if not obs.shared_landmarks:
        d = obs.robot_dim
        for i in range(obs.n_robots):
            blk = O[:, i * d : (i + 1) * d]
            blk = blk[np.any(blk != 0, axis=1)]
            r, _ = numerical_rank(blk, tol)
            per_robot.append(d - r)
    return NullSpaceReport(float(residual), rank, O.shape[1], s, per_robot)


def format_report(rep: NullSpaceReport) -> str:
    lines = [
        f"columns,{rep.columns}",
        f"rank,{rep.rank}",
        f"rank_deficiency,{rep.deficiency}",
        f"per_robot_deficiency,{';'.join(str(d) for d in rep.per_robot_deficiency)}",
        f"relative_residual,{rep.residual:.6e}",
        "smallest_singular_values," + ";".join(f"{v:.6e}" for v in rep.smallest(10)),
    ]
    return "\n".join(lines) + "\n"
