"""Per-robot estimator state and its right-invariant error bookkeeping.

Error-state layout (length 15 + 3L + 6m)::

    [ xi_theta | xi_v | xi_p | xi_u1 .. xi_uL | b_omega | b_a | clone_0 .. clone_{m-1} ]

Clones are stored newest first, so the oldest clone is always the trailing
6-block. Each clone block is (xi_theta, xi_p).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .lie import ExtendedPose, sek3_exp, sek3_log

DEFAULT_WINDOW = 10


@dataclass(frozen=True)
class ImuBiases:
    b_omega: np.ndarray = field(default_factory=lambda: np.zeros(3))
    b_a: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.b_omega, self.b_a])

    @classmethod
    def from_vector(cls, b: np.ndarray) -> "ImuBiases":
        return cls(np.array(b[:3], dtype=float), np.array(b[3:6], dtype=float))


@dataclass(frozen=True)
class Clone:
    R: np.ndarray
    p: np.ndarray
    t: float

    def pose(self) -> ExtendedPose:
        return ExtendedPose(self.R, self.p.reshape(3, 1))


class WindowError(RuntimeError):
    pass


@dataclass
class RobotState:
    imu: ExtendedPose
    biases: ImuBiases
    P: np.ndarray
    t: float = 0.0
    robot_id: int = 0
    clones: tuple = ()
    anchor_ids: tuple = ()
    window: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.imu.K != 2 + len(self.anchor_ids):
            raise ValueError("IMU pose must carry v, p and one column per anchor")
        if self.P.shape != (self.dim, self.dim):
            raise ValueError(f"covariance shape {self.P.shape} != error dim {self.dim}")

    # -- layout -------------------------------------------------------------
    @property
    def L(self) -> int:
        return len(self.anchor_ids)

    @property
    def imu_dim(self) -> int:
        return 9 + 3 * self.L

    @property
    def bias_slice(self) -> slice:
        return slice(self.imu_dim, self.imu_dim + 6)

    @property
    def clone_start(self) -> int:
        return self.imu_dim + 6

    @property
    def dim(self) -> int:
        return self.clone_start + 6 * len(self.clones)

    def anchor_slice(self, index: int) -> slice:
        if not 0 <= index < self.L:
            raise IndexError(f"anchor index {index} out of range (L={self.L})")
        return slice(9 + 3 * index, 12 + 3 * index)

    def anchor_index(self, anchor_id) -> int:
        return self.anchor_ids.index(anchor_id)

    def clone_slice(self, j: int) -> slice:
        s = self.clone_start + 6 * j
        return slice(s, s + 6)

    # -- convenience accessors ----------------------------------------------
    @property
    def R(self) -> np.ndarray:
        return self.imu.R

    @property
    def v(self) -> np.ndarray:
        return self.imu.cols[:, 0]

    @property
    def p(self) -> np.ndarray:
        return self.imu.cols[:, 1]

    def anchor_position(self, index: int) -> np.ndarray:
        self.anchor_slice(index)
        return self.imu.cols[:, 2 + index]

    def copy(self, **changes) -> "RobotState":
        return replace(self, **changes)


def initial_state(
    R, v, p, P0_pose: np.ndarray, bias_sigma=(1e-4, 1e-3), robot_id: int = 0,
    t: float = 0.0, window: int = DEFAULT_WINDOW,
) -> RobotState:
    """State with no anchors and no clones.

    ``P0_pose`` is the 9x9 (theta, v, p) block; bias variances come from
    ``bias_sigma`` = (gyro, accel).
    """
    P = np.zeros((15, 15))
    P[:9, :9] = P0_pose
    P[9:12, 9:12] = bias_sigma[0] ** 2 * np.eye(3)
    P[12:15, 12:15] = bias_sigma[1] ** 2 * np.eye(3)
    imu = ExtendedPose(R, np.column_stack([v, p]))
    return RobotState(imu, ImuBiases(), P, t=t, robot_id=robot_id, window=window)


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def clone_pose(state: RobotState, t: float) -> RobotState:
    """Append the current (R, p) as the newest clone, duplicating its covariance."""
    if len(state.clones) >= state.window:
        raise WindowError("clone window full; marginalize first")
    if state.clones and t <= state.clones[0].t:
        raise WindowError("clone timestamps must be strictly increasing")
    n = state.clone_start
    idx = np.r_[np.arange(n), 0, 1, 2, 6, 7, 8, np.arange(n, state.dim)]
    P = state.P[np.ix_(idx, idx)]
    clone = Clone(state.R.copy(), state.p.copy(), t)
    return state.copy(clones=(clone,) + tuple(state.clones), P=symmetrize(P))


def marginalize_oldest(state: RobotState) -> RobotState:
    if not state.clones:
        raise WindowError("no clone to marginalize")
    keep = state.dim - 6
    return state.copy(clones=tuple(state.clones[:-1]), P=state.P[:keep, :keep].copy())


def apply_correction(state: RobotState, eps: np.ndarray) -> RobotState:
    """Left-multiply each group block by exp of its twist; add to biases."""
    eps = np.asarray(eps, dtype=float)
    if eps.shape != (state.dim,):
        raise ValueError(f"correction length {eps.shape} != error dim {state.dim}")
    nI = state.imu_dim
    imu = sek3_exp(eps[:nI]).compose(state.imu)
    biases = ImuBiases.from_vector(state.biases.vector + eps[state.bias_slice])
    clones = []
    for j, c in enumerate(state.clones):
        X = sek3_exp(eps[state.clone_slice(j)]).compose(c.pose())
        clones.append(Clone(X.R, X.cols[:, 0], c.t))
    return state.copy(imu=imu, biases=biases, clones=tuple(clones))


def compute_error(state_hat: RobotState, state_true: RobotState) -> np.ndarray:
    """Right-invariant error ``log(X_hat X^-1)`` block by block, biases subtracted."""
    if (
        state_hat.anchor_ids != state_true.anchor_ids
        or len(state_hat.clones) != len(state_true.clones)
    ):
        raise ValueError("states have different layouts")
    parts = [
        sek3_log(state_hat.imu.compose(state_true.imu.inverse())),
        state_hat.biases.vector - state_true.biases.vector,
    ]
    for ch, ct in zip(state_hat.clones, state_true.clones):
        parts.append(sek3_log(ch.pose().compose(ct.pose().inverse())))
    return np.concatenate(parts)


def check_covariance(P: np.ndarray, tol: float = 1e-9) -> None:
    if np.abs(P - P.T).max() > tol * max(1.0, np.abs(P).max()):
        raise ValueError("covariance is not symmetric")
    if np.linalg.eigvalsh(symmetrize(P)).min() < -tol * max(1.0, np.abs(P).max()):
        raise ValueError("covariance is not positive semidefinite")


# -- snapshot record ---------------------------------------------------------


def to_record(state: RobotState) -> np.ndarray:
    """Flat float record of a state snapshot.

    Layout: robot_id, t, dim, L, anchor ids (L), window, clone count,
    ExtendedPose matrix row-major, biases (6), clones as (t, 4x4 row-major),
    covariance lower triangle (row-major).
    """
    head = [state.robot_id, state.t, state.dim, state.L, *state.anchor_ids,
            state.window, len(state.clones)]
    parts = [np.array(head, dtype=float), state.imu.matrix().ravel(), state.biases.vector]
    for c in state.clones:
        parts.append(np.r_[c.t, c.pose().matrix().ravel()])
    parts.append(state.P[np.tril_indices(state.dim)])
    return np.concatenate(parts)


def from_record(rec: np.ndarray) -> RobotState:
    rec = np.asarray(rec, dtype=float)
    robot_id, t, dim, L = int(rec[0]), rec[1], int(rec[2]), int(rec[3])
    anchor_ids = tuple(int(a) for a in rec[4 : 4 + L])
    i = 4 + L
    window, n_clones = int(rec[i]), int(rec[i + 1])
    i += 2
    n = 5 + L
    imu = ExtendedPose.from_matrix(rec[i : i + n * n].reshape(n, n))
    i += n * n
    biases = ImuBiases.from_vector(rec[i : i + 6])
    i += 6
    clones = []
    for _ in range(n_clones):
        M = rec[i + 1 : i + 17].reshape(4, 4)
        clones.append(Clone(M[:3, :3].copy(), M[:3, 3].copy(), rec[i]))
        i += 17
    P = np.zeros((dim, dim))
    P[np.tril_indices(dim)] = rec[i : i + dim * (dim + 1) // 2]
    P = P + np.tril(P, -1).T
    return RobotState(imu, biases, P, t=t, robot_id=robot_id, clones=tuple(clones),
                      anchor_ids=anchor_ids, window=window)
