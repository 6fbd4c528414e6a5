"""IMU kinematics and right-invariant error propagation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import ExtendedPose, adjoint, skew, so3_exp
from .state import RobotState, symmetrize

GRAVITY = np.array([0.0, 0.0, -9.8])


@dataclass(frozen=True)
class ImuSample:
    omega_m: np.ndarray
    a_m: np.ndarray
    t: float


@dataclass(frozen=True)
class NoiseParams:
    """Continuous-time noise densities.

    Measurement densities default to the simulated robots' IMU; the bias
    random-walk densities are chosen to sit below them.
    """

    sigma_a: np.ndarray = field(default_factory=lambda: np.array([0.003, 0.003, 0.004]))
    sigma_omega: np.ndarray = field(
        default_factory=lambda: np.array([0.0003, 0.0003, 0.0005])
    )
    sigma_wa: np.ndarray = field(default_factory=lambda: np.full(3, 1e-4))
    sigma_womega: np.ndarray = field(default_factory=lambda: np.full(3, 1e-5))

    def __post_init__(self):
        for name in ("sigma_a", "sigma_omega", "sigma_wa", "sigma_womega"):
            val = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (3,)).copy()
            if np.any(val < 0) or not np.all(np.isfinite(val)):
                raise ValueError(f"{name} must be finite and non-negative")
            object.__setattr__(self, name, val)

    def scaled(self, factor: float) -> "NoiseParams":
        return NoiseParams(self.sigma_a * factor, self.sigma_omega * factor,
                           self.sigma_wa * factor, self.sigma_womega * factor)


def mean_propagate(state: RobotState, sample: ImuSample, dt: float) -> RobotState:
    """One Euler step on the group; anchors and biases are held constant."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    imu = _step_imu(state.imu, state.biases.vector, sample.omega_m, sample.a_m, dt)
    return state.copy(imu=imu, t=state.t + dt)


def _step_imu(imu: ExtendedPose, b: np.ndarray, omega_m, a_m, dt: float) -> ExtendedPose:
    R = imu.R
    v = imu.cols[:, 0]
    p = imu.cols[:, 1]
    w_hat = omega_m - b[:3]
    a_hat = a_m - b[3:6]
    acc = R @ a_hat + GRAVITY
    cols = imu.cols.copy()
    cols[:, 0] = v + acc * dt
    cols[:, 1] = p + v * dt + 0.5 * acc * dt * dt
    return ExtendedPose(R @ so3_exp(w_hat * dt), cols)


def jacobian_F(state: RobotState) -> np.ndarray:
    """Continuous error dynamics of the IMU block (pose, anchors, biases)."""
    return _jacobian_F(state.imu)


def _jacobian_F(imu: ExtendedPose) -> np.ndarray:
    K = imu.K
    nI = 3 * (K + 1)
    bw, ba = nI, nI + 3
    R = imu.R
    F = np.zeros((nI + 6, nI + 6))
    F[3:6, 0:3] = skew(GRAVITY)
    F[6:9, 3:6] = np.eye(3)
    F[0:3, bw : bw + 3] = -R
    F[3:6, bw : bw + 3] = -skew(imu.cols[:, 0]) @ R
    F[3:6, ba : ba + 3] = -R
    for j in range(1, K):
        F[3 * j + 3 : 3 * j + 6, bw : bw + 3] = -skew(imu.cols[:, j]) @ R
    return F


def jacobian_G(state: RobotState) -> np.ndarray:
    """Noise input matrix for n = [n_omega, n_a, 0, ..., w_omega, w_a]."""
    return _jacobian_G(state.imu)


def _jacobian_G(imu: ExtendedPose) -> np.ndarray:
    nI = 3 * (imu.K + 1)
    G = np.zeros((nI + 6, nI + 6))
    G[:nI, :nI] = adjoint(imu)
    G[nI:, nI:] = np.eye(6)
    return G


def continuous_noise(noise: NoiseParams, L: int) -> np.ndarray:
    """Diagonal Q_c matching the noise vector layout of :func:`jacobian_G`."""
    nI = 9 + 3 * L
    q = np.zeros(nI + 6)
    q[0:3] = noise.sigma_omega**2
    q[3:6] = noise.sigma_a**2
    q[nI : nI + 3] = noise.sigma_womega**2
    q[nI + 3 : nI + 6] = noise.sigma_wa**2
    return np.diag(q)


def expm_series(A: np.ndarray, tol: float = 1e-16) -> np.ndarray:
    """Matrix exponential by scaling and squaring a truncated Taylor series."""
    n = A.shape[0]
    norm = np.abs(A).sum(axis=1).max() if n else 0.0
    s = 0
    if norm > 0.5:
        s = int(np.ceil(np.log2(norm / 0.5)))
    B = A / (2.0**s)
    result = np.eye(n)
    term = np.eye(n)
    for k in range(1, 40):
        term = term @ B / k
        result = result + term
        tn = np.abs(term).max()
        if tn == 0.0 or tn < tol * np.abs(result).max():
            break
    for _ in range(s):
        result = result @ result
    return result


def transition_matrix(F: np.ndarray, dt: float, full_dim: int | None = None) -> np.ndarray:
    """Phi = exp(F dt); with ``full_dim`` the clone block is embedded as identity."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    Phi = expm_series(F * dt)
    if full_dim is None or full_dim == F.shape[0]:
        return Phi
    out = np.eye(full_dim)
    n = F.shape[0]
    out[:n, :n] = Phi
    return out


def discrete_noise(G: np.ndarray, Qc: np.ndarray, dt: float) -> np.ndarray:
    return G @ Qc @ G.T * dt


def propagate_covariance(P: np.ndarray, Phi: np.ndarray, Q_d: np.ndarray) -> np.ndarray:
    n = P.shape[0]
    if Phi.shape != (n, n):
        raise ValueError("Phi and P dimensions differ")
    if Q_d.shape != (n, n):
        if Q_d.shape[0] > n:
            raise ValueError("Q_d larger than P")
        Q = np.zeros((n, n))
        Q[: Q_d.shape[0], : Q_d.shape[0]] = Q_d
        Q_d = Q
    return symmetrize(Phi @ P @ Phi.T + Q_d)


def propagate(state: RobotState, samples, noise: NoiseParams, t_end: float | None = None):
    """Propagate mean and covariance over a sequence of IMU samples.

    Each sample is held over the interval up to the next sample (or
    ``t_end`` for the last one). Only the IMU block of the covariance is
    stepped per sample; the clone cross-terms are transported once with the
    accumulated transition. Returns ``(state, Phi_imu)``.
    """
    samples = list(samples)
    nI = state.imu_dim + 6
    L = state.L
    Qc = continuous_noise(noise, L)
    P = state.P.copy()
    P_II = P[:nI, :nI]
    Phi_acc = np.eye(nI)
    imu = state.imu
    b = state.biases.vector
    t = state.t
    for k, s in enumerate(samples):
        t_next = samples[k + 1].t if k + 1 < len(samples) else t_end
        if t_next is None:
            raise ValueError("t_end required for the last sample")
        dt = t_next - max(t, s.t)
        if dt <= 0:
            continue
        F = _jacobian_F(imu)
        G = _jacobian_G(imu)
        Phi = expm_series(F * dt)
        P_II = Phi @ P_II @ Phi.T + G @ Qc @ G.T * dt
        Phi_acc = Phi @ Phi_acc
        imu = _step_imu(imu, b, s.omega_m, s.a_m, dt)
        t = t_next
    P[:nI, :nI] = P_II
    P[:nI, nI:] = Phi_acc @ P[:nI, nI:]
    P[nI:, :nI] = P[:nI, nI:].T
    return state.copy(imu=imu, P=symmetrize(P), t=t), Phi_acc
