"""EKF and covariance-intersection updates, stacked cross-robot systems.

A stacked system collects rows from the ego robot and from neighbours. Its
Jacobian is split into one column block per participant: block 0 maps the
ego's full error state, block k>0 maps the coordinates that neighbour k
shared in its packets (its clone-window poses), whose prior covariance
travels with the packet.
"""

from __future__ import annotations

import logging
import struct
from functools import lru_cache
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import chi2

from .lie import skew
from .sensing import (
    CameraExtrinsics,
    DegenerateGeometry,
    TagExtrinsics,
    feature_jacobians,
    feature_rows,
    predict_range,
    project,
    range_jacobian,
    tag_position,
    to_camera,
    triangulate,
)
from .state import RobotState, apply_correction, symmetrize

log = logging.getLogger(__name__)

MAX_CONDITION = 1e12


@dataclass
class StackedSystem:
    residual: np.ndarray
    blocks: list  # one Jacobian block per participant, ego first
    noise: np.ndarray
    participants: list
    priors: list = field(default_factory=list)  # neighbour priors, aligned with blocks[1:]

    def __post_init__(self):
        r = len(self.residual)
        for H in self.blocks:
            if H.shape[0] != r:
                raise ValueError("every block must have one row per residual entry")
        if self.noise.shape != (r, r):
            raise ValueError("noise covariance has the wrong size")

    @property
    def rows(self) -> int:
        return len(self.residual)


@dataclass
class CiWeights:
    omega: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.omega, dtype=float)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("weights must be positive and sum to one")
        self.omega = w


class UpdateSkipped(RuntimeError):
    pass


# -- plain EKF ---------------------------------------------------------------


def _solve_spd(S: np.ndarray, B: np.ndarray) -> np.ndarray:
    if np.linalg.cond(S) > MAX_CONDITION:
        raise UpdateSkipped("innovation covariance is singular")
    return np.linalg.solve(S, B)


def update_individual(state: RobotState, residual, H, Q) -> RobotState:
    """Standard EKF update with the invariant retraction."""
    residual = np.atleast_1d(np.asarray(residual, dtype=float))
    H = np.atleast_2d(H)
    Q = np.atleast_2d(Q)
    if H.shape != (len(residual), state.dim):
        raise ValueError(f"Jacobian shape {H.shape} does not match state dim {state.dim}")
    P = state.P
    PHt = P @ H.T
    S = H @ PHt + Q
    try:
        KT = _solve_spd(S, PHt.T)
    except UpdateSkipped:
        log.warning("robot %s: singular innovation, update skipped", state.robot_id)
        return state
    eps = KT.T @ residual
    P_new = symmetrize(P - KT.T @ PHt.T)
    return apply_correction(state, eps).copy(P=P_new)


@lru_cache(maxsize=4096)
def chi2_threshold(dof: int, prob: float = 0.95) -> float:
    return float(chi2.ppf(prob, dof))


def chi2_gate(residual, H, P, Q, prob: float = 0.95) -> bool:
    residual = np.atleast_1d(residual)
    H = np.atleast_2d(H)
    S = H @ P @ H.T + np.atleast_2d(Q)
    try:
        m = residual @ np.linalg.solve(S, residual)
    except np.linalg.LinAlgError:
        return False
    return bool(m <= chi2_threshold(len(residual), prob))


# -- covariance intersection ----------------------------------------------------


def _innovation(system: StackedSystem, P_ego: np.ndarray, omega: np.ndarray):
    S = system.noise.copy()
    priors = [P_ego] + list(system.priors)
    for w, H, P in zip(omega, system.blocks, priors):
        S += H @ P @ H.T / w
    return symmetrize(S)


def ci_update(state: RobotState, system: StackedSystem, weights: CiWeights,
              priors=None) -> RobotState:
    """CI-EKF update of the ego state from a stacked system.

    ``S = sum_k H_k P_k H_k^T / w_k + Q`` over every participant including
    the ego; the ego gain and covariance carry the 1/w_0 inflation.
    """
    if priors is not None:
        system = StackedSystem(system.residual, system.blocks, system.noise,
                               system.participants, list(priors))
    w = weights.omega
    if len(w) != len(system.blocks):
        raise ValueError("one weight per participant required")
    H0 = system.blocks[0]
    if H0.shape[1] != state.dim:
        raise ValueError("ego block does not match the state dimension")
    P = state.P
    S = _innovation(system, P, w)
    PHt = P @ H0.T
    try:
        X = _solve_spd(S, PHt.T)
    except UpdateSkipped:
        log.warning("robot %s: singular CI innovation, update skipped", state.robot_id)
        return state
    w0 = w[0]
    eps = (X.T @ system.residual) / w0
    P_new = symmetrize(P / w0 - (X.T @ PHt.T) / w0**2)
    return apply_correction(state, eps).copy(P=P_new)


def _project_simplex(v: np.ndarray, floor: float) -> np.ndarray:
    """Euclidean projection onto {w >= floor, sum w = 1}."""
    n = len(v)
    u = v - floor
    target = 1.0 - n * floor
    s = np.sort(u)[::-1]
    css = np.cumsum(s) - target
    rho = np.nonzero(s - css / np.arange(1, n + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(u - theta, 0.0) + floor


class _TraceObjective:
    """Ego posterior trace as a function of the CI weights.

    Per-participant innovation terms are computed once; each evaluation
    costs one Cholesky factorization of the innovation covariance.
    """

    def __init__(self, system: StackedSystem, P_ego: np.ndarray, select=None):
        H0 = system.blocks[0]
        priors = [P_ego] + list(system.priors)
        self.Q = system.noise
        self.M = [symmetrize(H @ P @ H.T) for H, P in zip(system.blocks, priors)]
        # W = A A^T; traces against W are taken through the thin factor A
        self.A = H0 @ P_ego if select is None else H0 @ P_ego[:, select]
        self.trP = np.trace(P_ego) if select is None else np.trace(P_ego[np.ix_(select, select)])
        self.evals = 0

    def __call__(self, w, grad: bool = False):
        w = np.asarray(w, dtype=float)
        self.evals += 1
        S = self.Q.copy()
        for wk, M in zip(w, self.M):
            S += M / wk
        try:
            c = cho_factor(S, check_finite=False)
        except np.linalg.LinAlgError:
            return (np.inf, np.zeros(len(w))) if grad else np.inf
        X = cho_solve(c, self.A, check_finite=False)  # S^-1 A
        t = np.sum(self.A * X)  # tr(S^-1 W)
        f = self.trP / w[0] - t / w[0] ** 2
        if not grad:
            return f
        # d tr(S^-1 W) / d w_k = tr(X^T M_k X) / w_k^2
        g = np.array([np.sum(X * (M @ X)) for M in self.M]) / w**2
        g = -g / w[0] ** 2
        g[0] += -self.trP / w[0] ** 2 + 2.0 * t / w[0] ** 3
        return f, g


def posterior_trace(system: StackedSystem, P_ego: np.ndarray, omega, select=None) -> float:
    """Trace of the ego posterior covariance for the given weights."""
    return float(_TraceObjective(system, P_ego, select)(omega))


def choose_weights(system: StackedSystem, P_ego: np.ndarray, mode: str = "equal",
                   select=None, floor: float = 1e-3, max_evals: int = 20) -> CiWeights:
    """Pick CI weights: equal split, or minimise the ego posterior trace.

    ``select`` restricts the trace to a subset of ego error coordinates.
    The trace is minimised by projected gradient descent with backtracking
    from the equal split, within ``max_evals`` objective evaluations.
    """
    n = len(system.blocks)
    equal = np.full(n, 1.0 / n)
    if n == 1 or mode == "equal":
        return CiWeights(equal)
    if mode != "trace-min":
        raise ValueError(f"unknown weight mode {mode!r}")
    obj = _TraceObjective(system, P_ego, select)
    w = equal
    f, g = obj(w, grad=True)
    step = 0.25
    while obj.evals < max_evals:
        d = g - g.mean()
        if np.abs(d).max() < 1e-12 * max(1.0, abs(f)):
            break
        d = d / np.abs(d).max()
        cand = _project_simplex(w - step * d, floor)
        if np.allclose(cand, w, atol=1e-9, rtol=0.0):
            break
        fc = obj(cand)
        if fc < f:
            w = cand
            f, g = obj(w, grad=True)
            step = min(step * 2.0, 1.0)
        else:
            step *= 0.3
            if step < 1e-4:
                break
    w = w / w.sum()
    return CiWeights(w)


# -- neighbour packets ------------------------------------------------------------

ANCHOR, FEATURE = 0, 1


@dataclass
class NeighborPacket:
    """One shared observation plus the sender's clone-window linearization.

    ``measurement`` is ``[range]`` for an anchor and ``[clone_index, x, y, ...]``
    for a feature. ``clones`` lists the sender's clone poses (R, p, t), newest
    first, and ``covariance`` is the sender's prior covariance over their
    stacked (theta, p) errors.
    """

    epoch: int
    robot_id: int
    kind: int
    target_id: int
    measurement: np.ndarray
    clones: list
    covariance: np.ndarray


def _clone_window(state: RobotState):
    n = len(state.clones)
    s = state.clone_start
    Pc = state.P[s : s + 6 * n, s : s + 6 * n].copy()
    clones = [(c.R.copy(), c.p.copy(), c.t) for c in state.clones]
    return clones, Pc


def make_anchor_packet(state: RobotState, anchor_id: int, d: float, epoch: int) -> NeighborPacket:
    """Range sample tied to the sender's newest clone (taken at this epoch)."""
    if not state.clones:
        raise ValueError("sender needs a clone for the current epoch")
    clones, Pc = _clone_window(state)
    return NeighborPacket(epoch, state.robot_id, ANCHOR, anchor_id,
                          np.array([float(d)]), clones, Pc)


def make_feature_packet(state: RobotState, feature_id: int, track, epoch: int) -> NeighborPacket:
    """``track`` is a list of (clone timestamp, z) pairs."""
    clones, Pc = _clone_window(state)
    times = [c[2] for c in clones]
    meas = []
    for t, z in track:
        if t in times:
            meas.extend([times.index(t), z[0], z[1]])
    return NeighborPacket(epoch, state.robot_id, FEATURE, feature_id,
                          np.array(meas, dtype=float), clones, Pc)


def _group_packets(packets):
    """Neighbours in first-seen order, each with its packets."""
    groups = {}
    for pk in packets:
        groups.setdefault(pk.robot_id, []).append(pk)
    return groups


def build_common_anchor_system(state: RobotState, anchor_id: int, d_ego: float,
                               packets, tag: TagExtrinsics, sigma_u: float) -> StackedSystem:
    """Stack the ego range and neighbours' ranges to the same anchor.

    Neighbour rows are linearized at the ego's anchor estimate: they load on
    the ego's anchor (and rotation, via the invariant anchor error) and on
    the sender's newest-clone pose.
    """
    a = state.anchor_index(anchor_id)
    u_hat = state.anchor_position(a)
    ego_H = [range_jacobian(state, a, tag)]
    res = [d_ego - predict_range(state, a, tag)]
    participants = [state.robot_id]
    neigh_blocks, priors = [], []
    rows_of = []
    for rid, pks in _group_packets(p for p in packets
                                   if p.kind == ANCHOR and p.target_id == anchor_id).items():
        if rid == state.robot_id:
            continue
        pk = pks[0]
        R, p, _ = pk.clones[0]
        T = tag_position(R, p, tag)
        diff = T - u_hat
        n = np.linalg.norm(diff)
        if n < 1e-6:
            continue
        nh = diff / n
        row = np.zeros(state.dim)
        row[0:3] = nh @ skew(u_hat)
        row[state.anchor_slice(a)] = -nh
        ego_H.append(row)
        res.append(pk.measurement[0] - tag.b_u - n)
        Hn = np.zeros(pk.covariance.shape[0])
        Hn[0:3] = nh @ skew(-T)
        Hn[3:6] = nh
        participants.append(rid)
        rows_of.append(Hn)
        priors.append(pk.covariance)
    r = len(res)
    blocks = [np.array(ego_H)]
    for k, Hn in enumerate(rows_of):
        B = np.zeros((r, len(Hn)))
        B[k + 1] = Hn
        blocks.append(B)
    return StackedSystem(np.array(res), blocks, sigma_u**2 * np.eye(r), participants, priors)


def left_nullspace(H_f: np.ndarray) -> np.ndarray:
    """Orthonormal basis N with N^T H_f = 0."""
    Q, _ = np.linalg.qr(H_f, mode="complete")
    return Q[:, H_f.shape[1]:]


def build_common_feature_system(state: RobotState, ego_track, packets, cam: CameraExtrinsics,
                                sigma_c: float, feat_est=None):
    """Stack ego and neighbour observations of one feature and project it out.

    ``ego_track`` is a list of (clone index, z). Returns ``(system, p_f)`` or
    raises :class:`DegenerateGeometry` when the feature cannot be used.
    """
    obs, poses = [], []
    for j, z in ego_track:
        c = state.clones[j]
        obs.append(z)
        poses.append((c.R, c.p))
    neigh = []
    for pk in packets:
        if pk.kind != FEATURE or pk.robot_id == state.robot_id:
            continue
        m = pk.measurement.reshape(-1, 3)
        items = []
        for idx, x, y in m:
            R, p, _ = pk.clones[int(idx)]
            obs.append(np.array([x, y]))
            poses.append((R, p))
            items.append((int(idx), np.array([x, y])))
        neigh.append((pk, items))
    if feat_est is None:
        feat_est, ok = triangulate(obs, poses, cam)
        if not ok:
            raise DegenerateGeometry("triangulation failed")
    n_rows = 2 * len(obs)
    if n_rows <= 3:
        raise DegenerateGeometry("not enough rows to eliminate the feature")

    H_ego = np.zeros((n_rows, state.dim))
    H_f = np.zeros((n_rows, 3))
    res = np.zeros(n_rows)
    row = 0
    for j, z in ego_track:
        Hx, Hf = feature_rows(state, j, feat_est, cam, convention="vector")
        c = state.clones[j]
        res[row : row + 2] = z - project(to_camera(c.R, c.p, feat_est, cam))
        H_ego[row : row + 2] = Hx
        H_f[row : row + 2] = Hf
        row += 2
    blocks_n, priors, participants = [], [], [state.robot_id]
    for pk, items in neigh:
        B = np.zeros((n_rows, pk.covariance.shape[0]))
        for idx, z in items:
            R, p, _ = pk.clones[idx]
            Ht, Hp, Hf = feature_jacobians(R, p, feat_est, cam, convention="vector")
            res[row : row + 2] = z - project(to_camera(R, p, feat_est, cam))
            B[row : row + 2, 6 * idx : 6 * idx + 3] = Ht
            B[row : row + 2, 6 * idx + 3 : 6 * idx + 6] = Hp
            H_f[row : row + 2] = Hf
            row += 2
        blocks_n.append(B)
        priors.append(pk.covariance)
        participants.append(pk.robot_id)
    N = left_nullspace(H_f)
    blocks = [N.T @ H_ego] + [N.T @ B for B in blocks_n]
    r = N.shape[1]
    system = StackedSystem(N.T @ res, blocks, sigma_c**2 * np.eye(r), participants, priors)
    return system, feat_est


def merge_systems(systems) -> StackedSystem:
    """Concatenate stacked systems, merging blocks of the same participant.

    Blocks of one neighbour must share coordinates (its clone window) and
    prior, which holds for packets of a single epoch.
    """
    systems = [s for s in systems if s.rows > 0]
    if not systems:
        raise ValueError("nothing to merge")
    ego = systems[0].participants[0]
    order, prior_of, width = [ego], {}, {}
    for s in systems:
        for pid, B, P in zip(s.participants[1:], s.blocks[1:], s.priors):
            if pid not in prior_of:
                order.append(pid)
                prior_of[pid] = P
                width[pid] = B.shape[1]
    width[ego] = systems[0].blocks[0].shape[1]
    r_total = sum(s.rows for s in systems)
    blocks = {pid: np.zeros((r_total, width[pid])) for pid in order}
    res = np.zeros(r_total)
    noise = np.zeros((r_total, r_total))
    row = 0
    for s in systems:
        r = s.rows
        res[row : row + r] = s.residual
        noise[row : row + r, row : row + r] = s.noise
        for pid, B in zip(s.participants, s.blocks):
            blocks[pid][row : row + r] = B
        row += r
    return StackedSystem(res, [blocks[p] for p in order], noise, order,
                         [prior_of[p] for p in order[1:]])


# -- wire format ---------------------------------------------------------------------
#
# Little-endian, length-prefixed:
#   u32 body_length
#   u64 epoch | u32 robot_id | u8 kind | u32 target_id
#   u32 n_meas    | f64[n_meas]          measurement
#   u32 n_clones  | f64[13 * n_clones]   per clone: t, R (row-major), p
#   u32 cov_dim   | f64[d (d + 1) / 2]   covariance lower triangle, row-major

_HEAD = struct.Struct("<QIBI")


def encode_packet(pk: NeighborPacket) -> bytes:
    meas = np.asarray(pk.measurement, dtype="<f8")
    cl = np.array([np.r_[t, np.asarray(R).ravel(), p] for R, p, t in pk.clones],
                  dtype="<f8").reshape(-1)
    d = pk.covariance.shape[0]
    tri = np.asarray(pk.covariance, dtype="<f8")[np.tril_indices(d)]
    body = b"".join([
        _HEAD.pack(pk.epoch, pk.robot_id, pk.kind, pk.target_id),
        struct.pack("<I", len(meas)), meas.tobytes(),
        struct.pack("<I", len(pk.clones)), cl.tobytes(),
        struct.pack("<I", d), tri.tobytes(),
    ])
    return struct.pack("<I", len(body)) + body


def decode_packet(buf: bytes) -> tuple:
    """Decode one packet from the front of ``buf``; returns (packet, bytes used)."""
    (length,) = struct.unpack_from("<I", buf, 0)
    if len(buf) < 4 + length:
        raise ValueError("truncated packet")
    off = 4
    epoch, rid, kind, target = _HEAD.unpack_from(buf, off)
    off += _HEAD.size

    def take(count):
        nonlocal off
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=off).astype(float)
        off += 8 * count
        return arr

    (n_meas,) = struct.unpack_from("<I", buf, off)
    off += 4
    meas = take(n_meas)
    (n_cl,) = struct.unpack_from("<I", buf, off)
    off += 4
    raw = take(13 * n_cl).reshape(n_cl, 13)
    clones = [(r[1:10].reshape(3, 3).copy(), r[10:13].copy(), float(r[0])) for r in raw]
    (d,) = struct.unpack_from("<I", buf, off)
    off += 4
    tri = take(d * (d + 1) // 2)
    cov = np.zeros((d, d))
    cov[np.tril_indices(d)] = tri
    cov = cov + np.tril(cov, -1).T
    if off != 4 + length:
        raise ValueError("packet length mismatch")
    return NeighborPacket(int(epoch), int(rid), int(kind), int(target), meas, clones, cov), off
