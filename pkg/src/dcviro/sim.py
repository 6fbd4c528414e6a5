"""Ground-truth world, trajectories, sensor streams and the link graph.

Every random stream is drawn from a generator seeded by a tuple
``(seed, robot, sensor kind[, epoch])`` so that streams are reproducible
and independent of the order in which they are generated.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .lie import pose_to_quaternion, so3_log
from .propagation import GRAVITY, ImuSample, NoiseParams
from .sensing import CameraExtrinsics, FeatureObservation, RangeObservation, TagExtrinsics, to_camera

# Anchor layout of the reference workspace.
DEFAULT_ANCHORS = ((0, (0.0, 0.0, 0.0)), (1, (0.0, 15.0, 2.0)), (2, (5.0, 15.0, 2.0)))

# stream kinds used in seeding
IMU, CAMERA, UWB, COMM, WORLD, PRIOR = range(6)


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *[int(k) for k in keys]])


# -- world -----------------------------------------------------------------------


@dataclass
class WorldModel:
    anchors: list  # (id, position)
    features: list  # (id, position)
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())

    def __post_init__(self):
        ids = [a for a, _ in self.anchors]
        if len(set(ids)) != len(ids):
            raise ValueError("anchor ids must be unique")
        if len(ids) < 3:
            raise ValueError("at least three anchors are required")
        fids = [f for f, _ in self.features]
        if len(set(fids)) != len(fids):
            raise ValueError("feature ids must be unique")
        self._feat = np.array([p for _, p in self.features]).reshape(-1, 3)
        self._fid = np.array(fids, dtype=int)

    @property
    def feature_positions(self) -> np.ndarray:
        return self._feat

    @property
    def feature_ids(self) -> np.ndarray:
        return self._fid

    def anchor(self, anchor_id) -> np.ndarray:
        for a, p in self.anchors:
            if a == anchor_id:
                return np.asarray(p, dtype=float)
        raise KeyError(anchor_id)


def make_world(feature_cfg: dict, seed: int, anchors=DEFAULT_ANCHORS) -> WorldModel:
    """Uniform features inside the box given by ``x``, ``y``, ``z`` ranges."""
    rng = rng_for(seed, 0, WORLD)
    n = int(feature_cfg.get("count", 200))
    lo = np.array([feature_cfg.get(k, d)[0] for k, d in
                   (("x", (-2, 22)), ("y", (-2, 17)), ("z", (3, 6)))], dtype=float)
    hi = np.array([feature_cfg.get(k, d)[1] for k, d in
                   (("x", (-2, 22)), ("y", (-2, 17)), ("z", (3, 6)))], dtype=float)
    pts = lo + (hi - lo) * rng.random((n, 3))
    return WorldModel([(int(a), np.asarray(p, dtype=float)) for a, p in anchors],
                      [(i, pts[i]) for i in range(n)])


# -- trajectories ------------------------------------------------------------------


@dataclass
class TrajectorySpec:
    """Closed elliptic loop with a sinusoidal height and small roll/pitch.

    In the robot's start frame the path is ``x = a sin(W t)``,
    ``y = b (1 - cos(W t))``; heading follows the velocity; ``z`` oscillates
    with amplitude ``z_amp``. Setting ``a = b = 0`` gives a hover.
    """

    start: np.ndarray
    yaw0: float = 0.0
    a: float = 4.0
    b: float = 3.0
    period: float = 20.0
    z_amp: float = 0.5
    z_period: float = 7.0
    tilt_amp: float = 0.05
    tilt_periods: tuple = (5.0, 6.5)
    duration: float = 40.0
    rate: float = 100.0

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)

    @property
    def stationary(self) -> bool:
        return self.a == 0 and self.b == 0

    @property
    def general_motion(self) -> bool:
        return not self.stationary and (self.z_amp != 0 or self.tilt_amp != 0)


@dataclass
class Trajectory:
    t: np.ndarray
    R: np.ndarray  # (N, 3, 3)
    v: np.ndarray
    p: np.ndarray
    omega: np.ndarray  # body angular rate
    a: np.ndarray  # world acceleration

    def __len__(self):
        return len(self.t)


def _rot_zyx(yaw, pitch, roll):
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    Rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    Ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
    Rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    return Rz @ Ry @ Rx


def trajectory_state(spec: TrajectorySpec, t: float):
    """Analytic (R, v, p, omega_body, a_world) at time ``t``."""
    W = 2 * np.pi / spec.period
    Wz = 2 * np.pi / spec.z_period
    s, c = np.sin(W * t), np.cos(W * t)
    # local-frame path and derivatives
    xl = np.array([spec.a * s, spec.b * (1 - c), spec.z_amp * np.sin(Wz * t)])
    dl = np.array([spec.a * W * c, spec.b * W * s, spec.z_amp * Wz * np.cos(Wz * t)])
    ddl = np.array([-spec.a * W**2 * s, spec.b * W**2 * c,
                    -spec.z_amp * Wz**2 * np.sin(Wz * t)])
    cy, sy = np.cos(spec.yaw0), np.sin(spec.yaw0)
    Rz0 = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    p = spec.start + Rz0 @ xl
    v = Rz0 @ dl
    acc = Rz0 @ ddl

    if spec.stationary:
        yaw, dyaw = spec.yaw0, 0.0
    else:
        yaw = spec.yaw0 + np.arctan2(dl[1], dl[0])
        sp2 = dl[0] ** 2 + dl[1] ** 2
        dyaw = (dl[0] * ddl[1] - dl[1] * ddl[0]) / sp2
    Wr, Wp = (2 * np.pi / T for T in spec.tilt_periods)
    roll = spec.tilt_amp * np.sin(Wr * t)
    droll = spec.tilt_amp * Wr * np.cos(Wr * t)
    pitch = spec.tilt_amp * np.sin(Wp * t + 1.0)
    dpitch = spec.tilt_amp * Wp * np.cos(Wp * t + 1.0)
    R = _rot_zyx(yaw, pitch, roll)
    sr, cr = np.sin(roll), np.cos(roll)
    sp_, cp_ = np.sin(pitch), np.cos(pitch)
    omega = np.array([
        droll - dyaw * sp_,
        dpitch * cr + dyaw * cp_ * sr,
        -dpitch * sr + dyaw * cp_ * cr,
    ])
    return R, v, p, omega, acc


def generate_trajectory(spec: TrajectorySpec) -> Trajectory:
    n = int(round(spec.duration * spec.rate)) + 1
    t = np.arange(n) / spec.rate
    out = [trajectory_state(spec, ti) for ti in t]
    R, v, p, w, a = (np.array(x) for x in zip(*out))
    return Trajectory(t, R, v, p, w, a)


# -- IMU -----------------------------------------------------------------------------


@dataclass
class ImuStream:
    samples: list
    b_omega: np.ndarray  # true biases per sample (N, 3)
    b_a: np.ndarray


def simulate_imu(traj: Trajectory, noise: NoiseParams | None, seed: int, robot: int = 0,
                 sampling: str = "delta", noiseless: bool = False) -> ImuStream:
    """Specific force and angular rate with additive noise and random-walk biases.

    ``sampling="delta"`` reports, for each interval, the mean specific force
    and the constant rate that carry the true (R, v) from one sample to the
    next; ``"point"`` reports the instantaneous analytic values.
    """
    noise = noise or NoiseParams()
    n = len(traj)
    dt = traj.t[1] - traj.t[0]
    rate = 1.0 / dt
    rng = rng_for(seed, robot, IMU)
    # draw in a fixed order so the stream does not depend on the sampling mode
    n_w = rng.standard_normal((n, 3))
    n_a = rng.standard_normal((n, 3))
    w_w = rng.standard_normal((n, 3))
    w_a = rng.standard_normal((n, 3))
    if noiseless:
        n_w[:] = n_a[:] = w_w[:] = w_a[:] = 0.0
    sd_w = noise.sigma_omega * np.sqrt(rate)
    sd_a = noise.sigma_a * np.sqrt(rate)
    rw_w = noise.sigma_womega * np.sqrt(dt)
    rw_a = noise.sigma_wa * np.sqrt(dt)
    b_w = np.vstack([np.zeros(3), np.cumsum(w_w[:-1] * rw_w, axis=0)])
    b_a = np.vstack([np.zeros(3), np.cumsum(w_a[:-1] * rw_a, axis=0)])
    samples = []
    for k in range(n):
        R = traj.R[k]
        if sampling == "delta" and k + 1 < n:
            w = so3_log(R.T @ traj.R[k + 1]) / dt
            f = R.T @ ((traj.v[k + 1] - traj.v[k]) / dt - GRAVITY)
        elif sampling in ("delta", "point"):
            w = traj.omega[k]
            f = R.T @ (traj.a[k] - GRAVITY)
        else:
            raise ValueError(f"unknown sampling {sampling!r}")
        samples.append(ImuSample(w + b_w[k] + sd_w * n_w[k], f + b_a[k] + sd_a * n_a[k],
                                 float(traj.t[k])))
    return ImuStream(samples, b_w, b_a)


# -- camera and UWB --------------------------------------------------------------------


@dataclass(frozen=True)
class CameraModel:
    extrinsics: CameraExtrinsics = field(default_factory=CameraExtrinsics)
    fov_deg: float = 90.0
    min_depth: float = 0.3
    max_depth: float = 20.0
    sigma_pix: float = 1.0
    focal: float = 460.0

    @property
    def sigma(self) -> float:
        return self.sigma_pix / self.focal


def visible_features(R, p, world: WorldModel, cam: CameraModel):
    """Ids and normalized coordinates of features inside the frustum."""
    pc = (cam.extrinsics.R_CI @ (R.T @ (world.feature_positions - p).T)).T + cam.extrinsics.p_CI
    z = pc[:, 2]
    ok = (z >= cam.min_depth) & (z <= cam.max_depth)
    half = np.tan(np.radians(cam.fov_deg) / 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = pc[:, :2] / z[:, None]
    ok &= np.all(np.abs(uv) <= half, axis=1)
    return world.feature_ids[ok], uv[ok]


def simulate_camera(traj: Trajectory, world: WorldModel, cam: CameraModel, seed: int,
                    robot: int = 0, rate: float = 10.0, noiseless: bool = False):
    """Feature observations at ``rate`` Hz, grouped per frame as a list of lists."""
    step = int(round(1.0 / (rate * (traj.t[1] - traj.t[0]))))
    frames = []
    for k in range(0, len(traj), step):
        rng = rng_for(seed, robot, CAMERA, k // step)
        ids, uv = visible_features(traj.R[k], traj.p[k], world, cam)
        noise = rng.standard_normal(uv.shape) * cam.sigma
        if noiseless:
            noise[:] = 0.0
        t = float(traj.t[k])
        frames.append([FeatureObservation(robot, int(i), z, t) for i, z in zip(ids, uv + noise)])
    return frames


@dataclass(frozen=True)
class UwbModel:
    tag: TagExtrinsics = field(default_factory=TagExtrinsics)
    sigma: float = 0.1
    max_range: float = 30.0


def simulate_uwb(traj: Trajectory, world: WorldModel, uwb: UwbModel, seed: int,
                 robot: int = 0, rate: float = 10.0, noiseless: bool = False):
    step = int(round(1.0 / (rate * (traj.t[1] - traj.t[0]))))
    frames = []
    for k in range(0, len(traj), step):
        rng = rng_for(seed, robot, UWB, k // step)
        T = traj.p[k] + traj.R[k] @ uwb.tag.p_T
        obs = []
        for aid, pos in world.anchors:
            d = float(np.linalg.norm(T - pos))
            e = rng.standard_normal()
            if d > uwb.max_range:
                continue
            if not noiseless:
                d += uwb.sigma * e
            obs.append(RangeObservation(robot, aid, d + uwb.tag.b_u, float(traj.t[k])))
        frames.append(obs)
    return frames


# -- communication -----------------------------------------------------------------------


def sample_comm_graph(n_robots: int, p_link: float, epoch: int, seed: int) -> np.ndarray:
    """Symmetric boolean adjacency with each pair linked independently."""
    if not 0.0 <= p_link <= 1.0:
        raise ValueError("p_link must lie in [0, 1]")
    rng = rng_for(seed, 0, COMM, epoch)
    A = np.zeros((n_robots, n_robots), dtype=bool)
    iu = np.triu_indices(n_robots, 1)
    A[iu] = rng.random(len(iu[0])) < p_link
    return A | A.T


# -- scenario files ---------------------------------------------------------------------

DEFAULT_ROBOTS = (
    {"start": [14.0, 4.0, 0.0], "yaw": 0.0},
    {"start": [14.0, 11.0, 0.0], "yaw": float(np.pi)},
    {"start": [6.0, 4.0, 0.0], "yaw": 0.0},
    {"start": [6.0, 11.0, 0.0], "yaw": float(np.pi)},
)


@dataclass
class Scenario:
    robots: list  # TrajectorySpec per robot
    anchors: list
    features: dict
    camera: CameraModel
    uwb: UwbModel
    imu_noise: NoiseParams
    p_link: float = 0.7
    seed: int = 0
    duration: float = 40.0
    imu_rate: float = 100.0
    camera_rate: float = 10.0
    uwb_rate: float = 10.0
    window: int = 10
    init_window: int = 50
    anchor_prior_sigma: float = 0.1
    anchor_prior_in_init: bool = True
    P0_scale: float = 1e-3
    bias_sigma: tuple = (1e-4, 1e-3)

    @property
    def n_robots(self) -> int:
        return len(self.robots)


def _spec_from(d: dict, duration: float, rate: float) -> TrajectorySpec:
    return TrajectorySpec(
        start=d["start"], yaw0=float(d.get("yaw", 0.0)), a=float(d.get("a", 4.0)),
        b=float(d.get("b", 3.0)), period=float(d.get("period", 20.0)),
        z_amp=float(d.get("z_amp", 0.5)), z_period=float(d.get("z_period", 7.0)),
        tilt_amp=float(d.get("tilt_amp", 0.05)),
        tilt_periods=tuple(d.get("tilt_periods", (5.0, 6.5))),
        duration=duration, rate=rate,
    )


def scenario_from_dict(cfg: dict) -> Scenario:
    duration = float(cfg.get("duration", 40.0))
    imu_rate = float(cfg.get("imu_rate", 100.0))
    robots = [_spec_from(r, duration, imu_rate) for r in cfg.get("robots", DEFAULT_ROBOTS)]
    anchors = [(int(a["id"]), tuple(a["position"])) for a in cfg["anchors"]] \
        if "anchors" in cfg else list(DEFAULT_ANCHORS)
    cam_cfg = cfg.get("camera", {})
    camera = CameraModel(
        fov_deg=float(cam_cfg.get("fov_deg", 90.0)),
        min_depth=float(cam_cfg.get("min_depth", 0.3)),
        max_depth=float(cam_cfg.get("max_depth", 20.0)),
        sigma_pix=float(cam_cfg.get("sigma_pix", 1.0)),
        focal=float(cam_cfg.get("focal", 460.0)),
    )
    uwb_cfg = cfg.get("uwb", {})
    tag = TagExtrinsics(np.asarray(uwb_cfg.get("p_T", [0, 0, 0]), dtype=float),
                        float(uwb_cfg.get("bias", 0.0)))
    uwb = UwbModel(tag, float(uwb_cfg.get("sigma", 0.1)), float(uwb_cfg.get("max_range", 30.0)))
    imu_cfg = cfg.get("imu", {})
    base = NoiseParams()
    noise = NoiseParams(
        np.asarray(imu_cfg.get("sigma_a", base.sigma_a), dtype=float),
        np.asarray(imu_cfg.get("sigma_omega", base.sigma_omega), dtype=float),
        np.asarray(imu_cfg.get("sigma_wa", base.sigma_wa), dtype=float),
        np.asarray(imu_cfg.get("sigma_womega", base.sigma_womega), dtype=float),
    )
    return Scenario(
        robots=robots, anchors=anchors, features=dict(cfg.get("features", {})),
        camera=camera, uwb=uwb, imu_noise=noise, p_link=float(cfg.get("p_link", 0.7)),
        seed=int(cfg.get("seed", 0)), duration=duration, imu_rate=imu_rate,
        camera_rate=float(cfg.get("camera_rate", 10.0)),
        uwb_rate=float(cfg.get("uwb_rate", 10.0)),
        window=int(cfg.get("window", 10)), init_window=int(cfg.get("init_window", 50)),
        anchor_prior_sigma=float(cfg.get("anchor_prior_sigma", 0.1)),
        anchor_prior_in_init=bool(cfg.get("anchor_prior_in_init", True)),
        P0_scale=float(cfg.get("P0_scale", 1e-3)),
        bias_sigma=tuple(cfg.get("bias_sigma", (1e-4, 1e-3))),
    )


def load_scenario(path) -> Scenario:
    with open(path) as fh:
        cfg = yaml.safe_load(fh) or {}
    return scenario_from_dict(cfg)


def default_scenario(**overrides) -> Scenario:
    return scenario_from_dict(dict(overrides))


# -- generated streams ---------------------------------------------------------------------


@dataclass
class RobotStreams:
    traj: Trajectory
    imu: ImuStream
    camera: list  # per epoch list of FeatureObservation
    uwb: list  # per epoch list of RangeObservation


@dataclass
class SimulatedRun:
    scenario: Scenario
    world: WorldModel
    robots: list  # RobotStreams
    anchor_prior: dict  # anchor id -> perturbed position
    seed: int

    @property
    def epochs(self) -> int:
        return len(self.robots[0].camera)

    def comm(self, epoch: int) -> np.ndarray:
        return sample_comm_graph(self.scenario.n_robots, self.scenario.p_link, epoch, self.seed)


def simulate(scenario: Scenario, seed: int | None = None, noiseless: bool = False,
             sampling: str = "delta") -> SimulatedRun:
    seed = scenario.seed if seed is None else seed
    world = make_world(scenario.features, seed, scenario.anchors)
    robots = []
    for i, spec in enumerate(scenario.robots):
        traj = generate_trajectory(spec)
        imu = simulate_imu(traj, scenario.imu_noise, seed, i, sampling, noiseless)
        cam = simulate_camera(traj, world, scenario.camera, seed, i, scenario.camera_rate,
                              noiseless)
        uwb = simulate_uwb(traj, world, scenario.uwb, seed, i, scenario.uwb_rate, noiseless)
        robots.append(RobotStreams(traj, imu, cam, uwb))
    rng = rng_for(seed, 0, PRIOR)
    sigma = 0.0 if noiseless else scenario.anchor_prior_sigma
    prior = {aid: np.asarray(p, dtype=float) + sigma * rng.standard_normal(3)
             for aid, p in world.anchors}
    return SimulatedRun(scenario, world, robots, prior, seed)


def dump_ground_truth(run: SimulatedRun, path) -> None:
    """CSV of t, robot, quaternion (w, x, y, z), velocity, position."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "robot", "qw", "qx", "qy", "qz", "vx", "vy", "vz", "px", "py", "pz"])
        for i, rs in enumerate(run.robots):
            tr = rs.traj
            for k in range(len(tr)):
                q = pose_to_quaternion(tr.R[k])
                w.writerow([f"{tr.t[k]:.6f}", i, *(f"{x:.12g}" for x in q),
                            *(f"{x:.12g}" for x in tr.v[k]), *(f"{x:.12g}" for x in tr.p[k])])


def shared_anchor_epochs(run: SimulatedRun) -> int:
    """Number of epochs in which at least two robots range the same anchor."""
    count = 0
    for k in range(run.epochs):
        seen = {}
        for rs in run.robots:
            for o in rs.uwb[k]:
                seen[o.anchor_id] = seen.get(o.anchor_id, 0) + 1
        count += any(v >= 2 for v in seen.values())
    return count
