"""Multi-robot filter loop, Monte-Carlo runner and accuracy/consistency metrics.

Each epoch runs in two phases separated by a barrier: every robot first
propagates, clones, ingests its sensor frame and publishes packets; then
every robot reads the packets of its linked neighbours and updates.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import chi2

from . import fusion
from .anchor_init import (
    InitDeferred,
    RangeSample,
    RangeWindow,
    augment_anchor,
    init_covariance,
    solve_anchor_position,
)
from .fusion import ANCHOR, FEATURE, NeighborPacket
from .lie import ExtendedPose, sek3_log, so3_log
from .propagation import NoiseParams, propagate
from .sensing import DegenerateGeometry, feature_rows, predict_range, project, range_jacobian, to_camera, triangulate
from .sim import Scenario, SimulatedRun, load_scenario, simulate
from .state import clone_pose, initial_state, marginalize_oldest

log = logging.getLogger(__name__)

MODES = ("collaborative", "independent")
CSV_COLUMNS = ["run", "epoch", "robot", "pos_err_m", "ori_err_deg", "nees", "mode"]
MIN_TRACK = 3
GATE_PROB = 0.95


def normalize_mode(mode: str) -> str:
    m = {"collab": "collaborative", "indep": "independent"}.get(mode, mode)
    if m not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    return m


@dataclass
class RunConfig:
    scenario: Scenario | str | Path
    mode: str = "collaborative"
    mc_runs: int = 1
    ci_weights: str = "trace-min"
    out_dir: Path | None = None
    seed: int = 0
    window: int | None = None
    init_window: int | None = None
    workers: int = 1

    def __post_init__(self):
        self.mode = normalize_mode(self.mode)
        if self.mc_runs < 1:
            raise ValueError("mc_runs must be at least 1")
        if self.ci_weights not in ("equal", "trace-min"):
            raise ValueError(f"unknown CI weight mode {self.ci_weights!r}")

    def load(self) -> Scenario:
        sc = self.scenario
        if not isinstance(sc, Scenario):
            sc = load_scenario(sc)
        if self.window is not None:
            sc.window = int(self.window)
        if self.init_window is not None:
            sc.init_window = int(self.init_window)
        return sc


# -- metrics ---------------------------------------------------------------------------


def compute_metrics(R_true, v_true, p_true, state, t_true: float | None = None):
    """Position error (m), orientation error (deg) and NEES of (theta, p).

    The error is the right-invariant error of the (R, v, p) block.
    """
    if t_true is not None and abs(state.t - t_true) > 1e-6:
        raise ValueError(f"timestamp misalignment: {state.t} vs {t_true}")
    pos = float(np.linalg.norm(state.p - p_true))
    ori = float(np.degrees(np.linalg.norm(so3_log(state.R @ np.asarray(R_true).T))))
    X_hat = ExtendedPose(state.R, np.column_stack([state.v, state.p]))
    X = ExtendedPose(R_true, np.column_stack([v_true, p_true]))
    xi = sek3_log(X_hat.compose(X.inverse()))
    e = np.r_[xi[0:3], xi[6:9]]
    idx = np.r_[0:3, 6:9]
    Pe = state.P[np.ix_(idx, idx)]
    nees = float(e @ np.linalg.solve(Pe, e))
    return pos, ori, nees


def nees_band(n_samples: int, dof: int = 6, prob: float = 0.99):
    """Two-sided band for the mean of ``n_samples`` chi-square(dof) values."""
    lo = chi2.ppf((1 - prob) / 2, dof * n_samples) / n_samples
    hi = chi2.ppf(1 - (1 - prob) / 2, dof * n_samples) / n_samples
    return lo, hi


# -- per-robot filter --------------------------------------------------------------------


@dataclass
class RobotFilter:
    state: object
    noise: NoiseParams
    sigma_c: float
    sigma_u: float
    cam: object
    tag: object
    init_window: int
    anchor_prior: dict
    tracks: dict = field(default_factory=dict)
    windows: dict = field(default_factory=dict)
    phi_since: dict = field(default_factory=dict)
    used: dict = field(default_factory=dict)  # (neighbour, feature) -> last clone time used
    packets_read: int = 0
    pending_ranges: list = field(default_factory=list)
    ready: list = field(default_factory=list)
    benefit_gate: bool = True
    prior_sigma: float | None = None
    ci_applied: int = 0
    ci_declined: int = 0
    _pf_cache: dict = field(default_factory=dict)

    @property
    def robot_id(self) -> int:
        return self.state.robot_id

    # phase 1 ------------------------------------------------------------------------
    def propagate_to(self, samples, t_end: float) -> None:
        st, Phi = propagate(self.state, samples, self.noise, t_end)
        nI = st.imu_dim
        core = np.r_[0:9, nI : nI + 6]
        Phi_core = Phi[np.ix_(core, core)]
        for aid in self.phi_since:
            self.phi_since[aid] = Phi_core @ self.phi_since[aid]
        self.state = st

    def clone(self) -> None:
        self.state = clone_pose(self.state, self.state.t)

    def ingest(self, features, ranges) -> None:
        t = self.state.t
        self._pf_cache = {}  # per-epoch triangulation results
        seen = set()
        for o in features:
            self.tracks.setdefault(o.feature_id, []).append((t, np.asarray(o.z)))
            seen.add(o.feature_id)
        ready = []
        for fid in list(self.tracks):
            tr = self.tracks[fid]
            lost = fid not in seen
            if lost and len(tr) < MIN_TRACK:
                del self.tracks[fid]
            elif lost or len(tr) >= self.state.window:
                ready.append(fid)
        self.ready = ready

        self.pending_ranges = []
        for o in ranges:
            if o.anchor_id in self.state.anchor_ids:
                self.pending_ranges.append(o)
            else:
                self._buffer_range(o)

    def _buffer_range(self, o) -> None:
        aid = o.anchor_id
        win = self.windows.setdefault(aid, RangeWindow(aid))
        phi = self.phi_since.get(aid)
        win.samples.append(RangeSample(self.state.R.copy(), self.state.p.copy(), o.d,
                                       self.state.t, None if phi is None else phi.copy()))
        self.phi_since[aid] = np.eye(15)
        if win.n > self.init_window:
            del win.samples[0]
        if win.n < self.init_window:
            return
        # refresh window poses that still have a clone in the state
        by_t = {c.t: c for c in self.state.clones}
        win.samples = [RangeSample(by_t[s.t].R, by_t[s.t].p, s.z, s.t, s.phi) if s.t in by_t else s
                       for s in win.samples]
        T = win.tag_positions(self.tag)
        prior = None
        if self.prior_sigma is not None and aid in self.anchor_prior:
            prior = (self.anchor_prior[aid], self.prior_sigma)
        try:
            u, ok = solve_anchor_position(T, win.ranges(), self.tag.b_u,
                                          initial_guess=self.anchor_prior.get(aid),
                                          prior=prior, sigma_u=self.sigma_u)
        except InitDeferred as exc:
            log.debug("robot %s anchor %s deferred: %s", self.robot_id, aid, exc)
            return
        if not ok:
            log.info("robot %s anchor %s: fit did not converge, window reset", self.robot_id, aid)
            win.samples.clear()
            return
        try:
            res = init_covariance(self.state, win, u, self.tag, self.sigma_u, prior)
        except InitDeferred as exc:
            log.debug("robot %s anchor %s deferred: %s", self.robot_id, aid, exc)
            return
        self.state = augment_anchor(self.state, res, aid)
        del self.windows[aid]
        del self.phi_since[aid]

    def publish(self, epoch: int, ranges) -> list:
        st = self.state
        n = len(st.clones)
        s = st.clone_start
        cov = st.P[s : s + 6 * n, s : s + 6 * n].copy()
        clones = [(c.R.copy(), c.p.copy(), c.t) for c in st.clones]
        times = {c.t: j for j, c in enumerate(st.clones)}
        out = []
        for o in ranges:
            out.append(NeighborPacket(epoch, st.robot_id, ANCHOR, o.anchor_id,
                                      np.array([o.d]), clones, cov))
        for fid, tr in self.tracks.items():
            meas = []
            for t, z in tr:
                if t in times:
                    meas.extend([times[t], z[0], z[1]])
            if meas:
                out.append(NeighborPacket(epoch, st.robot_id, FEATURE, fid,
                                          np.array(meas), clones, cov))
        return out

    # phase 2 ------------------------------------------------------------------------
    def update(self, inbox, ci_mode: str) -> None:
        self.packets_read += len(inbox)
        anchor_pk, feat_pk = {}, {}
        for pk in inbox:
            (anchor_pk if pk.kind == ANCHOR else feat_pk).setdefault(pk.target_id, []).append(pk)

        common_ranges, solo_ranges = [], []
        for o in self.pending_ranges:
            (common_ranges if o.anchor_id in anchor_pk else solo_ranges).append(o)
        common_feats, solo_feats = [], []
        for fid in self.ready:
            pks = self._fresh_feature_packets(fid, feat_pk.get(fid, []))
            (common_feats if pks else solo_feats).append((fid, pks))

        self._individual_update(solo_ranges, [f for f, _ in solo_feats])
        self._ci_update(common_ranges, anchor_pk, common_feats, ci_mode)
        for fid in self.ready:
            self.tracks.pop(fid, None)
        self.ready = []
        self.pending_ranges = []

    def _fresh_feature_packets(self, fid, pks):
        out = []
        for pk in pks:
            if pk.robot_id == self.robot_id:
                continue
            last = self.used.get((pk.robot_id, fid), -np.inf)
            m = pk.measurement.reshape(-1, 3)
            keep = [row for row in m if pk.clones[int(row[0])][2] > last]
            if keep:
                out.append(NeighborPacket(pk.epoch, pk.robot_id, pk.kind, pk.target_id,
                                          np.concatenate(keep), pk.clones, pk.covariance))
        return out

    def _ego_track(self, fid):
        times = {c.t: j for j, c in enumerate(self.state.clones)}
        return [(times[t], z) for t, z in self.tracks.get(fid, []) if t in times]

    def _feature_rows(self, fid):
        st = self.state
        track = self._ego_track(fid)
        if len(track) < MIN_TRACK:
            return None
        if fid in self._pf_cache:
            p_f = self._pf_cache[fid]
        else:
            poses = [(st.clones[j].R, st.clones[j].p) for j, _ in track]
            p_f, ok = triangulate([z for _, z in track], poses, self.cam)
            self._pf_cache[fid] = p_f = p_f if ok else None
        if p_f is None:
            return None
        n = 2 * len(track)
        Hx = np.zeros((n, st.dim))
        Hf = np.zeros((n, 3))
        r = np.zeros(n)
        try:
            for i, (j, z) in enumerate(track):
                H, F = feature_rows(st, j, p_f, self.cam, convention="vector")
                c = st.clones[j]
                r[2 * i : 2 * i + 2] = z - project(to_camera(c.R, c.p, p_f, self.cam))
                Hx[2 * i : 2 * i + 2] = H
                Hf[2 * i : 2 * i + 2] = F
        except DegenerateGeometry:
            return None
        N = fusion.left_nullspace(Hf)
        return N.T @ r, N.T @ Hx

    def _individual_rows(self, ranges, feats):
        """Gated, whitened rows of the ego's own observations; (r, H) or None."""
        st = self.state
        rs, Hs, qs = [], [], []
        for o in ranges:
            a = st.anchor_index(o.anchor_id)
            try:
                H = range_jacobian(st, a, self.tag)
            except DegenerateGeometry:
                continue
            r = np.array([o.d - predict_range(st, a, self.tag)])
            if fusion.chi2_gate(r, H, st.P, self.sigma_u**2, GATE_PROB):
                rs.append(r)
                Hs.append(H[None, :])
                qs.append(np.full(1, self.sigma_u**2))
        for fid in feats:
            out = self._feature_rows(fid)
            if out is None:
                continue
            r, H = out
            if fusion.chi2_gate(r, H, st.P, self.sigma_c**2 * np.eye(len(r)), GATE_PROB):
                rs.append(r)
                Hs.append(H)
                qs.append(np.full(len(r), self.sigma_c**2))
        if not rs:
            return None
        r = np.concatenate(rs)
        H = np.vstack(Hs)
        w = 1.0 / np.sqrt(np.concatenate(qs))
        r, H = r * w, H * w[:, None]
        # compress tall systems with a thin QR
        if len(r) > st.dim:
            Q, Rm = np.linalg.qr(H)
            r, H = Q.T @ r, Rm
        return r, H

    def _individual_update(self, ranges, feats) -> None:
        rows = self._individual_rows(ranges, feats)
        if rows is not None:
            r, H = rows
            self.state = fusion.update_individual(self.state, r, H, np.eye(len(r)))

    def _common_feature_system(self, fid, pks):
        track = self._ego_track(fid)
        try:
            sysm, _ = fusion.build_common_feature_system(self.state, track, pks, self.cam,
                                                         self.sigma_c)
        except (DegenerateGeometry, ValueError, IndexError):
            return None
        return sysm if sysm.rows > 0 else None

    def _ci_update(self, ranges, anchor_pk, feats, ci_mode: str) -> None:
        systems = []
        st = self.state
        solo_ranges, solo_feats = [], []
        used_ranges, used_feats = [], []
        for o in ranges:
            sysm = fusion.build_common_anchor_system(st, o.anchor_id, o.d, anchor_pk[o.anchor_id],
                                                     self.tag, self.sigma_u)
            if self._gate(sysm):
                systems.append(sysm)
                used_ranges.append(o)
            else:
                solo_ranges.append(o)
        marks = []
        for fid, pks in feats:
            sysm = self._common_feature_system(fid, pks)
            if sysm is None or not self._gate(sysm):
                solo_feats.append(fid)
                continue
            systems.append(sysm)
            used_feats.append(fid)
            for pk in pks:
                last = max(pk.clones[int(i)][2] for i in pk.measurement[0::3])
                marks.append(((pk.robot_id, fid), last))
        self._fuse(systems, used_ranges, used_feats, marks, ci_mode)
        # observations that cannot be fused jointly are still used locally
        self._individual_update(solo_ranges, solo_feats)

    def _fuse(self, systems, ranges, fids, marks, ci_mode: str) -> None:
        if not systems:
            return
        st = self.state
        merged = fusion.merge_systems(systems)
        weights = fusion.choose_weights(merged, st.P, ci_mode)
        if self.benefit_gate:
            # fuse only when it beats using the ego's own rows alone
            rows = self._individual_rows(ranges, fids)
            trace_ci = fusion.posterior_trace(merged, st.P, weights.omega)
            trace_own = np.trace(st.P)
            if rows is not None:
                _, H = rows
                S = H @ st.P @ H.T + np.eye(len(H))
                PHt = st.P @ H.T
                trace_own -= np.trace(PHt @ np.linalg.solve(S, PHt.T))
            if trace_ci >= trace_own:
                self.ci_declined += 1
                if rows is not None:
                    self.state = fusion.update_individual(st, rows[0], rows[1], np.eye(len(rows[0])))
                return
        self.ci_applied += 1
        for key, last in marks:
            self.used[key] = max(last, self.used.get(key, -np.inf))
        self.state = fusion.ci_update(st, merged, weights)

    def _gate(self, sysm) -> bool:
        S = sysm.noise + sysm.blocks[0] @ self.state.P @ sysm.blocks[0].T
        for H, P in zip(sysm.blocks[1:], sysm.priors):
            S = S + H @ P @ H.T
        try:
            m = sysm.residual @ np.linalg.solve(S, sysm.residual)
        except np.linalg.LinAlgError:
            return False
        return bool(m <= fusion.chi2_threshold(sysm.rows, GATE_PROB))

    def finish_epoch(self) -> None:
        st = self.state
        if len(st.clones) >= st.window:
            st = marginalize_oldest(st)
            oldest = st.clones[-1].t if st.clones else st.t
            for fid in list(self.tracks):
                tr = [(t, z) for t, z in self.tracks[fid] if t >= oldest]
                if tr:
                    self.tracks[fid] = tr
                else:
                    del self.tracks[fid]
            self.state = st


# -- single run ---------------------------------------------------------------------------


@dataclass
class RunResult:
    run: int
    mode: str
    rows: list  # (epoch, robot, pos_err_m, ori_err_deg, nees)
    anchor_errors: list  # (robot, anchor_id, error_m)
    packets_read: list  # per robot
    failures: int = 0


def make_filters(sim_run: SimulatedRun, sigma_c=None, sigma_u=None) -> list:
    sc = sim_run.scenario
    filters = []
    for i, rs in enumerate(sim_run.robots):
        tr = rs.traj
        st = initial_state(tr.R[0], tr.v[0], tr.p[0], sc.P0_scale * np.eye(9),
                           bias_sigma=sc.bias_sigma, robot_id=i, t=float(tr.t[0]),
                           window=sc.window)
        filters.append(RobotFilter(
            state=st, noise=sc.imu_noise,
            sigma_c=sc.camera.sigma if sigma_c is None else sigma_c,
            sigma_u=sc.uwb.sigma if sigma_u is None else sigma_u,
            cam=sc.camera.extrinsics, tag=sc.uwb.tag, init_window=sc.init_window,
            anchor_prior=dict(sim_run.anchor_prior),
            prior_sigma=sc.anchor_prior_sigma if sc.anchor_prior_in_init else None,
        ))
    return filters


def run_epoch(filters, sim_run: SimulatedRun, epoch: int, mode: str, ci_mode: str = "trace-min"):
    """Advance every robot by one camera epoch (two phases around a barrier)."""
    mode = normalize_mode(mode)
    per_epoch = int(round(sim_run.scenario.imu_rate / sim_run.scenario.camera_rate))
    outboxes = {}
    for i, f in enumerate(filters):
        rs = sim_run.robots[i]
        try:
            if epoch > 0:
                k0 = (epoch - 1) * per_epoch
                f.propagate_to(rs.imu.samples[k0 : k0 + per_epoch], float(rs.traj.t[k0 + per_epoch]))
            f.clone()
            f.ingest(rs.camera[epoch], rs.uwb[epoch])
            if mode == "collaborative":
                outboxes[i] = f.publish(epoch, rs.uwb[epoch])
        except Exception:  # keep the other robots going
            log.exception("robot %d failed in epoch %d (phase 1)", i, epoch)
            outboxes[i] = []
    # barrier: all packets of this epoch exist before anyone reads
    links = sim_run.comm(epoch) if mode == "collaborative" else None
    for i, f in enumerate(filters):
        inbox = []
        if mode == "collaborative":
            for j in range(len(filters)):
                if j != i and links[i, j]:
                    inbox.extend(outboxes.get(j, []))
        try:
            f.update(inbox, ci_mode)
            f.finish_epoch()
        except Exception:
            log.exception("robot %d failed in epoch %d (phase 2)", i, epoch)
    return filters


def run_single(scenario: Scenario, mode: str, seed: int, run: int = 0,
               ci_mode: str = "trace-min", noiseless: bool = False) -> RunResult:
    mode = normalize_mode(mode)
    sim_run = simulate(scenario, seed=seed, noiseless=noiseless)
    filters = make_filters(sim_run)
    per_epoch = int(round(scenario.imu_rate / scenario.camera_rate))
    rows = []
    for epoch in range(sim_run.epochs):
        run_epoch(filters, sim_run, epoch, mode, ci_mode)
        k = epoch * per_epoch
        for i, f in enumerate(filters):
            tr = sim_run.robots[i].traj
            pos, ori, nees = compute_metrics(tr.R[k], tr.v[k], tr.p[k], f.state, float(tr.t[k]))
            rows.append((epoch, i, pos, ori, nees))
    anchors = []
    for i, f in enumerate(filters):
        for a, aid in enumerate(f.state.anchor_ids):
            err = float(np.linalg.norm(f.state.anchor_position(a) - sim_run.world.anchor(aid)))
            anchors.append((i, aid, err))
    return RunResult(run, mode, rows, anchors, [f.packets_read for f in filters])


def run_seed(base_seed: int, run: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(run)]).generate_state(1)[0])


def _run_job(args):
    scenario, mode, seed, run, ci_mode = args
    try:
        return run_single(scenario, mode, seed, run, ci_mode)
    except Exception:
        log.exception("run %d failed", run)
        return RunResult(run, normalize_mode(mode), [], [], [], failures=1)


# -- Monte Carlo -------------------------------------------------------------------------


@dataclass
class Summary:
    mode: str
    runs: int
    prmse_curve: np.ndarray  # (epochs, robots)
    ormse_curve: np.ndarray
    nees_curve: np.ndarray  # mean over runs
    anchor_errors: dict  # anchor id -> mean final error over runs and robots
    failed_runs: int = 0

    @property
    def team_prmse(self) -> float:
        return float(self.prmse_curve.mean())

    @property
    def team_ormse(self) -> float:
        return float(self.ormse_curve.mean())

    @property
    def robot_prmse(self) -> np.ndarray:
        return self.prmse_curve.mean(axis=0)

    @property
    def robot_ormse(self) -> np.ndarray:
        return self.ormse_curve.mean(axis=0)

    def nees_in_band_fraction(self, prob: float = 0.99, allow_below: bool = True) -> float:
        lo, hi = nees_band(self.runs, 6, prob)
        ok = self.nees_curve <= hi
        if not allow_below:
            ok &= self.nees_curve >= lo
        return float(ok.mean())


def aggregate(results, mode: str) -> Summary:
    good = [r for r in results if not r.failures and r.rows]
    if not good:
        raise RuntimeError("every Monte-Carlo run failed")
    n_ep = max(e for e, *_ in good[0].rows) + 1
    n_rb = max(i for _, i, *_ in good[0].rows) + 1
    pos = np.zeros((len(good), n_ep, n_rb))
    ori = np.zeros_like(pos)
    nees = np.zeros_like(pos)
    for k, r in enumerate(good):
        for e, i, p, o, n in r.rows:
            pos[k, e, i], ori[k, e, i], nees[k, e, i] = p, o, n
    anchors = {}
    for r in good:
        for _, aid, err in r.anchor_errors:
            anchors.setdefault(aid, []).append(err)
    return Summary(
        mode, len(good),
        np.sqrt(np.mean(pos**2, axis=0)), np.sqrt(np.mean(ori**2, axis=0)),
        nees.mean(axis=0), {a: float(np.mean(v)) for a, v in sorted(anchors.items())},
        failed_runs=len(results) - len(good),
    )


def run_monte_carlo(config: RunConfig):
    """Run ``mc_runs`` seeded runs; returns (summary, results) and writes CSVs."""
    scenario = config.load()
    jobs = [(scenario, config.mode, run_seed(config.seed, r), r, config.ci_weights)
            for r in range(config.mc_runs)]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as ex:
            results = list(ex.map(_run_job, jobs))
    else:
        results = [_run_job(j) for j in jobs]
    failed = [r.run for r in results if r.failures]
    if failed:
        log.warning("runs %s failed and are excluded from the aggregate", failed)
    summary = aggregate(results, config.mode)
    if config.out_dir is not None:
        write_outputs(Path(config.out_dir), results, summary)
    return summary, results


# -- CSV artifacts --------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in results:
        for e, i, p, o, n in r.rows:
            w.writerow([r.run, e, i, _fmt(p), _fmt(o), _fmt(n), r.mode])
    return buf.getvalue()


def curves_csv(summary: Summary, dt: float | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n_ep, n_rb = summary.prmse_curve.shape
    w.writerow(["epoch", "robot", "prmse_m", "ormse_deg", "mean_nees", "mode"])
    for e in range(n_ep):
        for i in range(n_rb):
            w.writerow([e, i, _fmt(summary.prmse_curve[e, i]), _fmt(summary.ormse_curve[e, i]),
                        _fmt(summary.nees_curve[e, i]), summary.mode])
    return buf.getvalue()


def summary_csv(summaries) -> str:
    """Per-robot and team-time averages; the team row is the headline figure."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mode", "scope", "prmse_m", "ormse_deg", "nees_in_band", "runs"])
    for s in summaries:
        for i, (p, o) in enumerate(zip(s.robot_prmse, s.robot_ormse)):
            w.writerow([s.mode, f"robot{i}", _fmt(p), _fmt(o), "", s.runs])
        w.writerow([s.mode, "team_time_average", _fmt(s.team_prmse), _fmt(s.team_ormse),
                    _fmt(s.nees_in_band_fraction()), s.runs])
    return buf.getvalue()


def anchors_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "robot", "anchor", "final_err_m", "mode"])
    for r in results:
        for i, aid, err in r.anchor_errors:
            w.writerow([r.run, i, aid, _fmt(err), r.mode])
    return buf.getvalue()


def write_outputs(out: Path, results, summary: Summary) -> None:
    out.mkdir(parents=True, exist_ok=True)
    tag = summary.mode
    (out / f"metrics_{tag}.csv").write_text(metrics_csv(results))
    (out / f"curves_{tag}.csv").write_text(curves_csv(summary))
    (out / f"anchors_{tag}.csv").write_text(anchors_csv(results))
    (out / f"summary_{tag}.csv").write_text(summary_csv([summary]))


def compare_table(collab: Summary, indep: Summary) -> str:
    """Side-by-side team-time averages (the headline accuracy table)."""
    lines = ["mode,prmse_m,ormse_deg",
             f"with_neighbors,{collab.team_prmse:.4f},{collab.team_ormse:.4f}",
             f"without_neighbors,{indep.team_prmse:.4f},{indep.team_ormse:.4f}"]
    return "\n".join(lines) + "\n"
