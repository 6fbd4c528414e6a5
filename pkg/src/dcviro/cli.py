"""Command-line entry point: ``dcviro {simulate,run,mc,observability,compare}``.

Every subcommand writes plain CSV (or a text report) so results can be
plotted with any external tool.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from . import harness, observability, sim

log = logging.getLogger("dcviro")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4
EXIT_IO = 5


class CliError(Exception):
    def __init__(self, category: str, code: int, message: str):
        super().__init__(message)
        self.category = category
        self.code = code


def _scenario(args) -> sim.Scenario:
    try:
        sc = sim.load_scenario(args.scenario) if args.scenario else sim.default_scenario()
    except FileNotFoundError as exc:
        raise CliError("config", EXIT_CONFIG, f"scenario not found: {exc.filename}") from exc
    except (KeyError, ValueError, TypeError, yaml.YAMLError) as exc:
        raise CliError("config", EXIT_CONFIG, f"invalid scenario: {exc}") from exc
    if getattr(args, "window", None) is not None:
        sc.window = args.window
    if getattr(args, "init_window", None) is not None:
        sc.init_window = args.init_window
    return sc


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("io", EXIT_IO, f"cannot create output directory {out}: {exc}") from exc
    return out


def _write_streams(run: sim.SimulatedRun, out: Path) -> None:
    with (out / "imu.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["robot", "t", "wx", "wy", "wz", "ax", "ay", "az"])
        for i, rs in enumerate(run.robots):
            for s in rs.imu.samples:
                w.writerow([i, repr(s.t), *map(repr, s.omega_m), *map(repr, s.a_m)])
    with (out / "camera.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["robot", "epoch", "t", "feature", "x", "y"])
        for i, rs in enumerate(run.robots):
            for k, obs in enumerate(rs.camera):
                for o in obs:
                    w.writerow([i, k, repr(o.t), o.feature_id, repr(o.z[0]), repr(o.z[1])])
    with (out / "uwb.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["robot", "epoch", "t", "anchor", "range_m"])
        for i, rs in enumerate(run.robots):
            for k, obs in enumerate(rs.uwb):
                for o in obs:
                    w.writerow([i, k, repr(o.t), o.anchor_id, repr(o.d)])


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    out = _out_dir(args)
    run = sim.simulate(sc, seed=args.seed)
    sim.dump_ground_truth(run, out / "ground_truth.csv")
    _write_streams(run, out)
    print(f"wrote ground truth and sensor streams for {sc.n_robots} robots to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    sc = _scenario(args)
    res = harness.run_single(sc, args.mode, seed=args.seed, ci_mode=args.ci_weights)
    summary = harness.aggregate([res], res.mode)
    if args.out:
        harness.write_outputs(_out_dir(args), [res], summary)
    else:
        sys.stdout.write(harness.metrics_csv([res]))
    print(f"{res.mode}: prmse={summary.team_prmse:.4f} m ormse={summary.team_ormse:.4f} deg",
          file=sys.stderr)
    return EXIT_OK


def _mc(args, mode: str):
    cfg = harness.RunConfig(_scenario(args), mode=mode, mc_runs=args.runs,
                            ci_weights=args.ci_weights, out_dir=Path(args.out) if args.out else None,
                            seed=args.seed, workers=args.workers)
    return harness.run_monte_carlo(cfg)


def cmd_mc(args) -> int:
    summary, results = _mc(args, args.mode)
    sys.stdout.write(harness.summary_csv([summary]))
    return EXIT_OK if summary.failed_runs == 0 else EXIT_NUMERIC


def cmd_compare(args) -> int:
    collab, _ = _mc(args, "collaborative")
    indep, _ = _mc(args, "independent")
    table = harness.compare_table(collab, indep)
    if args.out:
        out = _out_dir(args)
        (out / "compare.csv").write_text(table)
        (out / "summary.csv").write_text(harness.summary_csv([collab, indep]))
    sys.stdout.write(table)
    return EXIT_OK


def cmd_observability(args) -> int:
    sc = _scenario(args)
    run = sim.simulate(sc, seed=args.seed, noiseless=True)
    stride = int(round(sc.imu_rate / sc.camera_rate))
    if args.substeps < 1 or stride % args.substeps:
        raise CliError("usage", EXIT_USAGE, f"--substeps must divide {stride}")
    step = stride // args.substeps
    if args.epochs * stride >= len(run.robots[0].traj):
        raise CliError("config", EXIT_CONFIG, "scenario too short for the requested epochs")
    trajs = []
    for rs in run.robots:
        tr = rs.traj
        ks = range(0, args.epochs * stride + 1, step)
        trajs.append([observability.TruthSample(tr.R[k], tr.v[k], tr.p[k]) for k in ks])
    anchor = np.asarray(run.world.anchors[0][1], dtype=float)
    feature = run.world.feature_positions[0]
    obs = observability.build_observability(
        trajs, 1.0 / sc.camera_rate, anchor, feature, sc.camera.extrinsics, sc.uwb.tag,
        substeps=args.substeps, shared_landmarks=args.shared,
    )
    N = observability.null_basis(len(trajs), anchor, feature, shared_landmarks=args.shared)
    report = observability.check_null_space(obs, N)
    print(observability.format_report(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcviro", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--scenario", type=str, default=None, help="YAML scenario file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", type=str, default=None, required=out_required)
        sp.add_argument("--window", type=int, default=None, help="clone window size")
        sp.add_argument("--init-window", type=int, default=None,
                        help="range samples buffered before an anchor is initialized")

    def filtering(sp):
        sp.add_argument("--ci-weights", choices=("equal", "trace-min"), default="trace-min")

    sp = sub.add_parser("simulate", help="ground truth and sensor streams")
    common(sp, out_required=True)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("run", help="one filter run")
    common(sp)
    filtering(sp)
    sp.add_argument("--mode", choices=("collab", "indep"), default="collab")
    sp.set_defaults(func=cmd_run)

    for name, func, helptext in (("mc", cmd_mc, "Monte-Carlo batch"),
                                 ("compare", cmd_compare, "with vs without neighbours")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        filtering(sp)
        sp.add_argument("--runs", type=int, default=20)
        sp.add_argument("--workers", type=int, default=1)
        if name == "mc":
            sp.add_argument("--mode", choices=("collab", "indep"), default="collab")
        sp.set_defaults(func=func)

    sp = sub.add_parser("observability", help="rank and null-space report")
    common(sp)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--substeps", type=int, default=10)
    sp.add_argument("--shared", action="store_true", help="one landmark pair shared by all robots")
    sp.set_defaults(func=cmd_observability)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "runs", 1) is not None and getattr(args, "runs", 1) < 1:
        print("error[usage]: --runs must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.code
    except (np.linalg.LinAlgError, FloatingPointError, RuntimeError) as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
