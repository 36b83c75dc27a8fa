"""Command-line entry points: run, calibrate, analyze, optimize.

Exit codes: 0 success, 2 invalid input, 3 I/O failure, 4 calibration
infeasible.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from . import analysis, discovery, energy, simulator
from .core import MS, SEC, US, preset, preset_names
from .simulator import ScenarioInvalid, VERSION

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_IO = 3
EXIT_CALIBRATION = 4


def _config_hash(scenario_bytes: bytes, seed: int) -> str:
    h = hashlib.sha256()
    h.update(scenario_bytes)
    h.update(str(seed).encode())
    h.update(VERSION.encode())
    return h.hexdigest()


def cmd_run(args) -> int:
    try:
        with open(args.scenario, "rb") as f:
            raw = f.read()
    except OSError as e:
        print(f"error: cannot read scenario: {e}", file=sys.stderr)
        return EXIT_INVALID
    try:
        scenario = simulator.scenario_from_json_dict(json.loads(raw))
    except (ScenarioInvalid, ValueError) as e:
        print(f"error: invalid scenario: {e}", file=sys.stderr)
        return EXIT_INVALID

    seeds = [scenario.seed if args.seed is None else args.seed]
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",")]

    jobs = [(raw, replace(scenario, seed=s), s, args.out, len(seeds) > 1)
            for s in seeds]
    try:
        if args.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                list(pool.map(_run_one_packed, jobs))
        else:
            for job in jobs:
                _run_one_packed(job)
    except OSError as e:
        print(f"error: cannot write outputs: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def _run_one_packed(job):
    raw, scenario, seed, out_dir, multi = job
    out = simulator.run(scenario)
    target = os.path.join(out_dir, f"seed{seed}") if multi else out_dir
    out.write(target, scenario_ref=scenario.name,
              config_hash=_config_hash(raw, seed))
    print(f"seed {seed}: wrote {target} ({out.stats['successes']} ranges)")


def reference_scenario(kind: str, latency: str, seed: int = 7,
                       duration: int = 15 * 60 * SEC) -> simulator.Scenario:
    """The measurement conditions the current table is fitted against:
    a tag alone, or with 1 or 9 neighbors continuously in range."""
    n_neighbors = {"alone": 0, "1n": 1, "9n": 9}[kind]
    nodes = [simulator.NodeSpec(address=1, waypoints=[(0, 0.0, 0.0)])]
    for i in range(n_neighbors):
        x = 2.0 + 1.5 * (i % 3)
        y = 1.5 * (i // 3)
        nodes.append(simulator.NodeSpec(address=2 + i, waypoints=[(0, x, y)]))
    return simulator.Scenario(
        duration=duration,
        seed=seed,
        protocol=preset(latency),
        phy=simulator.PhyConfig(),
        nodes=nodes,
        name=f"reference-{kind}-{latency}",
    )


def run_reference_duty_cycles(duration: int = 15 * 60 * SEC) -> dict:
    """Simulate the six reference conditions and measure node 1's
    per-state duty cycles."""
    duties = {}
    for (kind, latency) in sorted(energy.REFERENCE_TARGETS):
        scenario = reference_scenario(kind, latency, duration=duration)
        out = simulator.run(scenario)
        duties[(kind, latency)] = out.ledgers[1].duty_cycles(duration)
    return duties


def run_calibration(baseline_ma: float | None = None,
                    duration: int = 15 * 60 * SEC):
    """Fit the current table against the measured averages; returns
    (table, residuals, duty_cycles)."""
    duties = run_reference_duty_cycles(duration)
    if baseline_ma is None:
        baseline_ma = energy.BASELINE_MA
    table, residuals = energy.calibrate(
        energy.REFERENCE_TARGETS, duties, baseline_ma=baseline_ma
    )
    return table, residuals, duties


def cmd_calibrate(args) -> int:
    try:
        table, residuals, duties = run_calibration(baseline_ma=args.baseline_ma)
    except energy.CalibrationInfeasible as e:
        print(f"error: calibration infeasible: {e}", file=sys.stderr)
        return EXIT_CALIBRATION

    battery = energy.Battery()
    report = {
        "currents_ma": {
            "BASELINE": table.baseline,
            "BLE_SCAN": table.ble_scan,
            "BLE_ADV_TX": table.ble_adv_tx,
            "UWB_ACTIVE": table.uwb_active,
            "UWB_WAKE": table.uwb_wake,
            "UWB_DEEPSLEEP": table.uwb_deepsleep,
        },
        "residuals": {f"{k[0]}-{k[1]}": round(v, 5) for k, v in residuals.items()},
        "modelled_ma": {
            f"{k[0]}-{k[1]}": round(energy.modelled_average(duties[k], table), 4)
            for k in sorted(duties)
        },
    }
    try:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
        curve_path = os.path.splitext(args.out)[0] + "-lifetime-curves.csv"
        with open(curve_path, "w") as f:
            f.write(_lifetime_curves_csv(duties, table, battery))
    except OSError as e:
        print(f"error: cannot write {args.out}: {e}", file=sys.stderr)
        return EXIT_IO
    for key in sorted(residuals):
        print(f"{key[0]}-{key[1]}: modelled "
              f"{energy.modelled_average(duties[key], table):.3f} mA "
              f"({residuals[key]:+.2%})")
    print(f"wrote {args.out} and {curve_path}")
    return EXIT_OK


def _lifetime_curves_csv(duties, table, battery) -> str:
    alone = {
        lat: energy.modelled_average(duties[("alone", lat)], table)
        for lat in ("2s", "30s")
    }
    cols, curves = [], []
    for kind in ("1n", "9n"):
        for lat in ("2s", "30s"):
            contact = energy.modelled_average(duties[(kind, lat)], table)
            cols.append(f"days_{kind}_{lat}")
            curves.append(energy.lifetime_curve(alone[lat], contact, battery))
    lines = ["p," + ",".join(cols)]
    for i, (p, _) in enumerate(curves[0]):
        row = [f"{p:.2f}"] + [f"{curve[i][1]:.2f}" for curve in curves]
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def cmd_analyze(args) -> int:
    try:
        with open(args.samples) as f:
            text = f.read()
    except OSError as e:
        print(f"error: cannot read samples: {e}", file=sys.stderr)
        return EXIT_INVALID
    try:
        samples = analysis.parse_samples_csv(text)
    except analysis.MalformedRow as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID

    close_gap = int(args.close_gap_s * SEC)
    period = int(args.period_s * SEC)
    contacts = []
    for pair_samples in analysis.group_by_pair(samples).values():
        contacts.extend(
            analysis.extract_contacts(
                pair_samples,
                open_threshold_m=args.open_threshold_m,
                tolerance_m=args.tolerance_m,
                close_gap=close_gap,
            )
        )
    users = sorted({u for s in samples for u in s.pair})
    stats = analysis.dyad_stats(contacts)
    bands = [(0.0, 2.0), (2.0, 4.0), (4.0, 10.0), (10.0, 50.0)]
    try:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "contacts.csv"), "w") as f:
            f.write(analysis.contacts_csv(contacts))
        with open(os.path.join(args.out, "dyads.csv"), "w") as f:
            f.write(analysis.dyads_csv(stats, len(users)))
        with open(os.path.join(args.out, "exposure.csv"), "w") as f:
            rows = []
            for user in users:
                view = analysis.user_view(samples, user)
                exp = analysis.cumulative_exposure(view, period, bands)
                for line in analysis.exposure_csv(exp, bands).splitlines()[1:]:
                    rows.append(f"{user},{line}")
            f.write("user,neighbor,band_lo_m,band_hi_m,total_min\n")
            f.write("\n".join(rows) + ("\n" if rows else ""))
    except OSError as e:
        print(f"error: cannot write outputs: {e}", file=sys.stderr)
        return EXIT_IO
    print(f"{len(contacts)} contacts from {len(samples)} samples "
          f"({len(users)} users) -> {args.out}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    try:
        epoch, scan, interval = discovery.optimize(
            int(args.target_latency_s * SEC), args.density
        )
    except discovery.Infeasible as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    fragment = {
        "epoch": epoch // US,
        "scan": scan // US,
        "adv_interval": interval // US,
    }
    text = json.dumps(fragment, indent=2, sort_keys=True) + "\n"
    if args.out:
        try:
            with open(args.out, "w") as f:
                f.write(text)
        except OSError as e:
            print(f"error: cannot write {args.out}: {e}", file=sys.stderr)
            return EXIT_IO
    print(text, end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="proxsim",
        description="Dual-radio proximity-tag protocol simulator and "
        "contact analytics",
    )
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("run", help="simulate a scenario file")
    pr.add_argument("scenario")
    pr.add_argument("--seed", type=int, default=None)
    pr.add_argument("--seeds", default="",
                    help="comma-separated seeds for multiple runs")
    pr.add_argument("--jobs", type=int, default=1)
    pr.add_argument("--out", default="out")
    pr.set_defaults(func=cmd_run)

    pc = sub.add_parser("calibrate",
                        help="fit state currents against the reference averages")
    pc.add_argument("--out", default="current-table.json")
    pc.add_argument("--baseline-ma", type=float, default=None,
                    help="override the baseline current (testing aid)")
    pc.set_defaults(func=cmd_calibrate)

    pa = sub.add_parser("analyze", help="contact analytics over a samples CSV")
    pa.add_argument("samples")
    pa.add_argument("--out", default="analysis")
    pa.add_argument("--open-threshold-m", type=float,
                    default=analysis.OPEN_THRESHOLD_M)
    pa.add_argument("--tolerance-m", type=float, default=analysis.TOLERANCE_M)
    pa.add_argument("--close-gap-s", type=float, default=90.0)
    pa.add_argument("--period-s", type=float, default=15.0)
    pa.set_defaults(func=cmd_analyze)

    po = sub.add_parser("optimize",
                        help="pick scan/advertising parameters for a latency "
                        "target and density")
    po.add_argument("--target-latency-s", type=float, required=True)
    po.add_argument("--density", type=int, required=True)
    po.add_argument("--out", default="")
    po.set_defaults(func=cmd_optimize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
