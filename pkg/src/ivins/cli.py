"""Command-line entry point: Monte Carlo runs, invariance experiments, and
the Jacobian audit.

Exit codes: 0 success, 1 experiment-level failure (threshold breach),
2 usage/config error.  ``IVINS_THREADS`` caps Monte Carlo parallelism.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .audit import audit_all
from .ekf import NoiseConfig
from .invariance import (build_scenario, check_chain_condition,
                         run_twin_experiment)
from .sim import KNOWN_FILTERS, ScenarioConfig, run_monte_carlo
from .states import UnobsTransform

DEFAULT_RUNS = 50
DEFAULT_FILTERS = ("msckf", "ri-msckf")

# documented twin-experiment thresholds (relative to the 6.5 m scene scale)
DETERMINISTIC_TOL = 1e-8
INVARIANT_STOCHASTIC_TOL = 1e-6
VIOLATION_LEVEL = 1e-4


class ConfigError(Exception):
    pass


_CONFIG_KEYS = {
    "sim.radius_m": ("radius_m", float),
    "sim.angular_rate": ("angular_rate", float),
    "sim.vert_amp_m": ("vert_amp_m", float),
    "sim.vert_freq_hz": ("vert_freq_hz", float),
    "sim.roll_amp": ("roll_amp", float),
    "sim.roll_freq_hz": ("roll_freq_hz", float),
    "sim.pitch_amp": ("pitch_amp", float),
    "sim.pitch_freq_hz": ("pitch_freq_hz", float),
    "sim.duration_s": ("duration_s", float),
    "sim.imu_rate_hz": ("imu_rate_hz", float),
    "sim.cam_rate_hz": ("cam_rate_hz", float),
    "sim.landmark_count": ("landmark_count", int),
    "sim.landmark_radius_m": ("landmark_radius_m", float),
    "sim.landmark_height_m": ("landmark_height_m", float),
    "sim.state_landmark_count": ("state_landmark_count", int),
    "sim.seed": ("seed", int),
}

_NOISE_KEYS = {
    "noise.gyro_sigma": "gyro",
    "noise.gyro_walk_sigma": "gyro_walk",
    "noise.accel_sigma": "accel",
    "noise.accel_walk_sigma": "accel_walk",
    "noise.pixel_sigma": "pixel",
}

_MC_KEYS = {"mc.runs", "mc.filters"}


def parse_config(path):
    """Flat ``section.key = value`` file -> (ScenarioConfig, mc settings)."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{path}: config file not found")
    sim_kwargs = {}
    noise_kwargs = {"gyro": 0.008, "gyro_walk": 0.0004, "accel": 0.019,
                    "accel_walk": 0.05, "pixel": 1.5}
    mc = {}
    for lineno, raw in enumerate(p.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        try:
            if key in _CONFIG_KEYS:
                attr, typ = _CONFIG_KEYS[key]
                sim_kwargs[attr] = typ(value)
            elif key in _NOISE_KEYS:
                noise_kwargs[_NOISE_KEYS[key]] = float(value)
            elif key == "mc.runs":
                mc["runs"] = int(value)
            elif key == "mc.filters":
                mc["filters"] = tuple(f.strip() for f in value.split(",") if f.strip())
            else:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}")
    try:
        noise = NoiseConfig.from_sigmas(**noise_kwargs)
        cfg = ScenarioConfig(noise=noise, **sim_kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}")
    return cfg, mc


def _fmt(x):
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _config_dict(cfg: ScenarioConfig):
    out = {}
    for key, (attr, typ) in _CONFIG_KEYS.items():
        out[key] = typ(getattr(cfg, attr))
    for key, name in _NOISE_KEYS.items():
        out[key] = float(cfg.noise.sigmas[name] if name != "pixel"
                         else cfg.noise.pixel_sigma)
    return out


def cmd_simulate(args):
    try:
        cfg, mc = parse_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    runs = args.runs if args.runs is not None else mc.get("runs", DEFAULT_RUNS)
    filters = (tuple(f.strip() for f in args.filters.split(","))
               if args.filters else mc.get("filters", DEFAULT_FILTERS))
    for name in filters:
        if name not in KNOWN_FILTERS:
            print(f"error: unknown filter {name!r} "
                  f"(choose from {', '.join(KNOWN_FILTERS)})", file=sys.stderr)
            return 2
    if args.seed is not None:
        cfg.seed = args.seed
    if runs <= 0:
        print("error: --runs must be positive", file=sys.stderr)
        return 2

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    workers = args.workers if args.workers else (os.cpu_count() or 1)

    results = run_monte_carlo(cfg, filters, runs, workers=workers)

    agg_rows = []
    for name in filters:
        agg = results[name]
        for i, t in enumerate(agg.t):
            agg_rows.append([_fmt(t), name, _fmt(agg.rms_ori[i]),
                             _fmt(agg.rms_pos[i]), _fmt(agg.nees_ori[i]),
                             _fmt(agg.nees_pose[i])])
    header = ["t", "filter", "rms_ori", "rms_pos", "nees_ori", "nees_pose"]
    _write_csv(out_dir / "aggregate.csv", header, agg_rows)

    run_header = ["t", "filter", "err_ori", "err_pos", "nees_ori", "nees_pose"]
    run_files = []
    for k in range(runs):
        rows = []
        for name in filters:
            m = results[name].runs[k]
            for i, t in enumerate(m.t):
                rows.append([_fmt(t), name, _fmt(m.err_ori[i]),
                             _fmt(m.err_pos[i]), _fmt(m.nees_ori[i]),
                             _fmt(m.nees_pose[i])])
        fname = f"run_{k}.csv"
        _write_csv(out_dir / fname, run_header, rows)
        run_files.append(fname)

    manifest = {
        "version": __version__,
        "command": "simulate",
        "seed": int(cfg.seed),
        "runs": int(runs),
        "filters": list(filters),
        "config": _config_dict(cfg),
        "outputs": ["aggregate.csv"] + run_files,
    }
    with open(out_dir / "manifest.json", "w", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out_dir / 'aggregate.csv'} ({runs} runs, "
          f"filters: {', '.join(filters)})")
    return 0


def cmd_invariance(args):
    steps = args.steps
    if steps <= 1:
        print("error: --steps must be > 1", file=sys.stderr)
        return 2
    scenario = build_scenario(duration_s=steps / 20.0, seed=args.seed,
                              landmark_count=12)
    rng = np.random.default_rng(args.seed)
    if args.mode == "identity":
        t = UnobsTransform.identity()
    else:
        sigma = np.zeros((4, 4))
        if args.mode in ("stochastic-identity", "full"):
            sigma = np.diag([0.1 ** 2, 0.02 ** 2, 0.02 ** 2, 0.02 ** 2])
        t = UnobsTransform(rng.uniform(-0.5, 0.5), rng.uniform(-2.0, 2.0, 3),
                           sigma)
        if args.mode == "stochastic-identity":
            t = UnobsTransform(0.0, np.zeros(3), sigma)

    trace = run_twin_experiment(args.filter, scenario, t, args.mode,
                                steps=steps)
    chain = check_chain_condition(args.filter, scenario, steps=steps)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for j in range(trace.t.size):
        rows.append([str(j), _fmt(chain.residuals[j]),
                     _fmt(trace.divergence_mean[j]),
                     _fmt(trace.divergence_meas[j])])
    _write_csv(out_dir / f"invariance_{args.filter}_{args.mode}.csv",
               ["step", "residual", "divergence_mean", "divergence_meas"],
               rows)

    div = trace.max_divergence
    print(f"filter={args.filter} mode={args.mode} steps={steps}")
    print(f"max mean-estimate divergence (relative): {div:.3e}")
    print(f"max chain residual (relative):           {chain.max_residual:.3e}")

    if args.mode == "identity":
        ok = div == 0.0
        print("RESULT: PASS" if ok else "RESULT: FAIL (identity twin diverged)")
        return 0 if ok else 1
    if args.mode == "deterministic":
        ok = div < DETERMINISTIC_TOL
        print(f"RESULT: {'PASS' if ok else 'FAIL'} "
              f"(threshold {DETERMINISTIC_TOL:g})")
        return 0 if ok else 1
    # stochastic modes: the conventional filter is expected to violate
    if args.filter == "riekf":
        ok = div < INVARIANT_STOCHASTIC_TOL
        print(f"RESULT: {'PASS' if ok else 'FAIL'} "
              f"(threshold {INVARIANT_STOCHASTIC_TOL:g})")
        return 0 if ok else 1
    violated = div > VIOLATION_LEVEL
    if violated:
        print(f"RESULT: FAIL(expected-violation) — divergence exceeds "
              f"{VIOLATION_LEVEL:g} as the theory predicts")
        return 0
    print(f"RESULT: UNEXPECTED — conventional filter stayed below "
          f"{VIOLATION_LEVEL:g}")
    return 1


def cmd_jacobians(args):
    if args.samples <= 0:
        print("error: --samples must be positive", file=sys.stderr)
        return 2
    results = audit_all(samples=args.samples, seed=args.seed)
    if args.filter != "all":
        prefix = {"riekf": "riekf", "conekf": "conekf",
                  "msckf": "msckf", "ri-msckf": "ri-msckf"}[args.filter]
        results = [r for r in results
                   if r.name.startswith(prefix) or r.name == "projection"]
    failed = False
    for r in results:
        status = "ok" if r.ok(args.tol) else "FAIL"
        print(f"{r.name:<18s} max_rel={r.max_rel_err:.3e}  [{status}]")
        failed = failed or not r.ok(args.tol)
    print(f"audited {len(results)} matrices at tol {args.tol:g} "
          f"({args.samples} samples each)")
    return 1 if failed else 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ivins",
        description="Visual-inertial filter simulation and invariance lab")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run the Monte Carlo protocol")
    sim.add_argument("config", help="flat key=value config file")
    sim.add_argument("--runs", type=int, default=None,
                     help=f"Monte Carlo runs (default {DEFAULT_RUNS})")
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--filters", default=None,
                     help="comma list: conekf,riekf,msckf,ri-msckf")
    sim.add_argument("--out", default="ivins-out")
    sim.add_argument("--workers", type=int, default=None,
                     help="parallel workers (capped by IVINS_THREADS)")
    sim.set_defaults(fn=cmd_simulate)

    inv = sub.add_parser("invariance", help="twin experiments and the chain "
                                            "condition")
    inv.add_argument("--filter", choices=["conekf", "riekf"], default="riekf")
    inv.add_argument("--mode", choices=["deterministic", "stochastic-identity",
                                        "full", "identity"], default="full")
    inv.add_argument("--steps", type=int, default=200)
    inv.add_argument("--seed", type=int, default=7)
    inv.add_argument("--out", default="ivins-out")
    inv.set_defaults(fn=cmd_invariance)

    jac = sub.add_parser("jacobians", help="finite-difference audit of the "
                                           "analytic matrices")
    jac.add_argument("--filter", choices=["all", "conekf", "riekf", "msckf",
                                          "ri-msckf"], default="all")
    jac.add_argument("--samples", type=int, default=20)
    jac.add_argument("--tol", type=float, default=1e-5)
    jac.add_argument("--seed", type=int, default=0)
    jac.set_defaults(fn=cmd_jacobians)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.fn(args)


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
