"""Command-line interface: simulate, estimate, experiment and verify subcommands.

Configuration is YAML-first; individual values can be overridden on the
command line with ``--set dotted.key=value``.  Exit codes: 0 success,
2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np
import yaml

from .arrays import (ArrayGeometry, Scenario, load_snapshots, save_snapshots,
                     simulate_snapshots)
from .covariance import NumericalError, sample_covariance
from .harness import ExperimentSpec, export_results, run_monte_carlo, snr_to_noise_var
from .oracles import run_all_oracles
from .solver import SolverConfig, solve

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

ORACLE_NAMES = ("lemma1", "majorization", "gradient", "woodbury")


class ConfigError(ValueError):
    pass


def _load_config(path) -> dict:
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return data


def _apply_overrides(config: dict, pairs) -> dict:
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not of the form key=value")
        key, raw = pair.split("=", 1)
        node = config
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override through non-mapping key {part!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return config


def _geometry_from_config(config: dict) -> ArrayGeometry:
    geom = config.get("geometry")
    if not isinstance(geom, dict):
        raise ConfigError("config must contain a 'geometry' mapping")
    try:
        if geom.get("m1") is not None:
            return ArrayGeometry.nested(geom["m1"], geom["m2"], d=geom.get("d", 0.5),
                                        wavelength=geom.get("wavelength", 1.0))
        return ArrayGeometry.from_positions(geom["positions"], d=geom.get("d", 0.5),
                                            wavelength=geom.get("wavelength", 1.0))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid geometry: {exc}") from exc


def _scenario_from_config(config: dict, seed_override=None) -> Scenario:
    sc = config.get("scenario")
    if not isinstance(sc, dict):
        raise ConfigError("config must contain a 'scenario' mapping")
    try:
        doas = [float(v) for v in sc["doas_deg"]]
        powers = sc["powers"]
        if np.isscalar(powers):
            powers = [float(powers)] * len(doas)
        if "noise_var" in sc:
            noise_var = float(sc["noise_var"])
        elif "snr_db" in sc:
            noise_var = snr_to_noise_var(powers, float(sc["snr_db"]))
        else:
            raise KeyError("noise_var or snr_db")
        seed = seed_override if seed_override is not None else sc.get("seed", 0)
        return Scenario(tuple(doas), tuple(powers), noise_var,
                        int(sc["snapshots"]), seed=int(seed))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid scenario: {exc}") from exc


def _solver_from_config(config: dict) -> SolverConfig:
    try:
        return SolverConfig.from_dict(config.get("solver", {}) or {})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid solver config: {exc}") from exc


def cmd_simulate(args) -> int:
    config = _apply_overrides(_load_config(args.config), args.set)
    geometry = _geometry_from_config(config)
    scenario = _scenario_from_config(config, seed_override=args.seed)
    snapshots = simulate_snapshots(geometry, scenario)
    save_snapshots(snapshots, args.out)
    print(f"wrote {snapshots.num_sensors} x {snapshots.num_snapshots} snapshots to {args.out}")
    print(f"scenario: K={scenario.num_sources} doas={list(scenario.doas_deg)} "
          f"noise_var={scenario.noise_var:.6g} seed={scenario.seed}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    config = _apply_overrides(_load_config(args.config), args.set)
    geometry = _geometry_from_config(config)
    solver_config = _solver_from_config(config)
    if args.input:
        snapshots = load_snapshots(args.input)
        if snapshots.num_sensors != geometry.num_sensors:
            raise ConfigError("snapshot file does not match the configured geometry")
    else:
        scenario = _scenario_from_config(config, seed_override=args.seed)
        snapshots = simulate_snapshots(geometry, scenario)
    output = solve(sample_covariance(snapshots), geometry, solver_config)
    print(f"estimated {len(output.doas_deg)} DOAs "
          f"({'converged' if output.converged else 'iteration limit'}, "
          f"{output.iterations} iterations)")
    for doa, power in zip(output.doas_deg, output.powers):
        print(f"  doa = {doa:+9.4f} deg   power = {power:.6g}")
    print(f"noise variance estimate: {output.noise_var:.6g}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(output.to_json(indent=2))
        print(f"wrote estimate to {args.out}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    config = _apply_overrides(_load_config(args.config), args.set)
    if args.trials is not None:
        config["n_trials"] = args.trials
    if args.jobs is not None:
        config["jobs"] = args.jobs
    if args.seed is not None:
        config["base_seed"] = args.seed
    try:
        spec = ExperimentSpec.from_dict(config)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"invalid experiment spec: {exc}") from exc
    result = run_monte_carlo(spec)
    base = args.out
    if args.format in ("csv", "both"):
        export_results(result, f"{base}.csv", "csv")
        print(f"wrote {base}.csv")
    if args.format in ("json", "both"):
        export_results(result, f"{base}.json", "json")
        print(f"wrote {base}.json")
    print(f"{spec.sweep_variable:>12}  {'rmse_deg':>10}  {'pr':>6}  {'time_s':>8}  {'fail':>4}")
    for point in result.points:
        flag = "  *flagged*" if point["flagged"] else ""
        print(f"{point['value']:>12.6g}  {point['rmse_deg']:>10.4g}  {point['pr']:>6.3f}  "
              f"{point['mean_time_s']:>8.3g}  {point['n_failed']:>4d}{flag}")
    total_failed = sum(p["n_failed"] for p in result.points)
    total = len(spec.sweep_values) * spec.n_trials
    if total_failed == total:
        print("all trials failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_verify(args) -> int:
    trials = args.trials
    seed = args.seed if args.seed is not None else 0
    reports = [r for r in run_all_oracles(seed=seed, trials=trials)
               if args.only is None or r.name == args.only]
    print(f"{'check':<14}{'instances':>10}{'max_rel_error':>16}{'tolerance':>12}  result")
    for report in reports:
        status = "PASS" if report.passed else "FAIL"
        print(f"{report.name:<14}{report.instances:>10}{report.max_rel_error:>16.3e}"
              f"{report.tolerance:>12.1e}  {status}")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump([r.to_dict() for r in reports], fh, indent=2)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nestdoa",
        description="Off-grid DOA estimation with a two-level nested array.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write synthetic snapshots to a file")
    sim.add_argument("--config", required=True, help="YAML with geometry and scenario")
    sim.add_argument("--out", required=True, help="snapshot CSV output path")
    sim.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    sim.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config entry (dotted path)")
    sim.set_defaults(func=cmd_simulate)

    est = sub.add_parser("estimate", help="estimate DOAs from snapshots or a scenario")
    est.add_argument("--config", required=True, help="YAML with geometry, scenario, solver")
    est.add_argument("--input", default=None, help="snapshot CSV (skips simulation)")
    est.add_argument("--out", default=None, help="JSON output path")
    est.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    est.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config entry (dotted path)")
    est.set_defaults(func=cmd_estimate)

    exp = sub.add_parser("experiment", help="run a Monte-Carlo sweep")
    exp.add_argument("--config", required=True, help="YAML experiment spec")
    exp.add_argument("--out", required=True, help="output path prefix")
    exp.add_argument("--trials", type=int, default=None, help="override trial count")
    exp.add_argument("--jobs", type=int, default=None, help="parallel trial workers")
    exp.add_argument("--seed", type=int, default=None, help="override the base seed")
    exp.add_argument("--format", choices=("csv", "json", "both"), default="both")
    exp.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config entry (dotted path)")
    exp.set_defaults(func=cmd_experiment)

    ver = sub.add_parser("verify", help="run the numerical verification oracles")
    ver.add_argument("--only", choices=ORACLE_NAMES, default=None)
    ver.add_argument("--trials", type=int, default=None, help="override trial counts")
    ver.add_argument("--seed", type=int, default=None)
    ver.add_argument("--out", default=None, help="JSON report path")
    ver.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc} {exc.diagnostics}", file=sys.stderr)
        return EXIT_NUMERICAL


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
