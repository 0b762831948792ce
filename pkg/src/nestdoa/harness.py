"""Monte-Carlo experiment runner: RMSE and probability-of-resolution sweeps.

Sweeps either SNR or the snapshot count over independent trials with
deterministic per-trial seeding, matches estimates to ground truth by optimal
assignment, and exports results as CSV (one row per sweep point) or JSON
(full per-trial detail, lossless round-trip).
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .arrays import ArrayGeometry, Scenario, simulate_snapshots
from .covariance import NumericalError, sample_covariance
from .solver import SolverConfig, solve

MISS_ERROR_DEG = 180.0  # worst-case error charged when no estimate exists


def snr_to_noise_var(powers, snr_db: float) -> float:
    """Noise variance from SNR = sum of source powers over noise power."""
    powers = np.asarray(powers, dtype=float)
    if powers.size == 0 or np.any(powers <= 0):
        raise ValueError("powers must be a nonempty list of positive variances")
    return float(np.sum(powers) / 10.0 ** (snr_db / 10.0))


@dataclass
class MatchResult:
    """Estimate-to-truth pairing: per-truth absolute errors in degrees."""

    errors: np.ndarray
    pairs: list
    unresolved: bool
    failed: bool


def match_estimates(estimates, truth) -> MatchResult:
    """Assign estimates to true DOAs with minimum total absolute error.

    With at least K estimates the pairing is an optimal assignment; with
    fewer, every unmatched truth pairs to its nearest estimate and the trial
    is marked unresolved.  An empty estimate list marks the trial failed and
    charges the worst-case 180 degree error per source.
    """
    truth = np.atleast_1d(np.asarray(truth, dtype=float))
    if truth.size == 0:
        raise ValueError("truth must contain at least one DOA")
    est = np.atleast_1d(np.asarray(estimates, dtype=float)) if np.size(estimates) else np.empty(0)
    k = truth.size
    if est.size == 0:
        return MatchResult(np.full(k, MISS_ERROR_DEG), [(i, None) for i in range(k)],
                           unresolved=True, failed=True)
    cost = np.abs(truth[:, None] - est[None, :])
    if est.size >= k:
        rows, cols = linear_sum_assignment(cost)
        errors = np.empty(k)
        errors[rows] = cost[rows, cols]
        pairs = sorted((int(i), int(j)) for i, j in zip(rows, cols))
        return MatchResult(errors, pairs, unresolved=False, failed=False)
    nearest = np.argmin(cost, axis=1)
    errors = cost[np.arange(k), nearest]
    pairs = [(i, int(nearest[i])) for i in range(k)]
    return MatchResult(errors, pairs, unresolved=True, failed=False)


@dataclass
class TrialResult:
    """One Monte-Carlo trial: truth, estimates, matched errors, bookkeeping."""

    truth_deg: list
    estimates_deg: list
    errors_deg: list
    unresolved: bool
    failed: bool
    iterations: int
    converged: bool
    wall_time_s: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "truth_deg": list(self.truth_deg),
            "estimates_deg": list(self.estimates_deg),
            "errors_deg": list(self.errors_deg),
            "unresolved": self.unresolved,
            "failed": self.failed,
            "iterations": self.iterations,
            "converged": self.converged,
            "wall_time_s": self.wall_time_s,
            "seed": self.seed,
        }


def rmse(trials) -> float:
    """sqrt of (1/runs) * sum over runs and sources of squared errors.

    Deliberately aggregates over the K sources without dividing by K, so the
    value is not comparable across different K.
    """
    if len(trials) == 0:
        raise ValueError("at least one trial is required")
    total = sum(float(np.sum(np.square(t.errors_deg))) for t in trials)
    return float(np.sqrt(total / len(trials)))


def probability_of_resolution(trials, delta_theta: float) -> float:
    """Fraction of trials whose every per-source error is within delta_theta."""
    if delta_theta <= 0:
        raise ValueError("delta_theta must be positive")
    ok = [
        (not t.failed) and (not t.unresolved)
        and bool(np.all(np.asarray(t.errors_deg) <= delta_theta))
        for t in trials
    ]
    return float(np.mean(ok)) if ok else 0.0


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce one sweep: scenario rule, sweep, seeds, solver."""

    geometry: ArrayGeometry
    sweep_variable: str                      # "snr_db" | "snapshots"
    sweep_values: tuple
    n_trials: int
    base_seed: int
    solver: SolverConfig = field(default_factory=SolverConfig)
    doas_deg: tuple | None = None            # fixed-DOA scenario ...
    n_sources: int | None = None             # ... or random DOAs per trial
    min_separation_deg: float = 5.0
    doa_range_deg: tuple = (-90.0, 90.0)
    powers: tuple | None = None              # None: unit power per source
    snapshots: int | None = None             # fixed T when sweeping snr_db
    snr_db: float | None = None              # fixed SNR when sweeping snapshots
    resolution_tol_deg: float = 0.8
    jobs: int = 1

    def __post_init__(self):
        if self.sweep_variable not in ("snr_db", "snapshots"):
            raise ValueError("sweep_variable must be 'snr_db' or 'snapshots'")
        self.sweep_values = tuple(self.sweep_values)
        if len(self.sweep_values) == 0:
            raise ValueError("sweep must be nonempty")
        if self.n_trials < 1:
            raise ValueError("n_trials must be >= 1")
        if self.resolution_tol_deg <= 0:
            raise ValueError("resolution_tol_deg must be positive")
        if (self.doas_deg is None) == (self.n_sources is None):
            raise ValueError("specify exactly one of doas_deg or n_sources")
        if self.doas_deg is not None:
            self.doas_deg = tuple(float(v) for v in self.doas_deg)
        if self.sweep_variable == "snr_db" and self.snapshots is None:
            raise ValueError("a fixed snapshot count is required when sweeping SNR")
        if self.sweep_variable == "snapshots" and self.snr_db is None:
            raise ValueError("a fixed snr_db is required when sweeping snapshots")
        if self.powers is not None:
            self.powers = tuple(float(v) for v in self.powers)
            if len(self.powers) != self.num_sources:
                raise ValueError("powers must have one entry per source")

    @property
    def num_sources(self) -> int:
        return len(self.doas_deg) if self.doas_deg is not None else int(self.n_sources)

    def source_powers(self) -> np.ndarray:
        if self.powers is not None:
            return np.asarray(self.powers, dtype=float)
        return np.ones(self.num_sources)

    def to_dict(self) -> dict:
        return {
            "geometry": self.geometry.to_dict(),
            "sweep_variable": self.sweep_variable,
            "sweep_values": list(self.sweep_values),
            "n_trials": self.n_trials,
            "base_seed": self.base_seed,
            "solver": self.solver.to_dict(),
            "doas_deg": list(self.doas_deg) if self.doas_deg is not None else None,
            "n_sources": self.n_sources,
            "min_separation_deg": self.min_separation_deg,
            "doa_range_deg": list(self.doa_range_deg),
            "powers": list(self.powers) if self.powers is not None else None,
            "snapshots": self.snapshots,
            "snr_db": self.snr_db,
            "resolution_tol_deg": self.resolution_tol_deg,
            "jobs": self.jobs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        data = dict(data)
        geom = data.pop("geometry")
        if isinstance(geom, dict):
            if "m1" in geom and geom.get("m1") is not None:
                geometry = ArrayGeometry.nested(geom["m1"], geom["m2"],
                                                d=geom.get("d", 0.5),
                                                wavelength=geom.get("wavelength", 1.0))
            else:
                geometry = ArrayGeometry.from_positions(geom["positions"],
                                                        d=geom.get("d", 0.5),
                                                        wavelength=geom.get("wavelength", 1.0))
        else:
            geometry = geom
        solver = data.pop("solver", {})
        if isinstance(solver, dict):
            solver = SolverConfig.from_dict(solver)
        if data.get("doa_range_deg") is not None:
            data["doa_range_deg"] = tuple(data["doa_range_deg"])
        for key in ("sweep_values", "doas_deg", "powers"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(geometry=geometry, solver=solver, **data)

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _trial_seeds(base_seed: int, point_index: int, trial_index: int):
    """Deterministic per-trial seeding: SeedSequence split on (point, trial)."""
    root = np.random.SeedSequence(base_seed, spawn_key=(point_index, trial_index))
    doa_seq, sim_seq = root.spawn(2)
    return doa_seq, int(sim_seq.generate_state(1, np.uint64)[0])


def _draw_doas(spec: ExperimentSpec, doa_seq) -> np.ndarray:
    if spec.doas_deg is not None:
        return np.asarray(spec.doas_deg, dtype=float)
    rng = np.random.default_rng(doa_seq)
    lo, hi = spec.doa_range_deg
    for _ in range(1000):
        doas = np.sort(rng.uniform(lo, hi, spec.num_sources))
        if spec.num_sources == 1 or np.min(np.diff(doas)) >= spec.min_separation_deg:
            return doas
    raise ValueError("could not draw DOAs with the requested minimum separation")


def _run_trial(spec: ExperimentSpec, point_index: int, trial_index: int) -> TrialResult:
    sweep_value = spec.sweep_values[point_index]
    snr_db = sweep_value if spec.sweep_variable == "snr_db" else spec.snr_db
    snapshots = sweep_value if spec.sweep_variable == "snapshots" else spec.snapshots
    doa_seq, sim_seed = _trial_seeds(spec.base_seed, point_index, trial_index)
    truth = _draw_doas(spec, doa_seq)
    powers = spec.source_powers()
    noise_var = snr_to_noise_var(powers, float(snr_db))
    scenario = Scenario(tuple(truth), tuple(powers), noise_var, int(snapshots),
                        seed=sim_seed)
    started = time.perf_counter()
    try:
        cov = sample_covariance(simulate_snapshots(spec.geometry, scenario))
        output = solve(cov, spec.geometry, spec.solver)
        est = np.asarray(output.doas_deg)
        est_p = np.asarray(output.powers)
        if est.size > truth.size:
            top = np.argsort(est_p)[::-1][: truth.size]
            est = est[np.sort(top)]
        match = match_estimates(est, truth)
        iterations, converged = output.iterations, output.converged
    except NumericalError:
        match = match_estimates([], truth)
        est = np.empty(0)
        iterations, converged = 0, False
    elapsed = time.perf_counter() - started
    return TrialResult(
        truth_deg=truth.tolist(),
        estimates_deg=np.asarray(est, dtype=float).tolist(),
        errors_deg=np.asarray(match.errors, dtype=float).tolist(),
        unresolved=match.unresolved,
        failed=match.failed,
        iterations=iterations,
        converged=converged,
        wall_time_s=elapsed,
        seed=sim_seed,
    )


@dataclass
class ExperimentResult:
    """Aggregated sweep results plus full per-trial detail and reproducibility metadata."""

    spec: dict
    spec_hash: str
    version: str
    points: list

    def to_dict(self) -> dict:
        return {
            "spec": self.spec,
            "spec_hash": self.spec_hash,
            "version": self.version,
            "points": self.points,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentResult":
        data = json.loads(text)
        return cls(spec=data["spec"], spec_hash=data["spec_hash"],
                   version=data["version"], points=data["points"])

    def comparable_dict(self) -> dict:
        """Result with wall-clock fields stripped (determinism comparisons)."""
        out = json.loads(self.to_json())
        for point in out["points"]:
            point.pop("mean_time_s", None)
            for trial in point["trials"]:
                trial.pop("wall_time_s", None)
        return out

    def to_csv(self) -> str:
        variable = self.spec["sweep_variable"]
        lines = [f"{variable},rmse_deg,pr,mean_time_s,n_failed"]
        for point in self.points:
            lines.append(",".join([
                f"{point['value']:.6g}",
                f"{point['rmse_deg']:.6g}",
                f"{point['pr']:.6g}",
                f"{point['mean_time_s']:.6g}",
                str(point["n_failed"]),
            ]))
        return "\n".join(lines) + "\n"


def run_monte_carlo(spec: ExperimentSpec) -> ExperimentResult:
    """Run the full sweep; deterministic given the spec (timings aside).

    Trials are independent; with ``spec.jobs > 1`` they run in a process pool
    and are aggregated in (point, trial) order regardless of completion order.
    A sweep point is flagged when more than 10% of its trials failed.
    """
    indices = [(i, j) for i in range(len(spec.sweep_values)) for j in range(spec.n_trials)]
    if spec.jobs > 1:
        with ProcessPoolExecutor(max_workers=spec.jobs) as pool:
            trials = list(pool.map(_run_trial, [spec] * len(indices),
                                   [i for i, _ in indices], [j for _, j in indices],
                                   chunksize=1))
    else:
        trials = [_run_trial(spec, i, j) for i, j in indices]
    points = []
    for i, value in enumerate(spec.sweep_values):
        block = trials[i * spec.n_trials:(i + 1) * spec.n_trials]
        n_failed = sum(t.failed for t in block)
        points.append({
            "value": float(value),
            "rmse_deg": rmse(block),
            "pr": probability_of_resolution(block, spec.resolution_tol_deg),
            "mean_time_s": float(np.mean([t.wall_time_s for t in block])),
            "n_failed": int(n_failed),
            "flagged": bool(n_failed > 0.1 * len(block)),
            "trials": [t.to_dict() for t in block],
        })
    from . import __version__
    return ExperimentResult(spec=spec.to_dict(), spec_hash=spec.spec_hash(),
                            version=__version__, points=points)


def export_results(result: ExperimentResult, path, fmt: str = "csv") -> None:
    """Write a result file; csv is one row per sweep point, json keeps trial detail."""
    if fmt not in ("csv", "json"):
        raise ValueError("format must be 'csv' or 'json'")
    try:
        with open(path, "w") as fh:
            fh.write(result.to_csv() if fmt == "csv" else result.to_json(indent=2))
    except OSError as exc:
        raise OSError(f"could not write {fmt} results to {path}: {exc}") from exc
