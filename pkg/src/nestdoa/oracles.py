"""Independent numerical verifiers for the estimator's core identities.

Each check re-derives the quantity under test with dense, naive linear
algebra (explicit inverses, slogdet, brute-force finite differences) and
compares against either a closed form or the production path.  None of the
fast structured routines are reused on the oracle side of a comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .arrays import ArrayGeometry, virtual_dictionary
from .covariance import (NoiseCovariance, SigmaFactor, build_real_model,
                         covariance_from_matrix)
from .solver import grid_objective_gradient


@dataclass
class OracleReport:
    """Outcome of one verification run."""

    name: str
    instances: int
    max_rel_error: float
    tolerance: float
    passed: bool
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "instances": self.instances,
            "max_rel_error": self.max_rel_error,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "notes": list(self.notes),
        }


def _random_spd(rng: np.random.Generator, dim: int) -> np.ndarray:
    a = rng.standard_normal((dim, dim))
    return a @ a.T / dim + 0.5 * np.eye(dim)


def _crandn(rng: np.random.Generator, *shape) -> np.ndarray:
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)


def lemma1_check(trials: int = 100, m: int = 3, n: int = 6, seed: int = 0) -> OracleReport:
    """Verify the weighted-quadratic identity behind the power update.

    For random SPD weighting W (of lifted size 2 m^2), random dictionary B and
    gamma > 0: (a) the normal-equations minimizer of
    (r - B p)^T W^{-1} (r - B p) + sum p_k^2 / gamma_k equals
    Gamma B^T Sigma^{-1} r with Sigma = B Gamma B^T + W; (b) the minimized
    value equals r^T Sigma^{-1} r; (c) random perturbations of the minimizer
    never decrease the quadratic.
    """
    rng = np.random.default_rng(seed)
    dim = 2 * m * m
    worst = 0.0
    for _ in range(trials):
        w = _random_spd(rng, dim)
        b = rng.standard_normal((dim, n))
        gamma = rng.uniform(0.1, 3.0, n)
        r = rng.standard_normal(dim)
        w_inv = np.linalg.inv(w)
        sigma = b @ np.diag(gamma) @ b.T + w
        sigma_inv = np.linalg.inv(sigma)
        p_normal = np.linalg.inv(np.diag(1.0 / gamma) + b.T @ w_inv @ b) @ (b.T @ w_inv @ r)
        p_closed = gamma * (b.T @ (sigma_inv @ r))
        worst = max(worst, np.linalg.norm(p_normal - p_closed) / np.linalg.norm(p_closed))

        def quad(p):
            res = r - b @ p
            return float(res @ w_inv @ res + np.sum(p * p / gamma))

        value = quad(p_closed)
        target = float(r @ sigma_inv @ r)
        worst = max(worst, abs(value - target) / abs(target))
        for _ in range(4):
            delta = rng.standard_normal(n)
            for t in (1e-3, 1e-1):
                drop = value - quad(p_closed + t * delta)
                worst = max(worst, max(drop, 0.0) / abs(value))
    tol = 1e-8
    return OracleReport("lemma1", trials, float(worst), tol, worst <= tol)


def majorization_check(trials: int = 100, m: int = 3, n: int = 6, seed: int = 0) -> OracleReport:
    """Verify that the linearized log-det surrogate upper-bounds ln|Sigma(gamma)|.

    The surrogate is tangent at the expansion point and must dominate the
    log-det everywhere on the nonnegative orthant; both the worst bound
    violation and the tangency gap are reported on the natural log-det scale.
    """
    rng = np.random.default_rng(seed)
    dim = 2 * m * m
    worst = 0.0
    for trial in range(trials):
        w = _random_spd(rng, dim)
        b = rng.standard_normal((dim, n))
        gamma_hat = rng.uniform(0.0, 2.0, n) * (rng.random(n) > 0.2)
        if trial % 2 == 0:
            gamma = rng.uniform(0.0, 2.0, n) * (rng.random(n) > 0.2)
        else:
            # Near the expansion point the gap is quadratic; a wrong tangent
            # slope would drive it linearly negative and trip the slack.
            gamma = np.maximum(gamma_hat + 1e-3 * rng.standard_normal(n), 0.0)

        def logdet_sigma(x):
            return float(np.linalg.slogdet(b @ np.diag(x) @ b.T + w)[1])

        sigma_hat_inv = np.linalg.inv(b @ np.diag(gamma_hat) @ b.T + w)
        weights = np.einsum("ij,jk,ki->i", b.T, sigma_hat_inv, b)
        base = logdet_sigma(gamma_hat)

        def surrogate(x):
            return base + float(weights @ (x - gamma_hat))

        gap = surrogate(gamma) - logdet_sigma(gamma)
        worst = max(worst, max(-gap, 0.0))
        worst = max(worst, abs(surrogate(gamma_hat) - logdet_sigma(gamma_hat)))
    tol = 1e-10
    return OracleReport("majorization", trials, float(worst), tol, worst <= tol)


def _dense_refinement_cost(geometry, grid_deg, gamma, rbar_inv_dense, r_bar) -> float:
    """Slow reference evaluation of the refinement cost with explicit inverses."""
    b = virtual_dictionary(geometry, grid_deg)
    bb = np.concatenate([b.real, b.imag], axis=0)
    h = np.linalg.inv(bb.T @ rbar_inv_dense @ bb + np.diag(1.0 / np.asarray(gamma)))
    t = bb.T @ (rbar_inv_dense @ r_bar)
    return -float(t @ h @ t)


def gradient_fd_check(trials: int = 20, step_deg: float = 1e-4, seed: int = 0,
                      m1: int = 3, m2: int = 3, n_active: int = 5,
                      gradient_fn=None) -> OracleReport:
    """Compare the analytic refinement gradient against central finite differences.

    The reference side differentiates a dense evaluation of the cost
    (explicit 2 M^2 inverse); boundary grid points fall back to a one-sided
    difference.  ``gradient_fn`` exists for fault-injection tests.
    """
    rng = np.random.default_rng(seed)
    geometry = ArrayGeometry.nested(m1, m2)
    m = geometry.num_sensors
    if gradient_fn is None:
        gradient_fn = grid_objective_gradient
    worst = 0.0
    notes: list[str] = []
    checked = 0
    for _ in range(trials):
        y = _crandn(rng, m, 6 * m)
        r_hat = y @ y.conj().T / (6 * m)
        cov = covariance_from_matrix(r_hat, snapshots=200)
        grid = np.sort(rng.uniform(-80.0, 80.0, n_active))
        while np.any(np.diff(grid) < 1.0):
            grid = np.sort(rng.uniform(-80.0, 80.0, n_active))
        gamma = rng.uniform(0.1, 2.0, n_active)
        sigma_n2 = 0.05 * float(np.trace(r_hat).real) / m
        model = build_real_model(cov, sigma_n2, virtual_dictionary(geometry, grid),
                                 geometry=geometry)
        rbar_inv_dense = np.linalg.inv(model.noise.dense())
        analytic = gradient_fn(model, gamma, grid)
        scale = max(float(np.max(np.abs(analytic))), 1.0)
        for k in range(n_active):
            hi = grid.copy()
            lo = grid.copy()
            if grid[k] + step_deg > 90.0:
                lo[k] -= step_deg
                fd = (_dense_refinement_cost(geometry, grid, gamma, rbar_inv_dense, model.r_bar)
                      - _dense_refinement_cost(geometry, lo, gamma, rbar_inv_dense, model.r_bar)) / step_deg
                notes.append(f"one-sided difference at boundary coordinate {k}")
            elif grid[k] - step_deg < -90.0:
                hi[k] += step_deg
                fd = (_dense_refinement_cost(geometry, hi, gamma, rbar_inv_dense, model.r_bar)
                      - _dense_refinement_cost(geometry, grid, gamma, rbar_inv_dense, model.r_bar)) / step_deg
                notes.append(f"one-sided difference at boundary coordinate {k}")
            else:
                hi[k] += step_deg
                lo[k] -= step_deg
                fd = (_dense_refinement_cost(geometry, hi, gamma, rbar_inv_dense, model.r_bar)
                      - _dense_refinement_cost(geometry, lo, gamma, rbar_inv_dense, model.r_bar)) / (2 * step_deg)
            denom = max(abs(analytic[k]), abs(fd), 1e-9 * scale)
            worst = max(worst, abs(analytic[k] - fd) / denom)
            checked += 1
    tol = 1e-5
    return OracleReport("gradient", checked, float(worst), tol, worst <= tol, notes=notes)


def woodbury_equivalence_check(trials: int = 100, m: int = 3, seed: int = 0) -> OracleReport:
    """Direct and low-rank-update Sigma factorizations must agree.

    Alternates between supports smaller and larger than the lifted dimension
    and compares Sigma^{-1} v, the per-column weights and ln|Sigma|.
    """
    rng = np.random.default_rng(seed)
    dim = 2 * m * m
    worst = 0.0
    for trial in range(trials):
        y = _crandn(rng, m, 5 * m)
        r_hat = y @ y.conj().T / (5 * m)
        noise = NoiseCovariance(r_hat, snapshots=int(rng.integers(20, 400)))
        if trial % 2 == 0:
            n_atoms = int(rng.integers(1, dim))
        else:
            n_atoms = int(rng.integers(dim + 1, 2 * dim + 8))
        b = rng.standard_normal((dim, n_atoms))
        gamma = rng.uniform(0.0, 2.0, n_atoms) * (rng.random(n_atoms) > 0.2)
        direct = SigmaFactor(b, gamma, noise, method="direct")
        wood = SigmaFactor(b, gamma, noise, method="woodbury")
        v = rng.standard_normal(dim)
        sv_d = direct.solve(v)
        sv_w = wood.solve(v)
        worst = max(worst, float(np.linalg.norm(sv_d - sv_w) / np.linalg.norm(sv_d)))
        w_d = direct.column_weights(b)
        w_w = wood.column_weights(b)
        worst = max(worst, float(np.max(np.abs(w_d - w_w)) / np.max(np.abs(w_d))))
        worst = max(worst, abs(direct.logdet() - wood.logdet()) / abs(direct.logdet()))
    tol = 1e-8
    return OracleReport("woodbury", trials, float(worst), tol, worst <= tol)


def run_all_oracles(seed: int = 0, trials: int | None = None) -> list[OracleReport]:
    """Run every oracle with its default (or overridden) trial count."""
    return [
        lemma1_check(trials=trials or 100, seed=seed),
        majorization_check(trials=trials or 100, seed=seed),
        gradient_fd_check(trials=trials or 20, seed=seed),
        woodbury_equivalence_check(trials=trials or 100, seed=seed),
    ]
