"""Block alternating DOA estimator.

One outer iteration updates, in order: the sparse powers p (closed form plus
nonnegative projection), the hyper-variances gamma (reweighting by
b_k^T Sigma^{-1} b_k), the noise variance (closed form with a positivity
guard), the active support (threshold pruning plus proximity merging), and the
grid-point locations (per-coordinate gradient descent with backtracking that
only ever accepts strict decreases of the refinement cost).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np
import scipy.linalg

from .arrays import ArrayGeometry, virtual_dictionary, dictionary_derivative_matrix
from .covariance import (CovarianceData, NoiseCovariance, NumericalError, RealModel,
                         SigmaFactor, SpdFactor, assemble_sigma, build_real_model,
                         unvectorize)


@dataclass
class SolverConfig:
    """Knobs of the estimator; defaults match the overdetermined benchmark setup."""

    n_grid: int = 200
    prune_threshold: float = 0.05
    threshold_mode: str = "relative"       # "relative": delta * max(p); "absolute": delta
    tol: float = 1e-6                      # stop when ||p_new - p_old||_2 <= tol
    max_outer: int = 160
    max_linesearch: int = 20
    linesearch_shrink: float = 0.5
    initial_step: float = 1.0              # degrees, after inf-norm gradient normalization
    refine_sweeps: int = 4                 # inner gradient sweeps per outer iteration
    grid_bounds: tuple[float, float] = (-90.0, 90.0)
    merge_tol: float = 0.05                # degrees; closer grid points merge, larger p wins
    settle_tol: float = 0.01               # degrees; grid counts as settled below this move size
    sigma_method: str = "auto"             # Sigma factorization: auto | direct | woodbury
    gamma_floor: float = 1e-100            # refinement skips entries at/below this (overflow guard)
    sigma_init: float | None = None        # None: smallest eigenvalue of the sample covariance

    def __post_init__(self):
        if self.n_grid < 2:
            raise ValueError("n_grid must be >= 2")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")
        if not 0.0 < self.linesearch_shrink < 1.0:
            raise ValueError("linesearch_shrink must lie in (0, 1)")
        if self.threshold_mode not in ("relative", "absolute"):
            raise ValueError("threshold_mode must be 'relative' or 'absolute'")
        lo, hi = self.grid_bounds
        if not -90.0 <= lo < hi <= 90.0:
            raise ValueError("grid_bounds must be an increasing pair within [-90, 90]")
        self.grid_bounds = (float(lo), float(hi))

    def to_dict(self) -> dict:
        out = asdict(self)
        out["grid_bounds"] = list(self.grid_bounds)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SolverConfig":
        data = dict(data)
        if "grid_bounds" in data:
            data["grid_bounds"] = tuple(data["grid_bounds"])
        return cls(**data)


@dataclass
class SolverState:
    """Mutable per-iteration state owned by one solve() call."""

    grid_deg: np.ndarray
    gamma: np.ndarray
    p: np.ndarray
    sigma_n2: float
    outer_iter: int = 0
    support_indices: np.ndarray = None
    objective_trace: list = field(default_factory=list)

    def __post_init__(self):
        if self.support_indices is None:
            self.support_indices = np.arange(len(self.grid_deg))


@dataclass
class EstimationOutput:
    """Surviving grid points, their powers and the run diagnostics."""

    doas_deg: np.ndarray
    powers: np.ndarray
    noise_var: float
    iterations: int
    converged: bool
    support_collapsed: bool
    trace: dict
    diagnostics: dict

    def to_dict(self) -> dict:
        return {
            "doas_deg": np.asarray(self.doas_deg).tolist(),
            "powers": np.asarray(self.powers).tolist(),
            "noise_var": float(self.noise_var),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "support_collapsed": bool(self.support_collapsed),
            "trace": self.trace,
            "diagnostics": self.diagnostics,
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


def init_grid(config: SolverConfig) -> np.ndarray:
    """Uniform starting grid over the DOA domain, lower bound included."""
    lo, hi = config.grid_bounds
    return lo + (hi - lo) * np.arange(config.n_grid) / config.n_grid


def init_gamma(model: RealModel) -> np.ndarray:
    """Periodogram-style initialization: gamma_k = |b_k^T r|^2 / ||b_k||^4."""
    norms2 = np.einsum("ij,ij->j", model.b_bar, model.b_bar)
    if np.any(norms2 <= 0):
        raise ValueError("dictionary contains a zero-norm column")
    proj = model.b_bar.T @ model.r_bar
    return (proj * proj) / (norms2 * norms2)


def compute_weights(model: RealModel, sigma: SigmaFactor) -> np.ndarray:
    """Per-column curvature weights w_k = b_k^T Sigma^{-1} b_k (> 0 for SPD Sigma)."""
    w = sigma.column_weights(model.b_bar)
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise NumericalError("nonpositive column weight; Sigma factorization is unreliable",
                             min_weight=float(np.min(w)))
    return w


def update_p(model: RealModel, gamma: np.ndarray, sigma: SigmaFactor,
             return_unclipped: bool = False):
    """Closed-form power update gamma_k b_k^T Sigma^{-1} r, projected onto p >= 0."""
    p_hat = gamma * (model.b_bar.T @ sigma.solve(model.r_bar))
    p = np.maximum(p_hat, 0.0)
    if return_unclipped:
        return p, p_hat
    return p


def update_gamma(p: np.ndarray, w: np.ndarray) -> np.ndarray:
    """gamma_k = p_k / sqrt(w_k)."""
    w = np.asarray(w, dtype=float)
    if np.any(w <= 0):
        raise NumericalError("weights must be positive", min_weight=float(np.min(w)))
    return np.asarray(p, dtype=float) / np.sqrt(w)


def update_noise_variance(cov: CovarianceData, dictionary: np.ndarray, p: np.ndarray,
                          current_sigma_n2: float,
                          noise: NoiseCovariance | None = None) -> float:
    """Closed-form noise refit from the model residual; keeps the old value if nonpositive.

    With K = R^{-T} kron R^{-1} applied through M x M congruences:
    sigma = [Re tr(R^{-1} V1 R^{-1}) - Im tr(R^{-1} V2 R^{-1})] / tr(R^{-2}),
    V1/V2 the matricized real/imaginary residuals Re(r) - Re(B)p, Im(r) - Im(B)p.
    """
    if noise is None:
        noise = NoiseCovariance(cov.r_hat_matrix, cov.snapshots)
    rinv = noise.r_inv
    v1 = cov.r_hat_vec.real - dictionary.real @ p
    v2 = cov.r_hat_vec.imag - dictionary.imag @ p
    t1 = np.trace(rinv @ unvectorize(v1) @ rinv)
    t2 = np.trace(rinv @ unvectorize(v2) @ rinv)
    den = float(np.trace(rinv @ rinv).real)
    sigma_hat = (t1.real - t2.imag) / den
    return float(sigma_hat) if sigma_hat > 0 else float(current_sigma_n2)


def evaluate_objective(model: RealModel, gamma: np.ndarray, sigma_n2: float,
                       method: str = "auto") -> float:
    """Negative log-likelihood ln|Sigma| + r^T Sigma^{-1} r with r rebuilt for sigma_n2."""
    factor = assemble_sigma(model, gamma, method=method)
    r_bar = model.with_sigma(sigma_n2).r_bar
    return factor.logdet() + float(r_bar @ factor.solve(r_bar))


def _lift(z: np.ndarray) -> np.ndarray:
    return np.concatenate([np.asarray(z).real, np.asarray(z).imag], axis=0)


class _GridWorkspace:
    """Incremental evaluation of the refinement cost f(phi) on the active support.

    f(phi) = -u^T (G + Gamma^{-1})^{-1} u with G = B^T Rb^{-1} B and
    u = B^T Rb^{-1} r; replacing a single grid point touches one row/column of
    G and one entry of u, so line-search trials cost O(|support|^2) plus one
    structured Rb^{-1} application.
    """

    def __init__(self, geometry: ArrayGeometry, grid_deg: np.ndarray, gamma: np.ndarray,
                 noise: NoiseCovariance, r_bar: np.ndarray):
        self.geometry = geometry
        self.noise = noise
        self.grid = np.array(grid_deg, dtype=float)
        gamma = np.asarray(gamma, dtype=float)
        self.gamma_inv = 1.0 / gamma
        # ln det(I + G^1/2 G G^1/2) = ln det(G + Gamma^-1) + sum ln gamma,
        # so one factorization serves both the cost solve and the log-det.
        self._sum_log_gamma = float(np.sum(np.log(gamma)))
        self._spatial = (2.0 * np.pi * geometry.position_array()
                         * geometry.d / geometry.wavelength)
        self.q = noise.apply_inverse(r_bar)
        self.b_bar = _lift(virtual_dictionary(geometry, self.grid))
        self.w = noise.apply_inverse(self.b_bar)
        g = self.b_bar.T @ self.w
        self.g = 0.5 * (g + g.T)
        self.u = self.b_bar.T @ self.q

    def _column(self, phi_deg: float) -> np.ndarray:
        a = np.exp(1j * self._spatial * np.sin(phi_deg * np.pi / 180.0))
        col = np.kron(a.conj(), a)
        return np.concatenate([col.real, col.imag])

    def _evaluate(self, g: np.ndarray, u: np.ndarray):
        """(f, log-det term, H u) from a single factorization of G + Gamma^-1."""
        a = g + np.diag(self.gamma_inv)
        factor = SpdFactor(0.5 * (a + a.T))
        z = factor.solve(u)
        return -float(u @ z), factor.logdet + self._sum_log_gamma, z

    def cost(self) -> float:
        return self._evaluate(self.g, self.u)[0]

    def objective_term(self) -> float:
        """f(phi) plus the phi-dependent log-det part of the full objective."""
        f, logdet_term, _ = self._evaluate(self.g, self.u)
        return f + logdet_term

    def gradient(self) -> np.ndarray:
        """d f / d phi_k = 2 z_k d_k^T (Rb^{-1} B z - q), z the current H u."""
        z = self._evaluate(self.g, self.u)[2]
        y = self.w @ z
        d_bar = _lift(dictionary_derivative_matrix(self.geometry, self.grid))
        return 2.0 * z * (d_bar.T @ (y - self.q))

    def try_column(self, k: int, phi_deg: float):
        """Cost and log-det term with grid point k moved to phi_deg, plus a commit payload."""
        b_new = self._column(phi_deg)
        w_new = self.noise.apply_inverse(b_new)
        col = self.b_bar.T @ w_new
        col[k] = b_new @ w_new
        g2 = self.g.copy()
        g2[k, :] = col
        g2[:, k] = col
        u2 = self.u.copy()
        u2[k] = b_new @ self.q
        f_new, logdet_new, _ = self._evaluate(g2, u2)
        return f_new, logdet_new, (b_new, w_new, col, u2[k])

    def commit(self, k: int, phi_deg: float, payload) -> None:
        b_new, w_new, col, u_k = payload
        self.grid[k] = phi_deg
        self.b_bar[:, k] = b_new
        self.w[:, k] = w_new
        self.g[k, :] = col
        self.g[:, k] = col
        self.u[k] = u_k


def grid_objective_gradient(model: RealModel, gamma: np.ndarray, grid_deg: np.ndarray,
                            gamma_floor: float = 1e-100) -> np.ndarray:
    """Gradient of the refinement cost with respect to each grid angle (degrees).

    Entries whose gamma is at or below ``gamma_floor`` are excluded from the
    active system and reported as exactly 0.
    """
    if model.geometry is None:
        raise ValueError("the model does not carry an array geometry")
    gamma = np.asarray(gamma, dtype=float)
    grid_deg = np.asarray(grid_deg, dtype=float)
    grad = np.zeros_like(grid_deg)
    active = gamma > gamma_floor
    if not np.any(active):
        return grad
    ws = _GridWorkspace(model.geometry, grid_deg[active], gamma[active],
                        model.noise, model.r_bar)
    grad[active] = ws.gradient()
    return grad


def refine_grid(state: SolverState, model: RealModel, config: SolverConfig):
    """Sequential grid refinement over the active support.

    Runs up to ``config.refine_sweeps`` inner gradient sweeps; in each sweep
    every coordinate takes one backtracking step along its (inf-norm
    normalized) negative gradient entry.  A move is kept only when it
    strictly decreases the refinement cost f AND does not increase the full
    negative log-likelihood (f controls only the quadratic term; without the
    second condition a fading grid point can trade a small f gain for a
    larger log-det loss).  Returns the new grid and per-pass statistics.
    """
    if model.geometry is None:
        raise ValueError("the model does not carry an array geometry")
    grid = np.array(state.grid_deg, dtype=float)
    gamma = np.asarray(state.gamma, dtype=float)
    active = np.flatnonzero(gamma > config.gamma_floor)
    stats = {"accepted": 0, "cost_before": None, "cost_after": None}
    if active.size == 0:
        return grid, stats
    ws = _GridWorkspace(model.geometry, grid[active], gamma[active],
                        model.noise, model.r_bar)
    f_curr, logdet_curr, _ = ws._evaluate(ws.g, ws.u)
    obj_curr = f_curr + logdet_curr
    stats["cost_before"] = f_curr
    stats["cost_after"] = f_curr
    obj_slack = 1e-12 * max(1.0, abs(obj_curr))
    lo, hi = config.grid_bounds
    for _ in range(config.refine_sweeps):
        grad = ws.gradient()
        g_inf = float(np.max(np.abs(grad)))
        if g_inf == 0.0 or not np.isfinite(g_inf):
            break
        direction = grad / g_inf
        accepted_this_sweep = 0
        for k in range(active.size):
            if direction[k] == 0.0:
                continue
            mu = config.initial_step
            for _ in range(config.max_linesearch):
                phi_new = float(np.clip(ws.grid[k] - mu * direction[k], lo, hi))
                if phi_new != ws.grid[k]:
                    f_new, logdet_new, payload = ws.try_column(k, phi_new)
                    if f_new < f_curr and f_new + logdet_new <= obj_curr + obj_slack:
                        ws.commit(k, phi_new, payload)
                        f_curr = f_new
                        obj_curr = f_new + logdet_new
                        accepted_this_sweep += 1
                        break
                mu *= config.linesearch_shrink
        stats["accepted"] += accepted_this_sweep
        if accepted_this_sweep == 0:
            break
    stats["cost_after"] = f_curr
    grid[active] = ws.grid
    return grid, stats


def _prune_indices(grid_deg: np.ndarray, p: np.ndarray, config: SolverConfig):
    """Indices surviving the power threshold and the proximity merge."""
    p = np.asarray(p, dtype=float)
    collapsed = False
    if config.threshold_mode == "relative":
        cut = config.prune_threshold * float(np.max(p)) if p.size else 0.0
    else:
        cut = config.prune_threshold
    keep = np.flatnonzero(p >= cut)
    if config.threshold_mode == "relative" and p.size and float(np.max(p)) == 0.0:
        keep = np.array([], dtype=int)
    if keep.size == 0:
        collapsed = True
        keep = np.array([int(np.argmax(p))]) if p.size else keep
    # Merge survivors closer than merge_tol, keeping the larger-power member.
    merged: list[int] = []
    for idx in keep:
        if merged and abs(grid_deg[idx] - grid_deg[merged[-1]]) < config.merge_tol:
            if p[idx] > p[merged[-1]]:
                merged[-1] = int(idx)
        else:
            merged.append(int(idx))
    return np.asarray(merged, dtype=int), collapsed


def prune_support(state: SolverState, config: SolverConfig) -> SolverState:
    """Drop grid points whose power falls below the threshold; merge near-duplicates."""
    keep, collapsed = _prune_indices(state.grid_deg, state.p, config)
    return SolverState(
        grid_deg=np.asarray(state.grid_deg)[keep],
        gamma=np.asarray(state.gamma)[keep],
        p=np.asarray(state.p)[keep],
        sigma_n2=state.sigma_n2,
        outer_iter=state.outer_iter,
        support_indices=np.asarray(state.support_indices)[keep],
        objective_trace=state.objective_trace,
    )


def solve(cov: CovarianceData, geometry: ArrayGeometry,
          config: SolverConfig | None = None) -> EstimationOutput:
    """Run the full block alternating estimation on a sample covariance.

    Per outer iteration: update p, update gamma, refit the noise variance
    (rebuilding the lifted observation whenever it changes), prune the grid,
    refine the surviving grid points, rebuild the dictionary, and stop once
    the support is stable and the p-update moved less than ``config.tol``.
    """
    config = config if config is not None else SolverConfig()
    if cov.num_sensors != geometry.num_sensors:
        raise ValueError("covariance size does not match the geometry")
    noise = NoiseCovariance(cov.r_hat_matrix, cov.snapshots)
    sigma_method = config.sigma_method
    if sigma_method == "auto" and noise.diagnostics["regularized"]:
        # Rank-deficient inputs make the low-rank-update weight computation
        # cancel catastrophically; the dense floored path stays positive.
        sigma_method = "direct"
    if config.sigma_init is not None:
        sigma_n2 = float(config.sigma_init)
    else:
        sigma_n2 = max(float(np.linalg.eigvalsh(cov.r_hat_matrix)[0]), 0.0)
    grid = init_grid(config)
    model = build_real_model(cov, sigma_n2, virtual_dictionary(geometry, grid),
                             noise=noise, geometry=geometry)
    gamma = init_gamma(model)
    p = np.zeros_like(gamma)
    support = np.arange(grid.size)
    p_prev: np.ndarray | None = None
    support_prev: np.ndarray | None = None
    converged = False
    collapsed = False
    trace = {
        "objective": [],
        "support_size": [],
        "clip_active": [],
        "prune_event": [],
        "sigma_n2": [],
        "p_delta": [],
        "refine_accepted": [],
        "refine_cost_before": [],
        "refine_cost_after": [],
    }
    iterations = 0
    for it in range(1, config.max_outer + 1):
        iterations = it
        try:
            factor = assemble_sigma(model, gamma, method=sigma_method)
            s_r = factor.solve(model.r_bar)
            # Objective of the state entering this iteration (free: the factor
            # and the solve are needed by the p update anyway).
            trace["objective"].append(factor.logdet() + float(model.r_bar @ s_r))
            p_hat = gamma * (model.b_bar.T @ s_r)
            clip = bool(np.any(p_hat < 0.0))
            p = np.maximum(p_hat, 0.0)
            w = compute_weights(model, factor)
            gamma = update_gamma(p, w)
            sigma_n2_new = update_noise_variance(cov, model.dictionary, p, sigma_n2,
                                                 noise=noise)
            if sigma_n2_new != sigma_n2:
                sigma_n2 = sigma_n2_new
                model = model.with_sigma(sigma_n2)
            keep, collapsed_now = _prune_indices(grid, p, config)
            collapsed = collapsed or collapsed_now
            support_changed = keep.size != grid.size
            grid = grid[keep]
            gamma = gamma[keep]
            p_pruned = p[keep]
            support = support[keep]
            model = model.with_dictionary(model.dictionary[:, keep])
            p = p_pruned
            state = SolverState(grid_deg=grid, gamma=gamma, p=p, sigma_n2=sigma_n2,
                                outer_iter=it, support_indices=support)
            grid_before = grid
            grid, refine_stats = refine_grid(state, model, config)
            moved = float(np.max(np.abs(grid - grid_before))) if grid.size else 0.0
            order = np.argsort(grid, kind="stable")
            if np.any(order != np.arange(grid.size)):
                grid = grid[order]
                gamma = gamma[order]
                p = p[order]
                support = support[order]
            model = model.with_dictionary(virtual_dictionary(geometry, grid))
            # Stopping test: p vectors are comparable only when the support
            # (same points, same order) is unchanged; while the grid still
            # travels beyond settle_tol the state has not settled either, so
            # the test is skipped.
            p_delta = None
            if p_prev is not None and np.array_equal(support, support_prev):
                p_delta = float(np.linalg.norm(p - p_prev))
                if p_delta <= config.tol and moved <= config.settle_tol:
                    converged = True
            p_prev = p
            support_prev = support
            trace["support_size"].append(int(grid.size))
            trace["clip_active"].append(clip)
            trace["prune_event"].append(bool(support_changed))
            trace["sigma_n2"].append(float(sigma_n2))
            trace["p_delta"].append(p_delta)
            trace["refine_accepted"].append(int(refine_stats["accepted"]))
            trace["refine_cost_before"].append(refine_stats["cost_before"])
            trace["refine_cost_after"].append(refine_stats["cost_after"])
        except NumericalError as exc:
            raise NumericalError(f"iteration {it}: {exc}",
                                 iteration=it, **exc.diagnostics) from exc
        if converged:
            break
    # Final-state objective and a last proximity merge so the reported support
    # never contains sub-merge_tol duplicates created by the last refinement.
    factor = assemble_sigma(model, gamma, method=sigma_method)
    trace["objective"].append(factor.logdet() + float(model.r_bar @ factor.solve(model.r_bar)))
    keep, _ = _prune_indices(grid, p, config)
    grid, gamma, p = grid[keep], gamma[keep], p[keep]
    alive = p > 0.0
    return EstimationOutput(
        doas_deg=grid[alive],
        powers=p[alive],
        noise_var=float(sigma_n2),
        iterations=iterations,
        converged=converged,
        support_collapsed=bool(collapsed or not np.any(alive)),
        trace=trace,
        diagnostics={
            "noise_covariance": dict(noise.diagnostics),
            "final_support_size": int(np.sum(alive)),
        },
    )
