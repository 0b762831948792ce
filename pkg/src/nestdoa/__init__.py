"""Off-grid DOA estimation with two-level nested arrays via block alternating optimization."""

__version__ = "0.1.0"

from .arrays import (ArrayGeometry, Scenario, SnapshotMatrix, dictionary_column_derivative,
                     exact_covariance, load_snapshots, nested_positions, save_snapshots,
                     simulate_snapshots, steering_derivative, steering_vector,
                     virtual_dictionary)
from .covariance import (CovarianceData, NoiseCovariance, NumericalError, RealModel,
                         SigmaFactor, apply_noise_covariance_inverse, assemble_sigma,
                         build_real_model, covariance_from_matrix, sample_covariance,
                         vectorize_covariance)
from .harness import (ExperimentResult, ExperimentSpec, export_results, match_estimates,
                      probability_of_resolution, rmse, run_monte_carlo, snr_to_noise_var)
from .oracles import (OracleReport, gradient_fd_check, lemma1_check, majorization_check,
                      run_all_oracles, woodbury_equivalence_check)
from .solver import (EstimationOutput, SolverConfig, SolverState, compute_weights,
                     evaluate_objective, grid_objective_gradient, init_gamma, init_grid,
                     prune_support, refine_grid, solve, update_gamma, update_noise_variance,
                     update_p)

__all__ = [
    "ArrayGeometry", "Scenario", "SnapshotMatrix", "nested_positions", "steering_vector",
    "steering_derivative", "virtual_dictionary", "dictionary_column_derivative",
    "simulate_snapshots", "exact_covariance", "save_snapshots", "load_snapshots",
    "CovarianceData", "NoiseCovariance", "NumericalError", "RealModel", "SigmaFactor",
    "sample_covariance", "covariance_from_matrix", "vectorize_covariance",
    "apply_noise_covariance_inverse", "build_real_model", "assemble_sigma",
    "SolverConfig", "SolverState", "EstimationOutput", "init_grid", "init_gamma",
    "compute_weights", "update_p", "update_gamma", "update_noise_variance",
    "evaluate_objective", "grid_objective_gradient", "refine_grid", "prune_support",
    "solve", "OracleReport", "lemma1_check", "majorization_check", "gradient_fd_check",
    "woodbury_equivalence_check", "run_all_oracles", "ExperimentSpec", "ExperimentResult",
    "snr_to_noise_var", "match_estimates", "rmse", "probability_of_resolution",
    "run_monte_carlo", "export_results", "__version__",
]
