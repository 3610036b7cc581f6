"""SPDE/Matérn spatial regression on triangular meshes with buffered spatial
leave-one-out cross-validation."""

__version__ = "0.1.0"

from .diagnostics import CalibrationReport, calibration_report, ks_uniform, loo_predictive, obs_pred, pit_values
from .formula import FormulaError, ModelSpec, format_formula, parse_formula
from .mesh import FemMatrices, Mesh, MeshError, Projector, build_mesh, dedup_points, fem_matrices, make_projector
from .model import (
    Dataset,
    FitConfig,
    FitResult,
    ModelError,
    Priors,
    assemble,
    default_priors,
    fit,
    fit_bernoulli,
    fit_model,
    laplace_log_marginal,
    log_marginal_gaussian,
    log_marginal_gradient,
    predict,
)
from .sloocv import Metrics, SlooConfig, SlooError, SlooResult, buffer_partition, default_radius, run_sloo, score_metrics
from .spde import SpdeParams, assemble_precision, params_from_range_sd, spde_summaries, theta_log_prior

__all__ = [
    "CalibrationReport",
    "calibration_report",
    "ks_uniform",
    "loo_predictive",
    "obs_pred",
    "pit_values",
    "FormulaError",
    "ModelSpec",
    "format_formula",
    "parse_formula",
    "FemMatrices",
    "Mesh",
    "MeshError",
    "Projector",
    "build_mesh",
    "dedup_points",
    "fem_matrices",
    "make_projector",
    "Dataset",
    "FitConfig",
    "FitResult",
    "ModelError",
    "Priors",
    "assemble",
    "default_priors",
    "fit",
    "fit_bernoulli",
    "fit_model",
    "laplace_log_marginal",
    "log_marginal_gaussian",
    "log_marginal_gradient",
    "predict",
    "Metrics",
    "SlooConfig",
    "SlooError",
    "SlooResult",
    "buffer_partition",
    "default_radius",
    "run_sloo",
    "score_metrics",
    "SpdeParams",
    "assemble_precision",
    "params_from_range_sd",
    "spde_summaries",
    "theta_log_prior",
]
