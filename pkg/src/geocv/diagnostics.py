"""Probability-integral-transform and observed-vs-predicted diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .model import FitResult, ModelError

__all__ = ["CalibrationReport", "pit_values", "obs_pred", "ks_uniform", "calibration_report", "loo_predictive"]

VARIANTS = ("plug-in", "loo")


@dataclass(frozen=True, eq=False)
class CalibrationReport:
    pit: np.ndarray
    variant: str
    ks_statistic: float
    obs_pred: np.ndarray  # columns: observed, predicted mean, predicted sd


def loo_predictive(fit: FitResult, y) -> tuple[np.ndarray, np.ndarray]:
    """Exact leave-one-out predictive mean and sd at fixed hyperparameters.

    Removing observation i from a Gaussian posterior is a rank-one downdate of
    the posterior precision; only the marginal of its linear predictor changes.
    """
    prec = fit.noise_precision
    if prec is None:
        raise ModelError("leave-one-out predictive is available for the normal family only")
    y = np.asarray(y, dtype=float)
    v = fit.lp_sd**2
    mu = fit.lp_mean
    denom = 1.0 - prec * v
    v_loo = v / denom
    mu_loo = (mu - prec * v * y) / denom
    return mu_loo, np.sqrt(v_loo + 1.0 / prec)


def _predictive(fit: FitResult, y, variant: str):
    if variant not in VARIANTS:
        raise ValueError(f"unknown PIT variant {variant!r}; expected one of {VARIANTS}")
    if fit.spec.family != "normal":
        raise ModelError("PIT values are implemented for the normal family only")
    if variant == "loo":
        return loo_predictive(fit, y)
    return fit.fitted_mean, fit.predictive_sd


def pit_values(fit: FitResult, y, variant: str = "plug-in") -> np.ndarray:
    """Predictive CDF at each observation, ``Phi((y - mu) / s)``."""
    y = np.asarray(y, dtype=float)
    mu, s = _predictive(fit, y, variant)
    if len(y) != len(mu):
        raise ValueError(f"expected {len(mu)} responses, got {len(y)}")
    if np.any(~(s > 0)):
        raise ModelError("predictive standard deviations must be positive")
    return norm.cdf((y - mu) / s)


def obs_pred(fit: FitResult, y) -> np.ndarray:
    """(observed, predicted mean, predicted sd) per observation, in dataset order."""
    y = np.asarray(y, dtype=float)
    sd = fit.predictive_sd if fit.spec.family == "normal" else fit.fitted_sd
    return np.column_stack([y, fit.fitted_mean, sd])


def ks_uniform(values) -> float:
    """One-sample Kolmogorov-Smirnov statistic against Uniform(0, 1)."""
    x = np.sort(np.asarray(values, dtype=float).ravel())
    n = len(x)
    if n == 0:
        raise ValueError("empty input")
    if np.any((x < 0) | (x > 1)):
        raise ValueError("values must lie in [0, 1]")
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - x), np.max(x - (i - 1) / n)))


def calibration_report(fit: FitResult, y, variant: str = "plug-in") -> CalibrationReport:
    y = np.asarray(y, dtype=float)
    pit = pit_values(fit, y, variant)
    mu, s = _predictive(fit, y, variant)
    return CalibrationReport(pit, variant, ks_uniform(pit), np.column_stack([y, mu, s]))
