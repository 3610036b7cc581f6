"""Matérn (alpha = 2) SPDE precision matrices and hyperparameter summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .linalg import SPDFactor
from .mesh import FemMatrices

__all__ = [
    "SpdeParams",
    "assemble_precision",
    "spde_summaries",
    "theta_log_prior",
    "params_from_range_sd",
    "spde_weights",
    "spde_logdet",
]


@dataclass(frozen=True)
class SpdeParams:
    """``theta1 = log(tau)``, ``theta2 = log(kappa)``."""

    theta1: float
    theta2: float
    alpha: int = 2

    def __post_init__(self):
        if not (math.isfinite(self.theta1) and math.isfinite(self.theta2)):
            raise ValueError(f"SPDE parameters must be finite, got ({self.theta1}, {self.theta2})")
        if self.alpha != 2:
            raise ValueError("only alpha = 2 is supported")

    @property
    def tau(self) -> float:
        return math.exp(self.theta1)

    @property
    def kappa(self) -> float:
        return math.exp(self.theta2)


def params_from_range_sd(range_: float, sd: float) -> SpdeParams:
    """Inverse of :func:`spde_summaries`."""
    kappa = math.sqrt(8.0) / range_
    tau = 1.0 / (math.sqrt(4.0 * math.pi) * kappa * sd)
    return SpdeParams(math.log(tau), math.log(kappa))


def spde_weights(params: SpdeParams) -> tuple[float, float, float]:
    """Coefficients of (C, G, G C^-1 G) in the precision matrix."""
    try:
        tau, kappa = params.tau, params.kappa
    except OverflowError:
        raise ValueError(f"tau or kappa overflows at theta=({params.theta1}, {params.theta2})") from None
    if not (math.isfinite(tau) and math.isfinite(kappa)) or tau <= 0 or kappa <= 0:
        raise ValueError(f"tau and kappa must be finite and positive, got tau={tau}, kappa={kappa}")
    t2, k2 = tau * tau, kappa * kappa
    w = (t2 * k2 * k2, 2.0 * t2 * k2, t2)
    if not all(math.isfinite(x) and x > 0 for x in w):
        raise ValueError(f"precision coefficients overflow at tau={tau}, kappa={kappa}")
    return w


def assemble_precision(fem: FemMatrices, params: SpdeParams) -> sp.csr_matrix:
    """Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G)."""
    return fem.spde_template.combine(spde_weights(params)).tocsr()


def spde_logdet(fem: FemMatrices, params: SpdeParams) -> float:
    """log det Q via Q = tau^2 K C^-1 K with K = kappa^2 C + G."""
    spde_weights(params)
    k2 = params.kappa**2
    K = fem.K_template.combine((k2, 1.0))
    n = len(fem.c)
    return n * 2.0 * params.theta1 + 2.0 * SPDFactor(K).logdet() - float(np.sum(np.log(fem.c)))


def spde_summaries(params: SpdeParams) -> dict[str, float]:
    """Nominal range ``sqrt(8)/kappa`` and marginal standard deviation."""
    kappa, tau = params.kappa, params.tau
    return {
        "range": math.sqrt(8.0) / kappa,
        "marginal_sd": 1.0 / math.sqrt(4.0 * math.pi * kappa * kappa * tau * tau),
    }


def theta_log_prior(params: SpdeParams, prior_mean, prior_sd) -> float:
    """Independent Gaussian log-densities on (theta1, theta2)."""
    mean = np.asarray(prior_mean, dtype=float)
    sd = np.asarray(prior_sd, dtype=float)
    if mean.shape != (2,) or sd.shape != (2,):
        raise ValueError("prior_mean and prior_sd must be pairs")
    if np.any(~(sd > 0)):
        raise ValueError(f"prior sd must be positive, got {tuple(sd)}")
    x = np.array([params.theta1, params.theta2])
    z = (x - mean) / sd
    return float(np.sum(-0.5 * z * z - np.log(sd) - 0.5 * math.log(2.0 * math.pi)))
