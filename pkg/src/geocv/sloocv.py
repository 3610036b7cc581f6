"""Spatial leave-one-out cross-validation with a buffer around each held-out point."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import norm

from .formula import ModelSpec, format_formula
from .mesh import FemMatrices, Mesh, make_projector
from .model import (
    Dataset,
    FitConfig,
    FitResult,
    ModelError,
    Priors,
    assemble,
    default_priors,
    fit_model,
    predict,
)

__all__ = [
    "SlooError",
    "SlooConfig",
    "Metrics",
    "SlooResult",
    "default_radius",
    "buffer_partition",
    "score_metrics",
    "run_sloo",
    "intervals_overlap",
]

log = logging.getLogger(__name__)


class SlooError(ValueError):
    pass


@dataclass(frozen=True)
class SlooConfig:
    ss: int
    rad: float
    alpha: float = 0.05
    seed: int = 0
    models: tuple = ()
    ci: str = "normal"
    n_boot: int = 2000

    def validate(self, n: int):
        if not 1 <= self.ss <= n:
            raise SlooError(f"ss must be between 1 and {n}, got {self.ss}")
        if not (self.rad > 0 and math.isfinite(self.rad)):
            raise SlooError(f"rad must be positive, got {self.rad}")
        if not 0 < self.alpha < 1:
            raise SlooError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.models:
            raise SlooError("at least one model is required")
        if self.ci not in ("normal", "bootstrap"):
            raise SlooError(f"unknown CI method {self.ci!r}")


@dataclass(frozen=True)
class Metrics:
    k: int
    mae: float
    mae_lo: float
    mae_hi: float
    rmse: float
    rmse_lo: float
    rmse_hi: float


@dataclass(frozen=True, eq=False)
class SlooResult:
    """Per-run records (arrays indexed by run) and per-model metrics.

    ``pred_mean``/``pred_sd``/``failed`` have shape (runs, models).
    """

    holdout: np.ndarray
    coords: np.ndarray
    observed: np.ndarray
    n_removed: np.ndarray
    n_train: np.ndarray
    pred_mean: np.ndarray
    pred_sd: np.ndarray
    failed: np.ndarray
    labels: tuple
    formulas: tuple
    families: tuple
    metrics: tuple
    rad: float
    alpha: float
    seed: int
    metadata: dict = field(default_factory=dict)

    @property
    def n_runs(self) -> int:
        return len(self.holdout)

    @property
    def n_failed(self) -> np.ndarray:
        return self.failed.sum(axis=0)


def default_radius(range_estimate: float, coords) -> float:
    """``min(range_estimate, max pairwise distance / 4)``."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    if len(coords) < 2:
        raise SlooError("default radius needs at least two points")
    return float(min(range_estimate, pdist(coords).max() / 4.0))


def buffer_partition(coords, holdout_index: int, rad: float) -> np.ndarray:
    """Training indices: every point strictly farther than ``rad`` from the held-out one."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    if not rad > 0:
        raise SlooError(f"rad must be positive, got {rad}")
    d = np.hypot(*(coords - coords[holdout_index]).T)
    keep = d > rad
    keep[holdout_index] = False
    train = np.flatnonzero(keep)
    if len(train) == 0:
        raise SlooError("radius removes all data")
    return train


def score_metrics(
    observed,
    predicted,
    alpha: float = 0.05,
    ci: str = "normal",
    n_boot: int = 2000,
    seed: int = 0,
) -> Metrics:
    """MAE and RMSE with (1 - alpha) confidence intervals.

    Normal intervals use the population sd of the per-run absolute (squared)
    errors; the RMSE interval is the square root of the MSE interval floored at 0.
    """
    e = np.asarray(observed, dtype=float) - np.asarray(predicted, dtype=float)
    k = len(e)
    if k < 2:
        raise SlooError("at least two successful runs are needed to score")
    a = np.abs(e)
    s = e * e
    mae, mse = float(a.mean()), float(s.mean())
    if ci == "bootstrap":
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, k, size=(n_boot, k))
        q = [alpha / 2, 1 - alpha / 2]
        mae_lo, mae_hi = np.quantile(a[idx].mean(axis=1), q)
        rmse_lo, rmse_hi = np.sqrt(np.quantile(s[idx].mean(axis=1), q))
    else:
        z = norm.ppf(1 - alpha / 2)
        hw_a = z * a.std() / math.sqrt(k)
        hw_s = z * s.std() / math.sqrt(k)
        mae_lo, mae_hi = mae - hw_a, mae + hw_a
        rmse_lo, rmse_hi = math.sqrt(max(mse - hw_s, 0.0)), math.sqrt(mse + hw_s)
    return Metrics(k, mae, float(mae_lo), float(mae_hi), math.sqrt(mse), float(rmse_lo), float(rmse_hi))


def intervals_overlap(a: tuple, b: tuple) -> bool:
    return max(a[0], b[0]) <= min(a[1], b[1])


def _holdouts(n: int, ss: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).choice(n, size=ss, replace=False)


def run_sloo(
    dataset: Dataset,
    mesh: Mesh | None,
    fem: FemMatrices | None,
    config: SlooConfig,
    priors: Priors | None = None,
    base_fits: list[FitResult] | None = None,
    threads: int = 1,
    labels: tuple | None = None,
) -> SlooResult:
    """Hold out ``config.ss`` points, drop neighbours within ``config.rad``, refit
    every model on the rest with the same mesh, and predict at the held-out point.

    Refits start their hyperparameter search at the full-data optimum.
    """
    n = dataset.n
    config.validate(n)
    specs: list[ModelSpec] = list(config.models)
    labels = tuple(labels) if labels else tuple(f"model{i + 1}" for i in range(len(specs)))
    proj = make_projector(mesh, dataset.coords) if mesh is not None else None
    assemblies = [assemble(dataset, s, mesh if s.spatial else None, proj if s.spatial else None) for s in specs]
    if priors is None:
        priors = default_priors(mesh, dataset.response) if mesh is not None else None
    base_cfg = FitConfig(priors=priors)
    if base_fits is None:
        base_fits = [fit_model(a, fem, base_cfg) for a in assemblies]
    holdout = _holdouts(n, config.ss, config.seed)
    m = len(specs)

    def one(h: int):
        train = buffer_partition(dataset.coords, h, config.rad)
        means = np.full(m, np.nan)
        sds = np.full(m, np.nan)
        failed = np.zeros(m, dtype=bool)
        x_new = {k: v[[h]] for k, v in dataset.covariates.items()}
        for j, (asm, base) in enumerate(zip(assemblies, base_fits)):
            cfg = FitConfig(
                priors=base.priors,
                theta0=tuple(base.theta_hat) if len(base.theta_hat) else None,
                compute_slices=False,
            )
            try:
                f = fit_model(asm.subset(train), fem, cfg)
                pred = predict(f, mesh, dataset.coords[[h]], x_new)
                means[j], sds[j] = pred.mean[0], pred.sd[0]
            except (ModelError, np.linalg.LinAlgError) as exc:
                log.warning("run with holdout %d failed for %s: %s", h, labels[j], exc)
                failed[j] = True
        return len(train), means, sds, failed

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(one, holdout.tolist()))
    else:
        out = [one(h) for h in holdout.tolist()]

    n_train = np.array([o[0] for o in out], dtype=int)
    pred_mean = np.array([o[1] for o in out]).reshape(len(holdout), m)
    pred_sd = np.array([o[2] for o in out]).reshape(len(holdout), m)
    failed = np.array([o[3] for o in out]).reshape(len(holdout), m)
    observed = dataset.response[holdout]
    metrics = []
    for j in range(m):
        ok = ~failed[:, j]
        metrics.append(
            score_metrics(observed[ok], pred_mean[ok, j], config.alpha, config.ci, config.n_boot, config.seed)
        )
    return SlooResult(
        holdout=holdout,
        coords=dataset.coords[holdout],
        observed=observed,
        n_removed=n - 1 - n_train,
        n_train=n_train,
        pred_mean=pred_mean,
        pred_sd=pred_sd,
        failed=failed,
        labels=labels,
        formulas=tuple(format_formula(s) for s in specs),
        families=tuple(s.family for s in specs),
        metrics=tuple(metrics),
        rad=float(config.rad),
        alpha=float(config.alpha),
        seed=int(config.seed),
        metadata={
            "warm_start": "full-data theta",
            "ci": config.ci,
            "base_theta": ";".join(
                " ".join(repr(float(t)) for t in b.theta_hat) for b in base_fits
            ),
        },
    )
