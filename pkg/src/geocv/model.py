"""Latent Gaussian models on an SPDE mesh, fitted by empirical Bayes.

The latent vector is ``z = [u; beta]`` where ``u`` are the SPDE weights on the
mesh vertices and ``beta`` the fixed effects. The observation design is
``M = [A | X]``. For the normal family the latent field is integrated out
exactly; for the Bernoulli family (logit link) a Laplace approximation is used.
Hyperparameters are set to the mode of their marginal posterior.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import expit

from .formula import ModelSpec
from .linalg import NotPositiveDefinite, SparseTemplate, SPDFactor
from .mesh import FemMatrices, Mesh, Projector, make_projector
from .spde import (
    SpdeParams,
    assemble_precision,
    params_from_range_sd,
    spde_logdet,
    spde_summaries,
    spde_weights,
    theta_log_prior,
)

__all__ = [
    "ModelError",
    "Dataset",
    "Priors",
    "default_priors",
    "Assembly",
    "FitConfig",
    "FitResult",
    "Prediction",
    "theta_names",
    "design_matrix",
    "assemble",
    "log_marginal_gaussian",
    "log_marginal_gradient",
    "laplace_log_marginal",
    "fit",
    "fit_bernoulli",
    "fit_model",
    "predict",
]

LOG_2PI = math.log(2.0 * math.pi)
THETA_BOUND = 25.0
PENALTY = 1e100
SEPARATION_LIMIT = 30.0


class ModelError(RuntimeError):
    """Fit or assembly failure. ``theta`` carries the offending hyperparameters if any."""

    def __init__(self, message: str, theta=None, best=None):
        self.theta = None if theta is None else np.asarray(theta, dtype=float)
        self.best = best
        super().__init__(message)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Point observations. ``center``/``scale`` record the coordinate standardization."""

    coords: np.ndarray
    response: np.ndarray
    covariates: dict = field(default_factory=dict)
    response_name: str = "y"
    center: np.ndarray | None = None
    scale: np.ndarray | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float).reshape(-1, 2)
        y = np.asarray(self.response, dtype=float).ravel()
        cov = {k: np.asarray(v, dtype=float).ravel() for k, v in self.covariates.items()}
        n = len(coords)
        if n < 1:
            raise ValueError("dataset must have at least one row")
        if len(y) != n or any(len(v) != n for v in cov.values()):
            raise ValueError("all dataset columns must have equal length")
        for name, col in [("coords", coords), (self.response_name, y), *cov.items()]:
            if not np.all(np.isfinite(col)):
                raise ValueError(f"column {name!r} contains non-finite values")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "covariates", cov)

    @property
    def n(self) -> int:
        return len(self.response)

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows, dtype=int)
        return Dataset(
            self.coords[rows],
            self.response[rows],
            {k: v[rows] for k, v in self.covariates.items()},
            self.response_name,
            self.center,
            self.scale,
        )


@dataclass(frozen=True)
class Priors:
    """Gaussian priors on log-scale hyperparameters and the fixed effects.

    ``spde_mean``/``spde_sd`` are ordered ``(log tau, log kappa)``.
    """

    spde_mean: tuple = (0.0, 0.0)
    spde_sd: tuple = (10.0, 10.0)
    noise_mean: float = 0.0
    noise_sd: float = 10.0
    fixed_mean: float = 0.0
    fixed_prec: float = 1e-3

    def __post_init__(self):
        if self.fixed_prec <= 0 or self.noise_sd <= 0 or min(self.spde_sd) <= 0:
            raise ValueError("prior precisions and standard deviations must be positive")


def default_priors(mesh: Mesh, y, fixed_prec: float = 1e-3, sd: float = 10.0) -> Priors:
    """Weakly informative priors scaled to the mesh and the response.

    The SPDE prior is centred on a range of 20% of the data hull diameter and a
    marginal sd equal to the response sd; the noise prior on the response variance.
    """
    hull = mesh.hull
    diam = float(np.max(np.hypot(*(hull[:, None, :] - hull[None, :, :]).transpose(2, 0, 1))))
    y = np.asarray(y, dtype=float)
    s = float(np.std(y)) if len(y) > 1 else 0.0
    if not s > 0:
        s = 1.0
    p0 = params_from_range_sd(0.2 * diam, s)
    return Priors(
        spde_mean=(p0.theta1, p0.theta2),
        spde_sd=(sd, sd),
        noise_mean=-2.0 * math.log(s),
        noise_sd=sd,
        fixed_prec=fixed_prec,
    )


def theta_names(spec: ModelSpec) -> tuple[str, ...]:
    names = ("log_kappa", "log_tau") if spec.spatial else ()
    if spec.family == "normal":
        names += ("log_prec_noise",)
    return names


def hyper_log_prior(theta, spec: ModelSpec, priors: Priors) -> float:
    theta = np.asarray(theta, dtype=float)
    lp = 0.0
    if spec.spatial:
        lp += theta_log_prior(SpdeParams(theta[1], theta[0]), priors.spde_mean, priors.spde_sd)
    if spec.family == "normal":
        z = (theta[-1] - priors.noise_mean) / priors.noise_sd
        lp += -0.5 * z * z - math.log(priors.noise_sd) - 0.5 * LOG_2PI
    return lp


def hyper_prior_mean(spec: ModelSpec, priors: Priors) -> np.ndarray:
    m = [priors.spde_mean[1], priors.spde_mean[0]] if spec.spatial else []
    if spec.family == "normal":
        m.append(priors.noise_mean)
    return np.asarray(m, dtype=float)


def design_matrix(spec: ModelSpec, covariates: dict, n: int) -> np.ndarray:
    cols = []
    if spec.intercept:
        cols.append(np.ones(n))
    for name in spec.covariates:
        if name not in covariates:
            raise ModelError(f"covariate {name!r} not found in data")
        col = np.asarray(covariates[name], dtype=float).ravel()
        if len(col) != n:
            raise ModelError(f"covariate {name!r} has {len(col)} values, expected {n}")
        cols.append(col)
    return np.column_stack(cols) if cols else np.empty((n, 0))


@dataclass(frozen=True, eq=False)
class Assembly:
    """Stacked observation system ``y ~ M z`` with ``M = [A | X]``."""

    M: sp.csr_matrix
    y: np.ndarray
    spec: ModelSpec
    n_spatial: int
    mesh: Mesh | None = None
    rows: np.ndarray | None = None

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def n_fixed(self) -> int:
        return len(self.spec.fixed_names)

    @property
    def spatial_slice(self) -> slice:
        return slice(0, self.n_spatial)

    @property
    def fixed_slice(self) -> slice:
        return slice(self.n_spatial, self.n_spatial + self.n_fixed)

    @cached_property
    def MtM(self) -> sp.csc_matrix:
        return (self.M.T @ self.M).tocsc()

    @cached_property
    def Mty(self) -> np.ndarray:
        return self.M.T @ self.y

    def subset(self, rows) -> "Assembly":
        rows = np.asarray(rows, dtype=int)
        base = np.arange(self.n) if self.rows is None else self.rows
        return Assembly(self.M[rows], self.y[rows], self.spec, self.n_spatial, self.mesh, base[rows])


def assemble(dataset: Dataset, spec: ModelSpec, mesh: Mesh | None = None, projector: Projector | None = None) -> Assembly:
    """Build ``M = [A | X]``: projector columns (spatial models only), then the
    intercept column and covariates in formula order."""
    n = dataset.n
    X = design_matrix(spec, dataset.covariates, n)
    blocks = []
    n_spatial = 0
    if spec.spatial:
        if mesh is None:
            raise ModelError("a spatial model needs a mesh")
        if projector is None:
            projector = make_projector(mesh, dataset.coords)
        if projector.A.shape != (n, mesh.n_vertices):
            raise ModelError("projector does not match the dataset and mesh")
        out = np.flatnonzero(~projector.inside)
        if len(out):
            raise ModelError(f"observation {int(out[0])} lies outside the mesh")
        blocks.append(projector.A)
        n_spatial = mesh.n_vertices
    blocks.append(sp.csr_matrix(X))
    M = sp.hstack(blocks, format="csr")
    if M.shape[1] == 0:
        raise ModelError("model has no latent terms")
    y = dataset.response.copy()
    if spec.family == "bernoulli" and not np.all((y == 0) | (y == 1)):
        raise ModelError("bernoulli responses must be 0 or 1")
    return Assembly(M, y, spec, n_spatial, mesh)


# ---------------------------------------------------------------------------
# hyperparameter-conditional Gaussian algebra
# ---------------------------------------------------------------------------


def _template(asm: Assembly, fem: FemMatrices | None) -> SparseTemplate:
    """Union pattern of the prior precision terms and M^T M, cached per FEM object."""
    cache = asm.__dict__.setdefault("_templates", {})
    key = id(fem)
    if key not in cache:
        V, p = asm.n_spatial, asm.n_fixed

        def pad(X, at_spatial: bool):
            blocks = [X, sp.csr_matrix((p, p))] if at_spatial else [sp.csr_matrix((V, V)), X]
            blocks = [b for b in blocks if b.shape[0]]
            return sp.block_diag(blocks, format="csr")

        mats = []
        if asm.spec.spatial:
            mats += [pad(fem.C, True), pad(fem.G, True), pad(fem.GCiG, True)]
        if p:
            mats.append(pad(sp.identity(p, format="csr"), False))
        mats.append(asm.MtM)
        cache[key] = (fem, SparseTemplate(mats))
    return cache[key][1]


def _prior_weights(asm: Assembly, fem, theta, priors: Priors):
    """Template weights of the prior precision, its log-determinant and the prior mean."""
    p = asm.n_fixed
    w = []
    logdet = 0.0
    if asm.spec.spatial:
        if fem is None:
            raise ModelError("a spatial model needs FEM matrices")
        params = SpdeParams(theta[1], theta[0])
        w += list(spde_weights(params))
        logdet += spde_logdet(fem, params)
    if p:
        w.append(priors.fixed_prec)
        logdet += p * math.log(priors.fixed_prec)
    m0 = np.concatenate([np.zeros(asm.n_spatial), np.full(p, priors.fixed_mean)])
    return w, logdet, m0


def _prior_blocks(asm: Assembly, fem, theta, priors: Priors):
    """Prior precision of z, its log-determinant and the prior mean."""
    w, logdet, m0 = _prior_weights(asm, fem, theta, priors)
    return _template(asm, fem).combine(w + [0.0]), logdet, m0


def _check_theta(theta, spec: ModelSpec) -> np.ndarray:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.shape != (len(theta_names(spec)),):
        raise ModelError(f"expected hyperparameters {theta_names(spec)}, got {theta}", theta)
    if not np.all(np.isfinite(theta)):
        raise ModelError("hyperparameters must be finite", theta)
    return theta


@dataclass
class _GaussianState:
    theta: np.ndarray
    Qp: sp.csc_matrix
    m0: np.ndarray
    Qpost: sp.csc_matrix
    factor: SPDFactor
    b: np.ndarray
    mean: np.ndarray
    prec: float
    log_lik: float


def _gaussian_state(asm: Assembly, fem, theta, priors: Priors) -> _GaussianState:
    if asm.spec.family != "normal":
        raise ModelError("log_marginal_gaussian requires the normal family")
    theta = _check_theta(theta, asm.spec)
    try:
        w, logdet_p, m0 = _prior_weights(asm, fem, theta, priors)
        tpl = _template(asm, fem)
        lam = math.exp(theta[-1])
        Qp = tpl.combine(w + [0.0])
        Qpost = tpl.combine_auto(w + [lam])
        b = lam * asm.Mty + Qp @ m0
        F = SPDFactor(Qpost)
    except (NotPositiveDefinite, ValueError, OverflowError) as exc:
        raise ModelError(f"factorization failed at theta={theta.tolist()}: {exc}", theta) from exc
    mu = F.solve(b)
    n = asm.n
    ll = (
        -0.5 * n * LOG_2PI
        + 0.5 * logdet_p
        + 0.5 * n * theta[-1]
        - 0.5 * F.logdet()
        - 0.5 * (lam * float(asm.y @ asm.y) + float(m0 @ (Qp @ m0)) - float(b @ mu))
    )
    return _GaussianState(theta, Qp, m0, Qpost, F, b, mu, lam, float(ll))


def log_marginal_gaussian(asm: Assembly, fem, theta, priors: Priors) -> float:
    """``log p(y | theta) + log p(theta)`` with the latent field integrated out."""
    st = _gaussian_state(asm, fem, theta, priors)
    return st.log_lik + hyper_log_prior(st.theta, asm.spec, priors)


def log_marginal_gradient(asm: Assembly, fem, theta, priors: Priors) -> np.ndarray:
    """Analytic gradient of :func:`log_marginal_gaussian` (dense traces)."""
    st = _gaussian_state(asm, fem, theta, priors)
    spec = asm.spec
    theta = st.theta
    n = asm.n
    Sigma_post = st.factor.solve(np.eye(st.Qpost.shape[0]))
    mu, m0, lam = st.mean, st.m0, st.prec
    d = mu - m0
    grad = []

    if spec.spatial:
        kappa, tau = math.exp(theta[0]), math.exp(theta[1])
        k2 = kappa * kappa
        V = asm.n_spatial
        Sigma_p = np.linalg.inv(st.Qp.toarray())[:V, :V]
        dk = (tau * tau) * (4.0 * k2 * k2 * fem.C + 4.0 * k2 * fem.G)
        dt = 2.0 * assemble_precision(fem, SpdeParams(theta[1], theta[0]))
        for dQs in (dk, dt):
            # only the spatial block of the prior precision depends on (kappa, tau)
            dQs = dQs.toarray()
            du = d[:V]
            grad.append(
                0.5 * np.sum(Sigma_p * dQs) - 0.5 * np.sum(Sigma_post[:V, :V] * dQs) - 0.5 * du @ dQs @ du
            )
    # log precision of the noise
    MtM = asm.MtM.toarray()
    r = asm.y - asm.M @ mu
    g = 0.5 * n - 0.5 * lam * np.sum(Sigma_post * MtM) - 0.5 * lam * float(r @ r)
    grad.append(g)
    grad = np.asarray(grad)
    # hyperprior
    h = 1e-7
    prior_grad = np.array(
        [
            (hyper_log_prior(theta + h * e, spec, priors) - hyper_log_prior(theta - h * e, spec, priors)) / (2 * h)
            for e in np.eye(len(theta))
        ]
    )
    return grad + prior_grad


# ---------------------------------------------------------------------------
# Bernoulli / Laplace
# ---------------------------------------------------------------------------


@dataclass
class _LaplaceState:
    theta: np.ndarray
    mode: np.ndarray
    factor: SPDFactor
    log_lik: float
    iterations: int


def _bernoulli_loglik(y, eta):
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _laplace_state(asm: Assembly, fem, theta, priors: Priors, z0=None, tol=1e-8, max_iter=50) -> _LaplaceState:
    theta = _check_theta(theta, asm.spec)
    try:
        Qp, logdet_p, m0 = _prior_blocks(asm, fem, theta, priors)
    except (NotPositiveDefinite, ValueError, OverflowError) as exc:
        raise ModelError(f"prior factorization failed at theta={theta.tolist()}: {exc}", theta) from exc
    M, y = asm.M, asm.y
    z = m0.copy() if z0 is None else np.array(z0, dtype=float)

    def objective(z):
        d = z - m0
        return _bernoulli_loglik(y, M @ z) - 0.5 * float(d @ (Qp @ d))

    f = objective(z)
    it = 0
    while True:
        eta = M @ z
        p = expit(eta)
        grad = M.T @ (y - p) - Qp @ (z - m0)
        W = p * (1.0 - p)
        H = (Qp + M.T @ sp.diags(W) @ M).tocsc()
        try:
            F = SPDFactor(H)
        except NotPositiveDefinite as exc:
            raise ModelError(f"Newton Hessian not positive definite at theta={theta.tolist()}", theta) from exc
        step = F.solve(grad)
        # a small gradient alone is not enough when the likelihood is nearly flat
        # (separation): the Newton step must be small as well
        if np.max(np.abs(grad), initial=0.0) < tol and np.max(np.abs(step), initial=0.0) < 1e-6 * (
            1.0 + np.max(np.abs(z), initial=0.0)
        ):
            break
        if it >= max_iter:
            raise ModelError(
                f"Newton iterations did not converge in {max_iter} steps at theta={theta.tolist()}", theta
            )
        t = 1.0
        for _ in range(40):
            z_new = z + t * step
            f_new = objective(z_new)
            if np.isfinite(f_new) and f_new >= f - 1e-12 * max(1.0, abs(f)):
                break
            t *= 0.5
        else:
            raise ModelError(f"Newton line search failed at theta={theta.tolist()}", theta)
        it += 1
        if np.max(np.abs(z_new - z)) <= 1e-14 * (1.0 + np.max(np.abs(z))):
            z = z_new
            break
        z, f = z_new, f_new
    d = z - m0
    lap = _bernoulli_loglik(y, M @ z) - 0.5 * float(d @ (Qp @ d)) + 0.5 * logdet_p - 0.5 * F.logdet()
    return _LaplaceState(theta, z, F, float(lap), it)


def laplace_log_marginal(asm: Assembly, fem, theta, priors: Priors) -> float:
    """Laplace approximation of ``log p(y | theta)`` (without the hyperprior)."""
    return _laplace_state(asm, fem, theta, priors).log_lik


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitConfig:
    priors: Priors | None = None
    max_iters: int = 500
    fatol: float = 1e-6
    xatol: float = 1e-4
    n_slice: int = 41
    slice_width: float = 3.0
    compute_slices: bool = True
    theta0: tuple | None = None
    theta: tuple | None = None
    newton_tol: float = 1e-8
    newton_max_iter: int = 50


@dataclass(frozen=True, eq=False)
class FitResult:
    spec: ModelSpec
    theta_names: tuple
    theta_hat: np.ndarray
    beta_mean: np.ndarray
    beta_sd: np.ndarray
    u_mean: np.ndarray
    u_sd: np.ndarray
    lp_mean: np.ndarray
    lp_sd: np.ndarray
    fitted_mean: np.ndarray
    fitted_sd: np.ndarray
    log_marginal: float
    hyper_slices: dict
    priors: Priors
    n_evals: int = 0
    warnings: tuple = ()
    metadata: dict = field(default_factory=dict)
    # in-memory posterior (latent mean vector and precision factor); absent after reload
    latent_mean: np.ndarray | None = None
    factor: SPDFactor | None = None

    @property
    def fixed_names(self) -> tuple:
        return self.spec.fixed_names

    @property
    def theta(self) -> dict:
        return dict(zip(self.theta_names, map(float, self.theta_hat)))

    @property
    def noise_precision(self) -> float | None:
        t = self.theta
        return math.exp(t["log_prec_noise"]) if "log_prec_noise" in t else None

    @property
    def noise_sd(self) -> float | None:
        prec = self.noise_precision
        return None if prec is None else 1.0 / math.sqrt(prec)

    @property
    def spde_params(self) -> SpdeParams | None:
        t = self.theta
        if "log_kappa" not in t:
            return None
        return SpdeParams(t["log_tau"], t["log_kappa"])

    def summaries(self) -> dict:
        p = self.spde_params
        return {} if p is None else spde_summaries(p)

    @property
    def predictive_sd(self) -> np.ndarray:
        """Posterior predictive sd of each training observation (normal family)."""
        prec = self.noise_precision
        if prec is None:
            raise ModelError("predictive sd with noise is defined for the normal family only")
        return np.sqrt(self.lp_sd**2 + 1.0 / prec)


def _summaries(asm: Assembly, mean: np.ndarray, factor: SPDFactor):
    sd = np.sqrt(np.maximum(factor.inv_diag(), 0.0))
    lp_mean = asm.M @ mean
    lp_sd = np.sqrt(np.maximum(factor.quad_inv(asm.M), 0.0))
    return sd, lp_mean, lp_sd


def _optimize(objective, starts, cfg: FitConfig, theta_names_):
    """Maximize ``objective`` with Nelder-Mead from each start, then polish the best."""
    n_evals = 0

    def neg(t):
        nonlocal n_evals
        n_evals += 1
        if np.any(np.abs(t) > THETA_BOUND):
            return PENALTY
        try:
            v = objective(t)
        except ModelError:
            return PENALTY
        return -v if np.isfinite(v) else PENALTY

    def run(x0, step):
        x0 = np.asarray(x0, dtype=float)
        simplex = np.vstack([x0, x0 + step * np.eye(len(x0))])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return minimize(
                neg,
                x0,
                method="Nelder-Mead",
                options=dict(
                    initial_simplex=simplex,
                    fatol=cfg.fatol,
                    xatol=cfg.xatol,
                    maxfev=cfg.max_iters,
                    maxiter=cfg.max_iters,
                ),
            )

    results = [run(s, 0.5) for s in starts]
    best = min(results, key=lambda r: r.fun)
    polish = run(best.x, 0.1)
    if polish.fun <= best.fun:
        best = polish
    if not polish.success or best.fun >= PENALTY:
        raise ModelError(
            f"hyperparameter optimization did not converge after {cfg.max_iters} evaluations; "
            f"best so far {dict(zip(theta_names_, best.x.tolist()))} with objective {-best.fun}",
            best.x,
            best=-best.fun,
        )
    return best.x, -best.fun, n_evals


def _hyper_slices(objective, theta_hat, names, cfg: FitConfig) -> dict:
    f0 = objective(theta_hat)
    out = {}
    for i, name in enumerate(names):
        e = np.zeros(len(theta_hat))
        e[i] = 1.0
        h = 1e-2
        try:
            curv = (objective(theta_hat + h * e) - 2.0 * f0 + objective(theta_hat - h * e)) / (h * h)
        except ModelError:
            curv = float("nan")
        sd = 1.0 / math.sqrt(-curv) if curv < 0 else 1.0
        grid = theta_hat[i] + sd * np.linspace(-cfg.slice_width, cfg.slice_width, cfg.n_slice)
        vals = []
        for g in grid:
            t = theta_hat.copy()
            t[i] = g
            try:
                vals.append(objective(t))
            except ModelError:
                vals.append(-np.inf)
        out[name] = np.column_stack([grid, vals])
    return out


def _starts(spec: ModelSpec, priors: Priors, cfg: FitConfig):
    if cfg.theta0 is not None:
        return [np.asarray(cfg.theta0, dtype=float)]
    m = hyper_prior_mean(spec, priors)
    disp = m + np.where(np.arange(len(m)) % 2 == 0, 1.0, -1.0)
    return [m, disp]


def _resolve_priors(asm: Assembly, cfg: FitConfig) -> Priors:
    if cfg.priors is not None:
        return cfg.priors
    if asm.mesh is None:
        s = float(np.std(asm.y)) if asm.n > 1 else 1.0
        s = s if s > 0 else 1.0
        return Priors(noise_mean=-2.0 * math.log(s))
    return default_priors(asm.mesh, asm.y)


def fit(asm: Assembly, fem: FemMatrices | None = None, config: FitConfig | None = None) -> FitResult:
    """Empirical-Bayes fit of a normal-family model."""
    cfg = config or FitConfig()
    spec = asm.spec
    if spec.family != "normal":
        raise ModelError("fit handles the normal family; use fit_bernoulli")
    priors = _resolve_priors(asm, cfg)
    names = theta_names(spec)

    def objective(t):
        return log_marginal_gaussian(asm, fem, t, priors)

    if cfg.theta is not None:
        theta_hat, n_evals = np.asarray(cfg.theta, dtype=float), 0
        theta_hat = _check_theta(theta_hat, spec)
        source = "fixed"
    else:
        theta_hat, _, n_evals = _optimize(objective, _starts(spec, priors, cfg), cfg, names)
        source = "warm-start" if cfg.theta0 is not None else "multi-start"
    st = _gaussian_state(asm, fem, theta_hat, priors)
    log_marginal = st.log_lik + hyper_log_prior(theta_hat, spec, priors)
    sd, lp_mean, lp_sd = _summaries(asm, st.mean, st.factor)
    slices = _hyper_slices(objective, theta_hat, names, cfg) if cfg.compute_slices else {}
    return FitResult(
        spec=spec,
        theta_names=names,
        theta_hat=theta_hat,
        beta_mean=st.mean[asm.fixed_slice].copy(),
        beta_sd=sd[asm.fixed_slice].copy(),
        u_mean=st.mean[asm.spatial_slice].copy(),
        u_sd=sd[asm.spatial_slice].copy(),
        lp_mean=lp_mean,
        lp_sd=lp_sd,
        fitted_mean=lp_mean.copy(),
        fitted_sd=lp_sd.copy(),
        log_marginal=float(log_marginal),
        hyper_slices=slices,
        priors=priors,
        n_evals=n_evals,
        metadata={"theta_source": source, "hyper_slices": "conditional at mode", "n_obs": asm.n},
        latent_mean=st.mean,
        factor=st.factor,
    )


def _logit_normal_mean(mu, var):
    return expit(mu / np.sqrt(1.0 + math.pi * var / 8.0))


def fit_bernoulli(asm: Assembly, fem: FemMatrices | None = None, config: FitConfig | None = None) -> FitResult:
    """Empirical-Bayes fit of a logit-link Bernoulli model via Laplace approximation."""
    cfg = config or FitConfig()
    spec = asm.spec
    if spec.family != "bernoulli":
        raise ModelError("fit_bernoulli requires the bernoulli family")
    priors = _resolve_priors(asm, cfg)
    names = theta_names(spec)
    cache = {"z": None}

    def state(t):
        st = _laplace_state(asm, fem, t, priors, z0=cache["z"], tol=cfg.newton_tol, max_iter=cfg.newton_max_iter)
        cache["z"] = st.mode
        return st

    def objective(t):
        st = state(t)
        return st.log_lik + hyper_log_prior(st.theta, spec, priors)

    if not names:
        theta_hat, n_evals, source = np.empty(0), 0, "none"
    elif cfg.theta is not None:
        theta_hat, n_evals, source = _check_theta(cfg.theta, spec), 0, "fixed"
    else:
        theta_hat, _, n_evals = _optimize(objective, _starts(spec, priors, cfg), cfg, names)
        source = "warm-start" if cfg.theta0 is not None else "multi-start"
    cache["z"] = None
    st = state(theta_hat)
    log_marginal = st.log_lik + (hyper_log_prior(theta_hat, spec, priors) if names else 0.0)
    sd, lp_mean, lp_sd = _summaries(asm, st.mode, st.factor)
    fitted = _logit_normal_mean(lp_mean, lp_sd**2)
    fitted_sd = fitted * (1.0 - fitted) * lp_sd
    warn = ()
    if np.max(np.abs(st.mode), initial=0.0) > SEPARATION_LIMIT or np.max(np.abs(lp_mean), initial=0.0) > SEPARATION_LIMIT:
        warn = ("complete separation suspected: latent mode exceeds 30 in magnitude",)
    slices = _hyper_slices(objective, theta_hat, names, cfg) if (cfg.compute_slices and names) else {}
    return FitResult(
        spec=spec,
        theta_names=names,
        theta_hat=theta_hat,
        beta_mean=st.mode[asm.fixed_slice].copy(),
        beta_sd=sd[asm.fixed_slice].copy(),
        u_mean=st.mode[asm.spatial_slice].copy(),
        u_sd=sd[asm.spatial_slice].copy(),
        lp_mean=lp_mean,
        lp_sd=lp_sd,
        fitted_mean=fitted,
        fitted_sd=fitted_sd,
        log_marginal=float(log_marginal),
        hyper_slices=slices,
        priors=priors,
        n_evals=n_evals,
        warnings=warn,
        metadata={"theta_source": source, "hyper_slices": "conditional at mode", "n_obs": asm.n},
        latent_mean=st.mode,
        factor=st.factor,
    )


def fit_model(asm: Assembly, fem: FemMatrices | None = None, config: FitConfig | None = None) -> FitResult:
    """Dispatch on the family of ``asm.spec``."""
    if asm.spec.family == "bernoulli":
        return fit_bernoulli(asm, fem, config)
    return fit(asm, fem, config)


@dataclass(frozen=True)
class Prediction:
    mean: np.ndarray
    sd: np.ndarray
    lp_mean: np.ndarray
    lp_sd: np.ndarray


def predict(fit_: FitResult, mesh: Mesh | None, new_coords, new_covariates: dict | None = None) -> Prediction:
    """Posterior predictive mean and sd at new locations.

    Normal family: sd includes the observation noise. Bernoulli: ``mean`` is the
    logit-normal approximate probability and ``sd`` the Bernoulli sd at that
    probability.
    """
    if fit_.factor is None or fit_.latent_mean is None:
        raise ModelError("prediction needs an in-memory fit (the posterior factor is not serialized)")
    spec = fit_.spec
    coords = np.asarray(new_coords, dtype=float).reshape(-1, 2)
    k = len(coords)
    X = design_matrix(spec, new_covariates or {}, k)
    blocks = []
    if spec.spatial:
        if mesh is None:
            raise ModelError("a spatial model needs the mesh for prediction")
        proj = make_projector(mesh, coords)
        out = np.flatnonzero(~proj.inside)
        if len(out):
            raise ModelError(f"location {coords[out[0]].tolist()} lies outside the mesh")
        blocks.append(proj.A)
    blocks.append(sp.csr_matrix(X))
    R = sp.hstack(blocks, format="csr")
    lp_mean = R @ fit_.latent_mean
    lp_var = np.maximum(fit_.factor.quad_inv(R), 0.0)
    if spec.family == "normal":
        sd = np.sqrt(lp_var + 1.0 / fit_.noise_precision)
        return Prediction(lp_mean, sd, lp_mean, np.sqrt(lp_var))
    prob = _logit_normal_mean(lp_mean, lp_var)
    return Prediction(prob, np.sqrt(prob * (1.0 - prob)), lp_mean, np.sqrt(lp_var))


def refit_config(cfg: FitConfig, **changes) -> FitConfig:
    return replace(cfg, **changes)
