import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from geocv.formula import parse_formula
from geocv.io import RunConfig, data_path, load_dataset
from geocv.mesh import build_mesh, fem_matrices, make_projector
from geocv.model import Dataset, Priors, assemble

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

MEUSE_SPATIAL = "cadmium ~ -1 + y.intercept + elev + dist + om + spatial"
MEUSE_PLAIN = "cadmium ~ -1 + y.intercept + elev + dist + om"


def meuse_config(**kw):
    base = dict(
        formulas=(MEUSE_SPATIAL, MEUSE_PLAIN),
        labels=("spatial", "nonspatial"),
        input=str(data_path("meuse.csv")),
        constant_columns=("y.intercept",),
        missing_covariates="zero",
        seed=199,
    )
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def meuse():
    cfg = meuse_config()
    ds = load_dataset(cfg.input, cfg)
    mesh = build_mesh(ds.coords, 0.2, 0.5, 0.1)
    return ds, mesh, fem_matrices(mesh)


def toy_mesh(seed, k=6, h=1.0, ext=0.4):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(0, 1, (k, 2))
    return pts, build_mesh(pts, h, h, 0.0, extension=ext)


def toy_problem(seed, n=12, formula="y ~ x1 + spatial", family="normal"):
    """Small spatial regression: observations inside the hull of a 6-point mesh."""
    rng = np.random.default_rng(1000 + seed)
    seeds, mesh = toy_mesh(seed)
    w = rng.dirichlet(np.ones(len(seeds)), size=n)
    coords = w @ seeds
    x1 = rng.standard_normal(n)
    if family == "bernoulli":
        y = (rng.uniform(size=n) < 0.5).astype(float)
    else:
        y = 1.0 + 0.5 * x1 + rng.standard_normal(n)
    ds = Dataset(coords, y, {"x1": x1}, "y")
    spec = parse_formula(formula, family)
    fem = fem_matrices(mesh)
    asm = assemble(ds, spec, mesh if spec.spatial else None, make_projector(mesh, coords) if spec.spatial else None)
    priors = Priors(spde_mean=(0.0, 0.5), spde_sd=(2.0, 2.0), noise_mean=0.0, noise_sd=2.0, fixed_prec=0.1)
    return ds, mesh, fem, asm, priors


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for k in sorted(results):
            terminalreporter.write_line(results[k])
