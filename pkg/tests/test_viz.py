import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from conftest import MEUSE_PLAIN, MEUSE_SPATIAL, toy_problem
from hypothesis import given
from hypothesis import strategies as st

from geocv.diagnostics import CalibrationReport, calibration_report
from geocv.formula import parse_formula
from geocv.mesh import Mesh, make_projector
from geocv.model import FitConfig, assemble, fit
from geocv.sloocv import SlooConfig, run_sloo
from geocv.viz import (
    format_metric,
    pit_bins,
    plot_field,
    plot_mesh,
    plot_model_summaries,
    plot_residuals,
    plot_sloo,
    project_field,
)

SVG = "{http://www.w3.org/2000/svg}"


def parse(svg):
    return ET.fromstring(svg.encode("utf-8"))


def by_class(root, cls):
    return [e for e in root.iter() if cls in e.get("class", "").split()]


def affine(root):
    g = next(e for e in root.iter(SVG + "g") if e.get("class") == "plot-area")
    return [float(v) for v in g.get("data-affine").split()]


@pytest.fixture(scope="module")
def meuse_fits(meuse):
    ds, mesh, fem = meuse
    cfg = FitConfig()
    full = fit(assemble(ds, parse_formula(MEUSE_SPATIAL), mesh), fem, cfg)
    plain = fit(assemble(ds, parse_formula(MEUSE_PLAIN)), None, cfg)
    return full, plain


@pytest.fixture(scope="module")
def toy_fit():
    ds, mesh, fem, asm, pr = toy_problem(3, n=15)
    return ds, mesh, fit(asm, fem, FitConfig(priors=pr, theta=(0.3, -0.2, 0.4), compute_slices=False))


@pytest.fixture(scope="module")
def toy_sloo():
    ds, mesh, fem, asm, pr = toy_problem(4, n=30)
    specs = (parse_formula("y ~ x1"), parse_formula("y ~ 1"))
    res = run_sloo(ds, None, None, SlooConfig(ss=20, rad=0.05, seed=2, models=specs), priors=pr)
    return ds, res


class TestSummaries:
    def test_full_model_layout(self, meuse_fits):
        b = plot_model_summaries(meuse_fits[0])
        names = b.panel_names()
        assert len([n for n in names if n.startswith("fixed_")]) == 4
        assert len([n for n in names if n.startswith("hyper_")]) == 3
        assert names.count("random_spatial") == 1
        assert {"predictor_linear", "predictor_fitted"} <= set(names)
        assert len(names) == 10
        assert len(set(b.documents)) == len(b.documents)

    def test_nonspatial(self, meuse_fits):
        names = plot_model_summaries(meuse_fits[1]).panel_names()
        assert "random_spatial" not in names
        assert not any(n in names for n in ("hyper_log_kappa", "hyper_log_tau"))
        assert "hyper_log_prec_noise" in names

    def test_which_fixed(self, meuse_fits):
        names = plot_model_summaries(meuse_fits[0], which={"fixed"}).panel_names()
        assert len(names) == 4 and all(n.startswith("fixed_") for n in names)

    def test_unknown_panel(self, meuse_fits):
        with pytest.raises(ValueError, match="bogus"):
            plot_model_summaries(meuse_fits[0], which=["fixed", "bogus"])

    def test_prior_and_posterior_curves(self, meuse_fits):
        root = parse(plot_model_summaries(meuse_fits[0], which=["fixed"]).svg("fixed_elev"))
        series = [e.get("data-series") for e in root.iter(SVG + "polyline")]
        assert {"prior", "posterior", "lower 95%", "upper 95%"} <= set(series)

    def test_fixed_interval_matches_summary(self, meuse_fits):
        f = meuse_fits[0]
        rows = plot_model_summaries(f, which=["fixed"]).csv("fixed_elev").splitlines()
        grid = np.array([float(r.split(",")[0]) for r in rows[1:]])
        i = f.fixed_names.index("elev")
        assert grid[len(grid) // 2] == pytest.approx(f.beta_mean[i], abs=1e-12)


class TestResiduals:
    def test_ten_bins(self):
        assert len(pit_bins(0.1)) == 11
        report = CalibrationReport(np.linspace(0, 1, 7), "plug-in", 0.1, np.zeros((7, 3)))
        root = parse(plot_residuals(report, 0.1).svg("pit"))
        assert len(by_class(root, "data")) - len(by_class(root, "reference")) == 10

    def test_midpoints_equal_height(self):
        pit = (np.arange(40) % 10 + 0.5) / 10
        report = CalibrationReport(pit, "plug-in", 0.0, np.zeros((40, 3)))
        rows = plot_residuals(report, 0.1).csv("pit").splitlines()[1:]
        assert [int(r.split(",")[2]) for r in rows] == [4] * 10

    @pytest.mark.parametrize("bw", [0.0, -0.1, 1.5, float("nan")])
    def test_bad_binwidth(self, bw):
        report = CalibrationReport(np.array([0.5]), "plug-in", 0.0, np.zeros((1, 3)))
        with pytest.raises(ValueError):
            plot_residuals(report, bw)

    def test_scatter_count(self, toy_fit):
        ds, _, f = toy_fit
        root = parse(plot_residuals(calibration_report(f, ds.response)).svg("obs_pred"))
        assert len([e for e in root.iter(SVG + "circle")]) == ds.n
        assert len(by_class(root, "reference")) == 1


class TestMeshAndField:
    def test_mesh_plot(self, toy_fit):
        ds, mesh, _ = toy_fit
        root = parse(plot_mesh(mesh, ds.coords).svg("mesh"))
        edge = by_class(root, "edge")[0]
        assert edge.get("d").count("M") == len(mesh.edges)
        assert len(list(root.iter(SVG + "circle"))) == ds.n

    def test_constant_field(self, toy_fit):
        _, mesh, f = toy_fit
        r = project_field(f, mesh, 15, 12, values=np.full(mesh.n_vertices, 2.5))
        inside = np.isfinite(r.values)
        assert inside.any()
        np.testing.assert_allclose(r.values[inside], 2.5, rtol=1e-14)

    def test_vertex_cell(self, toy_fit):
        # a square split around its centre: a 3 x 3 grid hits every vertex
        v = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5]])
        tri = np.array([[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
        mesh = Mesh(v, tri, np.r_[np.ones(4, bool), False], v[:4].copy(), 5)
        u = np.array([1.0, -2.0, 3.5, 0.25, 7.0])
        r = project_field(toy_fit[2], mesh, 3, 3, values=u)
        for k, (x, y) in enumerate(v):
            j, i = int(round(2 * y)), int(round(2 * x))
            assert r.values[j, i] == pytest.approx(u[k], abs=1e-12)

    def test_raster_vs_projector(self, toy_fit):
        _, mesh, f = toy_fit
        r = project_field(f, mesh, 20, 20)
        for j, y in enumerate(r.y):
            for i, x in enumerate(r.x):
                p = make_projector(mesh, [[x, y]])
                if p.inside[0]:
                    assert r.values[j, i] == pytest.approx((p.A @ f.u_mean)[0], abs=1e-12)
                else:
                    assert np.isnan(r.values[j, i])

    @pytest.mark.parametrize("nx,ny", [(1, 5), (5, 1), (0, 0)])
    def test_degenerate_grid(self, toy_fit, nx, ny):
        _, mesh, f = toy_fit
        with pytest.raises(ValueError):
            project_field(f, mesh, nx, ny)

    def test_field_plot(self, toy_fit):
        ds, mesh, f = toy_fit
        r = project_field(f, mesh, 10, 10)
        ring = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [0, 0.0]])
        root = parse(plot_field(r, [ring], mesh, ds.coords).svg("field"))
        assert len(by_class(root, "cell")) == int(np.isfinite(r.values).sum())
        assert len(by_class(root, "outline")) == 1
        assert len(by_class(root, "point")) == ds.n


class TestSloo:
    def test_metric_format(self):
        assert format_metric("MAE", 0.123456, 0.1, 0.15) == "MAE = 0.1235 [0.1, 0.15]"

    def test_scatter_annotations(self, toy_sloo):
        _, res = toy_sloo
        b = plot_sloo(res, toy_sloo[0].coords)
        assert b.panel_names() == [f"scatter_{lab}" for lab in res.labels] + ["map"]
        root = parse(b.svg(f"scatter_{res.labels[0]}"))
        texts = [e.text for e in by_class(root, "metric")]
        m = res.metrics[0]
        assert texts == [format_metric("MAE", m.mae, m.mae_lo, m.mae_hi), format_metric("RMSE", m.rmse, m.rmse_lo, m.rmse_hi)]
        assert len(list(root.iter(SVG + "circle"))) == res.n_runs

    def test_map(self, toy_sloo):
        ds, res = toy_sloo
        root = parse(plot_sloo(res, ds.coords).svg("map"))
        disks = by_class(root, "disk")
        assert len(disks) == 20
        assert [e.text for e in by_class(root, "iteration")] == [str(i) for i in range(1, 21)]
        cross = by_class(root, "cross")
        assert cross[0].get("d").count("M") == 2 * (ds.n - 20)
        ax, bx, ay, by = affine(root)
        np.testing.assert_allclose([float(d.get("r")) for d in disks], res.rad * bx)

    def test_all_held_out_no_crosses(self):
        ds, mesh, fem, asm, pr = toy_problem(5, n=15)
        res = run_sloo(ds, None, None, SlooConfig(ss=15, rad=0.01, seed=0, models=(parse_formula("y ~ x1"),)), priors=pr)
        root = parse(plot_sloo(res, ds.coords).svg("map"))
        assert by_class(root, "cross") == []
        assert len(by_class(root, "disk")) == 15


class TestDocuments:
    def test_deterministic_bytes(self, toy_sloo, tmp_path):
        ds, res = toy_sloo
        a = plot_sloo(res, ds.coords).write(tmp_path / "a")
        b = plot_sloo(res, ds.coords).write(tmp_path / "b")
        for p, q in zip(a, b):
            assert p.name == q.name and p.read_bytes() == q.read_bytes()

    def test_all_well_formed(self, meuse_fits, toy_sloo, toy_fit):
        ds, res = toy_sloo
        bundles = [plot_model_summaries(meuse_fits[0]), plot_sloo(res, ds.coords),
                   plot_mesh(toy_fit[1], toy_fit[0].coords)]
        for b in bundles:
            for name, text in b.documents.items():
                if name.endswith(".svg"):
                    assert parse(text).tag == SVG + "svg"

    def test_affine_round_trip(self, toy_fit):
        ds, mesh, _ = toy_fit
        root = parse(plot_mesh(mesh, ds.coords).svg("mesh"))
        ax, bx, ay, by = affine(root)
        cx = np.array([float(c.get("cx")) for c in root.iter(SVG + "circle")])
        cy = np.array([float(c.get("cy")) for c in root.iter(SVG + "circle")])
        np.testing.assert_allclose((cx - ax) / bx, ds.coords[:, 0], atol=1e-9)
        np.testing.assert_allclose((cy - ay) / by, ds.coords[:, 1], atol=1e-9)

    @given(st.floats(0.01, 1.0))
    def test_bins_cover_unit_interval(self, bw):
        e = pit_bins(bw)
        assert e[0] == 0.0 and e[-1] == 1.0
        assert np.all(np.diff(e) > 0)
        assert np.all(np.diff(e) <= bw + 1e-12)

    def test_no_nan_in_svg(self, meuse_fits):
        for name, text in plot_model_summaries(meuse_fits[0]).documents.items():
            if name.endswith(".svg"):
                assert not re.search(r"\bnan\b|\binf\b", text)
