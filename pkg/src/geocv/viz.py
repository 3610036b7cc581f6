"""Deterministic SVG figures with CSV sidecars.

Every panel is a standalone SVG document. The plotting area is a ``<g>``
element whose ``data-affine`` attribute holds ``ax bx ay by``; a data point
``(x, y)`` is drawn at pixel ``(ax + bx * x, ay + by * y)``. Data marks carry
``class="data"``.
"""

from __future__ import annotations

import csv
import io as _io
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

import numpy as np
from scipy.special import expit
from scipy.stats import norm

from .diagnostics import CalibrationReport
from .mesh import Mesh, make_projector
from .model import FitResult, Priors, hyper_prior_mean
from .sloocv import SlooResult

__all__ = [
    "PlotBundle",
    "Raster",
    "PANELS",
    "plot_model_summaries",
    "plot_residuals",
    "plot_mesh",
    "project_field",
    "plot_field",
    "plot_sloo",
    "format_metric",
]

PANELS = ("fixed", "hyper", "random", "predictor")
N_DENSITY = 201
DENSITY_HALFWIDTH = 4.0
Z95 = float(norm.ppf(0.975))

BLACK = "#000000"
BLUE = "#1f4e9e"
GREY = "#7f7f7f"
RED = "#c8102e"

# light to dark blue ramp for field rasters
_RAMP = np.array(
    [[247, 251, 255], [198, 219, 239], [107, 174, 214], [33, 113, 181], [8, 48, 107]],
    dtype=float,
)


def _num(v: float) -> str:
    s = f"{float(v):.15g}"
    return "0" if s == "-0" else s


@dataclass
class PlotBundle:
    """Ordered mapping from file name to document text."""

    prefix: str = "plot"
    documents: dict = field(default_factory=dict)
    width: int = 480
    height: int = 360
    binwidth: float | None = None

    def add(self, name: str, text: str):
        if name in self.documents:
            raise ValueError(f"duplicate file name {name!r}")
        self.documents[name] = text

    def panel_names(self) -> list[str]:
        pre = len(self.prefix) + 1
        return [n[pre:-4] for n in self.documents if n.endswith(".svg")]

    def svg(self, panel: str) -> str:
        return self.documents[f"{self.prefix}_{panel}.svg"]

    def csv(self, panel: str) -> str:
        return self.documents[f"{self.prefix}_{panel}.csv"]

    def merge(self, other: "PlotBundle") -> "PlotBundle":
        for k, v in other.documents.items():
            self.add(k, v)
        return self

    def write(self, directory) -> list[Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        out = []
        for name, text in self.documents.items():
            p = d / name
            with open(p, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
            out.append(p)
        return out


def _nice_ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if not hi > lo:
        return np.array([lo])
    raw = (hi - lo) / n
    mag = 10.0 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step - 1e-9) * step
    ticks = np.arange(start, hi + step * 1e-9, step)
    return np.round(ticks / step) * step


def _limits(values, pad: float = 0.05) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return 0.0, 1.0
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        d = abs(lo) * 0.1 or 1.0
        return lo - d, hi + d
    d = (hi - lo) * pad
    return lo - d, hi + d


class _Panel:
    """One SVG document with a single set of axes."""

    def __init__(self, xlim, ylim, title="", xlabel="", ylabel="", width=480, height=360, equal=False):
        self.width, self.height = width, height
        left, right, top, bottom = 64.0, 16.0, 32.0, 48.0
        pw, ph = width - left - right, height - top - bottom
        (x0, x1), (y0, y1) = xlim, ylim
        bx, by = pw / (x1 - x0), ph / (y1 - y0)
        if equal:
            bx = by = min(bx, by)
        # centre the plotting box when the aspect is fixed
        ox = left + 0.5 * (pw - bx * (x1 - x0))
        oy = top + 0.5 * (ph - by * (y1 - y0))
        self.ax, self.bx = ox - bx * x0, bx
        self.ay, self.by = oy + by * y1, -by
        self.xlim, self.ylim = (x0, x1), (y0, y1)
        self.box = (ox, oy, bx * (x1 - x0), by * (y1 - y0))
        self.title, self.xlabel, self.ylabel = title, xlabel, ylabel
        self.marks: list[str] = []
        self.overlay: list[str] = []

    def px(self, x):
        return self.ax + self.bx * np.asarray(x, dtype=float)

    def py(self, y):
        return self.ay + self.by * np.asarray(y, dtype=float)

    def polyline(self, xs, ys, stroke=BLACK, width=1.5, cls="data", dash=None, label=None):
        pts = " ".join(f"{_num(a)},{_num(b)}" for a, b in zip(self.px(xs), self.py(ys)))
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        extra += f" data-series={quoteattr(label)}" if label else ""
        self.marks.append(
            f'<polyline class="{cls}" points="{pts}" fill="none" stroke="{stroke}" stroke-width="{width}"{extra}/>'
        )

    def points(self, xs, ys, r=2.5, fill=BLACK, cls="data", label=None):
        extra = f" data-series={quoteattr(label)}" if label else ""
        for a, b in zip(self.px(xs), self.py(ys)):
            self.marks.append(f'<circle class="{cls}" cx="{_num(a)}" cy="{_num(b)}" r="{r}" fill="{fill}"{extra}/>')

    def vline(self, x, stroke=GREY, dash="4,3", label=None):
        y0, y1 = self.ylim
        self.polyline([x, x], [y0, y1], stroke=stroke, width=1, cls="data interval", dash=dash, label=label)

    def segments(self, x0, y0, x1, y1, stroke=BLACK, width=1.0, cls="data"):
        X0, Y0, X1, Y1 = self.px(x0), self.py(y0), self.px(x1), self.py(y1)
        d = " ".join(f"M{_num(a)} {_num(b)}L{_num(c)} {_num(e)}" for a, b, c, e in zip(X0, Y0, X1, Y1))
        if d:
            self.marks.append(f'<path class="{cls}" d="{d}" fill="none" stroke="{stroke}" stroke-width="{width}"/>')

    def rect(self, x0, y0, x1, y1, fill, stroke="none", cls="data"):
        a, b = float(self.px(x0)), float(self.py(y1))
        w, h = float(self.px(x1)) - a, float(self.py(y0)) - b
        self.marks.append(
            f'<rect class="{cls}" x="{_num(a)}" y="{_num(b)}" width="{_num(w)}" height="{_num(h)}" '
            f'fill="{fill}" stroke="{stroke}"/>'
        )

    def ring(self, xy, stroke=BLACK, width=1.5):
        xy = np.asarray(xy)
        pts = " ".join(f"{_num(a)},{_num(b)}" for a, b in zip(self.px(xy[:, 0]), self.py(xy[:, 1])))
        self.marks.append(f'<polygon class="data outline" points="{pts}" fill="none" stroke="{stroke}" stroke-width="{width}"/>')

    def text(self, x, y, s, size=11, fill=BLACK, anchor="start", data_coords=True, cls="label"):
        if data_coords:
            x, y = float(self.px(x)), float(self.py(y))
        self.overlay.append(
            f'<text class="{cls}" x="{_num(x)}" y="{_num(y)}" font-size="{size}" fill="{fill}" '
            f'text-anchor="{anchor}">{escape(s)}</text>'
        )

    def _axes(self) -> list[str]:
        ox, oy, w, h = self.box
        out = [f'<rect class="frame" x="{_num(ox)}" y="{_num(oy)}" width="{_num(w)}" height="{_num(h)}" fill="none" stroke="{BLACK}"/>']
        for t in _nice_ticks(*self.xlim):
            x = float(self.px(t))
            out.append(f'<line class="tick" x1="{_num(x)}" y1="{_num(oy + h)}" x2="{_num(x)}" y2="{_num(oy + h + 4)}" stroke="{BLACK}"/>')
            out.append(f'<text class="tick" x="{_num(x)}" y="{_num(oy + h + 16)}" font-size="10" text-anchor="middle">{t:g}</text>')
        for t in _nice_ticks(*self.ylim):
            y = float(self.py(t))
            out.append(f'<line class="tick" x1="{_num(ox - 4)}" y1="{_num(y)}" x2="{_num(ox)}" y2="{_num(y)}" stroke="{BLACK}"/>')
            out.append(f'<text class="tick" x="{_num(ox - 6)}" y="{_num(y + 3)}" font-size="10" text-anchor="end">{t:g}</text>')
        if self.title:
            out.append(f'<text class="title" x="{_num(self.width / 2)}" y="20" font-size="13" text-anchor="middle">{escape(self.title)}</text>')
        if self.xlabel:
            out.append(f'<text class="axis-label" x="{_num(ox + w / 2)}" y="{_num(self.height - 8)}" font-size="11" text-anchor="middle">{escape(self.xlabel)}</text>')
        if self.ylabel:
            cy = oy + h / 2
            out.append(
                f'<text class="axis-label" x="14" y="{_num(cy)}" font-size="11" text-anchor="middle" '
                f'transform="rotate(-90 14 {_num(cy)})">{escape(self.ylabel)}</text>'
            )
        return out

    def render(self) -> str:
        ox, oy, w, h = self.box
        head = (
            '<?xml version="1.0" encoding="UTF-8"?>\n'
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}" font-family="sans-serif">'
        )
        clip = (
            f'<defs><clipPath id="plot-area"><rect x="{_num(ox)}" y="{_num(oy)}" width="{_num(w)}" '
            f'height="{_num(h)}"/></clipPath></defs>'
        )
        affine = " ".join(_num(v) for v in (self.ax, self.bx, self.ay, self.by))
        body = [
            head,
            clip,
            '<rect class="background" width="100%" height="100%" fill="#ffffff"/>',
            f'<g class="plot-area" clip-path="url(#plot-area)" data-affine="{affine}">',
            *self.marks,
            "</g>",
            *self._axes(),
            *self.overlay,
            "</svg>",
        ]
        return "\n".join(body) + "\n"


def _csv_text(header, columns) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in zip(*columns):
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row])
    return buf.getvalue()


def _slug(name: str) -> str:
    s = re.sub(r"[()]", "", name)
    return re.sub(r"[^A-Za-z0-9._-]+", "_", s).strip("_") or "x"


def _add(bundle: PlotBundle, panel: str, fig: _Panel, header, columns):
    bundle.add(f"{bundle.prefix}_{panel}.svg", fig.render())
    bundle.add(f"{bundle.prefix}_{panel}.csv", _csv_text(header, columns))


def _density_panel(bundle, panel, title, grid, post, prior, lo, hi, xlabel):
    ymax = max(float(np.nanmax(post)), float(np.nanmax(prior)) if prior is not None else 0.0)
    fig = _Panel((grid[0], grid[-1]), (0.0, 1.05 * ymax if ymax > 0 else 1.0), title, xlabel, "density",
                 bundle.width, bundle.height)
    if prior is not None:
        fig.polyline(grid, prior, stroke=BLUE, label="prior")
    fig.polyline(grid, post, stroke=BLACK, label="posterior")
    fig.vline(lo, label="lower 95%")
    fig.vline(hi, label="upper 95%")
    cols = [grid, post] + ([prior] if prior is not None else [np.full(len(grid), np.nan)])
    _add(bundle, panel, fig, ["x", "posterior", "prior"], cols)


def _normalise_slice(grid, logd):
    logd = np.asarray(logd, dtype=float)
    finite = np.isfinite(logd)
    d = np.zeros_like(logd)
    d[finite] = np.exp(logd[finite] - logd[finite].max())
    area = np.trapezoid(d, grid) if hasattr(np, "trapezoid") else np.trapz(d, grid)
    return d / area if area > 0 else d


def _slice_interval(grid, dens, level=0.95):
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(grid))])
    if cum[-1] <= 0:
        return grid[0], grid[-1]
    cum /= cum[-1]
    a = (1 - level) / 2
    return float(np.interp(a, cum, grid)), float(np.interp(1 - a, cum, grid))


def plot_model_summaries(
    fit: FitResult, priors: Priors | None = None, which=None, prefix: str = "summary", width=480, height=360
) -> PlotBundle:
    """Posterior summaries of a fit.

    ``which`` selects among ``fixed`` (Gaussian posterior and prior densities
    of each fixed effect), ``hyper`` (normalized conditional slices of the log
    marginal likelihood with the hyperprior), ``random`` (spatial effect mean
    and 95% interval per vertex) and ``predictor`` (linear predictor and fitted
    values per observation).
    """
    which = PANELS if which is None else tuple(which)
    bad = [w for w in which if w not in PANELS]
    if bad:
        raise ValueError(f"unknown panel {bad[0]!r}; expected some of {PANELS}")
    priors = priors or fit.priors
    bundle = PlotBundle(prefix, width=width, height=height)
    used = set()

    def panel_name(kind, name):
        base = f"{kind}_{_slug(name)}"
        p, k = base, 2
        while p in used:
            p, k = f"{base}_{k}", k + 1
        used.add(p)
        return p

    if "fixed" in which:
        prior_sd = 1.0 / math.sqrt(priors.fixed_prec)
        for name, m, s in zip(fit.fixed_names, fit.beta_mean, fit.beta_sd):
            s = max(float(s), 1e-300)
            grid = np.linspace(m - DENSITY_HALFWIDTH * s, m + DENSITY_HALFWIDTH * s, N_DENSITY)
            post = norm.pdf(grid, m, s)
            prior = norm.pdf(grid, priors.fixed_mean, prior_sd)
            _density_panel(bundle, panel_name("fixed", name), name, grid, post, prior, m - Z95 * s, m + Z95 * s, name)

    if "hyper" in which and fit.hyper_slices:
        pm = hyper_prior_mean(fit.spec, priors)
        psd = {"log_tau": priors.spde_sd[0], "log_kappa": priors.spde_sd[1], "log_prec_noise": priors.noise_sd}
        for i, name in enumerate(fit.theta_names):
            if name not in fit.hyper_slices:
                continue
            sl = np.asarray(fit.hyper_slices[name])
            grid, dens = sl[:, 0], _normalise_slice(sl[:, 0], sl[:, 1])
            prior = norm.pdf(grid, pm[i], psd[name])
            lo, hi = _slice_interval(grid, dens)
            _density_panel(bundle, panel_name("hyper", name), name, grid, dens, prior, lo, hi, name)

    if "random" in which and fit.spec.spatial:
        idx = np.arange(len(fit.u_mean), dtype=float)
        lo, hi = fit.u_mean - Z95 * fit.u_sd, fit.u_mean + Z95 * fit.u_sd
        fig = _Panel(_limits(idx), _limits(np.concatenate([lo, hi])), "spatial effect", "vertex", "value",
                     width, height)
        fig.segments(idx, lo, idx, hi, stroke=GREY, cls="data interval")
        fig.points(idx, fit.u_mean, r=1.5)
        _add(bundle, "random_spatial", fig, ["vertex", "mean", "lower", "upper"], [idx.astype(int), fit.u_mean, lo, hi])

    if "predictor" in which:
        idx = np.arange(len(fit.lp_mean), dtype=float)
        lp_lo, lp_hi = fit.lp_mean - Z95 * fit.lp_sd, fit.lp_mean + Z95 * fit.lp_sd
        if fit.spec.family == "bernoulli":
            fv_lo, fv_hi = expit(lp_lo), expit(lp_hi)
        else:
            fv_lo, fv_hi = fit.fitted_mean - Z95 * fit.fitted_sd, fit.fitted_mean + Z95 * fit.fitted_sd
        for panel, title, mean, lo, hi in (
            ("predictor_linear", "linear predictor", fit.lp_mean, lp_lo, lp_hi),
            ("predictor_fitted", "fitted values", fit.fitted_mean, fv_lo, fv_hi),
        ):
            fig = _Panel(_limits(idx), _limits(np.concatenate([lo, hi])), title, "observation", "value", width, height)
            fig.segments(idx, lo, idx, hi, stroke=GREY, cls="data interval")
            fig.points(idx, mean, r=1.5)
            _add(bundle, panel, fig, ["index", "mean", "lower", "upper"], [idx.astype(int), mean, lo, hi])
    return bundle


def pit_bins(binwidth: float) -> np.ndarray:
    """Histogram edges on [0, 1]; the last bin is narrower when ``binwidth`` does not divide 1."""
    if not (0 < binwidth <= 1) or not math.isfinite(binwidth):
        raise ValueError(f"binwidth must lie in (0, 1], got {binwidth}")
    k = int(math.ceil(1.0 / binwidth - 1e-9))
    edges = np.minimum(np.arange(k + 1) * binwidth, 1.0)
    edges[-1] = 1.0
    return edges


def plot_residuals(report: CalibrationReport, binwidth: float = 0.1, prefix: str = "residuals", width=480, height=360) -> PlotBundle:
    """PIT histogram and observed-versus-predicted scatter."""
    edges = pit_bins(binwidth)
    bundle = PlotBundle(prefix, width=width, height=height, binwidth=binwidth)
    counts, _ = np.histogram(np.clip(report.pit, 0.0, 1.0), bins=edges)
    fig = _Panel((0.0, 1.0), (0.0, max(1.0, 1.05 * counts.max())), f"PIT ({report.variant})", "PIT", "count",
                 width, height)
    for a, b, c in zip(edges[:-1], edges[1:], counts):
        fig.rect(a, 0.0, b, c, fill="#9ecae1", stroke=BLACK)
    _add(bundle, "pit", fig, ["lower", "upper", "count"], [edges[:-1], edges[1:], counts])

    obs, mean = report.obs_pred[:, 0], report.obs_pred[:, 1]
    lim = _limits(np.concatenate([obs, mean]))
    fig = _Panel(lim, lim, "observed vs predicted", "observed", "predicted", width, height, equal=True)
    fig.polyline(lim, lim, stroke=GREY, width=1, cls="reference", dash="4,3")
    fig.points(obs, mean)
    _add(bundle, "obs_pred", fig, ["observed", "predicted", "sd"], [obs, mean, report.obs_pred[:, 2]])
    return bundle


def _bbox(*arrays):
    pts = np.vstack([np.asarray(a, dtype=float).reshape(-1, 2) for a in arrays if a is not None and len(a)])
    return _limits(pts[:, 0], 0.03), _limits(pts[:, 1], 0.03)


def plot_mesh(mesh: Mesh, points=None, prefix: str = "mesh", width=480, height=480) -> PlotBundle:
    """Triangle edges and observation markers."""
    bundle = PlotBundle(prefix, width=width, height=height)
    xl, yl = _bbox(mesh.vertices, points)
    fig = _Panel(xl, yl, "mesh", "x", "y", width, height, equal=True)
    e = mesh.edges
    v = mesh.vertices
    fig.segments(v[e[:, 0], 0], v[e[:, 0], 1], v[e[:, 1], 0], v[e[:, 1], 1], stroke=GREY, width=0.6, cls="data edge")
    kind = ["edge"] * len(e)
    cols = [v[e[:, 0], 0], v[e[:, 0], 1], v[e[:, 1], 0], v[e[:, 1], 1]]
    if points is not None and len(points):
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        fig.points(p[:, 0], p[:, 1], r=2.0, fill=RED)
        kind += ["point"] * len(p)
        nan = np.full(len(p), np.nan)
        cols = [np.concatenate([cols[0], p[:, 0]]), np.concatenate([cols[1], p[:, 1]]),
                np.concatenate([cols[2], nan]), np.concatenate([cols[3], nan])]
    _add(bundle, "mesh", fig, ["kind", "x0", "y0", "x1", "y1"], [kind, *cols])
    return bundle


@dataclass(frozen=True, eq=False)
class Raster:
    """Regular grid of values; ``values[j, i]`` sits at ``(x[i], y[j])``; NaN outside the mesh."""

    x: np.ndarray
    y: np.ndarray
    values: np.ndarray


def project_field(fit: FitResult, mesh: Mesh, grid_nx: int = 100, grid_ny: int = 100, values=None) -> Raster:
    """Interpolate the posterior mean of the spatial effect (or ``values`` on
    the mesh vertices) onto a regular grid spanning the mesh bounding box."""
    if int(grid_nx) < 2 or int(grid_ny) < 2:
        raise ValueError(f"grid dimensions must be >= 2, got {grid_nx} x {grid_ny}")
    u = fit.u_mean if values is None else np.asarray(values, dtype=float)
    if len(u) != mesh.n_vertices:
        raise ValueError(f"field has {len(u)} values but the mesh has {mesh.n_vertices} vertices")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    x = np.linspace(lo[0], hi[0], int(grid_nx))
    y = np.linspace(lo[1], hi[1], int(grid_ny))
    gx, gy = np.meshgrid(x, y)
    proj = make_projector(mesh, np.column_stack([gx.ravel(), gy.ravel()]))
    vals = proj.A @ u
    vals[~proj.inside] = np.nan
    return Raster(x, y, vals.reshape(len(y), len(x)))


def _ramp(t: np.ndarray) -> list[str]:
    t = np.clip(t, 0.0, 1.0) * (len(_RAMP) - 1)
    k = np.minimum(t.astype(int), len(_RAMP) - 2)
    f = (t - k)[:, None]
    rgb = np.rint(_RAMP[k] * (1 - f) + _RAMP[k + 1] * f).astype(int)
    return [f"#{r:02x}{g:02x}{b:02x}" for r, g, b in rgb]


def plot_field(raster: Raster, polygon=None, mesh: Mesh | None = None, points=None, prefix: str = "field",
               width=480, height=480) -> PlotBundle:
    """Colour-ramp raster with optional polygon outline, mesh and point overlays."""
    x, y, v = raster.x, raster.y, raster.values
    if len(x) < 2 or len(y) < 2:
        raise ValueError("raster must have at least 2 x 2 cells")
    dx, dy = x[1] - x[0], y[1] - y[0]
    xl = (x[0] - dx / 2, x[-1] + dx / 2)
    yl = (y[0] - dy / 2, y[-1] + dy / 2)
    bundle = PlotBundle(prefix, width=width, height=height)
    fig = _Panel(xl, yl, "spatial field", "x", "y", width, height, equal=True)
    finite = np.isfinite(v)
    vmin, vmax = (float(v[finite].min()), float(v[finite].max())) if finite.any() else (0.0, 1.0)
    span = vmax - vmin if vmax > vmin else 1.0
    jj, ii = np.nonzero(finite)
    colours = _ramp((v[finite] - vmin) / span)
    for j, i, c in zip(jj, ii, colours):
        fig.rect(x[i] - dx / 2, y[j] - dy / 2, x[i] + dx / 2, y[j] + dy / 2, fill=c, cls="data cell")
    if mesh is not None:
        e, vv = mesh.edges, mesh.vertices
        fig.segments(vv[e[:, 0], 0], vv[e[:, 0], 1], vv[e[:, 1], 0], vv[e[:, 1], 1], stroke=GREY, width=0.4,
                     cls="overlay edge")
    for ring in polygon or []:
        fig.ring(ring)
    if points is not None and len(points):
        p = np.asarray(points, dtype=float).reshape(-1, 2)
        fig.points(p[:, 0], p[:, 1], r=1.8, fill=RED, cls="overlay point")
    fig.text(xl[0], yl[1], f"range {vmin:.4g} to {vmax:.4g}", size=10)
    gx, gy = np.meshgrid(x, y)
    _add(bundle, "field", fig, ["x", "y", "value"], [gx.ravel(), gy.ravel(), v.ravel()])
    return bundle


def format_metric(name: str, value: float, lo: float, hi: float) -> str:
    return f"{name} = {value:.4g} [{lo:.4g}, {hi:.4g}]"


def plot_sloo(result: SlooResult, coords, rad: float | None = None, prefix: str = "sloo", width=480, height=480) -> PlotBundle:
    """Per-model observed-versus-predicted scatter with MAE/RMSE annotations,
    and a map of held-out points as numbered disks of radius ``rad`` with the
    remaining observations as crosses."""
    rad = result.rad if rad is None else float(rad)
    bundle = PlotBundle(prefix, width=width, height=height)
    obs = result.observed
    for j, (label, m) in enumerate(zip(result.labels, result.metrics)):
        ok = ~result.failed[:, j]
        pred = result.pred_mean[ok, j]
        lim = _limits(np.concatenate([obs[ok], pred]))
        fig = _Panel(lim, lim, f"{label}: {result.formulas[j]}", "observed", "predicted", width, height, equal=True)
        fig.polyline(lim, lim, stroke=GREY, width=1, cls="reference", dash="4,3")
        fig.points(obs[ok], pred)
        ox, oy, _, _ = fig.box
        fig.text(ox + 8, oy + 16, format_metric("MAE", m.mae, m.mae_lo, m.mae_hi), data_coords=False, cls="metric")
        fig.text(ox + 8, oy + 30, format_metric("RMSE", m.rmse, m.rmse_lo, m.rmse_hi), data_coords=False, cls="metric")
        it = np.flatnonzero(ok) + 1
        _add(bundle, f"scatter_{_slug(label)}", fig, ["iteration", "observed", "predicted"], [it, obs[ok], pred])

    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    held = np.zeros(len(coords), dtype=bool)
    held[result.holdout] = True
    rest = coords[~held]
    hc = result.coords
    xl, yl = _bbox(coords, hc - rad, hc + rad)
    fig = _Panel(xl, yl, "held-out locations", "x", "y", width, height, equal=True)
    if len(rest):
        s = 0.012 * max(xl[1] - xl[0], yl[1] - yl[0])
        fig.segments(
            np.concatenate([rest[:, 0] - s, rest[:, 0] - s]),
            np.concatenate([rest[:, 1] - s, rest[:, 1] + s]),
            np.concatenate([rest[:, 0] + s, rest[:, 0] + s]),
            np.concatenate([rest[:, 1] + s, rest[:, 1] - s]),
            stroke=BLACK,
            width=1,
            cls="data cross",
        )
    r_px = rad * fig.bx
    for i, (a, b) in enumerate(zip(fig.px(hc[:, 0]), fig.py(hc[:, 1]))):
        fig.marks.append(
            f'<circle class="data disk" cx="{_num(a)}" cy="{_num(b)}" r="{_num(r_px)}" fill="{RED}" '
            f'fill-opacity="0.35" stroke="{RED}"/>'
        )
    for i, (a, b) in enumerate(zip(fig.px(hc[:, 0]), fig.py(hc[:, 1]))):
        fig.overlay.append(f'<circle class="marker" cx="{_num(a)}" cy="{_num(b)}" r="8" fill="{RED}"/>')
        fig.text(float(a), float(b) + 4, str(i + 1), size=11, fill="#ffffff", anchor="middle", data_coords=False,
                 cls="iteration")
    kind = ["holdout"] * len(hc) + ["cross"] * len(rest)
    num = [str(i + 1) for i in range(len(hc))] + [""] * len(rest)
    _add(
        bundle,
        "map",
        fig,
        ["kind", "iteration", "x", "y", "radius"],
        [kind, num, np.concatenate([hc[:, 0], rest[:, 0]]), np.concatenate([hc[:, 1], rest[:, 1]]),
         np.concatenate([np.full(len(hc), rad), np.full(len(rest), np.nan)])],
    )
    return bundle
