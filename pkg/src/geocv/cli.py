"""Command-line entry point: ``geocv {mesh,fit,sloo,report,synth}``."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as gio
from .diagnostics import calibration_report
from .mesh import build_mesh, fem_matrices, make_projector
from .model import FitConfig, assemble, default_priors, fit_model
from .sloocv import SlooConfig, default_radius, run_sloo
from .spde import params_from_range_sd
from .viz import plot_field, plot_mesh, plot_model_summaries, plot_residuals, plot_sloo, project_field

log = logging.getLogger("geocv")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("GEOCV_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise _UsageError(f"GEOCV_THREADS must be an integer, got {env!r}") from None
        if n < 1:
            raise _UsageError("GEOCV_THREADS must be at least 1")
        return n
    return os.cpu_count() or 1


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _build_parser() -> _Parser:
    p = _Parser(prog="geocv", description="SPDE spatial regression and buffered spatial leave-one-out CV.")
    p.add_argument("--version", action="version", version=f"geocv {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, needs_config=True):
        if needs_config:
            sp.add_argument("--config", "-c", required=True, help="run configuration (INI)")
            sp.add_argument(
                "--set",
                action="append",
                default=[],
                metavar="SECTION.KEY=VALUE",
                help="override a config entry (repeatable)",
            )
        sp.add_argument("--output", "-o", help="output directory (overrides the config)")
        sp.add_argument("--quiet", "-q", action="store_true", help="suppress progress messages")

    common(sub.add_parser("mesh", help="build and plot the mesh"))
    sp = sub.add_parser("fit", help="fit every configured model")
    common(sp)
    sp = sub.add_parser("sloo", help="buffered spatial leave-one-out cross-validation")
    common(sp)
    sp.add_argument("--threads", type=_positive_int, help="worker threads (default: $GEOCV_THREADS or all cores)")
    sp.add_argument("--ss", type=_positive_int, help="number of held-out points")
    sp.add_argument("--rad", help="buffer radius or 'auto'")
    sp.add_argument("--seed", type=int, help="random seed for the held-out sample")
    sp = sub.add_parser("report", help="regenerate plots from serialized results")
    sp.add_argument("results", help="directory written by fit or sloo")
    sp.add_argument("--output", "-o", help="output directory (default: the results directory)")
    sp.add_argument("--binwidth", type=float, default=0.1)
    sp.add_argument("--quiet", "-q", action="store_true")
    sp = sub.add_parser("synth", help="write a synthetic dataset")
    sp.add_argument("--n", type=_positive_int, default=200)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--range", dest="range_", type=float, default=0.3, help="Matern range (0 for no field)")
    sp.add_argument("--sd", type=float, default=1.0, help="marginal sd of the field")
    sp.add_argument("--noise-sd", type=float, default=0.5)
    sp.add_argument("--beta", default="1", help="comma-separated intercept and covariate effects")
    sp.add_argument("--domain", default="0,1,0,1", help="xmin,xmax,ymin,ymax")
    sp.add_argument("--output", "-o", required=True, help="CSV file to write")
    sp.add_argument("--quiet", "-q", action="store_true")
    return p


def _overrides(args) -> dict:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise _UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    if getattr(args, "ss", None) is not None:
        out["sloo.ss"] = str(args.ss)
    if getattr(args, "rad", None) is not None:
        out["sloo.rad"] = args.rad
    if getattr(args, "seed", None) is not None and args.command == "sloo":
        out["sloo.seed"] = str(args.seed)
    if args.output:
        out["output.dir"] = args.output
    return out


class _Run:
    """Loaded data, mesh and priors shared by the config-driven commands."""

    def __init__(self, cfg: gio.RunConfig, config_path: str):
        self.cfg = cfg
        self.config_path = config_path
        if not cfg.input:
            raise ValueError("the config has no [data] input")
        log.info("loading %s", cfg.input)
        self.dataset = gio.load_dataset(cfg.input, cfg)
        self.specs = cfg.specs()
        self.labels = cfg.model_labels()
        self.polygon = gio.load_polygon(cfg.polygon, self.dataset.center, self.dataset.scale) if cfg.polygon else None
        log.info("building mesh (%g, %g, cutoff %g)", cfg.max_edge_inner, cfg.max_edge_outer, cfg.cutoff)
        self.mesh = build_mesh(self.dataset.coords, cfg.max_edge_inner, cfg.max_edge_outer, cfg.cutoff, cfg.extension)
        log.info("mesh: %d vertices, %d triangles", self.mesh.n_vertices, self.mesh.n_triangles)
        self.fem = fem_matrices(self.mesh)
        self.priors = default_priors(self.mesh, self.dataset.response, cfg.fixed_prec, cfg.prior_sd)
        self.out = Path(cfg.output)
        self.out.mkdir(parents=True, exist_ok=True)
        self.written: list[Path] = []

    def save(self, paths):
        self.written.extend(Path(p) for p in (paths if isinstance(paths, list) else [paths]))

    def fits(self, compute_slices=True):
        proj = make_projector(self.mesh, self.dataset.coords)
        cfg = FitConfig(priors=self.priors, compute_slices=compute_slices)
        out = []
        for label, spec in zip(self.labels, self.specs):
            log.info("fitting %s: %s (%s)", label, spec.response, spec.family)
            asm = assemble(self.dataset, spec, self.mesh if spec.spatial else None, proj if spec.spatial else None)
            out.append(fit_model(asm, self.fem if spec.spatial else None, cfg))
        return out

    def write_common(self):
        p = self.out / "mesh.csv"
        gio.write_mesh(p, self.mesh)
        self.save(p)
        p = self.out / "points.csv"
        gio.write_points(p, self.dataset.coords, self.dataset.response)
        self.save(p)
        if self.polygon is not None:
            p = self.out / "polygon.wkt"
            p.write_text(_polygon_wkt(self.polygon), encoding="utf-8")
            self.save(p)

    def manifest(self, command: str, extra: dict | None = None):
        inputs = [self.config_path, self.cfg.input] + ([self.cfg.polygon] if self.cfg.polygon else [])
        files = sorted({p.resolve() for p in self.written})
        doc = {
            "tool": "geocv",
            "version": __version__,
            "command": command,
            "inputs": [{"path": str(p), "sha256": gio.file_sha256(p)} for p in inputs],
            "config_sha256": gio.config_digest(self.cfg),
            "seed": self.cfg.seed,
            **(extra or {}),
            "outputs": [{"file": p.name, "sha256": gio.file_sha256(p)} for p in files],
        }
        path = self.out / f"manifest_{command}.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _polygon_wkt(rings) -> str:
    parts = ["(" + ", ".join(f"{x!r} {y!r}" for x, y in np.asarray(r).tolist()) + ")" for r in rings]
    return "POLYGON(" + ", ".join(parts) + ")\n"


def _fit_outputs(run: _Run, fits, binwidth: float):
    for label, f in zip(run.labels, fits):
        p = run.out / f"fit_{label}.csv"
        gio.write_fit(p, f)
        run.save(p)
        run.save(plot_model_summaries(f, prefix=f"summary_{label}").write(run.out))
        if f.spec.family == "normal":
            rep = calibration_report(f, run.dataset.response)
            p = run.out / f"calibration_{label}.csv"
            gio.write_calibration(p, rep)
            run.save(p)
            run.save(plot_residuals(rep, binwidth, prefix=f"residuals_{label}").write(run.out))
        if f.spec.spatial:
            nx, ny = run.cfg.grid
            raster = project_field(f, run.mesh, nx, ny)
            run.save(plot_field(raster, run.polygon, run.mesh, run.dataset.coords, prefix=f"field_{label}").write(run.out))
        for w in f.warnings:
            log.warning("%s: %s", label, w)


def cmd_mesh(args, cfg, config_path):
    run = _Run(cfg, config_path)
    run.write_common()
    run.save(plot_mesh(run.mesh, run.dataset.coords).write(run.out))
    run.manifest("mesh", {"n_vertices": run.mesh.n_vertices, "n_triangles": run.mesh.n_triangles})


def cmd_fit(args, cfg, config_path):
    run = _Run(cfg, config_path)
    run.write_common()
    fits = run.fits()
    _fit_outputs(run, fits, cfg.binwidth)
    for label, f in zip(run.labels, fits):
        th = ", ".join(f"{k}={v:.4g}" for k, v in f.theta.items())
        log.info("%s: log marginal %.6g; %s", label, f.log_marginal, th)
    run.manifest("fit")


def resolve_radius(cfg_rad, fits, coords) -> float:
    """A numeric radius, or ``min(range, max pairwise distance / 4)`` using the
    fitted range of the first spatial model when ``cfg_rad == 'auto'``."""
    if cfg_rad != "auto":
        return float(cfg_rad)
    for f in fits:
        if f.spec.spatial:
            return default_radius(f.summaries()["range"], coords)
    return default_radius(math.inf, coords)


def cmd_sloo(args, cfg, config_path):
    threads = _threads(args.threads)
    run = _Run(cfg, config_path)
    run.write_common()
    fits = run.fits(compute_slices=False)
    for label, f in zip(run.labels, fits):
        p = run.out / f"fit_{label}.csv"
        gio.write_fit(p, f)
        run.save(p)
    rad = resolve_radius(cfg.rad, fits, run.dataset.coords)
    log.info("running %d held-out iterations, radius %.6g, %d thread(s)", cfg.ss, rad, threads)
    sc = SlooConfig(
        ss=cfg.ss, rad=rad, alpha=cfg.alpha, seed=cfg.seed, models=tuple(run.specs), ci=cfg.ci, n_boot=cfg.n_boot
    )
    res = run_sloo(run.dataset, run.mesh, run.fem, sc, run.priors, fits, threads=threads, labels=run.labels)
    p = run.out / "sloo.csv"
    gio.write_sloo(p, res)
    run.save(p)
    run.save(plot_sloo(res, run.dataset.coords, rad).write(run.out))
    for label, m, nf in zip(res.labels, res.metrics, res.n_failed):
        log.info(
            "%s: MAE %.4g [%.4g, %.4g], RMSE %.4g [%.4g, %.4g], %d failed",
            label, m.mae, m.mae_lo, m.mae_hi, m.rmse, m.rmse_lo, m.rmse_hi, nf,
        )
    run.manifest("sloo", {"rad": rad})


def cmd_report(args):
    src = Path(args.results)
    if not src.is_dir():
        raise FileNotFoundError(f"results directory not found: {src}")
    out = Path(args.output) if args.output else src
    mesh = gio.read_mesh(src / "mesh.csv") if (src / "mesh.csv").exists() else None
    points = gio.read_points(src / "points.csv") if (src / "points.csv").exists() else None
    polygon = gio.parse_wkt_polygon((src / "polygon.wkt").read_text()) if (src / "polygon.wkt").exists() else None
    n = 0
    if mesh is not None:
        plot_mesh(mesh, points).write(out)
        n += 1
    for p in sorted(src.glob("fit_*.csv")):
        label = p.stem[4:]
        f = gio.read_fit(p)
        plot_model_summaries(f, prefix=f"summary_{label}").write(out)
        if f.spec.spatial and mesh is not None:
            plot_field(project_field(f, mesh), polygon, mesh, points, prefix=f"field_{label}").write(out)
        n += 1
    for p in sorted(src.glob("calibration_*.csv")):
        plot_residuals(gio.read_calibration(p), args.binwidth, prefix=f"residuals_{p.stem[12:]}").write(out)
        n += 1
    if (src / "sloo.csv").exists():
        res = gio.read_sloo(src / "sloo.csv")
        plot_sloo(res, points if points is not None else res.coords, res.rad).write(out)
        n += 1
    if n == 0:
        raise FileNotFoundError(f"no serialized results found in {src}")
    log.info("regenerated plots for %d result file(s) in %s", n, out)


def cmd_synth(args):
    beta = [float(b) for b in args.beta.split(",")]
    domain = [float(v) for v in args.domain.split(",")]
    if len(domain) != 4:
        raise _UsageError("--domain expects xmin,xmax,ymin,ymax")
    params = params_from_range_sd(args.range_, args.sd) if args.range_ > 0 and args.sd > 0 else None
    ds, truth = gio.synth_dataset(args.seed, args.n, params, beta, args.noise_sd, tuple(domain))
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    gio.write_dataset(out, ds, unscale=False)
    truth_path = out.with_name(out.stem + "_truth.csv")
    gio.write_points(truth_path, ds.coords, truth.u)
    log.info("wrote %d rows to %s (latent field at the data in %s)", ds.n, out, truth_path)


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    logging.basicConfig(stream=sys.stderr, level=logging.WARNING if args.quiet else logging.INFO,
                        format="geocv: %(message)s", force=True)
    try:
        if args.command == "report":
            cmd_report(args)
        elif args.command == "synth":
            cmd_synth(args)
        else:
            cfg = gio.load_config(args.config, _overrides(args))
            {"mesh": cmd_mesh, "fit": cmd_fit, "sloo": cmd_sloo}[args.command](args, cfg, args.config)
    except _UsageError as exc:
        print(f"{parser.format_usage()}geocv: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
