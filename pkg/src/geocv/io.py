"""Data ingestion, run configuration, result serialization and synthetic data."""

from __future__ import annotations

import configparser
import csv
import hashlib
import io as _io
import math
import re
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

import numpy as np

from .diagnostics import CalibrationReport
from .formula import FAMILIES, ModelSpec, format_formula, parse_formula
from .linalg import SPDFactor
from .mesh import Mesh, build_mesh, fem_matrices, make_projector
from .model import Dataset, FitResult, Priors
from .sloocv import Metrics, SlooResult
from .spde import SpdeParams, assemble_precision, spde_summaries

__all__ = [
    "IOFormatError",
    "SchemaError",
    "WKTParseError",
    "RunConfig",
    "load_config",
    "data_path",
    "load_dataset",
    "write_dataset",
    "scale_coords",
    "unscale_coords",
    "parse_wkt_polygon",
    "load_polygon",
    "SynthTruth",
    "synth_dataset",
    "write_fit",
    "read_fit",
    "write_sloo",
    "read_sloo",
    "write_calibration",
    "read_calibration",
    "write_mesh",
    "read_mesh",
    "write_points",
    "read_points",
    "config_digest",
    "file_sha256",
]

SCHEMA_VERSION = 1
_SCHEMA_RE = re.compile(r"^# geocv-schema: (?P<kind>[a-z_]+)/(?P<version>\d+)$")
_MISSING = {"", "NA", "NaN", "nan", "NULL", "null", "."}


class IOFormatError(ValueError):
    pass


class SchemaError(IOFormatError):
    pass


class WKTParseError(IOFormatError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


def data_path(name: str) -> Path:
    """Path of a file shipped in the package data directory (e.g. ``meuse.csv``)."""
    return Path(str(resources.files("geocv") / "data" / name))


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


def _split_list(text: str) -> tuple[str, ...]:
    parts = re.split(r"[\n;]", text) if ("\n" in text or ";" in text) else text.split(",")
    return tuple(p.strip() for p in parts if p.strip())


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise IOFormatError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class RunConfig:
    """Everything a pipeline run needs. Relative input and polygon paths are
    resolved against the directory of the config file by :func:`load_config`;
    the output directory is relative to the working directory."""

    formulas: tuple = ()
    families: tuple = ("normal",)
    labels: tuple = ()
    input: str | None = None
    x: str = "x"
    y: str = "y"
    scale: bool = True
    missing_covariates: str = "error"
    constant_columns: tuple = ()
    polygon: str | None = None
    max_edge_inner: float = 0.2
    max_edge_outer: float = 0.5
    cutoff: float = 0.1
    extension: float | None = None
    ss: int = 20
    rad: float | str = "auto"
    alpha: float = 0.05
    seed: int = 0
    ci: str = "normal"
    n_boot: int = 2000
    prior_sd: float = 10.0
    fixed_prec: float = 1e-3
    output: str = "out"
    binwidth: float = 0.1
    grid: tuple = (100, 100)

    def __post_init__(self):
        if not self.formulas:
            raise IOFormatError("at least one formula is required")
        if len(self.families) not in (1, len(self.formulas)):
            raise IOFormatError(
                f"{len(self.families)} families given for {len(self.formulas)} formulas; give one or one per formula"
            )
        for fam in self.families:
            if fam not in FAMILIES:
                raise IOFormatError(f"unknown family {fam!r}; expected one of {FAMILIES}")
        if self.labels and len(self.labels) != len(self.formulas):
            raise IOFormatError("labels must align with formulas")
        if self.missing_covariates not in ("error", "zero"):
            raise IOFormatError(f"missing_covariates must be 'error' or 'zero', got {self.missing_covariates!r}")
        if isinstance(self.rad, str) and self.rad != "auto":
            raise IOFormatError(f"rad must be a number or 'auto', got {self.rad!r}")
        specs = self.specs()
        if len({s.response for s in specs}) != 1:
            raise IOFormatError("all formulas must share one response")

    def specs(self) -> list[ModelSpec]:
        fams = self.families * len(self.formulas) if len(self.families) == 1 else self.families
        return [parse_formula(f, fam) for f, fam in zip(self.formulas, fams)]

    def model_labels(self) -> tuple:
        return tuple(self.labels) if self.labels else tuple(f"model{i + 1}" for i in range(len(self.formulas)))

    @property
    def response(self) -> str:
        return self.specs()[0].response


# (section, key) -> field name and parser
_CONFIG_KEYS = {
    ("data", "input"): ("input", str),
    ("data", "x"): ("x", str),
    ("data", "y"): ("y", str),
    ("data", "scale"): ("scale", _bool),
    ("data", "missing_covariates"): ("missing_covariates", str),
    ("data", "constant_columns"): ("constant_columns", _split_list),
    ("data", "polygon"): ("polygon", str),
    ("model", "formulas"): ("formulas", _split_list),
    ("model", "families"): ("families", _split_list),
    ("model", "labels"): ("labels", _split_list),
    ("mesh", "max_edge_inner"): ("max_edge_inner", float),
    ("mesh", "max_edge_outer"): ("max_edge_outer", float),
    ("mesh", "cutoff"): ("cutoff", float),
    ("mesh", "extension"): ("extension", lambda s: None if s.strip() in ("", "auto") else float(s)),
    ("sloo", "ss"): ("ss", int),
    ("sloo", "rad"): ("rad", lambda s: "auto" if s.strip() == "auto" else float(s)),
    ("sloo", "alpha"): ("alpha", float),
    ("sloo", "seed"): ("seed", int),
    ("sloo", "ci"): ("ci", str),
    ("sloo", "n_boot"): ("n_boot", int),
    ("priors", "sd"): ("prior_sd", float),
    ("priors", "fixed_prec"): ("fixed_prec", float),
    ("output", "dir"): ("output", str),
    ("output", "binwidth"): ("binwidth", float),
    ("output", "grid"): ("grid", lambda s: tuple(int(v) for v in s.replace("x", ",").split(","))),
}
_PATH_FIELDS = ("input", "polygon")


def load_config(path=None, overrides: dict | None = None, text: str | None = None) -> RunConfig:
    """Read an INI-style run config.

    ``overrides`` maps ``"section.key"`` to a string value and takes precedence
    over the file.
    """
    parser = configparser.ConfigParser(interpolation=None)
    base = Path(".")
    if text is not None:
        parser.read_string(text)
    elif path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        parser.read(path, encoding="utf-8")
        base = path.parent
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if not key:
            raise IOFormatError(f"override {dotted!r} must have the form section.key")
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, str(value))

    kwargs = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if (section, key) not in _CONFIG_KEYS:
                raise IOFormatError(f"unknown config key [{section}] {key}")
            name, conv = _CONFIG_KEYS[(section, key)]
            if value.strip() == "" and name in ("polygon", "input", "labels", "constant_columns"):
                continue
            try:
                kwargs[name] = conv(value)
            except (ValueError, TypeError) as exc:
                raise IOFormatError(f"bad value for [{section}] {key}: {value!r}") from exc
    for name in _PATH_FIELDS:
        if kwargs.get(name) and not Path(kwargs[name]).is_absolute():
            kwargs[name] = str(base / kwargs[name])
    return RunConfig(**kwargs)


def config_digest(cfg: RunConfig) -> str:
    """Stable hash of the resolved configuration, excluding the output location."""
    text = "\n".join(f"{f.name}={getattr(cfg, f.name)!r}" for f in fields(cfg) if f.name != "output")
    return hashlib.sha256(text.encode()).hexdigest()


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def scale_coords(coords, center, scale) -> np.ndarray:
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    if center is None:
        return coords.copy()
    return (coords - np.asarray(center)) / np.asarray(scale)


def unscale_coords(coords, center, scale) -> np.ndarray:
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    if center is None:
        return coords.copy()
    return coords * np.asarray(scale) + np.asarray(center)


def _parse_cell(text: str, row: int, column: str, allow_missing: bool) -> float:
    t = text.strip()
    if t in _MISSING:
        if allow_missing:
            return math.nan
        raise IOFormatError(f"missing value {text!r} at row {row}, column {column!r}")
    try:
        v = float(t)
    except ValueError:
        raise IOFormatError(f"non-numeric value {text!r} at row {row}, column {column!r}") from None
    if not math.isfinite(v):
        raise IOFormatError(f"non-finite value {text!r} at row {row}, column {column!r}")
    return v


def load_dataset(path, config: RunConfig) -> Dataset:
    """Read a delimited text file with a header row.

    Only the columns referenced by the config are parsed. Rows are numbered
    from 1 for the first data row. Coordinates are standardized per axis
    (mean 0, sample sd 1) when ``config.scale`` is set and at least two
    distinct values exist on each axis.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"data file not found: {path}")
    text = path.read_text(encoding="utf-8-sig")
    try:
        dialect = csv.Sniffer().sniff(text.split("\n", 1)[0], delimiters=",;\t")
    except csv.Error:
        dialect = csv.excel
    reader = csv.reader(_io.StringIO(text), dialect)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise IOFormatError(f"{path} is empty") from None

    specs = config.specs()
    response = specs[0].response
    covariates = []
    for s in specs:
        for c in s.covariates:
            if c not in covariates:
                covariates.append(c)
    constants = [c for c in covariates if c in config.constant_columns and c not in header]
    wanted = [config.x, config.y, response] + [c for c in covariates if c not in constants]
    col_index = {}
    for name in wanted:
        if name not in header:
            raise IOFormatError(f"column {name!r} not found in {path}; available: {', '.join(header)}")
        col_index[name] = header.index(name)

    values = {name: [] for name in wanted}
    missing_ok = {c: config.missing_covariates == "zero" for c in covariates}
    n = 0
    for lineno, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        n += 1
        for name in wanted:
            j = col_index[name]
            if j >= len(row):
                raise IOFormatError(f"row {lineno} has {len(row)} fields; column {name!r} is missing")
            values[name].append(_parse_cell(row[j], lineno, name, missing_ok.get(name, False)))
    if n == 0:
        raise IOFormatError(f"{path} has no data rows")

    coords = np.column_stack([values[config.x], values[config.y]])
    center = scale = None
    if config.scale and n >= 2:
        sd = coords.std(axis=0, ddof=1)
        if np.all(sd > 0):
            center, scale = coords.mean(axis=0), sd
            coords = (coords - center) / scale
    cov = {}
    for c in covariates:
        if c in constants:
            cov[c] = np.ones(n)
        else:
            col = np.asarray(values[c])
            cov[c] = np.where(np.isnan(col), 0.0, col)
    return Dataset(coords, np.asarray(values[response]), cov, response, center, scale)


def write_dataset(path, dataset: Dataset, x: str = "x", y: str = "y", unscale: bool = True):
    """Write a dataset as CSV (original coordinate units when ``unscale``)."""
    coords = unscale_coords(dataset.coords, dataset.center, dataset.scale) if unscale else dataset.coords
    names = [x, y, dataset.response_name, *sorted(dataset.covariates)]
    cols = [coords[:, 0], coords[:, 1], dataset.response, *(dataset.covariates[k] for k in sorted(dataset.covariates))]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in zip(*cols):
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# polygons
# ---------------------------------------------------------------------------

_NUM_RE = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


class _WKTScanner:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def skip(self):
        while self.pos < len(self.text) and self.text[self.pos].isspace():
            self.pos += 1

    def expect(self, token: str):
        self.skip()
        if not self.text.startswith(token, self.pos):
            found = self.text[self.pos : self.pos + 1] or "end of input"
            raise WKTParseError(f"expected {token!r}, found {found!r}", self.pos)
        self.pos += len(token)

    def peek(self) -> str:
        self.skip()
        return self.text[self.pos : self.pos + 1]

    def number(self) -> float:
        self.skip()
        m = _NUM_RE.match(self.text, self.pos)
        if not m:
            raise WKTParseError("expected a number", self.pos)
        self.pos = m.end()
        return float(m.group())


def parse_wkt_polygon(text: str) -> list[np.ndarray]:
    """Parse ``POLYGON((x y, ...), (...))`` into closed (k, 2) rings."""
    sc = _WKTScanner(text)
    sc.skip()
    if text[sc.pos : sc.pos + 7].upper() != "POLYGON":
        raise WKTParseError("expected 'POLYGON'", sc.pos)
    sc.pos += 7
    sc.expect("(")
    rings = []
    while True:
        start = sc.pos
        sc.expect("(")
        pts = []
        while True:
            pts.append((sc.number(), sc.number()))
            if sc.peek() == ",":
                sc.pos += 1
                continue
            sc.expect(")")
            break
        ring = np.array(pts, dtype=float)
        if not np.all(np.isfinite(ring)):
            raise WKTParseError("non-finite coordinate in ring", start)
        if len(ring) < 4:
            raise WKTParseError("a ring needs at least 4 positions", start)
        if not np.array_equal(ring[0], ring[-1]):
            raise WKTParseError("ring is not closed (first and last positions differ)", start)
        rings.append(ring)
        if sc.peek() == ",":
            sc.pos += 1
            continue
        sc.expect(")")
        break
    sc.skip()
    if sc.pos != len(text):
        raise WKTParseError("unexpected trailing text", sc.pos)
    return rings


def load_polygon(path, center=None, scale=None) -> list[np.ndarray]:
    """Read a WKT polygon file and apply the dataset's coordinate standardization."""
    rings = parse_wkt_polygon(Path(path).read_text(encoding="utf-8"))
    return [scale_coords(r, center, scale) for r in rings]


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SynthTruth:
    """Ground truth behind a synthetic dataset."""

    beta: np.ndarray
    u: np.ndarray  # latent field at the data locations
    theta: dict = field(default_factory=dict)
    mesh: Mesh | None = None
    field: np.ndarray | None = None  # latent field on the mesh vertices
    noise_sd: float = 0.0


def synth_dataset(
    seed: int,
    n: int,
    spde_params: SpdeParams | None,
    beta,
    noise_sd: float,
    domain=(0.0, 1.0, 0.0, 1.0),
    mesh_edge: float | None = None,
) -> tuple[Dataset, SynthTruth]:
    """Simulate the response ``z = X beta + A u + noise`` at ``n`` uniform points.

    ``X`` has an intercept column followed by standard-normal covariates
    ``x1, x2, ...``; ``u`` is drawn from the SPDE precision on a fine mesh
    built around the points. ``spde_params=None`` gives no spatial effect.
    """
    if n < 3:
        raise ValueError("n must be at least 3")
    if not (noise_sd >= 0 and math.isfinite(noise_sd)):
        raise ValueError(f"noise_sd must be finite and >= 0, got {noise_sd}")
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if len(beta) < 1:
        raise ValueError("beta needs at least the intercept")
    x0, x1, y0, y1 = map(float, domain)
    if not (x1 > x0 and y1 > y0):
        raise ValueError(f"invalid domain {domain}")
    rng = np.random.default_rng(seed)
    coords = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
    covs = {f"x{j}": rng.standard_normal(n) for j in range(1, len(beta))}
    X = np.column_stack([np.ones(n), *covs.values()])
    y = X @ beta
    u = np.zeros(n)
    mesh = vertex_field = None
    theta = {}
    if spde_params is not None:
        side = max(x1 - x0, y1 - y0)
        rng_ = spde_summaries(spde_params)["range"]
        h = mesh_edge or min(rng_ / 5.0, side / 10.0)
        mesh = build_mesh(coords, h, 2.0 * h, 0.0, extension=max(rng_, 2.0 * h))
        Q = assemble_precision(fem_matrices(mesh), spde_params)
        vertex_field = SPDFactor(Q).sample(rng)
        u = make_projector(mesh, coords).A @ vertex_field
        y = y + u
        theta = {"log_tau": spde_params.theta1, "log_kappa": spde_params.theta2}
    if noise_sd > 0:
        y = y + noise_sd * rng.standard_normal(n)
        theta["log_prec_noise"] = -2.0 * math.log(noise_sd)
    truth = SynthTruth(beta=beta, u=u, theta=theta, mesh=mesh, field=vertex_field, noise_sd=float(noise_sd))
    return Dataset(coords, y, covs, "z"), truth


# ---------------------------------------------------------------------------
# sectioned result files
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_sections(path, kind: str, sections: list):
    buf = _io.StringIO()
    buf.write(f"# geocv-schema: {kind}/{SCHEMA_VERSION}\n")
    w = csv.writer(buf, lineterminator="\n")
    for name, header, rows in sections:
        buf.write(f"[{name}]\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(buf.getvalue())
    except OSError as exc:
        raise IOFormatError(f"cannot write {path}: {exc}") from exc


def _read_sections(path, kind: str) -> dict:
    with open(path, encoding="utf-8", newline="") as fh:
        lines = fh.read().split("\n")
    m = _SCHEMA_RE.match(lines[0].strip()) if lines else None
    if not m:
        raise SchemaError(f"{path}: missing schema header")
    if m["kind"] != kind:
        raise SchemaError(f"{path}: expected a {kind} file, found {m['kind']}")
    if int(m["version"]) != SCHEMA_VERSION:
        raise SchemaError(f"{path}: schema version {m['version']} is not supported (expected {SCHEMA_VERSION})")
    sections = {}
    current = None
    for line in lines[1:]:
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections[current] = []
            continue
        if current is None:
            raise IOFormatError(f"{path}: content before the first section")
        sections[current].append(next(csv.reader([line])))
    out = {}
    for name, rows in sections.items():
        if not rows:
            raise IOFormatError(f"{path}: section [{name}] has no header")
        out[name] = (rows[0], rows[1:])
    return out


def _kv(section) -> dict:
    return {r[0]: r[1] for r in section[1]}


def _col(section, name: str, conv=float) -> np.ndarray:
    header, rows = section
    j = header.index(name)
    return np.array([conv(r[j]) for r in rows])


def _bool_cell(s: str) -> bool:
    return s == "true"


def write_fit(path, fit: FitResult):
    p = fit.priors
    meta = [
        ("formula", format_formula(fit.spec)),
        ("family", fit.spec.family),
        ("log_marginal", fit.log_marginal),
        ("n_evals", fit.n_evals),
        *((k, fit.metadata[k]) for k in sorted(fit.metadata)),
    ]
    summ = fit.summaries()
    sections = [
        ("meta", ["key", "value"], meta),
        ("theta", ["name", "value"], list(zip(fit.theta_names, fit.theta_hat))),
        ("summaries", ["name", "value"], [(k, summ[k]) for k in sorted(summ)]),
        ("fixed", ["name", "mean", "sd"], list(zip(fit.fixed_names, fit.beta_mean, fit.beta_sd))),
        ("random", ["vertex", "mean", "sd"], list(zip(range(len(fit.u_mean)), fit.u_mean, fit.u_sd))),
        (
            "observations",
            ["index", "lp_mean", "lp_sd", "fitted_mean", "fitted_sd"],
            list(zip(range(len(fit.lp_mean)), fit.lp_mean, fit.lp_sd, fit.fitted_mean, fit.fitted_sd)),
        ),
        (
            "hyper_slices",
            ["name", "theta", "log_density"],
            [(k, t, v) for k in fit.theta_names if k in fit.hyper_slices for t, v in fit.hyper_slices[k]],
        ),
        (
            "priors",
            ["key", "value"],
            [
                ("spde_mean_log_tau", p.spde_mean[0]),
                ("spde_mean_log_kappa", p.spde_mean[1]),
                ("spde_sd_log_tau", p.spde_sd[0]),
                ("spde_sd_log_kappa", p.spde_sd[1]),
                ("noise_mean", p.noise_mean),
                ("noise_sd", p.noise_sd),
                ("fixed_mean", p.fixed_mean),
                ("fixed_prec", p.fixed_prec),
            ],
        ),
        ("warnings", ["message"], [(w,) for w in fit.warnings]),
    ]
    _write_sections(path, "fit", sections)


def _meta_value(text: str):
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_fit(path) -> FitResult:
    """Load a serialized fit. The in-memory posterior factor is not restored,
    so the result supports plotting and diagnostics but not :func:`predict`."""
    s = _read_sections(path, "fit")
    meta = _kv(s["meta"])
    spec = parse_formula(meta.pop("formula"), meta.pop("family"))
    log_marginal = float(meta.pop("log_marginal"))
    n_evals = int(meta.pop("n_evals"))
    pr = {k: float(v) for k, v in _kv(s["priors"]).items()}
    priors = Priors(
        spde_mean=(pr["spde_mean_log_tau"], pr["spde_mean_log_kappa"]),
        spde_sd=(pr["spde_sd_log_tau"], pr["spde_sd_log_kappa"]),
        noise_mean=pr["noise_mean"],
        noise_sd=pr["noise_sd"],
        fixed_mean=pr["fixed_mean"],
        fixed_prec=pr["fixed_prec"],
    )
    names = tuple(r[0] for r in s["theta"][1])
    slices = {}
    for name, t, v in s["hyper_slices"][1]:
        slices.setdefault(name, []).append((float(t), float(v)))
    obs = s["observations"]
    return FitResult(
        spec=spec,
        theta_names=names,
        theta_hat=_col(s["theta"], "value"),
        beta_mean=_col(s["fixed"], "mean"),
        beta_sd=_col(s["fixed"], "sd"),
        u_mean=_col(s["random"], "mean"),
        u_sd=_col(s["random"], "sd"),
        lp_mean=_col(obs, "lp_mean"),
        lp_sd=_col(obs, "lp_sd"),
        fitted_mean=_col(obs, "fitted_mean"),
        fitted_sd=_col(obs, "fitted_sd"),
        log_marginal=log_marginal,
        hyper_slices={k: np.array(v) for k, v in slices.items()},
        priors=priors,
        n_evals=n_evals,
        warnings=tuple(r[0] for r in s["warnings"][1]),
        metadata={k: _meta_value(v) for k, v in meta.items()},
    )


_METRIC_FIELDS = ("k", "mae", "mae_lo", "mae_hi", "rmse", "rmse_lo", "rmse_hi")


def write_sloo(path, result: SlooResult):
    m = len(result.labels)
    meta = [
        ("rad", result.rad),
        ("alpha", result.alpha),
        ("seed", result.seed),
        ("n_runs", result.n_runs),
        ("n_models", m),
        *((k, result.metadata[k]) for k in sorted(result.metadata)),
    ]
    models = list(zip(result.labels, result.formulas, result.families))
    metrics = [(lab, *(getattr(mt, f) for f in _METRIC_FIELDS)) for lab, mt in zip(result.labels, result.metrics)]
    header = ["iteration", "holdout", "x", "y", "observed", "n_removed", "n_train"]
    for j in range(m):
        header += [f"mean_{j + 1}", f"sd_{j + 1}", f"failed_{j + 1}"]
    rows = []
    for i in range(result.n_runs):
        row = [
            i + 1,
            int(result.holdout[i]),
            result.coords[i, 0],
            result.coords[i, 1],
            result.observed[i],
            int(result.n_removed[i]),
            int(result.n_train[i]),
        ]
        for j in range(m):
            row += [result.pred_mean[i, j], result.pred_sd[i, j], bool(result.failed[i, j])]
        rows.append(row)
    _write_sections(
        path,
        "sloo",
        [
            ("meta", ["key", "value"], meta),
            ("models", ["label", "formula", "family"], models),
            ("metrics", ["label", *_METRIC_FIELDS], metrics),
            ("runs", header, rows),
        ],
    )


def read_sloo(path) -> SlooResult:
    s = _read_sections(path, "sloo")
    meta = _kv(s["meta"])
    m = int(meta.pop("n_models"))
    n_runs = int(meta.pop("n_runs"))
    rad, alpha, seed = float(meta.pop("rad")), float(meta.pop("alpha")), int(meta.pop("seed"))
    labels, formulas, families = (tuple(c) for c in zip(*s["models"][1])) if m else ((), (), ())
    metrics = []
    for row in s["metrics"][1]:
        metrics.append(Metrics(int(row[1]), *(float(v) for v in row[2:])))
    runs = s["runs"]
    if len(runs[1]) != n_runs:
        raise IOFormatError(f"{path}: expected {n_runs} runs, found {len(runs[1])}")
    pm = np.column_stack([_col(runs, f"mean_{j + 1}") for j in range(m)]).reshape(n_runs, m)
    ps = np.column_stack([_col(runs, f"sd_{j + 1}") for j in range(m)]).reshape(n_runs, m)
    fl = np.column_stack([_col(runs, f"failed_{j + 1}", _bool_cell) for j in range(m)]).reshape(n_runs, m)
    return SlooResult(
        holdout=_col(runs, "holdout", int),
        coords=np.column_stack([_col(runs, "x"), _col(runs, "y")]).reshape(n_runs, 2),
        observed=_col(runs, "observed"),
        n_removed=_col(runs, "n_removed", int),
        n_train=_col(runs, "n_train", int),
        pred_mean=pm,
        pred_sd=ps,
        failed=fl,
        labels=labels,
        formulas=formulas,
        families=families,
        metrics=tuple(metrics),
        rad=rad,
        alpha=alpha,
        seed=seed,
        metadata=dict(meta),
    )


def write_calibration(path, report: CalibrationReport):
    op = report.obs_pred
    _write_sections(
        path,
        "calibration",
        [
            ("meta", ["key", "value"], [("variant", report.variant), ("ks_statistic", report.ks_statistic)]),
            (
                "observations",
                ["index", "observed", "mean", "sd", "pit"],
                [(i, op[i, 0], op[i, 1], op[i, 2], report.pit[i]) for i in range(len(report.pit))],
            ),
        ],
    )


def read_calibration(path) -> CalibrationReport:
    s = _read_sections(path, "calibration")
    meta = _kv(s["meta"])
    obs = s["observations"]
    op = np.column_stack([_col(obs, "observed"), _col(obs, "mean"), _col(obs, "sd")]).reshape(-1, 3)
    return CalibrationReport(_col(obs, "pit"), meta["variant"], float(meta["ks_statistic"]), op)


def write_mesh(path, mesh: Mesh):
    v, t = mesh.vertices, mesh.triangles
    _write_sections(
        path,
        "mesh",
        [
            ("meta", ["key", "value"], [("n_data", mesh.n_data), ("cutoff", mesh.cutoff)]),
            ("vertices", ["index", "x", "y", "boundary"], [(i, v[i, 0], v[i, 1], bool(mesh.boundary[i])) for i in range(len(v))]),
            ("triangles", ["a", "b", "c"], [tuple(int(k) for k in row) for row in t]),
            ("hull", ["x", "y"], [tuple(p) for p in mesh.hull]),
        ],
    )


def read_mesh(path) -> Mesh:
    s = _read_sections(path, "mesh")
    meta = _kv(s["meta"])
    vs, ts, hs = s["vertices"], s["triangles"], s["hull"]
    return Mesh(
        vertices=np.column_stack([_col(vs, "x"), _col(vs, "y")]).reshape(-1, 2),
        triangles=np.column_stack([_col(ts, k, int) for k in "abc"]).reshape(-1, 3),
        boundary=_col(vs, "boundary", _bool_cell).astype(bool),
        hull=np.column_stack([_col(hs, "x"), _col(hs, "y")]).reshape(-1, 2),
        n_data=int(meta["n_data"]),
        cutoff=float(meta["cutoff"]),
    )


def write_points(path, coords, observed=None):
    """Observation coordinates (model units) and optionally the response."""
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    if observed is None:
        rows = [(i, c[0], c[1]) for i, c in enumerate(coords)]
        header = ["index", "x", "y"]
    else:
        rows = [(i, c[0], c[1], v) for i, (c, v) in enumerate(zip(coords, np.asarray(observed, dtype=float)))]
        header = ["index", "x", "y", "observed"]
    _write_sections(path, "points", [("points", header, rows)])


def read_points(path) -> np.ndarray:
    s = _read_sections(path, "points")["points"]
    return np.column_stack([_col(s, "x"), _col(s, "y")]).reshape(-1, 2)
