"""Triangular meshes, piecewise-linear FEM matrices and projector matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull, Delaunay, QhullError, cKDTree

from .linalg import SparseTemplate

__all__ = [
    "MeshError",
    "Mesh",
    "Projector",
    "FemMatrices",
    "dedup_points",
    "build_mesh",
    "fem_matrices",
    "make_projector",
]

# barycentric tolerance for point location; a query is inside a triangle when
# every coordinate is >= -INSIDE_TOL
INSIDE_TOL = 1e-12
SNAP_TOL = 1e-14
EDGE_SLACK = 1.5
MAX_REFINE_ROUNDS = 200


class MeshError(ValueError):
    pass


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1 and pts.size == 2:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise MeshError(f"expected an (n, 2) array of points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise MeshError("point coordinates must be finite")
    return pts


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming, counter-clockwise triangulation.

    The first ``n_data`` vertices are the deduplicated input locations, in
    input order. ``hull`` is the counter-clockwise convex hull of those data
    vertices (the inner refinement region).
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary: np.ndarray
    hull: np.ndarray
    n_data: int
    cutoff: float = 0.0

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def areas(self) -> np.ndarray:
        return _signed_areas(self.vertices, self.triangles)

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted vertex pairs, lexicographically ordered."""
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def _locator(self) -> "_TriangleLocator":
        return _TriangleLocator(self.vertices, self.triangles)

    def locate(self, locs) -> tuple[np.ndarray, np.ndarray]:
        """Triangle index (``-1`` outside) and barycentric weights for each location."""
        return self._locator.locate(_as_points(locs))


@dataclass(frozen=True, eq=False)
class Projector:
    """Barycentric interpolation matrix from mesh vertices to locations."""

    A: sp.csr_matrix
    inside: np.ndarray

    @property
    def outside(self) -> np.ndarray:
        return ~self.inside


@dataclass(frozen=True, eq=False)
class FemMatrices:
    """Lumped mass diagonal ``c`` and stiffness matrix ``G``."""

    c: np.ndarray
    G: sp.csr_matrix

    @property
    def C(self) -> sp.csr_matrix:
        return sp.diags(self.c, format="csr")

    @cached_property
    def GCiG(self) -> sp.csr_matrix:
        H = self.G @ sp.diags(1.0 / self.c) @ self.G
        return (0.5 * (H + H.T)).tocsr()

    @cached_property
    def spde_template(self) -> SparseTemplate:
        return SparseTemplate([self.C, self.G, self.GCiG])

    @cached_property
    def K_template(self) -> SparseTemplate:
        return SparseTemplate([self.C, self.G])


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------


def _signed_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    p0 = vertices[triangles[:, 0]]
    p1 = vertices[triangles[:, 1]]
    p2 = vertices[triangles[:, 2]]
    return 0.5 * (
        (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1])
        - (p2[:, 0] - p0[:, 0]) * (p1[:, 1] - p0[:, 1])
    )


def _polygon_edges(poly: np.ndarray):
    return poly, np.roll(poly, -1, axis=0)


def _signed_edge_distance(poly: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Minimum over edges of the signed distance to each edge line of a CCW convex
    polygon: positive inside, negative outside."""
    a, b = _polygon_edges(poly)
    d = b - a
    length = np.hypot(d[:, 0], d[:, 1])
    # inward normal of a CCW polygon is (-dy, dx)
    nx = -d[:, 1] / length
    ny = d[:, 0] / length
    s = (pts[:, None, 0] - a[None, :, 0]) * nx[None, :] + (pts[:, None, 1] - a[None, :, 1]) * ny[None, :]
    return s.min(axis=1)


def _subdivide(a: np.ndarray, b: np.ndarray, h: float) -> np.ndarray:
    """Interior points splitting segment a-b into pieces no longer than h."""
    L = float(np.hypot(*(b - a)))
    k = max(1, math.ceil(L / h))
    t = np.arange(1, k)[:, None] / k
    return a[None, :] + t * (b - a)[None, :]


def _tri_lattice(lo: np.ndarray, hi: np.ndarray, h: float) -> np.ndarray:
    dy = h * math.sqrt(3.0) / 2.0
    ny = int(math.floor((hi[1] - lo[1]) / dy)) + 1
    nx = int(math.floor((hi[0] - lo[0]) / h)) + 2
    rows = []
    for j in range(ny):
        off = 0.5 * h if j % 2 else 0.0
        x = lo[0] + off + h * np.arange(nx)
        rows.append(np.column_stack([x, np.full(nx, lo[1] + j * dy)]))
    pts = np.vstack(rows)
    keep = (pts[:, 0] <= hi[0]) & (pts[:, 1] <= hi[1])
    return pts[keep]


def _offset_polygon(hull: np.ndarray, ext: float, h: float) -> np.ndarray:
    """Sampled boundary of the convex hull buffered by ``ext``, CCW."""
    n = len(hull)
    out = []
    for k in range(n):
        prev = hull[k - 1]
        cur = hull[k]
        nxt = hull[(k + 1) % n]
        d_in = cur - prev
        d_out = nxt - cur
        # outward normal of a CCW edge is (dy, -dx)
        a0 = math.atan2(-d_in[0], d_in[1])
        a1 = math.atan2(-d_out[0], d_out[1])
        if a1 < a0:
            a1 += 2.0 * math.pi
        m = max(1, math.ceil((a1 - a0) * ext / h))
        ang = a0 + (a1 - a0) * np.arange(m + 1) / m
        arc = cur[None, :] + ext * np.column_stack([np.cos(ang), np.sin(ang)])
        out.append(arc)
        nxt_start = nxt + ext * np.array([math.cos(a1), math.sin(a1)])
        out.append(_subdivide(arc[-1], nxt_start, h))
    return np.vstack(out)


def _greedy_filter(existing: np.ndarray, cand: np.ndarray, radius: float) -> np.ndarray:
    """Candidates at distance >= radius from existing points and from earlier kept candidates."""
    if len(cand) == 0:
        return cand
    if radius <= 0:
        return cand
    keep = np.ones(len(cand), dtype=bool)
    if len(existing):
        d, _ = cKDTree(existing).query(cand, k=1)
        keep &= d >= radius
    idx = np.flatnonzero(keep)
    sub = cand[idx]
    tree = cKDTree(sub)
    alive = np.ones(len(sub), dtype=bool)
    for i in range(len(sub)):
        if not alive[i]:
            continue
        for j in tree.query_ball_point(sub[i], radius):
            if j > i and np.hypot(*(sub[j] - sub[i])) < radius:
                alive[j] = False
    return sub[alive]


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def _dedup_index(pts: np.ndarray, cutoff: float) -> np.ndarray:
    n = len(pts)
    if cutoff <= 0:
        return np.arange(n)
    tree = cKDTree(pts)
    suppressed = np.zeros(n, dtype=bool)
    kept = []
    for i in range(n):
        if suppressed[i]:
            continue
        kept.append(i)
        for j in tree.query_ball_point(pts[i], cutoff):
            if j > i and np.hypot(*(pts[j] - pts[i])) < cutoff:
                suppressed[j] = True
    return np.asarray(kept, dtype=int)


def dedup_points(points, cutoff: float) -> np.ndarray:
    """Greedy thinning: keep a point unless it lies closer than ``cutoff`` to an
    earlier kept point. ``cutoff == 0`` returns the input unchanged."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2) if np.size(points) else np.empty((0, 2))
    if len(pts) == 0:
        raise MeshError("no points")
    pts = _as_points(pts)
    if not math.isfinite(cutoff) or cutoff < 0:
        raise MeshError(f"cutoff must be finite and >= 0, got {cutoff}")
    return pts[_dedup_index(pts, cutoff)]


def build_mesh(
    points,
    max_edge_inner: float,
    max_edge_outer: float,
    cutoff: float = 0.0,
    extension: float | None = None,
) -> Mesh:
    """Triangulate the convex hull of ``points`` plus an outer extension ring.

    Every deduplicated input point becomes a vertex. Edges with both ends in
    the data hull are refined to at most ``1.5 * max_edge_inner``; all other
    edges to at most ``1.5 * max_edge_outer``.
    """
    params = dict(max_edge_inner=max_edge_inner, max_edge_outer=max_edge_outer, cutoff=cutoff)
    if extension is not None:
        params["extension"] = extension
    for name, v in params.items():
        if not isinstance(v, (int, float, np.floating, np.integer)) or not math.isfinite(v):
            raise MeshError(f"{name} must be a finite number, got {v!r}")
    if max_edge_inner <= 0 or max_edge_outer <= 0:
        raise MeshError("max_edge values must be positive")
    if max_edge_inner > max_edge_outer:
        raise MeshError("max_edge_inner must not exceed max_edge_outer")
    if extension is not None and extension <= 0:
        raise MeshError("extension must be positive")

    data = dedup_points(points, cutoff)
    if len(data) < 3:
        raise MeshError("degenerate geometry: fewer than 3 distinct points")
    try:
        ch = ConvexHull(data)
    except QhullError as exc:
        raise MeshError("degenerate geometry: points are collinear") from exc
    hull = data[ch.vertices]
    if ch.volume <= 1e-12 * max(np.ptp(data[:, 0]), np.ptp(data[:, 1])) ** 2:
        raise MeshError("degenerate geometry: points are collinear")
    diameter = float(np.max(np.hypot(*(hull[:, None, :] - hull[None, :, :]).transpose(2, 0, 1))))
    ext = 0.3 * diameter if extension is None else float(extension)
    h_in, h_out = float(max_edge_inner), float(max_edge_outer)

    # Steiner candidates, in priority order after the data points
    hull_pts = np.vstack([_subdivide(hull[k], hull[(k + 1) % len(hull)], h_in) for k in range(len(hull))])
    lo, hi = hull.min(axis=0), hull.max(axis=0)
    lattice_in = _tri_lattice(lo, hi, h_in)
    lattice_in = lattice_in[_signed_edge_distance(hull, lattice_in) >= 0.5 * h_in]
    outer = _offset_polygon(hull, ext, h_out)
    lo, hi = outer.min(axis=0), outer.max(axis=0)
    outer_hull = outer[ConvexHull(outer).vertices]
    ring = _tri_lattice(lo, hi, h_out)
    ring = ring[
        (-_signed_edge_distance(hull, ring) >= 0.5 * h_out)
        & (_signed_edge_distance(outer_hull, ring) >= 0.5 * h_out)
    ]

    verts = data
    for cand, radius in (
        (hull_pts, max(cutoff, 0.5 * h_in)),
        (lattice_in, max(cutoff, 0.5 * h_in)),
        (outer, cutoff),
        (ring, max(cutoff, 0.5 * h_out)),
    ):
        verts = np.vstack([verts, _greedy_filter(verts, cand, radius)])

    domain = verts[ConvexHull(verts).vertices]
    verts, tri = _refine(verts, hull, domain, h_in, h_out, cutoff)

    tri = tri.copy()
    areas = _signed_areas(verts, tri)
    flip = areas < 0
    tri[flip] = tri[flip][:, [0, 2, 1]]
    areas = np.abs(areas)
    scale = max(np.ptp(verts[:, 0]), np.ptp(verts[:, 1]))
    if np.any(areas <= 1e-14 * scale * scale):
        raise MeshError("degenerate geometry: zero-area triangle produced")

    bnd = np.zeros(len(verts), dtype=bool)
    bnd[ConvexHull(verts).vertices] = True
    # collinear points on hull edges are boundary too
    bnd |= np.abs(_signed_edge_distance(domain, verts)) <= 1e-9 * scale
    return Mesh(
        vertices=verts,
        triangles=tri,
        boundary=bnd,
        hull=hull,
        n_data=len(data),
        cutoff=float(cutoff),
    )


def _delaunay(verts: np.ndarray) -> np.ndarray:
    """Delaunay connectivity, robust to collinear points on the convex hull.

    Points lying on a hull edge are pushed outward along a tiny parabolic
    bulge before triangulating, so the hull is strictly convex and Qhull does
    not emit zero-area caps; the connectivity is then used with the original
    coordinates.
    """
    scale = max(np.ptp(verts[:, 0]), np.ptp(verts[:, 1]))
    lifted = _bulge_hull_points(verts, scale)
    dt = Delaunay(lifted)
    if len(dt.coplanar):
        raise MeshError("triangulation dropped vertices")
    tri = dt.simplices.astype(np.int64)
    if np.any(np.abs(_signed_areas(verts, tri)) <= 1e-12 * scale * scale):
        raise MeshError("degenerate geometry: zero-area triangle produced")
    return tri


def _bulge_hull_points(verts: np.ndarray, scale: float, rel: float = 1e-7) -> np.ndarray:
    try:
        hv = ConvexHull(verts).vertices
    except QhullError as exc:
        raise MeshError("degenerate geometry: points are collinear") from exc
    out = verts.copy()
    on_hull = np.zeros(len(verts), dtype=bool)
    on_hull[hv] = True
    tol = 1e-9 * scale
    for a, b in zip(hv, np.roll(hv, -1)):
        d = verts[b] - verts[a]
        L = float(np.hypot(*d))
        # outward normal of a CCW edge is (dy, -dx)
        nrm = np.array([d[1], -d[0]]) / L
        rel_pts = verts - verts[a]
        t = rel_pts @ d / (L * L)
        dist = rel_pts @ nrm
        sel = (~on_hull) & (np.abs(dist) <= tol) & (t > 0) & (t < 1)
        out[sel] += (rel * L * 4.0 * t[sel] * (1.0 - t[sel]))[:, None] * nrm
    return out


def _circumcenters(p0, p1, p2):
    ax, ay = p0[:, 0], p0[:, 1]
    bx, by = p1[:, 0] - ax, p1[:, 1] - ay
    cx, cy = p2[:, 0] - ax, p2[:, 1] - ay
    d = 2.0 * (bx * cy - by * cx)
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    # degenerate triangles give non-finite centres, which the caller rejects
    with np.errstate(divide="ignore", invalid="ignore"):
        ux = (cy * b2 - by * c2) / d
        uy = (bx * c2 - cx * b2) / d
    return np.column_stack([ax + ux, ay + uy])


def _refine(verts, hull, domain, h_in, h_out, cutoff):
    scale = max(np.ptp(domain[:, 0]), np.ptp(domain[:, 1]))
    tol = 1e-9 * scale
    for _ in range(MAX_REFINE_ROUNDS):
        tri = _delaunay(verts)
        inside = _signed_edge_distance(hull, verts) >= -tol
        p = [verts[tri[:, k]] for k in range(3)]
        # edge k joins corners k and k+1
        ratios = np.empty((len(tri), 3))
        for k in range(3):
            a, b = tri[:, k], tri[:, (k + 1) % 3]
            L = np.hypot(*(verts[a] - verts[b]).T)
            h = np.where(inside[a] & inside[b], h_in, h_out)
            ratios[:, k] = L / (EDGE_SLACK * h)
        bad = np.flatnonzero(ratios.max(axis=1) > 1.0)
        if len(bad) == 0:
            return verts, tri
        # worst triangles first so insertion order is deterministic and useful
        bad = bad[np.argsort(-ratios[bad].max(axis=1), kind="stable")]
        cc = _circumcenters(p[0][bad], p[1][bad], p[2][bad])
        worst = ratios[bad].argmax(axis=1)
        a = tri[bad, worst]
        b = tri[bad, (worst + 1) % 3]
        mid = 0.5 * (verts[a] + verts[b])
        h_local = np.minimum(
            np.where(inside[a] & inside[b], h_in, h_out),
            h_out,
        )
        finite = np.all(np.isfinite(cc), axis=1)
        cc = np.where(finite[:, None], cc, mid)
        in_domain = finite & (_signed_edge_distance(domain, cc) >= 0.1 * h_local)
        cand = np.where(in_domain[:, None], cc, mid)
        radius = max(cutoff, 0.25 * h_in)
        new = _greedy_filter(verts, cand, radius)
        if len(new) == 0:
            # fall back to plain midpoints with the cutoff as the only spacing rule
            new = _greedy_filter(verts, mid, cutoff if cutoff > 0 else 1e-12 * scale)
            if len(new) == 0:
                raise MeshError("mesh refinement stalled: max_edge bound conflicts with cutoff")
        verts = np.vstack([verts, new])
    raise MeshError(f"mesh refinement did not finish in {MAX_REFINE_ROUNDS} rounds")


def fem_matrices(mesh: Mesh) -> FemMatrices:
    """Lumped mass and piecewise-linear stiffness matrices."""
    v, t = mesh.vertices, mesh.triangles
    n = len(v)
    area = _signed_areas(v, t)
    if np.any(area <= 0):
        raise MeshError("triangles must be counter-clockwise with positive area")
    c = np.bincount(t.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
    # gradient of the hat function at corner k is (b_k, c_k) / (2 area)
    x, y = v[t, 0], v[t, 1]
    b = np.column_stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]])
    cc = np.column_stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]])
    K = (b[:, :, None] * b[:, None, :] + cc[:, :, None] * cc[:, None, :]) / (4.0 * area)[:, None, None]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    G = sp.coo_matrix((K.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    G.sum_duplicates()
    G = (0.5 * (G + G.T)).tocsr()
    return FemMatrices(c=c, G=G)


class _TriangleLocator:
    """Bucket grid over triangle bounding boxes."""

    def __init__(self, vertices: np.ndarray, triangles: np.ndarray):
        self.v = vertices
        self.t = triangles
        P = vertices[triangles]  # (T, 3, 2)
        self.lo = vertices.min(axis=0)
        span = np.maximum(np.ptp(vertices, axis=0), 1e-300)
        ntri = max(len(triangles), 1)
        cells = max(1, int(math.sqrt(ntri / 2.0)))
        self.nx = self.ny = cells
        self.cell = span / cells
        eps = 1e-9 * span
        tlo = np.floor((P.min(axis=1) - eps - self.lo) / self.cell).astype(int)
        thi = np.floor((P.max(axis=1) + eps - self.lo) / self.cell).astype(int)
        tlo = np.clip(tlo, 0, cells - 1)
        thi = np.clip(thi, 0, cells - 1)
        buckets: dict[int, list[int]] = {}
        for k in range(len(triangles)):
            for i in range(tlo[k, 0], thi[k, 0] + 1):
                for j in range(tlo[k, 1], thi[k, 1] + 1):
                    buckets.setdefault(i * cells + j, []).append(k)
        self.buckets = {key: np.asarray(val, dtype=int) for key, val in buckets.items()}
        # precomputed barycentric maps: lambda_{1,2} = M (p - p2)
        x, y = P[:, :, 0], P[:, :, 1]
        det = (y[:, 1] - y[:, 2]) * (x[:, 0] - x[:, 2]) + (x[:, 2] - x[:, 1]) * (y[:, 0] - y[:, 2])
        self.m = np.stack(
            [
                (y[:, 1] - y[:, 2]) / det,
                (x[:, 2] - x[:, 1]) / det,
                (y[:, 2] - y[:, 0]) / det,
                (x[:, 0] - x[:, 2]) / det,
            ],
            axis=1,
        )
        self.p2 = P[:, 2, :]

    def _bary(self, tri_idx: np.ndarray, pts: np.ndarray) -> np.ndarray:
        # pts: (q, 2), tri_idx: (c,) -> (q, c, 3)
        m = self.m[tri_idx]
        dx = pts[:, None, 0] - self.p2[None, tri_idx, 0]
        dy = pts[:, None, 1] - self.p2[None, tri_idx, 1]
        l0 = m[None, :, 0] * dx + m[None, :, 1] * dy
        l1 = m[None, :, 2] * dx + m[None, :, 3] * dy
        return np.stack([l0, l1, 1.0 - l0 - l1], axis=2)

    def locate(self, pts: np.ndarray):
        q = len(pts)
        which = np.full(q, -1, dtype=int)
        lam = np.zeros((q, 3))
        if q == 0 or len(self.t) == 0:
            return which, lam
        ij = np.floor((pts - self.lo) / self.cell).astype(int)
        valid = np.all((ij >= 0) & (ij < [self.nx, self.ny]), axis=1)
        # points exactly on the upper bbox edge belong to the last cell
        on_edge = np.all((ij >= 0) & (ij <= [self.nx, self.ny]), axis=1) & ~valid
        ij[on_edge] = np.minimum(ij[on_edge], [self.nx - 1, self.ny - 1])
        valid |= on_edge
        keys = np.where(valid, ij[:, 0] * self.ny + ij[:, 1], -1)
        for key in np.unique(keys[valid]):
            cand = self.buckets.get(int(key))
            if cand is None:
                continue
            rows = np.flatnonzero(keys == key)
            L = self._bary(cand, pts[rows])
            ok = np.all(L >= -INSIDE_TOL, axis=2)
            hit = ok.any(axis=1)
            first = ok.argmax(axis=1)  # candidates are sorted, so lowest index wins
            r = rows[hit]
            which[r] = cand[first[hit]]
            lam[r] = L[np.flatnonzero(hit), first[hit]]
        return which, lam


def make_projector(mesh: Mesh, locs) -> Projector:
    """Sparse barycentric interpolation matrix; rows outside the mesh are zero."""
    pts = _as_points(locs) if np.size(locs) else np.empty((0, 2))
    which, lam = mesh.locate(pts)
    inside = which >= 0
    lam = np.where(np.abs(lam) < SNAP_TOL, 0.0, lam)
    lam = np.clip(lam, 0.0, None)
    s = lam.sum(axis=1)
    lam[inside] /= s[inside, None]
    rows = np.repeat(np.flatnonzero(inside), 3)
    cols = mesh.triangles[which[inside]].ravel()
    vals = lam[inside].ravel()
    nz = vals != 0.0
    A = sp.csr_matrix((vals[nz], (rows[nz], cols[nz])), shape=(len(pts), mesh.n_vertices))
    A.sum_duplicates()
    return Projector(A=A, inside=inside)
