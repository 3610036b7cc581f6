import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import brute_dedup, fem_by_hand, shoelace_area

from geocv.mesh import MeshError, Mesh, build_mesh, dedup_points, fem_matrices, make_projector

MEUSE_DEDUP_COUNT = 128  # brute-force greedy scan of the scaled coordinates at cutoff 0.1


def unit_triangle_mesh():
    v = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    return Mesh(v, np.array([[0, 1, 2]]), np.ones(3, bool), v.copy(), 3)


def check_mesh(mesh: Mesh, cutoff=0.0):
    v, t = mesh.vertices, mesh.triangles
    assert t.min() >= 0 and t.max() < len(v)
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    signed = 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))
    assert np.all(signed > 0), "triangles must be counter-clockwise and non-degenerate"
    # conforming: every interior edge is shared by exactly two triangles with opposite orientation
    directed = {}
    for tri in t:
        for k in range(3):
            e = (int(tri[k]), int(tri[(k + 1) % 3]))
            assert e not in directed
            directed[e] = True
    for (i, j) in directed:
        # boundary edges have no twin; interior twins must be reversed
        if (j, i) in directed:
            continue
        assert mesh.boundary[i] and mesh.boundary[j]
    if cutoff > 0:
        d = np.hypot(*(v[:, None, :] - v[None, :, :]).transpose(2, 0, 1))
        np.fill_diagonal(d, np.inf)
        assert d.min() >= cutoff * (1 - 1e-12)


class TestDedup:
    def test_identical_points_collapse(self):
        assert len(dedup_points([[0.3, 0.3], [0.3, 0.3]], 0.1)) == 1

    def test_zero_cutoff_is_identity(self):
        pts = np.random.default_rng(0).uniform(size=(20, 2))
        pts[5] = pts[3]
        np.testing.assert_array_equal(dedup_points(pts, 0.0), pts)

    def test_empty_input(self):
        with pytest.raises(MeshError, match="no points"):
            dedup_points(np.empty((0, 2)), 0.1)

    def test_meuse_count(self, meuse):
        ds, _, _ = meuse
        out = dedup_points(ds.coords, 0.1)
        assert len(out) == MEUSE_DEDUP_COUNT
        np.testing.assert_array_equal(out, brute_dedup(ds.coords, 0.1))

    def test_first_occurrence_wins(self):
        pts = np.array([[0.0, 0.0], [0.05, 0.0], [1.0, 1.0]])
        np.testing.assert_array_equal(dedup_points(pts, 0.1), pts[[0, 2]])

    def test_exact_cutoff_distance_kept(self):
        pts = np.array([[0.0, 0.0], [0.25, 0.0]])
        assert len(dedup_points(pts, 0.25)) == 2

    @given(st.integers(0, 10_000), st.floats(0.0, 0.5))
    def test_matches_oracle_and_postconditions(self, seed, cutoff):
        pts = np.random.default_rng(seed).uniform(size=(40, 2))
        out = dedup_points(pts, cutoff)
        np.testing.assert_array_equal(out, brute_dedup(pts, cutoff))
        if len(out) > 1 and cutoff > 0:
            d = np.hypot(*(out[:, None] - out[None]).transpose(2, 0, 1))
            np.fill_diagonal(d, np.inf)
            assert d.min() >= cutoff
        cover = np.hypot(*(pts[:, None] - out[None]).transpose(2, 0, 1)).min(axis=1)
        assert np.all(cover <= cutoff)

    @given(st.integers(0, 10_000))
    def test_small_cutoff_is_no_op(self, seed):
        pts = np.random.default_rng(seed).uniform(size=(25, 2))
        d = np.hypot(*(pts[:, None] - pts[None]).transpose(2, 0, 1))
        np.fill_diagonal(d, np.inf)
        np.testing.assert_array_equal(dedup_points(pts, 0.5 * d.min()), pts)


class TestBuildMesh:
    def test_meuse_mesh(self, meuse):
        ds, mesh, _ = meuse
        check_mesh(mesh, cutoff=0.1)
        kept = dedup_points(ds.coords, 0.1)
        np.testing.assert_array_equal(mesh.vertices[: mesh.n_data], kept)
        # every observation lies inside the mesh
        assert make_projector(mesh, ds.coords).inside.all()

    def test_meuse_edge_bounds(self, meuse):
        _, mesh, _ = meuse
        e = mesh.edges
        L = np.hypot(*(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]]).T)
        assert L.max() <= 1.5 * 0.5 + 1e-12

    def test_three_points_huge_max_edge(self):
        pts = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        mesh = build_mesh(pts, 100.0, 100.0, 0.0, extension=0.5)
        check_mesh(mesh)
        np.testing.assert_array_equal(mesh.vertices[:3], pts)
        # no refinement inside the hull: the data triangle is an element
        assert any(sorted(t) == [0, 1, 2] for t in mesh.triangles.tolist())
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        np.testing.assert_allclose(lo, [-0.5, -0.5], atol=1e-12)
        assert hi[0] >= 1.0 + 0.5 * np.sqrt(0.5) - 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_inner_edges_refined(self, seed):
        pts = np.random.default_rng(seed).uniform(size=(30, 2))
        mesh = build_mesh(pts, 0.3, 0.6, 0.0)
        check_mesh(mesh)
        # exhaustive scan: every edge with both ends in the data hull
        from scipy.spatial import Delaunay

        hull_tri = Delaunay(mesh.hull)
        inside = hull_tri.find_simplex(mesh.vertices, tol=1e-9) >= 0
        for i, j in mesh.edges:
            L = np.hypot(*(mesh.vertices[i] - mesh.vertices[j]))
            limit = 0.45 if (inside[i] and inside[j]) else 0.9
            assert L <= limit + 1e-12

    def test_collinear_rejected(self):
        pts = np.column_stack([np.linspace(0, 1, 5), np.linspace(0, 2, 5)])
        with pytest.raises(MeshError, match="degenerate geometry"):
            build_mesh(pts, 0.2, 0.5)

    def test_too_few_points(self):
        with pytest.raises(MeshError, match="degenerate geometry"):
            build_mesh([[0, 0], [1, 1], [1, 1.01]], 0.2, 0.5, cutoff=0.1)

    @pytest.mark.parametrize(
        "kw",
        [
            dict(max_edge_inner=np.nan, max_edge_outer=0.5),
            dict(max_edge_inner=0.2, max_edge_outer=np.inf),
            dict(max_edge_inner=0.2, max_edge_outer=0.5, cutoff=np.nan),
            dict(max_edge_inner=0.2, max_edge_outer=0.5, extension=np.inf),
            dict(max_edge_inner=0.6, max_edge_outer=0.5),
            dict(max_edge_inner=-0.1, max_edge_outer=0.5),
        ],
    )
    def test_bad_parameters(self, kw):
        pts = np.random.default_rng(0).uniform(size=(10, 2))
        with pytest.raises(MeshError):
            build_mesh(pts, **kw)

    def test_deterministic(self):
        pts = np.random.default_rng(3).uniform(size=(25, 2))
        a, b = build_mesh(pts, 0.2, 0.4, 0.02), build_mesh(pts, 0.2, 0.4, 0.02)
        np.testing.assert_array_equal(a.vertices, b.vertices)
        np.testing.assert_array_equal(a.triangles, b.triangles)

    def test_contains_all_points_without_cutoff(self):
        pts = np.random.default_rng(4).uniform(size=(40, 2))
        mesh = build_mesh(pts, 0.25, 0.5)
        np.testing.assert_array_equal(mesh.vertices[:40], pts)


class TestFem:
    def test_unit_triangle(self):
        fem = fem_matrices(unit_triangle_mesh())
        np.testing.assert_allclose(fem.c, [1 / 6] * 3, atol=1e-15)
        G = np.array([[1, -0.5, -0.5], [-0.5, 0.5, 0], [-0.5, 0, 0.5]])
        np.testing.assert_allclose(fem.G.toarray(), G, atol=1e-15)

    def test_meuse_invariants(self, meuse):
        _, mesh, fem = meuse
        assert np.all(fem.c > 0)
        np.testing.assert_allclose(fem.c.sum(), shoelace_area(mesh.vertices, mesh.triangles), rtol=0, atol=1e-10)
        G = fem.G
        assert abs(G - G.T).max() <= 1e-12
        assert np.abs(G @ np.ones(mesh.n_vertices)).max() <= 1e-10

    @pytest.mark.parametrize("seed", range(6))
    def test_matches_hand_assembly_and_psd(self, seed):
        pts = np.random.default_rng(seed).uniform(size=(8, 2))
        mesh = build_mesh(pts, 0.5, 1.0, 0.0, extension=0.3)
        assert mesh.n_vertices <= 50
        fem = fem_matrices(mesh)
        C, G = fem_by_hand(mesh.vertices, mesh.triangles)
        np.testing.assert_allclose(fem.c, C, rtol=1e-12)
        np.testing.assert_allclose(fem.G.toarray(), G, atol=1e-12)
        assert np.linalg.eigvalsh(G).min() >= -1e-10
        np.testing.assert_allclose(fem.c.sum(), shoelace_area(mesh.vertices, mesh.triangles), atol=1e-10)


class TestProjector:
    def test_vertex_location(self, meuse):
        _, mesh, _ = meuse
        P = make_projector(mesh, mesh.vertices[[7, 100]])
        row = P.A.toarray()
        assert row[0, 7] == 1.0 and row[0].sum() == 1.0 and np.count_nonzero(row[0]) == 1
        assert row[1, 100] == 1.0 and np.count_nonzero(row[1]) == 1

    def test_centroid(self, meuse):
        _, mesh, _ = meuse
        t = mesh.triangles[10]
        P = make_projector(mesh, mesh.vertices[t].mean(axis=0))
        np.testing.assert_allclose(P.A.toarray()[0, t], [1 / 3] * 3, atol=1e-15)

    def test_outside_flagged(self, meuse):
        _, mesh, _ = meuse
        P = make_projector(mesh, [[100.0, 100.0], [0.0, 0.0]])
        assert P.inside.tolist() == [False, True]
        assert P.A[0].nnz == 0

    def test_linear_reproduction(self, meuse):
        _, mesh, _ = meuse
        rng = np.random.default_rng(11)
        lo, hi = mesh.hull.min(axis=0), mesh.hull.max(axis=0)
        q = rng.uniform(lo, hi, size=(400, 2))
        P = make_projector(mesh, q)
        q = q[P.inside][:50]
        A = make_projector(mesh, q).A
        assert len(q) == 50
        np.testing.assert_allclose(A @ mesh.vertices[:, 0], q[:, 0], atol=1e-12)
        np.testing.assert_allclose(A @ mesh.vertices[:, 1], q[:, 1], atol=1e-12)

    def test_shared_edge_goes_to_lowest_triangle(self, meuse):
        _, mesh, _ = meuse
        e = mesh.edges[len(mesh.edges) // 2]
        mid = mesh.vertices[e].mean(axis=0)
        which, _ = mesh.locate(mid[None])
        owners = [k for k, t in enumerate(mesh.triangles.tolist()) if e[0] in t and e[1] in t]
        assert which[0] == min(owners)

    @given(st.integers(0, 10_000))
    def test_row_properties(self, seed):
        pts = np.random.default_rng(seed).uniform(size=(12, 2))
        mesh = build_mesh(pts, 0.4, 0.8, 0.0, extension=0.2)
        q = np.random.default_rng(seed + 1).uniform(-0.5, 1.5, size=(60, 2))
        P = make_projector(mesh, q)
        A = P.A.toarray()
        ins = P.inside
        assert np.all((A[ins] >= 0) & (A[ins] <= 1))
        assert np.all(np.count_nonzero(A[ins], axis=1) <= 3)
        np.testing.assert_allclose(A[ins].sum(axis=1), 1.0, atol=1e-12)
        assert not A[~ins].any()
