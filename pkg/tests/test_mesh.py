import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aggfield.mesh import (
    MeshError,
    TriMesh,
    assemble_fem,
    barycentric_coordinates,
    build_regular_mesh,
    load_mesh,
    locate_point,
    save_mesh,
)

UNIT_SQUARE = (0.0, 0.0, 1.0, 1.0)


class TestBuildRegularMesh:
    def test_minimal_lattice(self):
        mesh = build_regular_mesh(UNIT_SQUARE, 1.0, 0.0)
        assert mesh.n_nodes == 4
        assert mesh.n_triangles == 2

    def test_half_spacing(self):
        # 3x3 lattice: 9 nodes, 2 triangles per cell over 4 cells
        mesh = build_regular_mesh(UNIT_SQUARE, 0.5, 0.0)
        assert mesh.n_nodes == 9
        assert mesh.n_triangles == 8

    def test_extended_lattice(self):
        # extension 0.5 enlarges to [-0.5, 1.5]^2: a 5x5 lattice, 32 triangles
        mesh = build_regular_mesh(UNIT_SQUARE, 0.5, 0.5)
        assert mesh.n_nodes == 25
        assert mesh.n_triangles == 32

    def test_interior_spacing(self):
        mesh = build_regular_mesh(UNIT_SQUARE, 0.25, 0.0)
        xs = np.unique(mesh.nodes[:, 0])
        assert np.allclose(np.diff(xs), 0.25, atol=1e-12)

    def test_rejects_bad_input(self):
        with pytest.raises(MeshError):
            build_regular_mesh(UNIT_SQUARE, -1.0)
        with pytest.raises(MeshError):
            build_regular_mesh(UNIT_SQUARE, 0.0)
        with pytest.raises(MeshError):
            build_regular_mesh((0, 0, 0, 1), 0.5)

    def test_orientation_counterclockwise(self):
        mesh = build_regular_mesh(UNIT_SQUARE, 0.5, 0.5)
        assert np.all(mesh.triangle_areas() > 0)


class TestLoadMesh:
    def test_single_triangle(self, tmp_path):
        (tmp_path / "nodes.csv").write_text("id,x,y\n0,0,0\n1,1,0\n2,0,1\n")
        (tmp_path / "triangles.csv").write_text("v0,v1,v2\n0,1,2\n")
        mesh = load_mesh(tmp_path / "nodes.csv", tmp_path / "triangles.csv")
        assert mesh.n_nodes == 3

    def test_out_of_range_index(self, tmp_path):
        (tmp_path / "nodes.csv").write_text("id,x,y\n0,0,0\n1,1,0\n2,0,1\n")
        (tmp_path / "triangles.csv").write_text("v0,v1,v2\n0,1,5\n")
        with pytest.raises(MeshError, match="row 0"):
            load_mesh(tmp_path / "nodes.csv", tmp_path / "triangles.csv")

    def test_zero_area_triangle(self, tmp_path):
        (tmp_path / "nodes.csv").write_text("id,x,y\n0,0,0\n1,1,0\n2,2,0\n")
        (tmp_path / "triangles.csv").write_text("v0,v1,v2\n0,1,2\n")
        with pytest.raises(MeshError, match="degenerate"):
            load_mesh(tmp_path / "nodes.csv", tmp_path / "triangles.csv")

    def test_round_trip(self, tmp_path):
        mesh = build_regular_mesh(UNIT_SQUARE, 0.5, 0.0)
        save_mesh(mesh, tmp_path / "n.csv", tmp_path / "t.csv")
        back = load_mesh(tmp_path / "n.csv", tmp_path / "t.csv")
        np.testing.assert_array_equal(back.nodes, mesh.nodes)
        np.testing.assert_array_equal(back.triangles, mesh.triangles)

    def test_disconnected_rejected(self):
        nodes = [(0, 0), (1, 0), (0, 1), (5, 5), (6, 5), (5, 6)]
        tris = [(0, 1, 2), (3, 4, 5)]
        with pytest.raises(MeshError, match="edge-connected"):
            TriMesh(np.array(nodes, dtype=float), np.array(tris))


class TestAssembleFem:
    def test_single_right_triangle(self):
        # hand integration: lumped mass is area/3 per vertex, area = 1/2
        mesh = TriMesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
        fem = assemble_fem(mesh)
        np.testing.assert_allclose(fem.C_diag(), [1 / 6, 1 / 6, 1 / 6], atol=1e-15)
        assert fem.C_diag().sum() == pytest.approx(0.5)
        # stiffness of the reference element: grad(l0)=(-1,-1), grad(l1)=(1,0), grad(l2)=(0,1)
        expected_G = 0.5 * np.array([[2.0, -1.0, -1.0], [-1.0, 1.0, 0.0], [-1.0, 0.0, 1.0]])
        np.testing.assert_allclose(fem.G.toarray(), expected_G, atol=1e-15)

    def test_constant_nullspace(self):
        mesh = build_regular_mesh(UNIT_SQUARE, 0.25, 0.25)
        fem = assemble_fem(mesh)
        assert np.max(np.abs(fem.G @ np.ones(mesh.n_nodes))) < 1e-12

    def test_area_conservation(self):
        mesh = build_regular_mesh(UNIT_SQUARE, 0.5, 0.0)
        fem = assemble_fem(mesh)
        assert fem.C_diag().sum() == pytest.approx(1.0, abs=1e-10)

    def test_symmetry_and_psd(self):
        mesh = build_regular_mesh((0, 0, 2, 1), 0.5, 0.5)
        assert mesh.n_nodes <= 100
        fem = assemble_fem(mesh)
        G = fem.G.toarray()
        assert np.max(np.abs(G - G.T)) < 1e-12
        assert np.linalg.eigvalsh(G).min() > -1e-10
        assert fem.C_diag().sum() == pytest.approx(mesh.triangle_areas().sum(), abs=1e-10)

    def test_stiffness_sparsity_is_neighbor_limited(self):
        mesh = build_regular_mesh(UNIT_SQUARE, 0.5, 0.0)
        fem = assemble_fem(mesh)
        G = fem.G.tocoo()
        edges = set()
        for t in mesh.triangles:
            for a in t:
                for b in t:
                    edges.add((a, b))
        for i, j in zip(G.row, G.col):
            assert (i, j) in edges


class TestLocatePoint:
    def setup_method(self):
        self.mesh = build_regular_mesh(UNIT_SQUARE, 0.5, 0.0)

    def test_vertex_location(self):
        hit = locate_point(self.mesh, self.mesh.nodes[4])
        assert hit is not None
        t, lam = hit
        k = np.argmax(lam)
        assert lam[k] == pytest.approx(1.0, abs=1e-12)
        assert self.mesh.triangles[t][k] == 4

    def test_centroid(self):
        tri = self.mesh.triangles[3]
        centroid = self.mesh.nodes[tri].mean(axis=0)
        t, lam = locate_point(self.mesh, centroid)
        np.testing.assert_allclose(lam, [1 / 3, 1 / 3, 1 / 3], atol=1e-12)

    def test_outside_hull(self):
        assert locate_point(self.mesh, (2.0, 2.0)) is None
        assert locate_point(self.mesh, (-0.1, 0.5)) is None

    def test_boundary_tie_lowest_triangle(self):
        # midpoint of the diagonal shared by triangles 0 and 1
        t, _ = locate_point(self.mesh, (0.25, 0.25))
        assert t == 0

    @given(st.floats(0, 1), st.floats(0, 1))
    @settings(max_examples=50, deadline=None)
    def test_barycentric_reproduces_query(self, x, y):
        hit = locate_point(self.mesh, (x, y))
        assert hit is not None
        t, lam = hit
        rebuilt = lam @ self.mesh.nodes[self.mesh.triangles[t]]
        np.testing.assert_allclose(rebuilt, [x, y], atol=1e-12)


def test_barycentric_coordinates_vectorized():
    tri = np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]])
    lam = barycentric_coordinates(np.array([[0.5, 0.5], [1.0, 1.0]]), tri)
    np.testing.assert_allclose(lam.sum(axis=1), 1.0, atol=1e-14)
    np.testing.assert_allclose(lam[1], [0.0, 0.5, 0.5], atol=1e-14)
