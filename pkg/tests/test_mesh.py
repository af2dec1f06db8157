import numpy as np
import pytest

from flowbench import basis, mesh


class TestCartesianMesh:
    def test_2d_counts(self):
        m = mesh.cartesian_mesh((4, 4))
        assert m.num_elements == 16
        assert m.num_vertices == 25
        assert m.boundary_faces.shape[0] == 16
        assert m.boundary_attributes() == {1, 2, 3, 4}

    def test_3d_periodic_counts(self):
        m = mesh.cartesian_mesh((6, 6, 6), periodic=(True, True, True))
        assert m.num_elements == 216
        assert m.num_vertices == 216
        assert m.boundary_faces.shape[0] == 0

    def test_rectangle_extents(self):
        m = mesh.cartesian_mesh((4, 4), lows=(-0.5, -0.5), highs=(1.0, 1.5))
        assert m.vertices[:, 0].min() == pytest.approx(-0.5)
        assert m.vertices[:, 0].max() == pytest.approx(1.0)
        assert m.vertices[:, 1].max() == pytest.approx(1.5)
        widths = m.corners[0].max(axis=0) - m.corners[0].min(axis=0)
        assert np.allclose(widths, [0.375, 0.5])

    def test_interior_faces_shared_by_two(self):
        for m in (
            mesh.cartesian_mesh((3, 4)),
            mesh.cartesian_mesh((3, 3, 3)),
            mesh.cartesian_mesh((4, 3), periodic=(True, False)),
        ):
            counts = mesh.interior_face_counts(m)
            nbf = sum(1 for c in counts.values() if c == 1)
            assert set(counts.values()) <= {1, 2}
            assert nbf == m.boundary_faces.shape[0]

    def test_periodic_needs_three_cells(self):
        with pytest.raises(ValueError):
            mesh.cartesian_mesh((2, 4), periodic=(True, False))

    def test_invalid_args(self):
        with pytest.raises(ValueError):
            mesh.cartesian_mesh((4,))
        with pytest.raises(ValueError):
            mesh.cartesian_mesh((0, 4))
        with pytest.raises(ValueError):
            mesh.cartesian_mesh((4, 4), lows=(0, 0), highs=(0, 1))

    def test_corner_order_lexicographic(self):
        m = mesh.cartesian_mesh((2, 2))
        c = m.corners[0]
        assert np.allclose(c[0], [0.0, 0.0])
        assert np.allclose(c[1], [0.5, 0.0])
        assert np.allclose(c[2], [0.0, 0.5])
        assert np.allclose(c[3], [0.5, 0.5])


class TestGeometricFactors:
    def test_affine_jacobian(self):
        m = mesh.cartesian_mesh((4, 2), highs=(2.0, 1.0))
        rule = basis.quadrature_rule(basis.GAUSS_LEGENDRE, 3)
        g = mesh.compute_geometric_factors(m, rule)
        # cells are 0.5 x 0.5 so J = diag(0.25, 0.25)
        assert np.allclose(g.jac[..., 0, 0], 0.25)
        assert np.allclose(g.jac[..., 1, 1], 0.25)
        assert np.allclose(g.jac[..., 0, 1], 0.0)
        assert np.allclose(g.detj, 0.0625)
        assert np.allclose(g.jinv[..., 0, 0], 4.0)

    @pytest.mark.parametrize("d", [2, 3])
    def test_volume_partition(self, d):
        counts = (3, 2) if d == 2 else (2, 3, 2)
        highs = (2.0, 1.0) if d == 2 else (1.0, 2.0, 1.5)
        m = mesh.cartesian_mesh(counts, highs=highs)
        m = mesh.perturb_mesh(m, 0.08, seed=3)
        rule = basis.quadrature_rule(basis.GAUSS_LEGENDRE, 4)
        g = mesh.compute_geometric_factors(m, rule)
        vol = float(np.sum(g.detj * g.w[None, :]))
        assert vol == pytest.approx(float(np.prod(highs)), rel=1e-12)

    @pytest.mark.parametrize("d", [2, 3])
    def test_jacobian_matches_finite_differences(self, d):
        # oracle: an independent test-side evaluation of the multilinear map,
        # differenced along each reference axis
        def q1map(corners_e, xi):
            val = np.zeros(d)
            for c in range(2**d):
                w = 1.0
                for a in range(d):
                    bit = (c >> a) & 1
                    w *= (1.0 + (2 * bit - 1) * xi[a]) / 2.0
                val += w * corners_e[c]
            return val

        counts = (2, 2) if d == 2 else (2, 2, 2)
        m = mesh.perturb_mesh(mesh.cartesian_mesh(counts), 0.1, seed=7)
        eps = 1e-6
        for t in (-0.57, 0.12, 0.83):
            rule = basis.QuadratureRule1D("custom", np.array([t]), np.array([1.0]))
            g = mesh.compute_geometric_factors(m, rule)
            for e in range(m.num_elements):
                for a in range(d):
                    xp = np.full(d, t)
                    xm = np.full(d, t)
                    xp[a] += eps
                    xm[a] -= eps
                    fd = (q1map(m.corners[e], xp) - q1map(m.corners[e], xm)) / (2 * eps)
                    assert np.allclose(g.jac[e, 0, :, a], fd, atol=1e-8)

    def test_jinv_is_inverse(self):
        m = mesh.perturb_mesh(mesh.cartesian_mesh((2, 2, 2)), 0.1, seed=1)
        rule = basis.quadrature_rule(basis.GAUSS_LEGENDRE, 2)
        g = mesh.compute_geometric_factors(m, rule)
        eye = np.einsum("eqab,eqbc->eqac", g.jac, g.jinv)
        target = np.broadcast_to(np.eye(3), eye.shape)
        assert np.allclose(eye, target, atol=1e-13)

    def test_inverted_element_rejected(self):
        m = mesh.cartesian_mesh((2, 2))
        bad = mesh.Mesh(
            m.dim,
            m.vertices,
            m.elements,
            m.corners[:, [1, 0, 3, 2], :],
            m.boundary_faces,
            m.periodic,
        )
        with pytest.raises(ValueError, match="det J"):
            mesh.compute_geometric_factors(bad, basis.quadrature_rule(basis.GAUSS_LEGENDRE, 2))


class TestVTKRoundTrip:
    def test_mesh_roundtrip(self, tmp_path):
        m = mesh.perturb_mesh(mesh.cartesian_mesh((3, 2)), 0.05, seed=2)
        path = tmp_path / "m.vtk"
        mesh.write_vtk_mesh(m, path, point_data={"h": np.arange(m.num_vertices, dtype=float)})
        m2 = mesh.read_vtk_mesh(path)
        assert m2.dim == 2
        assert m2.num_elements == m.num_elements
        assert np.allclose(m2.vertices, m.vertices)
        assert np.array_equal(m2.elements, m.elements)
        assert m2.boundary_faces.shape[0] == m.boundary_faces.shape[0]

    def test_hex_roundtrip(self, tmp_path):
        m = mesh.cartesian_mesh((2, 2, 2))
        path = tmp_path / "m3.vtk"
        mesh.write_vtk_mesh(m, path)
        m2 = mesh.read_vtk_mesh(path)
        assert m2.dim == 3
        assert np.array_equal(m2.elements, m.elements)
        g = mesh.compute_geometric_factors(m2, basis.quadrature_rule(basis.GAUSS_LEGENDRE, 2))
        assert np.all(g.detj > 0)
