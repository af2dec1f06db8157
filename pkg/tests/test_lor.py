"""Refined-mesh construction, Q1 assembly, transfers, spectral reports."""

import io

import numpy as np
import pytest
import scipy.io
import scipy.sparse as sp

from flowbench import mfop
from flowbench.basis import gauss_lobatto_nodes
from flowbench.fespace import FESpace
from flowbench.lor import (build_lor_mesh, coarse_q1_interpolation,
                           constrain_matrix, export_matrix_market, lor_matrix,
                           nodal_interpolation, spectral_equivalence_report)
from flowbench.mesh import cartesian_mesh, compute_geometric_factors, perturb_mesh


def test_refined_mesh_reuses_nodal_coordinates():
    space = FESpace(cartesian_mesh((3, 2)), 5)
    lor = build_lor_mesh(space)
    assert lor.mesh.num_vertices == space.ndofs_scalar
    assert lor.mesh.vertices is space.node_coords
    assert lor.mesh.num_elements == 6 * 25
    assert lor.macro_to_sub.shape == (6, 25)


def test_refined_mesh_3d_counts():
    space = FESpace(cartesian_mesh((2, 2, 2)), 3)
    lor = build_lor_mesh(space)
    assert lor.mesh.num_vertices == space.ndofs_scalar
    assert lor.mesh.num_elements == 8 * 27
    assert lor.mesh.elements.shape[1] == 8


def test_refined_widths_follow_lobatto_spacing():
    # one element on [0,1]: sub-cell x-widths along the bottom edge are the
    # gaps of the 11-point Lobatto lattice
    space = FESpace(cartesian_mesh((1, 1)), 10)
    lor = build_lor_mesh(space)
    bottom = [e for e in range(lor.mesh.num_elements) if e < 10]
    widths = []
    for e in bottom:
        c = lor.mesh.corners[e]
        widths.append(c[1, 0] - c[0, 0])
    gl = (gauss_lobatto_nodes(11)[0] + 1.0) / 2.0
    assert np.allclose(widths, np.diff(gl), atol=1e-14)
    assert max(widths) / min(widths) > 3.0  # strong grading toward the ends


def test_refined_geometry_is_valid_on_perturbed_periodic_mesh():
    mesh = perturb_mesh(cartesian_mesh((4, 4), periodic=(True, True)), 0.08, seed=5)
    space = FESpace(mesh, 4)
    lor = build_lor_mesh(space)
    from flowbench.basis import GAUSS_LEGENDRE, quadrature_rule

    geom = compute_geometric_factors(lor.mesh, quadrature_rule(GAUSS_LEGENDRE, 2))
    assert geom.detj.min() > 0.0


@pytest.mark.parametrize("d", [2, 3])
@pytest.mark.parametrize("kind", ["mass", "stiffness", "helmholtz"])
def test_q1_refined_matrix_matches_high_order_at_p1(d, kind):
    mesh = cartesian_mesh((3,) * d)
    space = FESpace(mesh, 1)
    A_lor = lor_matrix(space, kind, nu=0.7, c=2.5)
    geom = compute_geometric_factors(mesh, space.basis.quad)
    A_ho = mfop.assemble(kind, space=space, geom=geom, nu=0.7, c=2.5)
    denom = np.abs(A_ho.toarray()).max()
    assert np.abs((A_lor - A_ho).toarray()).max() <= 1e-13 * denom


def test_row_sparsity_bounds():
    s2 = FESpace(cartesian_mesh((4, 3)), 6)
    A2 = lor_matrix(s2, "stiffness")
    assert np.diff(A2.indptr).max() <= 9
    s3 = FESpace(cartesian_mesh((2, 2, 2)), 3)
    A3 = lor_matrix(s3, "helmholtz", c=1.0)
    assert np.diff(A3.indptr).max() <= 27


def test_unknown_kind_rejected():
    space = FESpace(cartesian_mesh((2, 2)), 2)
    with pytest.raises(ValueError):
        lor_matrix(space, "gradient")


def test_constrain_matrix_keeps_pattern_and_pins_rows():
    space = FESpace(cartesian_mesh((3, 3)), 3)
    A = lor_matrix(space, "stiffness")
    bdr = space.boundary_dof_set()
    Ac = constrain_matrix(A, bdr)
    assert Ac.nnz == A.nnz  # explicit zeros retained
    dense = Ac.toarray()
    for i in list(bdr)[:5]:
        row = dense[i].copy()
        row[i] -= 1.0
        assert np.abs(row).max() == 0.0
        col = dense[:, i].copy()
        col[i] -= 1.0
        assert np.abs(col).max() == 0.0
    free = np.setdiff1d(np.arange(space.ndofs_scalar), bdr)
    assert np.allclose(dense[np.ix_(free, free)], A.toarray()[np.ix_(free, free)])


def test_interpolation_reproduces_coarse_polynomials():
    mesh = perturb_mesh(cartesian_mesh((3, 3)), 0.05, seed=2)
    fine = FESpace(mesh, 5)
    coarse = FESpace(mesh, 2)
    P = nodal_interpolation(fine, coarse)
    assert np.allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0, atol=1e-12)

    def f(x):
        return 1.3 + 0.4 * x[:, 0] - x[:, 1] + 0.2 * x[:, 0] * x[:, 1]

    assert np.allclose(P @ f(coarse.node_coords), f(fine.node_coords), atol=1e-12)


def test_q1_interpolation_partition_of_unity_and_identity():
    mesh = cartesian_mesh((4, 4))
    space = FESpace(mesh, 7)
    P = coarse_q1_interpolation(space)
    assert P.shape == (space.ndofs_scalar, mesh.num_vertices)
    assert np.allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0, atol=1e-13)
    Pid = coarse_q1_interpolation(FESpace(mesh, 1))
    assert np.abs(Pid - sp.eye(mesh.num_vertices)).max() == 0.0


def test_mass_spectral_equivalence_across_degrees():
    # the equivalence constant grows mildly with degree but stays order ten
    mesh = cartesian_mesh((4, 4))
    ratios = []
    for p in range(2, 9):
        space = FESpace(mesh, p)
        geom = compute_geometric_factors(mesh, space.basis.quad)
        M_ho = mfop.MassOperator(space, geom)
        M_lor = lor_matrix(space, "mass")
        lo, hi = spectral_equivalence_report(M_ho, M_lor, n_iter=60, seed=p)
        assert lo > 0.05
        ratios.append(hi / lo)
    assert max(ratios) < 20.0
    assert ratios[-1] < 2.0 * ratios[0]  # slow growth, not blow-up


def test_refined_stiffness_row_sums_and_mass_volume():
    mesh = perturb_mesh(cartesian_mesh((3, 3)), 0.04, seed=7)
    space = FESpace(mesh, 4)
    L = lor_matrix(space, "stiffness")
    assert np.abs(np.asarray(L.sum(axis=1))).max() <= 1e-12
    M = lor_matrix(space, "mass")
    ones = np.ones(space.ndofs_scalar)
    assert abs(ones @ (M @ ones) - 1.0) <= 1e-12


def test_stiffness_spectral_equivalence_is_tight():
    mesh = cartesian_mesh((3, 3))
    space = FESpace(mesh, 4)
    geom = compute_geometric_factors(mesh, space.basis.quad)
    bdr = space.boundary_dof_set()
    L = mfop.ConstrainedOperator(mfop.StiffnessOperator(space, geom), bdr)
    A = lor_matrix(space, "stiffness", constrained=bdr)
    lo, hi = spectral_equivalence_report(L, A, n_iter=80, seed=0)
    assert 0.1 < lo <= hi < 10.0


def test_spectral_report_identity_pencil():
    mesh = cartesian_mesh((3, 3))
    space = FESpace(mesh, 3)
    M = lor_matrix(space, "mass")
    lo, hi = spectral_equivalence_report(lambda v: M @ v, M, n_iter=40, seed=1)
    assert abs(lo - 1.0) < 1e-10 and abs(hi - 1.0) < 1e-10


def test_matrix_market_round_trip(tmp_path):
    space = FESpace(cartesian_mesh((3, 2)), 3)
    A = lor_matrix(space, "helmholtz", nu=0.3, c=4.0)
    path = tmp_path / "lor.mtx"
    export_matrix_market(A, path)
    B = scipy.io.mmread(str(path)).tocsr()
    assert np.abs(A - B).max() < 1e-15 * np.abs(A.data).max()
