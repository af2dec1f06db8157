"""Saddle-point operators, block preconditioners, and Stokes solves."""

import numpy as np
import pytest
import scipy.sparse.linalg as spla

from flowbench import mfop
from flowbench.fespace import FESpace
from flowbench.mesh import cartesian_mesh, compute_geometric_factors
from flowbench.solvers import SolverConfig, deflate_mean, fgmres
from flowbench.stokes import (BlockSaddleOperator, BlockTriangularPreconditioner,
                              SteadySchurInverse, StokesSystem,
                              UnsteadySchurInverse)

PI = np.pi


def vortex_velocity(xy):
    x, y = xy[:, 0], xy[:, 1]
    u1 = 2 * PI * np.sin(PI * x) ** 2 * np.sin(PI * y) * np.cos(PI * y)
    u2 = -2 * PI * np.sin(PI * x) * np.cos(PI * x) * np.sin(PI * y) ** 2
    return np.stack([u1, u2], axis=1)


def vortex_pressure(xy):
    return np.cos(PI * xy[:, 0]) * np.cos(PI * xy[:, 1])


def vortex_forcing(xy):
    x, y = xy[:, 0], xy[:, 1]
    f1 = PI * np.cos(PI * y) * (
        4 * PI**2 * (1 - 2 * np.cos(2 * PI * x)) * np.sin(PI * y) - np.sin(PI * x)
    )
    f2 = (2 * PI**3 * np.sin(2 * PI * x) * (2 * np.cos(2 * PI * y) - 1)
          - PI * np.cos(PI * x) * np.sin(PI * y))
    return np.stack([f1, f2], axis=1)


def taylor_hood(counts, p, lows=None, highs=None, periodic=None):
    mesh = cartesian_mesh(counts, lows=lows, highs=highs, periodic=periodic)
    vspace = FESpace(mesh, p, vdim=mesh.dim)
    pspace = FESpace(mesh, p - 1)
    geom = compute_geometric_factors(mesh, vspace.basis.quad)
    return mesh, vspace, pspace, geom


def l2_error(space, geom, x, exact):
    M = mfop.MassOperator(space, geom)
    if space.vdim > 1:
        dx = x - exact(space.node_coords).flatten(order="F")
    else:
        dx = x - exact(space.node_coords)
    return np.sqrt(dx @ M(dx))


# -- block operator ----------------------------------------------------------

def test_block_operator_constant_pressure_periodic():
    mesh, vspace, pspace, geom = taylor_hood((4, 4), 3, periodic=(True, True))
    A = mfop.StiffnessOperator(vspace, geom)
    G = mfop.GradientOperator(vspace, pspace, geom)
    D = mfop.DivergenceOperator(vspace, pspace, geom)
    K = BlockSaddleOperator(A, G, D)
    x = np.zeros(vspace.ndofs + pspace.ndofs)
    x[vspace.ndofs:] = 4.2
    r = K(x)
    assert np.abs(r).max() <= 1e-12


def test_block_operator_matches_assembled_blocks():
    mesh, vspace, pspace, geom = taylor_hood((4, 4), 3)
    sys_ = StokesSystem(vspace, pspace, geom)
    Am = mfop.assemble("stiffness", space=vspace, geom=geom).tocsr()
    Gm = mfop.assemble("gradient", vspace=vspace, pspace=pspace, geom=geom).tocsr()
    Dm = mfop.assemble("divergence", vspace=vspace, pspace=pspace, geom=geom).tocsr()
    bdofs = sys_.bdofs
    rng = np.random.default_rng(0)
    x = rng.standard_normal(vspace.ndofs + pspace.ndofs)
    u, p = sys_.K.split(x)
    u0 = u.copy()
    u0[bdofs] = 0.0
    r_u = Am @ u0 + Gm @ p
    r_u[bdofs] = u[bdofs]
    r_p = -(Dm @ u0)
    ref = np.concatenate([r_u, r_p])
    got = sys_.K(x)
    assert np.linalg.norm(got - ref) <= 1e-12 * np.linalg.norm(ref)


def test_block_operator_rejects_bad_shape():
    mesh, vspace, pspace, geom = taylor_hood((2, 2), 2)
    sys_ = StokesSystem(vspace, pspace, geom)
    with pytest.raises(ValueError):
        sys_.K(np.zeros(3))


def test_free_block_skew_adjointness():
    # with full velocity Dirichlet the free rows of the gradient equal the
    # negative transpose of the free columns of the divergence
    mesh, vspace, pspace, geom = taylor_hood((3, 3), 3)
    Gm = mfop.assemble("gradient", vspace=vspace, pspace=pspace, geom=geom).toarray()
    Dm = mfop.assemble("divergence", vspace=vspace, pspace=pspace, geom=geom).toarray()
    bdofs = vspace.expand_dofs(vspace.boundary_dof_set())
    free = np.setdiff1d(np.arange(vspace.ndofs), bdofs)
    assert np.abs(Gm[free, :] + Dm[:, free].T).max() <= 1e-12


# -- two-iteration property --------------------------------------------------

def test_exact_block_triangular_gives_two_iterations():
    rng = np.random.default_rng(7)
    n, m = 30, 15
    Q = np.linalg.qr(rng.standard_normal((n, n)))[0]
    A = Q @ np.diag(np.linspace(1.0, 50.0, n)) @ Q.T
    G = rng.standard_normal((n, m))
    D = -G.T
    Ainv = np.linalg.inv(A)
    S = -D @ Ainv @ G
    Sinv = np.linalg.inv(S)

    class DenseOp:
        def __init__(self, M):
            self.M = M
            self.shape = M.shape

        def apply(self, x):
            return self.M @ x

    K = BlockSaddleOperator(DenseOp(A), DenseOp(G), DenseOp(D))

    class ExactInner:
        def apply(self, r):
            return Ainv @ r

    class ExactSchur:
        def apply(self, r):
            return Sinv @ r

    P = BlockTriangularPreconditioner(ExactInner(), ExactSchur(), DenseOp(D),
                                      deflate_pressure=False)
    b = rng.standard_normal(n + m)
    x, rep = fgmres(K, b, precond=P, config=SolverConfig(rel_tol=1e-12, max_iters=10))
    assert rep.converged and rep.iterations <= 2
    assert np.linalg.norm(K(x) - b) <= 1e-10 * np.linalg.norm(b)


def test_block_preconditioner_zero_maps_to_zero():
    mesh, vspace, pspace, geom = taylor_hood((3, 3), 3)
    sys_ = StokesSystem(vspace, pspace, geom)
    z = sys_.P.apply(np.zeros(vspace.ndofs + pspace.ndofs))
    assert np.abs(z).max() == 0.0


# -- Schur approximations ----------------------------------------------------

def test_steady_schur_zero_and_scaling():
    mesh, vspace, pspace, geom = taylor_hood((3, 3), 3)
    s1 = SteadySchurInverse(pspace, nu=1.0)
    s2 = SteadySchurInverse(pspace, nu=2.0)
    assert np.abs(s1.apply(np.zeros(pspace.ndofs))).max() == 0.0
    rng = np.random.default_rng(1)
    r = rng.standard_normal(pspace.ndofs)
    assert np.allclose(s2.apply(r), 2.0 * s1.apply(r), rtol=0, atol=1e-14)


def test_exact_schur_within_three_x_of_diagonal_approximation():
    # replacing the diagonal mass approximation by the exact Schur complement
    # must not improve the outer iteration count by more than a factor of 3
    mesh, vspace, pspace, geom = taylor_hood((2, 2), 2)
    sys_ = StokesSystem(vspace, pspace, geom)
    rng = np.random.default_rng(3)
    b_u = rng.standard_normal(vspace.ndofs)
    b_u[sys_.bdofs] = 0.0
    b_p = deflate_mean(rng.standard_normal(pspace.ndofs))
    b = np.concatenate([b_u, b_p])
    cfg = SolverConfig(rel_tol=1e-10, max_iters=300)
    _, _, rep_diag = sys_.solve_raw(b, config=cfg)

    Am = mfop.assemble("stiffness", space=vspace, geom=geom).toarray()
    Gm = mfop.assemble("gradient", vspace=vspace, pspace=pspace, geom=geom).toarray()
    Dm = mfop.assemble("divergence", vspace=vspace, pspace=pspace, geom=geom).toarray()
    bdofs = sys_.bdofs
    free = np.setdiff1d(np.arange(vspace.ndofs), bdofs)
    Aff = Am[np.ix_(free, free)]
    S = Dm[:, free] @ np.linalg.solve(Aff, Gm[free, :])
    S += np.eye(pspace.ndofs) / pspace.ndofs  # remove the constant null space
    Sinv = np.linalg.inv(S)

    class ExactSchur:
        def apply(self, r):
            return deflate_mean(Sinv @ r)

    P = BlockTriangularPreconditioner(sys_.inner, ExactSchur(), sys_.D)
    _, rep_exact = fgmres(sys_.K, b, precond=P, config=cfg)
    assert rep_exact.converged and rep_diag.converged
    assert rep_diag.iterations <= 3 * rep_exact.iterations


def test_unsteady_schur_limits_and_linearity():
    mesh, vspace, pspace, geom = taylor_hood((3, 3), 3)
    rng = np.random.default_rng(5)
    r = rng.standard_normal(pspace.ndofs)
    steady = SteadySchurInverse(pspace, nu=0.7)
    slow = UnsteadySchurInverse(pspace, nu=0.7, alpha=1.0, dt=1e14)
    z_s, z_u = steady.apply(r), slow.apply(r)
    assert np.linalg.norm(z_s - z_u) <= 1e-12 * np.linalg.norm(z_s)

    fast = UnsteadySchurInverse(pspace, nu=0.7, alpha=0.435, dt=1e-3)
    r2 = rng.standard_normal(pspace.ndofs)
    lhs = fast.apply(3.0 * r - 2.0 * r2)
    rhs = 3.0 * fast.apply(r) - 2.0 * fast.apply(r2)
    assert np.linalg.norm(lhs - rhs) <= 1e-12 * np.linalg.norm(rhs)

    with pytest.raises(ValueError):
        UnsteadySchurInverse(pspace, nu=1.0, alpha=-1.0, dt=0.1)


def test_unsteady_stage_iterations_dt_robust():
    iters = {}
    for p in (3, 7):
        for dt in (1e-1, 1e-3):
            mesh, vspace, pspace, geom = taylor_hood((4, 4), p)
            sys_ = StokesSystem(vspace, pspace, geom, nu=1.0, alpha_dt=0.435 * dt)
            rng = np.random.default_rng(11)
            b_u = rng.standard_normal(vspace.ndofs)
            b_u[sys_.bdofs] = 0.0
            b_p = deflate_mean(rng.standard_normal(pspace.ndofs))
            b = np.concatenate([b_u, b_p])
            _, _, rep = sys_.solve_raw(b, config=SolverConfig(rel_tol=1e-10,
                                                              max_iters=200))
            assert rep.converged
            iters[(p, dt)] = rep.iterations
    for p in (3, 7):
        a, c = iters[(p, 1e-1)], iters[(p, 1e-3)]
        assert max(a, c) <= 2 * min(a, c)
        assert max(a, c) <= 60


# -- full solves -------------------------------------------------------------

def test_polynomial_channel_flow_is_exact():
    # parabolic profile with linear pressure sits inside the discrete spaces,
    # so the solve reproduces it to solver tolerance
    nu = 0.3

    def g(xy):
        return np.stack([xy[:, 1] * (1.0 - xy[:, 1]),
                         np.zeros(xy.shape[0])], axis=1)

    def pex(xy):
        return -2.0 * nu * xy[:, 0]

    mesh, vspace, pspace, geom = taylor_hood((3, 3), 3)
    sys_ = StokesSystem(vspace, pspace, geom, nu=nu)
    u, p, rep = sys_.solve(g=g)
    assert rep.converged
    assert l2_error(vspace, geom, u, g) <= 1e-9
    p_ref = deflate_mean(pex(pspace.node_coords), sys_.pressure_weights)
    assert np.linalg.norm(p - p_ref) <= 1e-8


def test_vortex_mms_convergence_and_iterations():
    errs_l2, errs_nodal, its = [], [], []
    for n in (2, 4):
        mesh, vspace, pspace, geom = taylor_hood((n, n), 7, lows=(0, 0),
                                                 highs=(2, 2))
        sys_ = StokesSystem(vspace, pspace, geom)
        u, p, rep = sys_.solve(f=vortex_forcing, g=vortex_velocity)
        assert rep.converged and rep.iterations <= 60
        errs_l2.append(l2_error(vspace, geom, u, vortex_velocity))
        du = u - vortex_velocity(vspace.node_coords).flatten(order="F")
        errs_nodal.append(np.linalg.norm(du) / np.sqrt(vspace.vdim))
        its.append(rep.iterations)
    # nodal 2-norm anchors
    assert 0.5 * 3.36e-3 <= errs_nodal[0] <= 2.0 * 3.36e-3
    assert 0.5 * 2.55e-5 <= errs_nodal[1] <= 2.0 * 2.55e-5
    # integral norm converges faster than degree + 0.5
    assert np.log2(errs_l2[0] / errs_l2[1]) >= 7.5
    assert its[1] - its[0] <= 10


def test_periodic_unsteady_stage_roundtrip():
    mesh, vspace, pspace, geom = taylor_hood((4, 4), 3, lows=(0, 0),
                                             highs=(2 * PI, 2 * PI),
                                             periodic=(True, True))
    sys_ = StokesSystem(vspace, pspace, geom, nu=0.01, alpha_dt=0.05)

    def u_star(xy):
        return np.stack([np.sin(xy[:, 0]) * np.cos(xy[:, 1]),
                         -np.cos(xy[:, 0]) * np.sin(xy[:, 1])], axis=1)

    def p_star(xy):
        return -0.25 * (np.cos(2 * xy[:, 0]) + np.cos(2 * xy[:, 1]))

    x_star = np.concatenate([
        vspace.project(u_star),
        deflate_mean(pspace.project(p_star), sys_.pressure_weights),
    ])
    b = sys_.K(x_star)
    u, p, rep = sys_.solve_raw(b, config=SolverConfig(rel_tol=1e-12, max_iters=100))
    assert rep.converged
    x = np.concatenate([u, deflate_mean(p, sys_.pressure_weights)])
    ref = x_star.copy()
    ref[vspace.ndofs:] = deflate_mean(ref[vspace.ndofs:], sys_.pressure_weights)
    assert np.linalg.norm(x - ref) <= 1e-7 * np.linalg.norm(ref)


def test_returned_pressure_has_weighted_zero_mean():
    mesh, vspace, pspace, geom = taylor_hood((2, 2), 3)
    sys_ = StokesSystem(vspace, pspace, geom)
    u, p, rep = sys_.solve(f=vortex_forcing, g=vortex_velocity)
    w = sys_.pressure_weights
    assert abs(np.dot(w, p)) <= 1e-10 * np.linalg.norm(p) * np.linalg.norm(w)


# -- validation --------------------------------------------------------------

def test_rejects_unstable_pairs():
    mesh = cartesian_mesh((2, 2))
    geom = None
    v1 = FESpace(mesh, 1, vdim=2)
    q0 = FESpace(mesh, 1)
    with pytest.raises(ValueError):
        StokesSystem(v1, q0, geom)
    v3 = FESpace(mesh, 3, vdim=2)
    q1 = FESpace(mesh, 1)
    with pytest.raises(ValueError):
        StokesSystem(v3, q1, geom)


def test_rejects_nonpositive_time_scale():
    mesh, vspace, pspace, geom = taylor_hood((2, 2), 2)
    with pytest.raises(ValueError):
        StokesSystem(vspace, pspace, geom, alpha_dt=0.0)
