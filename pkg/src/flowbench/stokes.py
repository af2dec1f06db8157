"""Saddle-point Stokes systems and their block triangular preconditioners.

The coupled operator acts on stacked [u; p] vectors as

    r_u = A u + G p,      r_p = -D u,

with A the (constrained) velocity block, G the pressure gradient, and D the
divergence.  Since <G q, v> = -<q, D v> on enclosed or periodic domains, the
block operator is symmetric and its (positive) Schur complement is
S = -D A^{-1} G.  The preconditioner solves the lower block triangle

    z_u = A~^{-1} r_u      (k CG iterations, componentwise LOR cycle)
    z_p = S~^{-1} (-D z_u - r_u's pressure counterpart)

so that with exact inner solves the preconditioned system has a two-point
spectrum and FGMRES converges in at most two iterations.
"""

import numpy as np

from . import mfop
from .fespace import FESpace
from .solvers import (BlockDiagonalPreconditioner, InnerCG, LORPreconditioner,
                      SolverConfig, collocated_mass_diagonal, deflate_mean,
                      fgmres)


class BlockSaddleOperator:
    """[[A, G], [-D, 0]] on stacked [u; p]; constrained velocity rows pass
    through, so G p contributions are masked there."""

    def __init__(self, A, G, D, constrained_u=None):
        self.A = A
        self.G = G
        self.D = D
        self.nu_dofs = A.shape[0]
        self.np_dofs = D.shape[0]
        self.shape = (self.nu_dofs + self.np_dofs,) * 2
        self.constrained = (
            np.asarray(constrained_u, dtype=np.int64)
            if constrained_u is not None and len(constrained_u)
            else None
        )

    def split(self, x):
        return x[: self.nu_dofs], x[self.nu_dofs :]

    def apply(self, x):
        if x.shape != (self.shape[0],):
            raise ValueError(f"operand has shape {x.shape}, expected ({self.shape[0]},)")
        u, p = self.split(x)
        gp = self.G.apply(p)
        um = u
        if self.constrained is not None:
            gp[self.constrained] = 0.0
            um = u.copy()
            um[self.constrained] = 0.0
        return np.concatenate([self.A.apply(u) + gp, -self.D.apply(um)])

    __call__ = apply


class SteadySchurInverse:
    """S ~ M_p / nu, applied through the collocated diagonal mass inverse."""

    def __init__(self, pspace, nu, deflate=True):
        self.nu = float(nu)
        self.minv = 1.0 / collocated_mass_diagonal(pspace)
        self.deflate = deflate

    def apply(self, r):
        z = self.nu * (self.minv * r)
        return deflate_mean(z) if self.deflate else z

    __call__ = apply


class UnsteadySchurInverse:
    """S~^{-1} = nu/(alpha dt) L~^{-1} + nu M~^{-1} on the pressure space.

    L~^{-1} is one multilevel cycle on the pure-Neumann pressure Laplacian
    (mean-deflated around the cycle), M~^{-1} the collocated diagonal.
    """

    def __init__(self, pspace, nu, alpha, dt, deflate=True):
        if nu <= 0.0 or alpha <= 0.0 or dt <= 0.0:
            raise ValueError("nu, alpha, dt must be positive")
        self.nu = float(nu)
        self.scale = float(nu) / (float(alpha) * float(dt))
        self.minv = 1.0 / collocated_mass_diagonal(pspace)
        self.lap = LORPreconditioner(pspace, "stiffness", pure_neumann=True)
        self.deflate = deflate

    def apply(self, r):
        z = self.scale * self.lap.apply(r) + self.nu * (self.minv * r)
        return deflate_mean(z) if self.deflate else z

    __call__ = apply


class BlockTriangularPreconditioner:
    """Lower block triangular solve with inexact inner pieces."""

    def __init__(self, inner_velocity, schur_inverse, D, deflate_pressure=True):
        self.inner = inner_velocity
        self.schur = schur_inverse
        self.D = D
        self.deflate = deflate_pressure

    def apply(self, r):
        nu_dofs = self.D.shape[1]
        r_u, r_p = r[:nu_dofs], r[nu_dofs:]
        z_u = self.inner.apply(r_u)
        z_p = self.schur.apply(-self.D.apply(z_u) - r_p)
        if self.deflate:
            z_p = deflate_mean(z_p)
        return np.concatenate([z_u, z_p])

    __call__ = apply


class StokesSystem:
    """Taylor-Hood Stokes problem wiring: operators, preconditioner, solve.

    Velocity lives in (Q_p)^d, pressure in Q_{p-1} (stable for p >= 2).
    ``alpha_dt`` = None builds the steady system A = nu L; a positive value
    builds the implicit-stage system A = M/(alpha dt) + nu L with the
    matching Schur approximation.
    """

    def __init__(self, vspace, pspace, geom, nu=1.0, alpha_dt=None,
                 inner_iterations=3, dirichlet_attrs="all"):
        if vspace.p < 2:
            raise ValueError("velocity degree must be >= 2 for the stable pair")
        if pspace.p != vspace.p - 1:
            raise ValueError("pressure degree must be velocity degree - 1")
        self.vspace = vspace
        self.pspace = pspace
        self.nu = float(nu)
        self.alpha_dt = alpha_dt
        mesh = vspace.mesh
        has_boundary = mesh.boundary_faces.shape[0] > 0
        constrain = dirichlet_attrs is not None and has_boundary
        if constrain:
            scalar_bdofs = vspace.boundary_dof_set(
                None if dirichlet_attrs == "all" else dirichlet_attrs
            )
            self.bdofs = vspace.expand_dofs(scalar_bdofs)
        else:
            self.bdofs = np.zeros(0, dtype=np.int64)

        if alpha_dt is None:
            self.A_free = mfop.StiffnessOperator(vspace, geom, nu=nu)
            lor_kind, lor_c = "stiffness", 0.0
        else:
            if alpha_dt <= 0.0:
                raise ValueError("alpha_dt must be positive")
            c = 1.0 / float(alpha_dt)
            self.A_free = mfop.HelmholtzOperator(vspace, geom, c=c, nu=nu)
            lor_kind, lor_c = "helmholtz", c
        self.A = mfop.ConstrainedOperator(self.A_free, self.bdofs)
        self.G = mfop.GradientOperator(vspace, pspace, geom)
        self.D = mfop.DivergenceOperator(vspace, pspace, geom)
        self.K = BlockSaddleOperator(self.A, self.G, self.D, self.bdofs)

        scalar_v = FESpace(mesh, vspace.p)
        cycle = LORPreconditioner(
            scalar_v, lor_kind, nu=nu, c=lor_c,
            dirichlet_attrs=(dirichlet_attrs if constrain else None),
        )
        vel_pre = BlockDiagonalPreconditioner(cycle, vspace.vdim, vspace.ndofs_scalar)
        self.inner = InnerCG(self.A, precond=vel_pre, iterations=inner_iterations)
        if alpha_dt is None:
            schur = SteadySchurInverse(pspace, nu)
        else:
            schur = UnsteadySchurInverse(pspace, nu, 1.0, float(alpha_dt))
        self.P = BlockTriangularPreconditioner(self.inner, schur, self.D)
        self.pressure_weights = collocated_mass_diagonal(pspace)

    def lift(self, g):
        """Velocity vector holding boundary data at constrained dofs only."""
        u_lift = np.zeros(self.vspace.ndofs)
        if len(self.bdofs):
            u_lift[self.bdofs] = self.vspace.project(g)[self.bdofs]
        return u_lift

    def assemble_rhs(self, f_weak, u_lift):
        """Right-hand side of the homogeneous-correction saddle system."""
        b_u = f_weak - self.A_free.apply(u_lift)
        b_u[self.bdofs] = 0.0
        b_p = self.D.apply(u_lift)
        # compatibility: the symmetric system's null space is (0, const)
        b_p = deflate_mean(b_p)
        return np.concatenate([b_u, b_p])

    def solve_raw(self, b, x0=None, config=None):
        cfg = config or SolverConfig(rel_tol=1e-14, max_iters=200)
        x, report = fgmres(self.K, b, precond=self.P, x0=x0, config=cfg)
        u0, p = self.K.split(x)
        return u0, p, report

    def solve(self, f=None, g=None, f_weak=None, config=None):
        """Steady solve with forcing f (callable) and Dirichlet data g.

        Returns (u, p, report); p is normalized to weighted zero mean.
        """
        if f_weak is None:
            geom = self.A_free.geom
            f_weak = (mfop.load_vector(self.vspace, geom, f)
                      if f is not None else np.zeros(self.vspace.ndofs))
        u_lift = self.lift(g) if g is not None else np.zeros(self.vspace.ndofs)
        b = self.assemble_rhs(f_weak, u_lift)
        u0, p, report = self.solve_raw(b, config=config)
        u = u0 + u_lift
        p = deflate_mean(p, self.pressure_weights)
        return u, p, report
