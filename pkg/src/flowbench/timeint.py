"""Time integrators for unsteady Stokes and Navier-Stokes.

Two families live here.  SDIRKStokesStepper advances the coupled
velocity-pressure system with stiffly accurate singly diagonally implicit
Runge-Kutta methods, solving one saddle-point system per stage.
ProjectionStepper advances Navier-Stokes with the BDF/extrapolation
velocity-correction scheme: an explicit treatment of convection, a pressure
Poisson solve with consistent Neumann data, and an implicit Helmholtz solve
for the velocity, all with equal-order velocity and pressure spaces.
"""

from dataclasses import dataclass

import numpy as np

from . import mfop
from .fespace import FESpace
from .solvers import (BlockDiagonalPreconditioner, DiagonalPreconditioner,
                      LORPreconditioner, MeanProjector, SolverConfig, cg,
                      collocated_mass_diagonal, deflate_mean)
from .stokes import StokesSystem


# -- Runge-Kutta tableaux -----------------------------------------------------

@dataclass(frozen=True)
class ButcherTableau:
    """Lower-triangular Runge-Kutta coefficients with stage and weight vectors."""

    name: str
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    order: int

    @property
    def stages(self):
        return self.b.shape[0]

    @property
    def alpha(self):
        return float(self.A[-1, -1])


def validate_tableau(tab: ButcherTableau, tol=1e-12):
    A, b, c = tab.A, tab.b, tab.c
    s = tab.stages
    if A.shape != (s, s) or c.shape != (s,):
        raise ValueError(f"inconsistent tableau shapes for {tab.name!r}")
    if np.abs(np.triu(A, 1)).max() > 0.0:
        raise ValueError(f"{tab.name!r} is not diagonally implicit")
    diag = np.diag(A)
    if np.abs(diag - diag[-1]).max() > tol:
        raise ValueError(f"{tab.name!r} does not have a single diagonal coefficient")
    if np.abs(A.sum(axis=1) - c).max() > tol:
        raise ValueError(f"{tab.name!r} row sums do not match c")
    if np.abs(A[-1] - b).max() > 0.0 or c[-1] != 1.0:
        raise ValueError(f"{tab.name!r} is not stiffly accurate")
    conds = [abs(b.sum() - 1.0)]
    if tab.order >= 2:
        conds.append(abs(b @ c - 0.5))
    if tab.order >= 3:
        conds.append(abs(b @ c**2 - 1.0 / 3.0))
        conds.append(abs(b @ (A @ c) - 1.0 / 6.0))
    if max(conds) > tol:
        raise ValueError(f"{tab.name!r} fails its order-{tab.order} conditions: {conds}")
    return tab


def _sdirk3_alpha():
    # the root of x^3 - 3x^2 + 3x/2 - 1/6 lying in (1/6, 1/2)
    roots = np.roots([1.0, -3.0, 1.5, -1.0 / 6.0])
    real = roots[np.abs(roots.imag) < 1e-12].real
    sel = real[(real > 1.0 / 6.0) & (real < 0.5)]
    return float(sel[0])


def butcher_tableau(name: str) -> ButcherTableau:
    """Registered stiffly accurate SDIRK tableaux: order 1, 2, and 3."""
    key = name.lower()
    if key in ("backward_euler", "sdirk1"):
        tab = ButcherTableau(key, np.array([[1.0]]), np.array([1.0]),
                             np.array([1.0]), order=1)
    elif key == "sdirk2":
        a = 1.0 - np.sqrt(2.0) / 2.0
        tab = ButcherTableau(key, np.array([[a, 0.0], [1.0 - a, a]]),
                             np.array([1.0 - a, a]), np.array([a, 1.0]), order=2)
    elif key == "sdirk3":
        a = _sdirk3_alpha()
        b1 = -1.5 * a**2 + 4.0 * a - 0.25
        b2 = 1.5 * a**2 - 5.0 * a + 1.25
        A = np.array([[a, 0.0, 0.0],
                      [0.5 * (1.0 - a), a, 0.0],
                      [b1, b2, a]])
        tab = ButcherTableau(key, A, np.array([b1, b2, a]),
                             np.array([a, 0.5 * (1.0 + a), 1.0]), order=3)
    else:
        raise ValueError(f"unknown tableau {name!r}")
    return validate_tableau(tab)


# -- BDF / extrapolation coefficients -----------------------------------------

@dataclass(frozen=True)
class BDFScheme:
    """BDF differentiation weights b and extrapolation weights a of order k."""

    k: int
    b: np.ndarray
    a: np.ndarray


_BDF_B = {1: (1.0, -1.0),
          2: (1.5, -2.0, 0.5),
          3: (11.0 / 6.0, -3.0, 1.5, -1.0 / 3.0)}
_EXT_A = {1: (1.0,), 2: (2.0, -1.0), 3: (3.0, -3.0, 1.0)}


def bdf_coefficients(k: int) -> BDFScheme:
    if k not in _BDF_B:
        raise ValueError(f"BDF order must be 1, 2, or 3, got {k}")
    scheme = BDFScheme(k, np.array(_BDF_B[k]), np.array(_EXT_A[k]))
    # differentiation is exact on polynomials through degree k and the
    # extrapolation on polynomials through degree k - 1, sampled at t = -j
    for m in range(k + 1):
        ref = 1.0 if m == 1 else 0.0
        val = sum(scheme.b[j] * (-float(j)) ** m for j in range(k + 1))
        if abs(val - ref) > 1e-12:
            raise AssertionError(f"BDF{k} fails on t^{m}")
    for m in range(k):
        val = sum(scheme.a[j - 1] * (-float(j)) ** m for j in range(1, k + 1))
        ref = 0.0 ** m if m else 1.0
        if abs(val - ref) > 1e-12:
            raise AssertionError(f"extrapolation of order {k} fails on t^{m}")
    return scheme


# -- coupled SDIRK stepping ----------------------------------------------------

class SDIRKStokesStepper:
    """Advances unsteady Stokes by solving one saddle system per stage.

    ``forcing(points, t)`` returns (n, d) body-force samples and
    ``dirichlet(points, t)`` boundary velocity; either may be None.
    """

    def __init__(self, vspace, pspace, geom, tableau, dt, nu=1.0,
                 forcing=None, dirichlet=None, dirichlet_attrs="all",
                 config=None):
        if isinstance(tableau, str):
            tableau = butcher_tableau(tableau)
        self.tab = tableau
        self.dt = float(dt)
        self.nu = float(nu)
        self.forcing = forcing
        self.dirichlet = dirichlet
        self.config = config or SolverConfig(rel_tol=1e-12, max_iters=200)
        alpha = tableau.alpha
        self.system = StokesSystem(vspace, pspace, geom, nu=nu,
                                   alpha_dt=alpha * self.dt,
                                   dirichlet_attrs=dirichlet_attrs)
        self.geom = geom
        self.M = mfop.MassOperator(vspace, geom)
        self.visc = mfop.StiffnessOperator(vspace, geom, nu=nu)
        self.vspace, self.pspace = vspace, pspace

    def _load(self, t):
        if self.forcing is None:
            return np.zeros(self.vspace.ndofs)
        return mfop.load_vector(self.vspace, self.geom,
                                lambda x: self.forcing(x, t))

    def _lift(self, t):
        if self.dirichlet is None or not len(self.system.bdofs):
            return np.zeros(self.vspace.ndofs)
        return self.system.lift(lambda x: self.dirichlet(x, t))

    def step(self, u, p, t):
        """One step from (u, p) at time t; returns (u', p', reports)."""
        tab, dt, alpha = self.tab, self.dt, self.tab.alpha
        sysm = self.system
        base = self.M(u) / (alpha * dt)
        residuals = []
        reports = []
        u_i = u
        p_i = p
        for i in range(tab.stages):
            t_i = t + tab.c[i] * dt
            f_i = self._load(t_i)
            F = base + f_i
            for j in range(i):
                F = F + (tab.A[i, j] / alpha) * residuals[j]
            u_lift = self._lift(t_i)
            b = sysm.assemble_rhs(F, u_lift)
            u0, p_i, rep = sysm.solve_raw(b, config=self.config)
            reports.append(rep)
            if not rep.converged:
                raise RuntimeError(f"stage {i + 1} solve failed: {rep}")
            u_i = u0 + u_lift
            if i + 1 < tab.stages:
                residuals.append(f_i - self.visc(u_i) - sysm.G(p_i))
        p_i = deflate_mean(p_i, sysm.pressure_weights)
        return u_i, p_i, reports


# -- projection stepping -------------------------------------------------------

@dataclass
class StepReport:
    """Iteration counts of the sub-solves in one projection step."""

    t: float
    mass_iters: int = 0
    pressure_iters: int = 0
    helmholtz_iters: int = 0


class ProjectionStepper:
    """BDF-k / extrapolation velocity-correction stepping for Navier-Stokes.

    Equal-order spaces: velocity in (Q_p)^d, pressure in Q_p.  Convection is
    extrapolated and viscosity implicit.  The rotational form of the viscous
    term closes the pressure equation: it enters purely as the surface
    functional -nu (n x curl u*, grad q), its volume part being the
    divergence of a curl.  Startup ramps the order from 1 unless
    ``initialize_history`` provides k starting values.
    """

    def __init__(self, vspace, pspace, geom, k, dt, nu,
                 forcing=None, dirichlet=None, config=None):
        if pspace.p != vspace.p or pspace.vdim != 1:
            raise ValueError("projection expects scalar pressure of equal degree")
        if vspace.vdim != vspace.dim:
            raise ValueError("velocity space must have vdim == dim")
        self.k = int(k)
        if self.k not in (1, 2, 3):
            raise ValueError("projection order must be 1, 2, or 3")
        self.dt = float(dt)
        self.nu = float(nu)
        self.vspace, self.pspace, self.geom = vspace, pspace, geom
        self.forcing = forcing
        self.dirichlet = dirichlet
        self.config = config or SolverConfig(rel_tol=1e-10, max_iters=400)

        self.M = mfop.MassOperator(vspace, geom)
        self.conv = mfop.ConvectionOperator(vspace, geom)
        self.G = mfop.GradientOperator(vspace, pspace, geom)
        self.D = mfop.DivergenceOperator(vspace, pspace, geom)
        self.Lp = mfop.StiffnessOperator(pspace, geom)
        self.mass_pre = DiagonalPreconditioner(collocated_mass_diagonal(vspace))
        self.pressure_pre = LORPreconditioner(pspace, "stiffness",
                                              pure_neumann=True)
        self.mean = MeanProjector()
        self.pressure_weights = collocated_mass_diagonal(pspace)

        mesh = vspace.mesh
        self.has_boundary = mesh.boundary_faces.shape[0] > 0
        self.bdofs = (vspace.expand_dofs(vspace.boundary_dof_set())
                      if self.has_boundary else np.zeros(0, dtype=np.int64))
        self._helm = {}
        self._scalar_v = FESpace(mesh, vspace.p)

        self.t = None
        self.u = None
        self.p = None
        self.u_hist = []
        self.n_hist = []
        self.r_hist = []
        self._volume = float(np.sum(geom.detj @ geom.w))

    # -- state ----------------------------------------------------------------

    def initialize(self, u0, t0=0.0):
        """Start from a single state; the first steps ramp the order up."""
        self.t = float(t0)
        self.u = np.asarray(u0, dtype=np.float64).copy()
        self.p = np.zeros(self.pspace.ndofs)
        self.u_hist = [self.u.copy()]
        self.n_hist = [self._nodal_convection(self.u)[0]]
        self.r_hist = [self._rotational_bc(self.u)]
        return self

    def initialize_history(self, states, t_last):
        """Full-order start from k states ordered oldest to newest."""
        if len(states) != self.k:
            raise ValueError(f"need {self.k} states, got {len(states)}")
        self.t = float(t_last)
        self.u_hist, self.n_hist, self.r_hist = [], [], []
        for u in states:
            u = np.asarray(u, dtype=np.float64).copy()
            self.u_hist.insert(0, u)
            self.n_hist.insert(0, self._nodal_convection(u)[0])
            self.r_hist.insert(0, self._rotational_bc(u))
        self.u = self.u_hist[0].copy()
        self.p = np.zeros(self.pspace.ndofs)
        return self

    # -- pieces ----------------------------------------------------------------

    def _mass_solve(self, rhs):
        tol = min(1e-12, self.config.rel_tol)
        x, rep = cg(self.M, rhs, precond=self.mass_pre,
                    config=SolverConfig(rel_tol=tol, max_iters=300))
        if not rep.converged:
            raise RuntimeError(f"mass solve failed: {rep}")
        return x, rep.iterations

    def _nodal_convection(self, u):
        return self._mass_solve(-self.conv(u))

    def _rotational_bc(self, u):
        if not self.has_boundary:
            return np.zeros(self.pspace.ndofs)
        return mfop.boundary_rotational_rhs(self.vspace, self.pspace, u,
                                            nu=self.nu)

    def _helmholtz(self, b0):
        key = round(b0, 12)
        if key not in self._helm:
            c = b0 / self.dt
            op = mfop.HelmholtzOperator(self.vspace, self.geom, c=c, nu=self.nu)
            A = mfop.ConstrainedOperator(op, self.bdofs)
            cyc = LORPreconditioner(
                self._scalar_v, "helmholtz", nu=self.nu, c=c,
                dirichlet_attrs=("all" if self.has_boundary else None))
            pre = BlockDiagonalPreconditioner(cyc, self.vspace.vdim,
                                              self.vspace.ndofs_scalar)
            self._helm[key] = (op, A, pre)
        return self._helm[key]

    def _forcing_nodal(self, t):
        if self.forcing is None:
            return 0.0
        return self.vspace.project(lambda x: self.forcing(x, t))

    # -- one step ----------------------------------------------------------------

    def step(self):
        """Advance to t + dt; returns a StepReport."""
        if self.t is None:
            raise RuntimeError("stepper not initialized")
        k_eff = min(self.k, len(self.u_hist))
        scheme = bdf_coefficients(k_eff)
        dt, t_new = self.dt, self.t + self.dt
        b0 = scheme.b[0]
        rep = StepReport(t=t_new)
        g_new = (None if self.dirichlet is None or not self.has_boundary
                 else (lambda x: self.dirichlet(x, t_new)))

        f_star = self._forcing_nodal(t_new)
        F = f_star - sum(scheme.b[j] / dt * self.u_hist[j - 1]
                         for j in range(1, k_eff + 1))
        F = F + sum(scheme.a[j - 1] * self.n_hist[j - 1]
                    for j in range(1, k_eff + 1))

        rhs_p = self.G.apply_transpose(F)
        rhs_p += sum(scheme.a[j - 1] * self.r_hist[j - 1]
                     for j in range(1, k_eff + 1))
        if g_new is not None:
            rhs_p -= (b0 / dt) * mfop.boundary_normal_flux(self.pspace, g_new)
        rhs_p = deflate_mean(rhs_p)
        p, prep = cg(self.Lp, rhs_p, precond=self.pressure_pre,
                     x0=self.p, project=self.mean, config=self.config)
        if not prep.converged:
            raise RuntimeError(f"pressure solve failed: {prep}")
        rep.pressure_iters = prep.iterations

        op, A, pre = self._helmholtz(b0)
        b_u = self.M(F) - self.G(p)
        u_lift = np.zeros(self.vspace.ndofs)
        if g_new is not None:
            u_lift[self.bdofs] = self.vspace.project(g_new)[self.bdofs]
        b_u -= op(u_lift)
        b_u[self.bdofs] = 0.0
        u0, hrep = cg(A, b_u, precond=pre, config=self.config)
        if not hrep.converged:
            raise RuntimeError(f"velocity solve failed: {hrep}")
        rep.helmholtz_iters = hrep.iterations
        u = u0 + u_lift

        n_new, it_n = self._nodal_convection(u)
        rep.mass_iters = it_n
        self.u_hist.insert(0, u)
        self.n_hist.insert(0, n_new)
        self.r_hist.insert(0, self._rotational_bc(u))
        del self.u_hist[self.k:], self.n_hist[self.k:], self.r_hist[self.k:]
        self.u, self.p, self.t = u, deflate_mean(p, self.pressure_weights), t_new
        return rep

    # -- diagnostics --------------------------------------------------------------

    def kinetic_energy(self, u=None):
        """Volume-averaged kinetic energy u' M u / (2 |Omega|)."""
        v = self.u if u is None else u
        return float(v @ self.M(v)) / (2.0 * self._volume)

    def divergence_residual(self, u=None):
        """Euclidean norm of the weak divergence of the current velocity."""
        v = self.u if u is None else u
        return float(np.linalg.norm(self.D(v)))


def kinetic_energy(space, geom, u):
    """Volume-averaged kinetic energy u' M u / (2 |Omega|)."""
    M = mfop.MassOperator(space, geom)
    volume = float(np.sum(geom.detj @ geom.w))
    return float(u @ M(u)) / (2.0 * volume)


def dissipation_rate(energy, dt):
    """-dE/dt of an energy time series by second-order differences."""
    e = np.asarray(energy, dtype=np.float64)
    if e.shape[0] < 2:
        raise ValueError("need at least two samples")
    return -np.gradient(e, float(dt))
