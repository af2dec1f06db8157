"""Matrix-free operators evaluated by sum factorization.

Each operator keeps only 1D basis matrices and per-quadrature-point
geometric factors.  An application gathers element values, contracts one
reference direction at a time (cost O(p^{d+1}) per element), multiplies the
pointwise factors, contracts back and scatters.  ``assemble`` builds the
same bilinear forms as explicit sparse matrices for verification and for
small direct solves; its cost and storage grow like p^{2d}, so it refuses
above a memory cap.
"""

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import kernels
from .fespace import FESpace
from .mesh import GeometricFactors

_SYM_IDX = {2: [(0, 0), (0, 1), (1, 1)], 3: [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]}


class MemoryCapError(RuntimeError):
    """Raised when an assembled matrix would exceed the configured cap."""


def _check_rule_match(space: FESpace, geom: GeometricFactors):
    if geom.xq.shape[0] != space.mesh.num_elements:
        raise ValueError("geometric factors were built for a different mesh")


class _TensorEval:
    """Sum-factorized evaluation/integration bound to one space and rule."""

    def __init__(self, space: FESpace, rule_points):
        self.space = space
        self.d = space.dim
        self.n = space.p + 1
        self.nq1 = len(rule_points)
        B, D = space.basis.eval_matrices_at(rule_points)
        self.B = np.ascontiguousarray(B)
        self.D = np.ascontiguousarray(D)
        self.Bt = np.ascontiguousarray(B.T)
        self.Dt = np.ascontiguousarray(D.T)

    def _shape_loc(self, loc):
        ne = loc.shape[0]
        return loc.reshape((ne,) + (self.n,) * self.d)

    def _shape_quad(self, f):
        ne = f.shape[0]
        return f.reshape((ne,) + (self.nq1,) * self.d)

    def values(self, loc):
        x = self._shape_loc(loc)
        if self.d == 2:
            out = kernels.apply_tensor_2d(x, self.B, self.B)
        else:
            out = kernels.apply_tensor_3d(x, self.B, self.B, self.B)
        return out.reshape(loc.shape[0], -1)

    def grads(self, loc):
        x = self._shape_loc(loc)
        ne = loc.shape[0]
        if self.d == 2:
            g0 = kernels.apply_tensor_2d(x, self.D, self.B)
            g1 = kernels.apply_tensor_2d(x, self.B, self.D)
            gs = (g0, g1)
        else:
            g0 = kernels.apply_tensor_3d(x, self.D, self.B, self.B)
            g1 = kernels.apply_tensor_3d(x, self.B, self.D, self.B)
            g2 = kernels.apply_tensor_3d(x, self.B, self.B, self.D)
            gs = (g0, g1, g2)
        return [g.reshape(ne, -1) for g in gs]

    def values_t(self, f):
        x = self._shape_quad(f)
        if self.d == 2:
            out = kernels.apply_tensor_2d(x, self.Bt, self.Bt)
        else:
            out = kernels.apply_tensor_3d(x, self.Bt, self.Bt, self.Bt)
        return out.reshape(f.shape[0], -1)

    def grads_t(self, fs):
        ne = fs[0].shape[0]
        if self.d == 2:
            out = kernels.apply_tensor_2d(self._shape_quad(fs[0]), self.Dt, self.Bt)
            out = out + kernels.apply_tensor_2d(self._shape_quad(fs[1]), self.Bt, self.Dt)
        else:
            out = kernels.apply_tensor_3d(self._shape_quad(fs[0]), self.Dt, self.Bt, self.Bt)
            out = out + kernels.apply_tensor_3d(self._shape_quad(fs[1]), self.Bt, self.Dt, self.Bt)
            out = out + kernels.apply_tensor_3d(self._shape_quad(fs[2]), self.Bt, self.Bt, self.Dt)
        return out.reshape(ne, -1)


class Operator:
    """Base class: a linear map with explicit shape and apply."""

    shape = None

    def apply(self, x):
        raise NotImplementedError

    def __call__(self, x):
        return self.apply(x)

    def __matmul__(self, x):
        if isinstance(x, np.ndarray) and x.ndim == 1:
            return self.apply(x)
        return NotImplemented


@dataclass
class QPointFactors:
    """Pointwise factors of the supported bilinear forms.

    mass: w |J|; stiffness: packed symmetric nu w |J| J^-1 J^-T
    (d(d+1)/2 entries); grad: full d x d with grad[c, m] = w |J| (J^-T)[c, m],
    shared by gradient and divergence.
    """

    wdet: np.ndarray = None
    stiff: np.ndarray = None
    grad: np.ndarray = None


def _mass_factor(geom):
    return geom.detj * geom.w[None, :]


def _stiffness_factor(geom, nu):
    d = geom.jac.shape[-1]
    wdet = _mass_factor(geom)
    out = np.empty(wdet.shape + (len(_SYM_IDX[d]),))
    for k, (a, b) in enumerate(_SYM_IDX[d]):
        s = np.zeros_like(wdet)
        for m in range(d):
            s += geom.jinv[..., a, m] * geom.jinv[..., b, m]
        out[..., k] = nu * wdet * s
    return out


def _grad_factor(geom):
    d = geom.jac.shape[-1]
    wdet = _mass_factor(geom)
    out = np.empty(wdet.shape + (d, d))
    for c in range(d):
        for m in range(d):
            out[..., c, m] = wdet * geom.jinv[..., m, c]
    return out


def _apply_sym(stiff, gs):
    d = len(gs)
    if d == 2:
        w00, w01, w11 = stiff[..., 0], stiff[..., 1], stiff[..., 2]
        return [w00 * gs[0] + w01 * gs[1], w01 * gs[0] + w11 * gs[1]]
    w00, w01, w02 = stiff[..., 0], stiff[..., 1], stiff[..., 2]
    w11, w12, w22 = stiff[..., 3], stiff[..., 4], stiff[..., 5]
    return [
        w00 * gs[0] + w01 * gs[1] + w02 * gs[2],
        w01 * gs[0] + w11 * gs[1] + w12 * gs[2],
        w02 * gs[0] + w12 * gs[1] + w22 * gs[2],
    ]


class _SquareOperator(Operator):
    """Common machinery for componentwise square operators."""

    def __init__(self, space: FESpace, geom: GeometricFactors):
        _check_rule_match(space, geom)
        t0 = time.perf_counter()
        self.space = space
        self.geom = geom
        self.ev = _TensorEval(space, geom.rule.points)
        self.factors = QPointFactors()
        self._build_factors()
        self.setup_seconds = time.perf_counter() - t0
        n = space.ndofs
        self.shape = (n, n)

    def _build_factors(self):
        raise NotImplementedError

    def _apply_component(self, xc):
        raise NotImplementedError

    def apply(self, x):
        space = self.space
        if x.shape != (space.ndofs,):
            raise ValueError(f"operand has shape {x.shape}, expected ({space.ndofs},)")
        out = np.empty_like(x)
        ns = space.ndofs_scalar
        for c in range(space.vdim):
            out[c * ns : (c + 1) * ns] = self._apply_component(x[c * ns : (c + 1) * ns])
        return out


class MassOperator(_SquareOperator):
    def _build_factors(self):
        self.factors.wdet = _mass_factor(self.geom)

    def _apply_component(self, xc):
        space = self.space
        vals = self.ev.values(space.gather(xc))
        return space.scatter_add(self.ev.values_t(vals * self.factors.wdet))


class StiffnessOperator(_SquareOperator):
    def __init__(self, space, geom, nu=1.0):
        self.nu = float(nu)
        super().__init__(space, geom)

    def _build_factors(self):
        self.factors.stiff = _stiffness_factor(self.geom, self.nu)

    def _apply_component(self, xc):
        space = self.space
        gs = self.ev.grads(space.gather(xc))
        return space.scatter_add(self.ev.grads_t(_apply_sym(self.factors.stiff, gs)))


class HelmholtzOperator(_SquareOperator):
    """c * mass + stiffness, applied in a single sweep."""

    def __init__(self, space, geom, c, nu=1.0):
        self.c = float(c)
        self.nu = float(nu)
        super().__init__(space, geom)

    def _build_factors(self):
        self.factors.wdet = self.c * _mass_factor(self.geom)
        self.factors.stiff = _stiffness_factor(self.geom, self.nu)

    def _apply_component(self, xc):
        space = self.space
        loc = space.gather(xc)
        vals = self.ev.values(loc)
        gs = self.ev.grads(loc)
        out = self.ev.values_t(vals * self.factors.wdet)
        out = out + self.ev.grads_t(_apply_sym(self.factors.stiff, gs))
        return space.scatter_add(out)


class GradientOperator(Operator):
    """Weak gradient: pressure coefficients to velocity-space load,
    (G q)_i = integral of phi_i . grad q."""

    def __init__(self, vspace: FESpace, pspace: FESpace, geom: GeometricFactors):
        _check_rule_match(vspace, geom)
        if vspace.vdim != vspace.dim or pspace.vdim != 1:
            raise ValueError("gradient expects a vector velocity space and scalar pressure space")
        t0 = time.perf_counter()
        self.vspace = vspace
        self.pspace = pspace
        self.geom = geom
        self.ev_v = _TensorEval(vspace, geom.rule.points)
        self.ev_p = _TensorEval(pspace, geom.rule.points)
        self.factors = QPointFactors(grad=_grad_factor(geom))
        self.shape = (vspace.ndofs, pspace.ndofs_scalar)
        self.setup_seconds = time.perf_counter() - t0

    def apply(self, q):
        vs, ps = self.vspace, self.pspace
        gs = self.ev_p.grads(ps.gather(q))
        G = self.factors.grad
        d = vs.dim
        out = np.empty(vs.ndofs)
        ns = vs.ndofs_scalar
        for c in range(d):
            f = sum(G[..., c, m] * gs[m] for m in range(d))
            out[c * ns : (c + 1) * ns] = vs.scatter_add(self.ev_v.values_t(f))
        return out

    def apply_transpose(self, v):
        """(G^T v)_j = integral of v . grad psi_j."""
        vs, ps = self.vspace, self.pspace
        G = self.factors.grad
        d = vs.dim
        ns = vs.ndofs_scalar
        fs = None
        for c in range(d):
            vals = self.ev_v.values(vs.gather(v[c * ns : (c + 1) * ns]))
            terms = [G[..., c, m] * vals for m in range(d)]
            fs = terms if fs is None else [f + t for f, t in zip(fs, terms)]
        return ps.scatter_add(self.ev_p.grads_t(fs))


class DivergenceOperator(Operator):
    """Weak divergence: velocity coefficients to pressure-space load,
    (D u)_i = integral of psi_i div u."""

    def __init__(self, vspace: FESpace, pspace: FESpace, geom: GeometricFactors):
        _check_rule_match(vspace, geom)
        if vspace.vdim != vspace.dim or pspace.vdim != 1:
            raise ValueError("divergence expects a vector velocity space and scalar pressure space")
        t0 = time.perf_counter()
        self.vspace = vspace
        self.pspace = pspace
        self.geom = geom
        self.ev_v = _TensorEval(vspace, geom.rule.points)
        self.ev_p = _TensorEval(pspace, geom.rule.points)
        self.factors = QPointFactors(grad=_grad_factor(geom))
        self.shape = (pspace.ndofs_scalar, vspace.ndofs)
        self.setup_seconds = time.perf_counter() - t0

    def apply(self, u):
        vs, ps = self.vspace, self.pspace
        G = self.factors.grad
        d = vs.dim
        ns = vs.ndofs_scalar
        f = None
        for c in range(d):
            gs = self.ev_v.grads(vs.gather(u[c * ns : (c + 1) * ns]))
            term = sum(G[..., c, m] * gs[m] for m in range(d))
            f = term if f is None else f + term
        return ps.scatter_add(self.ev_p.values_t(f))


class ConvectionOperator(Operator):
    """Nonlinear convection load: N(u)_i = integral of ((u . grad) u) . phi_i."""

    def __init__(self, vspace: FESpace, geom: GeometricFactors):
        _check_rule_match(vspace, geom)
        if vspace.vdim != vspace.dim:
            raise ValueError("convection expects a vector space with vdim == dim")
        t0 = time.perf_counter()
        self.vspace = vspace
        self.geom = geom
        self.ev = _TensorEval(vspace, geom.rule.points)
        self.factors = QPointFactors(wdet=_mass_factor(geom))
        n = vspace.ndofs
        self.shape = (n, n)
        self.setup_seconds = time.perf_counter() - t0

    def apply(self, u):
        vs = self.vspace
        d = vs.dim
        ns = vs.ndofs_scalar
        jinv = self.geom.jinv
        ne, nq = self.factors.wdet.shape
        vals = np.empty((d, ne, nq))
        gphys = np.empty((d, d, ne, nq))  # gphys[c, k] = d u_c / d x_k
        for c in range(d):
            loc = vs.gather(u[c * ns : (c + 1) * ns])
            vals[c] = self.ev.values(loc)
            gs = self.ev.grads(loc)
            for k in range(d):
                gphys[c, k] = sum(jinv[..., m, k] * gs[m] for m in range(d))
        out = np.empty(vs.ndofs)
        for c in range(d):
            conv = sum(vals[k] * gphys[c, k] for k in range(d))
            out[c * ns : (c + 1) * ns] = vs.scatter_add(
                self.ev.values_t(conv * self.factors.wdet)
            )
        return out


class CurlCurlOperator(Operator):
    """Weak rotational viscous term: integral of nu (curl u) . (curl v)."""

    def __init__(self, vspace: FESpace, geom: GeometricFactors, nu=1.0):
        _check_rule_match(vspace, geom)
        if vspace.vdim != vspace.dim:
            raise ValueError("curl-curl expects a vector space with vdim == dim")
        t0 = time.perf_counter()
        self.vspace = vspace
        self.geom = geom
        self.nu = float(nu)
        self.ev = _TensorEval(vspace, geom.rule.points)
        self.factors = QPointFactors(wdet=_mass_factor(geom))
        n = vspace.ndofs
        self.shape = (n, n)
        self.setup_seconds = time.perf_counter() - t0

    def apply(self, u):
        vs = self.vspace
        d = vs.dim
        ns = vs.ndofs_scalar
        jinv = self.geom.jinv
        wd = self.nu * self.factors.wdet
        gphys = {}
        for c in range(d):
            gs = self.ev.grads(vs.gather(u[c * ns : (c + 1) * ns]))
            for k in range(d):
                gphys[c, k] = sum(jinv[..., m, k] * gs[m] for m in range(d))
        out = np.empty(vs.ndofs)
        if d == 2:
            om = wd * (gphys[1, 0] - gphys[0, 1])  # w |J| nu (dx u2 - dy u1)
            # test with curl of phi e_c: c=0 gives -dy phi, c=1 gives +dx phi
            for c, (k, sign) in enumerate([(1, -1.0), (0, 1.0)]):
                fs = [sign * jinv[..., m, k] * om for m in range(d)]
                out[c * ns : (c + 1) * ns] = vs.scatter_add(self.ev.grads_t(fs))
        else:
            om = [
                wd * (gphys[2, 1] - gphys[1, 2]),
                wd * (gphys[0, 2] - gphys[2, 0]),
                wd * (gphys[1, 0] - gphys[0, 1]),
            ]
            # curl(phi e_c) . omega = sum_b eps[a,b,c] omega_a dphi/dx_b
            eps = np.zeros((3, 3, 3))
            for a, b, c in [(0, 1, 2), (1, 2, 0), (2, 0, 1)]:
                eps[a, b, c] = 1.0
                eps[a, c, b] = -1.0
            for c in range(d):
                t = [None] * d  # t[b] multiplies dphi/dx_b
                for b in range(d):
                    t[b] = sum(eps[a, b, c] * om[a] for a in range(d) if eps[a, b, c] != 0.0)
                fs = [sum(jinv[..., m, b] * t[b] for b in range(d) if t[b] is not None) for m in range(d)]
                out[c * ns : (c + 1) * ns] = vs.scatter_add(self.ev.grads_t(fs))
        return out


class ConstrainedOperator(Operator):
    """Identity on constrained rows, inner operator on the complement.

    y = A (x restricted to free DoFs); y[constrained] = x[constrained].
    Right-hand sides are expected to carry lifted boundary data.
    """

    def __init__(self, op: Operator, constrained_dofs):
        self.op = op
        self.constrained = np.asarray(constrained_dofs, dtype=np.int64)
        self.shape = op.shape

    def apply(self, x):
        xi = x.copy()
        xi[self.constrained] = 0.0
        y = self.op.apply(xi)
        y[self.constrained] = x[self.constrained]
        return y


def setup(kind, space=None, geom=None, vspace=None, pspace=None, nu=1.0, c=0.0):
    """Factory for the supported operator kinds."""
    if kind == "mass":
        return MassOperator(space, geom)
    if kind == "stiffness":
        return StiffnessOperator(space, geom, nu=nu)
    if kind == "helmholtz":
        return HelmholtzOperator(space, geom, c, nu=nu)
    if kind == "gradient":
        return GradientOperator(vspace, pspace, geom)
    if kind == "divergence":
        return DivergenceOperator(vspace, pspace, geom)
    if kind == "convection":
        return ConvectionOperator(vspace or space, geom)
    if kind == "curlcurl":
        return CurlCurlOperator(vspace or space, geom, nu=nu)
    raise ValueError(f"unknown operator kind {kind!r}")


# -- assembled reference path -------------------------------------------------


def _full_basis(space: FESpace, rule_points):
    """Dense tensor-product basis values/gradients at all rule points."""
    B, D = space.basis.eval_matrices_at(rule_points)
    d = space.dim
    if d == 2:
        Bf = np.kron(B, B)
        Gf = np.stack([np.kron(B, D), np.kron(D, B)], axis=2)
    else:
        Bf = np.kron(B, np.kron(B, B))
        Gf = np.stack(
            [
                np.kron(B, np.kron(B, D)),
                np.kron(B, np.kron(D, B)),
                np.kron(D, np.kron(B, B)),
            ],
            axis=2,
        )
    return Bf, Gf


def _unpack_sym(packed, d):
    ne, nq, _ = packed.shape
    W = np.empty((ne, nq, d, d))
    for k, (a, b) in enumerate(_SYM_IDX[d]):
        W[..., a, b] = packed[..., k]
        W[..., b, a] = packed[..., k]
    return W


def _estimate_and_check(n_entries, memory_cap_bytes):
    need = 16 * n_entries  # value + index storage
    if need > memory_cap_bytes:
        raise MemoryCapError(
            f"assembled matrix needs about {need / 1e9:.2f} GB, "
            f"over the cap of {memory_cap_bytes / 1e9:.2f} GB"
        )


def assemble(kind, space=None, geom=None, vspace=None, pspace=None, nu=1.0, c=0.0,
             memory_cap_bytes=1_500_000_000):
    """Assemble an operator as a scipy CSR matrix (verification path).

    Uses dense per-element quadrature contraction, cost O(p^{3d}) per
    element; refuses with MemoryCapError when the estimated size passes the
    cap.
    """
    if kind in ("mass", "stiffness", "helmholtz"):
        sp_ = space
        ne = sp_.mesh.num_elements
        nloc = sp_.nloc
        _estimate_and_check(ne * nloc * nloc * sp_.vdim, memory_cap_bytes)
        Bf, Gf = _full_basis(sp_, geom.rule.points)
        if kind == "mass":
            wd = _mass_factor(geom)
            loc = np.einsum("qi,eq,qj->eij", Bf, wd, Bf, optimize=True)
        elif kind == "stiffness":
            W = _unpack_sym(_stiffness_factor(geom, nu), sp_.dim)
            loc = np.einsum("qia,eqab,qjb->eij", Gf, W, Gf, optimize=True)
        else:
            wd = c * _mass_factor(geom)
            W = _unpack_sym(_stiffness_factor(geom, nu), sp_.dim)
            loc = np.einsum("qi,eq,qj->eij", Bf, wd, Bf, optimize=True)
            loc += np.einsum("qia,eqab,qjb->eij", Gf, W, Gf, optimize=True)
        ed = sp_.element_dofs
        rows = np.repeat(ed, nloc, axis=1).ravel()
        cols = np.tile(ed, (1, nloc)).ravel()
        ns = sp_.ndofs_scalar
        A = sp.coo_matrix((loc.ravel(), (rows, cols)), shape=(ns, ns)).tocsr()
        if sp_.vdim > 1:
            A = sp.block_diag([A] * sp_.vdim, format="csr")
        return A

    if kind in ("gradient", "divergence"):
        vs, ps = vspace, pspace
        ne = vs.mesh.num_elements
        _estimate_and_check(ne * vs.nloc * ps.nloc * vs.dim, memory_cap_bytes)
        Bv, Gv = _full_basis(vs, geom.rule.points)
        Bp, Gp = _full_basis(ps, geom.rule.points)
        Gfac = _grad_factor(geom)
        d = vs.dim
        nsv = vs.ndofs_scalar
        blocks_r, blocks_c, blocks_v = [], [], []
        for comp in range(d):
            if kind == "gradient":
                loc = np.einsum("qi,eqm,qjm->eij", Bv, Gfac[..., comp, :], Gp, optimize=True)
                r = np.repeat(vs.element_dofs + comp * nsv, ps.nloc, axis=1)
                cidx = np.tile(ps.element_dofs, (1, vs.nloc))
            else:
                loc = np.einsum("qi,eqm,qjm->eij", Bp, Gfac[..., comp, :], Gv, optimize=True)
                r = np.repeat(ps.element_dofs, vs.nloc, axis=1)
                cidx = np.tile(vs.element_dofs + comp * nsv, (1, ps.nloc))
            blocks_r.append(r.ravel())
            blocks_c.append(cidx.ravel())
            blocks_v.append(loc.ravel())
        rows = np.concatenate(blocks_r)
        cols = np.concatenate(blocks_c)
        vals = np.concatenate(blocks_v)
        shape = (vs.ndofs, ps.ndofs_scalar) if kind == "gradient" else (ps.ndofs_scalar, vs.ndofs)
        return sp.coo_matrix((vals, (rows, cols)), shape=shape).tocsr()

    raise ValueError(f"unknown assembled kind {kind!r}")


class AssembledOperator(Operator):
    """CSR-backed operator with the same constrained-row contract."""

    def __init__(self, matrix, constrained_dofs=None):
        self.matrix = matrix
        self.constrained = (
            np.asarray(constrained_dofs, dtype=np.int64)
            if constrained_dofs is not None
            else None
        )
        self.shape = matrix.shape

    def apply(self, x):
        if self.constrained is None:
            return self.matrix @ x
        xi = x.copy()
        xi[self.constrained] = 0.0
        y = self.matrix @ xi
        y[self.constrained] = x[self.constrained]
        return y


def function_values(space: FESpace, geom: GeometricFactors, x):
    """Sample a coefficient vector at the quadrature points of ``geom``.

    Returns (ne, nq) for a scalar space and (ne, nq, vdim) otherwise; the
    rule may differ from the one the space was built with, which makes this
    the entry point for over-integrated error measurement.
    """
    _check_rule_match(space, geom)
    ev = _TensorEval(space, geom.rule.points)
    ns = space.ndofs_scalar
    comps = [ev.values(space.gather(x[c * ns:(c + 1) * ns]))
             for c in range(space.vdim)]
    if space.vdim == 1:
        return comps[0]
    return np.stack(comps, axis=-1)


def load_vector(space: FESpace, geom: GeometricFactors, f):
    """Weak forcing vector b_i = (f, phi_i): callable f sampled at quadrature.

    ``f`` maps (n, dim) coordinates to (n,) scalar or (n, vdim) vector values.
    """
    _check_rule_match(space, geom)
    ev = _TensorEval(space, geom.rule.points)
    wdet = _mass_factor(geom)
    xq = geom.xq.reshape(-1, space.dim)
    vals = np.asarray(f(xq), dtype=np.float64)
    if vals.ndim == 1:
        vals = vals[:, None]
    if vals.shape != (xq.shape[0], space.vdim):
        raise ValueError(f"forcing returned shape {vals.shape}, expected ({xq.shape[0]}, {space.vdim})")
    ne, nq = geom.detj.shape
    out = np.empty(space.ndofs)
    ns = space.ndofs_scalar
    for c in range(space.vdim):
        fq = vals[:, c].reshape(ne, nq)
        out[c * ns : (c + 1) * ns] = space.scatter_add(ev.values_t(fq * wdet))
    return out


def boundary_normal_flux(space: FESpace, g, attributes=None, n_quad=None):
    """Boundary load b_i = integral over selected faces of psi_i (g . n).

    ``g`` maps (n, dim) points to (n, dim) vectors; n is the outward normal of
    the mesh's bilinear face geometry.  Quadrature uses ``n_quad`` (default
    p + 2) Gauss points per face direction.
    """
    from .basis import build_eval_matrices, gauss_legendre_rule
    from .fespace import _local_lattice

    mesh = space.mesh
    d, p = space.dim, space.p
    nq = int(n_quad) if n_quad is not None else p + 2
    xi, wq = gauss_legendre_rule(nq)
    B1, _ = build_eval_matrices(space.basis.nodes, xi)
    lam = 0.5 * (xi + 1.0)

    known = mesh.boundary_attributes()
    attrs = known if attributes is None else set(int(a) for a in attributes)
    lat = _local_lattice(p, d)
    clat = _local_lattice(1, d)
    out = np.zeros(space.ndofs_scalar)
    for e, f, attr in mesh.boundary_faces:
        if int(attr) not in attrs:
            continue
        e, f = int(e), int(f)
        axis, side = divmod(f, 2)
        in_face = [a for a in range(d) if a != axis]
        dofs = space.element_dofs[e, lat[:, axis] == (p if side else 0)]
        cr = mesh.corners[e]
        on_face = clat[:, axis] == side
        sub, fcr = clat[on_face], cr[on_face]
        if d == 2:
            (t,) = in_face
            ends = fcr[np.argsort(sub[:, t])]
            x = ends[0] + np.outer(lam, ends[1] - ends[0])
            tau = 0.5 * (ends[1] - ends[0])
            nrm = np.array([tau[1], -tau[0]])
            if np.dot(nrm, ends.mean(axis=0) - cr.mean(axis=0)) < 0.0:
                nrm = -nrm
            gn = np.asarray(g(x)) @ nrm
            np.add.at(out, dofs, B1.T @ (wq * gn))
        else:
            t1, t2 = in_face
            order = np.argsort(2 * sub[:, t2] + sub[:, t1])
            c00, c10, c01, c11 = fcr[order]
            l1 = np.tile(lam, nq)
            l2 = np.repeat(lam, nq)
            x = (np.outer((1 - l1) * (1 - l2), c00) + np.outer(l1 * (1 - l2), c10)
                 + np.outer((1 - l1) * l2, c01) + np.outer(l1 * l2, c11))
            d1 = 0.5 * (np.outer(1 - l2, c10 - c00) + np.outer(l2, c11 - c01))
            d2 = 0.5 * (np.outer(1 - l1, c01 - c00) + np.outer(l1, c11 - c10))
            nrm = np.cross(d1, d2)
            if np.dot(nrm.mean(axis=0), x.mean(axis=0) - cr.mean(axis=0)) < 0.0:
                nrm = -nrm
            gn = np.einsum("qk,qk->q", np.asarray(g(x)), nrm)
            w2 = np.tile(wq, nq) * np.repeat(wq, nq)
            # dof index runs first in-face axis fastest
            vals = np.einsum("qi,qj->qij", B1[np.arange(nq * nq) // nq],
                             B1[np.arange(nq * nq) % nq]).reshape(nq * nq, -1)
            np.add.at(out, dofs, vals.T @ (w2 * gn))
    return out


def boundary_rotational_rhs(vspace: FESpace, pspace: FESpace, u, nu=1.0,
                            attributes=None, n_quad=None):
    """Pressure load r_j = -nu * sum over faces of (n x curl u) . grad psi_j.

    The rotational viscous term contributes to a weak pressure Poisson
    equation only through this surface functional: its volume part is the
    divergence of a curl and vanishes identically.  Vorticity comes from the
    one-sided trace of the adjacent element's expansion, so only first
    derivatives of the velocity are needed.  The result is orthogonal to
    constants by construction.
    """
    from .basis import build_eval_matrices, gauss_legendre_rule
    from .fespace import _local_lattice

    mesh = vspace.mesh
    d = vspace.dim
    if vspace.vdim != d or d not in (2, 3):
        raise ValueError("curl needs a 2D or 3D vector velocity space")
    if pspace.mesh is not vspace.mesh or pspace.vdim != 1:
        raise ValueError("pressure space must be scalar on the same mesh")
    nq1 = int(n_quad) if n_quad is not None else max(vspace.p, pspace.p) + 2
    xi, w1 = gauss_legendre_rule(nq1)
    lam = 0.5 * (xi + 1.0)
    Bv, Dv = build_eval_matrices(vspace.basis.nodes, xi)
    Bp, Dp = build_eval_matrices(pspace.basis.nodes, xi)
    ends = np.array([-1.0, 1.0])
    BvE, DvE = build_eval_matrices(vspace.basis.nodes, ends)
    BpE, DpE = build_eval_matrices(pspace.basis.nodes, ends)

    known = mesh.boundary_attributes()
    attrs = known if attributes is None else set(int(a) for a in attributes)
    clat = _local_lattice(1, d)
    nv = vspace.ndofs_scalar
    out = np.zeros(pspace.ndofs)
    if d == 2:
        nqf, wf = nq1, w1
        iq1, iq2 = np.arange(nq1), None
    else:
        nqf = nq1 * nq1
        wf = np.tile(w1, nq1) * np.repeat(w1, nq1)
        iq1 = np.arange(nqf) % nq1
        iq2 = np.arange(nqf) // nq1

    for e, f, attr in mesh.boundary_faces:
        if int(attr) not in attrs:
            continue
        e, f = int(e), int(f)
        axis, side = divmod(f, 2)
        in_face = [a for a in range(d) if a != axis]
        lams = np.empty((nqf, d))
        lams[:, axis] = float(side)
        lams[:, in_face[0]] = lam[iq1]
        if d == 3:
            lams[:, in_face[1]] = lam[iq2]
        # d-linear corner map: points and d(x)/d(lambda) on the face
        cr = mesh.corners[e]
        x = np.zeros((nqf, d))
        dxdl = np.zeros((nqf, d, d))
        for bits, corner in zip(clat, cr):
            w = np.where(bits[None, :] == 1, lams, 1.0 - lams)
            x += np.prod(w, axis=1)[:, None] * corner
            for a in range(d):
                others = np.prod(np.delete(w, a, axis=1), axis=1)
                sgn = 1.0 if bits[a] else -1.0
                dxdl[:, :, a] += sgn * others[:, None] * corner
        jac = 0.5 * dxdl
        jinv = np.linalg.inv(jac)
        if d == 2:
            tan = jac[:, :, in_face[0]]
            nrm = np.stack([tan[:, 1], -tan[:, 0]], axis=1)
        else:
            nrm = np.cross(jac[:, :, in_face[0]], jac[:, :, in_face[1]])
        if np.dot(nrm.mean(axis=0), x.mean(axis=0) - cr.mean(axis=0)) < 0.0:
            nrm = -nrm

        def face_matrices(B, D, BE, DE, deriv_axis):
            mats = []
            for b in range(d):
                if b == axis:
                    pair = (np.broadcast_to(BE[side], (nqf, BE.shape[1])),
                            np.broadcast_to(DE[side], (nqf, DE.shape[1])))
                elif b == in_face[0]:
                    pair = B[iq1], D[iq1]
                else:
                    pair = B[iq2], D[iq2]
                mats.append(pair[1] if b == deriv_axis else pair[0])
            return mats

        shape = (vspace.p + 1,) * d
        edv = vspace.element_dofs[e]
        grads = np.empty((nqf, d, d))  # [point, component, x-derivative]
        for c in range(d):
            uloc = u[c * nv + edv].reshape(shape, order="F")
            gref = np.empty((nqf, d))
            for a in range(d):
                mats = face_matrices(Bv, Dv, BvE, DvE, a)
                if d == 2:
                    gref[:, a] = np.einsum("qi,qj,ij->q", *mats, uloc)
                else:
                    gref[:, a] = np.einsum("qi,qj,qk,ijk->q", *mats, uloc)
            grads[:, c, :] = np.einsum("qai,qa->qi", jinv, gref)
        if d == 2:
            omega = grads[:, 1, 0] - grads[:, 0, 1]
            v = omega[:, None] * np.stack([nrm[:, 1], -nrm[:, 0]], axis=1)
        else:
            omega = np.stack([grads[:, 2, 1] - grads[:, 1, 2],
                              grads[:, 0, 2] - grads[:, 2, 0],
                              grads[:, 1, 0] - grads[:, 0, 1]], axis=1)
            v = np.cross(nrm, omega)

        coeff = np.einsum("qai,qi->qa", jinv, v) * wf[:, None]
        acc = np.zeros(pspace.element_dofs.shape[1])
        for a in range(d):
            mats = face_matrices(Bp, Dp, BpE, DpE, a)
            if d == 2:
                T = np.einsum("qi,qj->qji", *mats).reshape(nqf, -1)
            else:
                T = np.einsum("qi,qj,qk->qkji", *mats).reshape(nqf, -1)
            acc += T.T @ coeff[:, a]
        out[pspace.element_dofs[e]] += -nu * acc
    return out
