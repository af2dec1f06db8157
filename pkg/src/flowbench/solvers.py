"""Krylov solvers and the low-order-refined preconditioners they lean on.

Conventions shared by every solve in the package:
  * operators act on vectors whose constrained entries pass through
    unchanged, so right-hand sides carry lifted boundary values;
  * singular (pure-Neumann) systems are handled by mean deflation, never by
    regularization of the matrix itself (the V-cycle pins one dof internally
    to keep its direct coarse solve nonsingular).
"""

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import lor as lor_mod
from .fespace import FESpace
from .kernels import ilu0_factor
from .mesh import compute_geometric_factors


@dataclass
class SolverConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 0.0
    max_iters: int = 500
    restart: int = 50
    label: str = ""


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    final_relres: float
    seconds: float
    label: str = ""
    residuals: list = field(default_factory=list)

    def __str__(self):
        tag = "converged" if self.converged else "NOT converged"
        name = f"{self.label}: " if self.label else ""
        return (f"{name}{tag} in {self.iterations} iterations, "
                f"relres {self.final_relres:.3e}, {self.seconds:.3f}s")


def _as_apply(A):
    if hasattr(A, "apply"):
        return A.apply
    if sp.issparse(A):
        return lambda v: A @ v
    if callable(A):
        return A
    raise TypeError(f"cannot interpret {type(A)} as an operator")


def deflate_mean(v, weights=None):
    """Remove the (weighted) mean: v - (sum w_i v_i / sum w_i) * 1."""
    if weights is None:
        return v - v.mean()
    return v - (weights @ v) / weights.sum()


class MeanProjector:
    """Callable mean-deflation with fixed weights (None = Euclidean)."""

    def __init__(self, weights=None):
        self.weights = weights

    def __call__(self, v):
        return deflate_mean(v, self.weights)


class DiagonalPreconditioner:
    def __init__(self, diag):
        self.inv = 1.0 / np.asarray(diag, dtype=np.float64)

    def apply(self, r):
        return self.inv * r

    __call__ = apply


def collocated_mass_diagonal(space, constrained=None):
    """Diagonal mass approximation from nodal-point quadrature.

    Evaluating the mass form with the Gauss-Lobatto rule collocated at the
    nodal lattice makes the element matrix diagonal: w_i det J(x_i).  The
    result is a cheap spectrally equivalent stand-in for the consistent mass.
    """
    from .basis import GAUSS_LOBATTO, quadrature_rule

    rule = quadrature_rule(GAUSS_LOBATTO, space.p + 1)
    geom = compute_geometric_factors(space.mesh, rule)
    # collocated points coincide with the nodal lattice index-for-index
    diag = space.scatter_add(geom.detj * geom.w[None, :])
    if space.vdim > 1:
        diag = np.tile(diag, space.vdim)
    if constrained is not None and len(constrained):
        diag = diag.copy()
        diag[np.asarray(constrained, dtype=np.int64)] = 1.0
    return diag


def cg(A, b, precond=None, config=None, x0=None, project=None):
    """Preconditioned conjugate gradients.

    Convergence is monitored in the preconditioned residual norm relative to
    the initial one; the true residual is recomputed every 50 iterations to
    guard against drift.  With rel_tol = 0 the loop runs exactly max_iters
    steps, the mode used for fixed inner solves.
    """
    apply_A = _as_apply(A)
    if precond is not None:
        precond = _as_apply(precond)
    cfg = config or SolverConfig()
    t0 = time.perf_counter()
    x = np.zeros_like(b) if x0 is None else x0.astype(np.float64, copy=True)
    r = b - apply_A(x)
    if project is not None:
        r = project(r)
    z = precond(r) if precond is not None else r.copy()
    if project is not None:
        z = project(z)
    rz = r @ z
    norm0 = np.sqrt(abs(rz))
    history = [1.0]
    if norm0 == 0.0 or norm0 <= cfg.abs_tol:
        return x, SolveReport(True, 0, 0.0, time.perf_counter() - t0,
                              cfg.label, history)
    p = z.copy()
    relres = 1.0
    it = 0
    converged = False
    for it in range(1, cfg.max_iters + 1):
        Ap = apply_A(p)
        pAp = p @ Ap
        if pAp <= 0.0:
            break
        alpha = rz / pAp
        x += alpha * p
        if it % 50 == 0:
            r = b - apply_A(x)
            if project is not None:
                r = project(r)
        else:
            r -= alpha * Ap
        z = precond(r) if precond is not None else r.copy()
        if project is not None:
            z = project(z)
        rz_new = r @ z
        relres = np.sqrt(abs(rz_new)) / norm0
        history.append(relres)
        if cfg.rel_tol > 0.0 and relres <= cfg.rel_tol:
            converged = True
            break
        if rz_new == 0.0:
            converged = True
            break
        beta = rz_new / rz
        rz = rz_new
        p = z + beta * p
    if cfg.rel_tol == 0.0:
        converged = True
    return x, SolveReport(converged, it, relres, time.perf_counter() - t0,
                          cfg.label, history)


def fgmres(A, b, precond=None, config=None, x0=None, project=None):
    """Flexible GMRES with right preconditioning and restarts.

    The preconditioner may change between iterations (inner Krylov solves),
    so the preconditioned basis vectors are stored.  The least-squares
    residual equals the true residual of the unpreconditioned system.
    """
    apply_A = _as_apply(A)
    if precond is not None:
        precond = _as_apply(precond)
    cfg = config or SolverConfig()
    t0 = time.perf_counter()
    n = b.shape[0]
    x = np.zeros_like(b) if x0 is None else x0.astype(np.float64, copy=True)
    r = b - apply_A(x)
    beta0 = np.linalg.norm(r)
    history = [1.0]
    if beta0 == 0.0 or beta0 <= cfg.abs_tol:
        return x, SolveReport(True, 0, 0.0, time.perf_counter() - t0,
                              cfg.label, history)
    target = cfg.rel_tol * beta0
    m = cfg.restart
    it = 0
    relres = 1.0
    converged = False
    while it < cfg.max_iters and not converged:
        beta = np.linalg.norm(r)
        if beta <= max(target, cfg.abs_tol):
            converged = True
            break
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        j = -1
        for j in range(m):
            if it >= cfg.max_iters:
                j -= 1
                break
            it += 1
            z = precond(V[j]) if precond is not None else V[j].copy()
            if project is not None:
                z = project(z)
            Z[j] = z
            w = apply_A(z)
            for i in range(j + 1):
                H[i, j] = V[i] @ w
                w -= H[i, j] * V[i]
            H[j + 1, j] = np.linalg.norm(w)
            if H[j + 1, j] > 1e-300:
                V[j + 1] = w / H[j + 1, j]
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                cs[j], sn[j] = 1.0, 0.0
            else:
                cs[j], sn[j] = H[j, j] / denom, H[j + 1, j] / denom
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]
            relres = abs(g[j + 1]) / beta0
            history.append(relres)
            if relres * beta0 <= max(target, cfg.abs_tol):
                converged = True
                break
        k = j + 1
        if k > 0:
            y = scipy.linalg.solve_triangular(H[:k, :k], g[:k], lower=False)
            x += Z[:k].T @ y
        r = b - apply_A(x)
        relres = np.linalg.norm(r) / beta0
        if relres * beta0 <= max(target, cfg.abs_tol):
            converged = True
    return x, SolveReport(converged, it, relres, time.perf_counter() - t0,
                          cfg.label, history)


def _first_touch_ordering(space):
    """DoF permutation: lexicographic within each element, elements in order.

    Duplicated (shared) dofs keep their first appearance, which is the
    ordering under which the Q1 incomplete factorization behaves like a
    sweep through the macro elements.
    """
    flat = space.element_dofs.ravel()
    _, first = np.unique(flat, return_index=True)
    return flat[np.sort(first)]


class ILU0Smoother:
    """Incomplete LU with zero fill on a fixed ordering.

    The forward pass applies (LU)^{-1}, the backward pass (LU)^{-T}; using
    both around a coarse correction keeps the two-level cycle symmetric.
    Falls back to damped Jacobi if a pivot degenerates.
    """

    def __init__(self, A: sp.csr_matrix, order, backend=None):
        n = A.shape[0]
        self.order = order
        Ap = A[order][:, order].tocsr()
        Ap.sort_indices()
        data = Ap.data.astype(np.float64, copy=True)
        fail = ilu0_factor(Ap.indptr, Ap.indices, data, backend=backend)
        self.jacobi = None
        if fail >= 0:
            diag = A.diagonal().copy()
            diag[diag == 0.0] = 1.0
            self.jacobi = 0.6 / diag
            return
        F = sp.csr_matrix((data, Ap.indices.copy(), Ap.indptr.copy()), shape=(n, n))
        L = (sp.tril(F, k=-1) + sp.eye(n, format="csr")).tocsc()
        U = sp.triu(F, k=0).tocsc()
        opts = dict(permc_spec="NATURAL", diag_pivot_thresh=0.0,
                    options=dict(SymmetricMode=False))
        self._L = spla.splu(L, **opts)
        self._U = spla.splu(U, **opts)

    def forward(self, r):
        if self.jacobi is not None:
            return self.jacobi * r
        out = np.empty_like(r)
        out[self.order] = self._U.solve(self._L.solve(r[self.order]))
        return out

    def backward(self, r):
        if self.jacobi is not None:
            return self.jacobi * r
        out = np.empty_like(r)
        out[self.order] = self._L.solve(self._U.solve(r[self.order], trans="T"),
                                        trans="T")
        return out


def _degree_ladder(p):
    degs = [p]
    while degs[-1] > 1:
        degs.append(max(1, (degs[-1] + 1) // 2))
    return degs


class LORPreconditioner:
    """Multilevel V(1,1) cycle on low-order-refined matrices.

    The level hierarchy halves the polynomial degree down to Q1 on the
    parent mesh.  Each level carries the Q1 matrix assembled on its own
    nodal sub-mesh, smoothed by ordered ILU(0) (forward before the coarse
    correction, transposed after); the Q1 bottom level is solved directly.
    Levels talk through nodal interpolation, so the whole application is a
    fixed symmetric linear operation, safe inside plain CG.

    A pure-Neumann operator (singular up to constants) is handled by pinning
    one dof in every level's matrix and deflating means around the cycle.

    Args:
        dirichlet_attrs: None for an unconstrained operator, "all" for every
            boundary attribute, or an iterable of attributes.  Constrained
            rows of the finest operator must follow the pass-through
            convention for the cycle to be consistent.
    """

    def __init__(self, space, kind, nu=1.0, c=0.0, dirichlet_attrs=None,
                 pure_neumann=False, backend=None):
        if space.vdim != 1:
            raise ValueError("LOR cycles act componentwise on scalar spaces")
        if pure_neumann and dirichlet_attrs is not None:
            raise ValueError("pure-Neumann cycle expects no constrained dofs")
        self.pure_neumann = pure_neumann
        mesh = space.mesh
        self.levels = []
        self.transfers = []
        prev_space = None
        for depth, deg in enumerate(_degree_ladder(space.p)):
            lsp = space if deg == space.p else FESpace(mesh, deg)
            if dirichlet_attrs is None:
                bdr = np.zeros(0, dtype=np.int64)
            elif dirichlet_attrs == "all":
                bdr = lsp.boundary_dof_set()
            else:
                bdr = lsp.boundary_dof_set(dirichlet_attrs)
            A = lor_mod.lor_matrix(lsp, kind, nu=nu, c=c, constrained=bdr)
            if pure_neumann:
                A = lor_mod.constrain_matrix(A, np.array([0], dtype=np.int64))
            self.levels.append((lsp, A))
            if prev_space is not None:
                self.transfers.append(lor_mod.nodal_interpolation(prev_space, lsp))
            prev_space = lsp
        self.A = self.levels[0][1]
        self.smoothers = [
            ILU0Smoother(A, _first_touch_ordering(lsp), backend=backend)
            for lsp, A in self.levels[:-1]
        ]
        self._bottom = spla.splu(self.levels[-1][1].tocsc())

    def _cycle(self, level, r):
        if level == len(self.levels) - 1:
            return self._bottom.solve(r)
        A = self.levels[level][1]
        sm = self.smoothers[level]
        P = self.transfers[level]
        x = sm.forward(r)
        x = x + P @ self._cycle(level + 1, P.T @ (r - A @ x))
        return x + sm.backward(r - A @ x)

    def apply(self, r):
        if self.pure_neumann:
            r = deflate_mean(r)
        x = self._cycle(0, r)
        if self.pure_neumann:
            x = deflate_mean(x)
        return x

    __call__ = apply


class BlockDiagonalPreconditioner:
    """Apply one scalar preconditioner to each component of a vector field."""

    def __init__(self, scalar_precond, vdim, ndofs_scalar):
        self.inner = scalar_precond
        self.vdim = vdim
        self.ns = ndofs_scalar

    def apply(self, r):
        out = np.empty_like(r)
        for c in range(self.vdim):
            sl = slice(c * self.ns, (c + 1) * self.ns)
            out[sl] = self.inner.apply(r[sl])
        return out

    __call__ = apply


class InnerCG:
    """Fixed-iteration CG wrapped as a preconditioner application."""

    def __init__(self, A, precond=None, iterations=3):
        self.apply_A = _as_apply(A)
        self.precond = precond
        self.cfg = SolverConfig(rel_tol=0.0, max_iters=iterations)

    def apply(self, r):
        x, _ = cg(self.apply_A, r, precond=self.precond, config=self.cfg)
        return x

    __call__ = apply
