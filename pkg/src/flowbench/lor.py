"""Low-order-refined companions of high-order spaces.

The nodal lattice of a degree-p space, mapped through the element geometry,
is reused as a mesh of p^d small Q1 elements per macro element.  The Q1
matrices assembled on that mesh are spectrally equivalent to the high-order
operators and sparse (at most 9 nonzeros per row in 2D, 27 in 3D), which
makes them practical preconditioner ingredients.
"""

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp

from . import mfop
from .basis import GAUSS_LEGENDRE, build_eval_matrices, quadrature_rule
from .fespace import FESpace, element_node_coords, sub_cell_local_ids
from .mesh import Mesh, compute_geometric_factors


@dataclass
class LORMesh:
    """The refined mesh of a scalar space, with the macro-element map."""

    space: FESpace
    mesh: Mesh
    macro_to_sub: np.ndarray  # (ne_macro, p^d) refined element ids


def build_lor_mesh(space: FESpace) -> LORMesh:
    """Refine each element into p^d Q1 cells on the nodal lattice.

    The refined vertex array IS the space's nodal coordinate array (same
    object), so refined vertex v carries scalar DoF v of the parent space.
    """
    if space.vdim != 1:
        raise ValueError("LOR meshes are built from scalar spaces")
    p, d = space.p, space.dim
    ne = space.mesh.num_elements
    sub = sub_cell_local_ids(p, d)
    conn = space.element_dofs[:, sub].reshape(ne * len(sub), 2**d)
    # geometry comes from each parent element's own map so that periodic
    # seams keep unwrapped, positively oriented sub-cells
    coords_all = element_node_coords(space)
    corners = coords_all[:, sub, :].reshape(ne * len(sub), 2**d, d)
    refined = Mesh(
        d,
        space.node_coords,
        conn,
        corners,
        boundary_faces=np.zeros((0, 3), dtype=np.int64),
        periodic=space.mesh.periodic,
    )
    nsub = p**d
    macro = np.arange(space.mesh.num_elements * nsub, dtype=np.int64).reshape(-1, nsub)
    return LORMesh(space, refined, macro)


def lor_matrix(space: FESpace, kind: str, nu: float = 1.0, c: float = 0.0,
               constrained=None) -> sp.csr_matrix:
    """Assemble the Q1 mass/stiffness/helmholtz matrix on the refined mesh.

    Two-point Gauss quadrature per direction, exact for Q1 forms on affine
    cells.  Constrained rows and columns are zeroed with a unit diagonal,
    keeping the sparsity pattern intact.
    """
    if kind not in ("mass", "stiffness", "helmholtz"):
        raise ValueError(f"unsupported LOR kind {kind!r}")
    lor = build_lor_mesh(space)
    q1_space = FESpace(lor.mesh, 1)
    if q1_space.ndofs_scalar != space.ndofs_scalar:
        raise RuntimeError("refined vertex count does not match parent DoF count")
    rule = quadrature_rule(GAUSS_LEGENDRE, 2)
    geom = compute_geometric_factors(lor.mesh, rule)
    A = mfop.assemble(kind, space=q1_space, geom=geom, nu=nu, c=c)
    A.sort_indices()
    if constrained is not None and len(constrained):
        A = constrain_matrix(A, constrained)
    return A


def constrain_matrix(A: sp.csr_matrix, dofs) -> sp.csr_matrix:
    """Zero constrained rows/columns and set a unit diagonal, in-pattern."""
    dofs = np.asarray(dofs, dtype=np.int64)
    n = A.shape[0]
    mask = np.zeros(n, dtype=bool)
    mask[dofs] = True
    A = A.tocoo(copy=True)
    kill = mask[A.row] | mask[A.col]
    data = A.data.copy()
    data[kill] = 0.0
    out = sp.csr_matrix((data, (A.row, A.col)), shape=A.shape)
    diag = out.diagonal()
    diag[dofs] = 1.0
    out.setdiag(diag)
    out.sort_indices()
    return out


def nodal_interpolation(fine: FESpace, coarse: FESpace) -> sp.csr_matrix:
    """Interpolation matrix from a lower-degree space on the same mesh.

    Row i holds the coarse nodal basis evaluated at fine dof i's lattice
    position inside its owner element; rows sum to one, and continuity of
    the coarse basis makes the owner choice immaterial.
    """
    if fine.mesh is not coarse.mesh and fine.mesh.num_elements != coarse.mesh.num_elements:
        raise ValueError("spaces must share the parent mesh")
    B1, _ = build_eval_matrices(coarse.basis.nodes, fine.basis.nodes)
    Bloc = B1
    for _ in range(fine.dim - 1):
        Bloc = np.kron(Bloc, B1)  # row flat index has x fastest
    ns = fine.ndofs_scalar
    nloc_c = coarse.nloc
    rows = np.repeat(np.arange(ns), nloc_c)
    cols = coarse.element_dofs[fine.dof_owner_elem].ravel()
    vals = Bloc[fine.dof_owner_local].ravel()
    P = sp.coo_matrix((vals, (rows, cols)), shape=(ns, coarse.ndofs_scalar))
    P = P.tocsr()
    P.sum_duplicates()
    return P


def coarse_q1_interpolation(space: FESpace) -> sp.csr_matrix:
    """Interpolation from Q1 on the parent mesh to the space's nodal lattice.

    At most 2^d nonzeros per row; Q1 dof ids coincide with mesh vertex ids.
    """
    return nodal_interpolation(space, FESpace(space.mesh, 1))


def export_matrix_market(A, path, comment=""):
    """Write a sparse matrix in Matrix Market coordinate format."""
    scipy.io.mmwrite(str(path), A.tocoo(), comment=comment)


def spectral_equivalence_report(apply_A, M: sp.csr_matrix, n_iter: int = 80, seed: int = 0):
    """Extreme generalized eigenvalues of A x = lambda M x by Lanczos.

    The pencil is whitened with a dense Cholesky factor of M (desk-scale
    sizes only), then a fully reorthogonalized Lanczos run captures the
    spectrum edges.

    Returns:
        (lam_min, lam_max) estimates.
    """
    n = M.shape[0]
    if n > 20000:
        raise ValueError(f"spectral report is a desk-scale diagnostic (n = {n})")
    if hasattr(apply_A, "apply"):
        apply_A = apply_A.apply
    L = np.linalg.cholesky(M.toarray())

    def whiten_apply(v):
        # C v = L^{-1} A L^{-T} v
        y = scipy.linalg.solve_triangular(L, v, lower=True, trans="T")
        y = apply_A(y)
        return scipy.linalg.solve_triangular(L, y, lower=True)

    m = min(n_iter, n)
    rng = np.random.default_rng(seed)
    V = np.zeros((m + 1, n))
    alpha = np.zeros(m)
    beta = np.zeros(m)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    V[0] = v
    for j in range(m):
        w = whiten_apply(V[j])
        alpha[j] = V[j] @ w
        w -= alpha[j] * V[j]
        if j > 0:
            w -= beta[j - 1] * V[j - 1]
        # full reorthogonalization keeps the extreme estimates honest
        w -= V[: j + 1].T @ (V[: j + 1] @ w)
        b = np.linalg.norm(w)
        if b < 1e-13:
            m = j + 1
            break
        beta[j] = b
        V[j + 1] = w / b
    vals = scipy.linalg.eigh_tridiagonal(alpha[:m], beta[: m - 1], eigvals_only=True)
    return float(vals[0]), float(vals[-1])
