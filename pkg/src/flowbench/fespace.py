"""Continuous tensor-product finite element spaces.

Scalar degrees of freedom are numbered entity by entity: vertex classes
first, then edge interiors, then (in 3D) face interiors, then element
interiors, each in order of first appearance during the element scan.
Shared-entity DoFs seen from different elements are matched through the
owning element's orientation, so conforming meshes of arbitrary local frame
get C0-consistent numbering.

Vector spaces use a struct-of-arrays layout: component c of scalar DoF i is
global DoF ``c * ndofs_scalar + i``.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .basis import GAUSS_LEGENDRE, Basis1D, make_basis, quadrature_rule
from .mesh import Mesh, compute_geometric_factors


def _local_lattice(p, d):
    """(nloc, d) integer lattice coordinates in lexicographic order."""
    n = p + 1
    idx = np.arange(n**d)
    cols = [(idx // n**a) % n for a in range(d)]
    return np.stack(cols, axis=1)


class FESpace:
    """A continuous nodal space of degree p on a tensor-product mesh."""

    def __init__(self, mesh: Mesh, p: int, vdim: int = 1, n_q: int | None = None):
        if p < 1:
            raise ValueError(f"degree must be >= 1, got {p}")
        if vdim < 1:
            raise ValueError(f"vdim must be >= 1, got {vdim}")
        self.mesh = mesh
        self.p = p
        self.vdim = vdim
        self.basis = make_basis(p, n_q=n_q)
        self.dim = mesh.dim
        self._number_dofs()
        self._compute_node_coords()

    # -- numbering ---------------------------------------------------------

    def _local_edges(self):
        """Local edge table: (axis, fixed bits of the other axes)."""
        d = self.dim
        edges = []
        if d == 2:
            for a in range(2):
                for b in range(2):
                    edges.append((a, (b,)))
        else:
            for a in range(3):
                others = [x for x in range(3) if x != a]
                for b2 in range(2):
                    for b1 in range(2):
                        edges.append((a, (b1, b2), tuple(others)))
        return edges

    def _corner_id(self, bits):
        c = 0
        for a, b in enumerate(bits):
            c += b << a
        return c

    def _number_dofs(self):
        mesh, p, d = self.mesh, self.p, self.dim
        ne = mesh.num_elements
        nv = mesh.num_vertices
        elems = mesh.elements
        if p == 1:
            # vertex dofs only; skip the per-element entity scan
            self.ndofs_scalar = nv
            self.element_dofs = elems.astype(np.int64, copy=True)
            self.num_edges = self._count_edges_fast()
            self.num_faces = self._count_faces_fast() if d == 3 else 0
            return
        ledges = self._local_edges()
        nle = len(ledges)

        edge_key_to_id = {}
        edge_owner = []
        edge_ids = np.zeros((ne, nle), dtype=np.int64)
        edge_flip = np.zeros((ne, nle), dtype=bool)

        face_key_to_id = {}
        face_owner = []
        nlf = 2 * d if d == 3 else 0
        face_ids = np.zeros((ne, nlf), dtype=np.int64)
        face_tr = np.zeros((ne, nlf, 6), dtype=np.int64)

        for e in range(ne):
            conn = elems[e]
            for le, edge in enumerate(ledges):
                if d == 2:
                    a, (b,) = edge
                    other = 1 - a
                    bits_lo = [0, 0]
                    bits_lo[other] = b
                    bits_hi = bits_lo.copy()
                    bits_hi[a] = 1
                else:
                    a, (b1, b2), others = edge
                    bits_lo = [0, 0, 0]
                    bits_lo[others[0]] = b1
                    bits_lo[others[1]] = b2
                    bits_hi = bits_lo.copy()
                    bits_hi[a] = 1
                va = int(conn[self._corner_id(bits_lo)])
                vb = int(conn[self._corner_id(bits_hi)])
                key = (va, vb) if va < vb else (vb, va)
                eid = edge_key_to_id.get(key)
                if eid is None:
                    eid = len(edge_owner)
                    edge_key_to_id[key] = eid
                    edge_owner.append((va, vb))
                edge_ids[e, le] = eid
                edge_flip[e, le] = (va, vb) != edge_owner[eid]

            if d == 3:
                for f in range(6):
                    fa, side = divmod(f, 2)
                    t1, t2 = [x for x in range(3) if x != fa]
                    ids = []
                    for j in (0, 1):
                        for i in (0, 1):
                            bits = [0, 0, 0]
                            bits[fa] = side
                            bits[t1] = i
                            bits[t2] = j
                            ids.append(int(conn[self._corner_id(bits)]))
                    key = tuple(sorted(ids))
                    fid = face_key_to_id.get(key)
                    if fid is None:
                        fid = len(face_owner)
                        face_key_to_id[key] = fid
                        face_owner.append(tuple(ids))
                    face_ids[e, f] = fid
                    owner = face_owner[fid]
                    pos = {
                        owner[0]: (0, 0),
                        owner[1]: (p, 0),
                        owner[2]: (0, p),
                        owner[3]: (p, p),
                    }
                    p0 = pos[ids[0]]
                    p1 = pos[ids[1]]
                    p2 = pos[ids[2]]
                    ex = ((p1[0] - p0[0]) // p, (p1[1] - p0[1]) // p)
                    ey = ((p2[0] - p0[0]) // p, (p2[1] - p0[1]) // p)
                    if abs(ex[0]) + abs(ex[1]) != 1 or abs(ey[0]) + abs(ey[1]) != 1:
                        raise ValueError("non-conforming face connectivity")
                    face_tr[e, f] = (p0[0], p0[1], ex[0], ex[1], ey[0], ey[1])

        n_edges = len(edge_owner)
        n_faces = len(face_owner)
        per_edge = p - 1
        per_face = (p - 1) ** 2
        per_int = (p - 1) ** d
        edge_base = nv
        face_base = edge_base + n_edges * per_edge
        int_base = face_base + n_faces * per_face
        self.ndofs_scalar = int_base + ne * per_int

        lattice = _local_lattice(p, d)
        nloc = lattice.shape[0]
        dofs = np.zeros((ne, nloc), dtype=np.int64)
        erange = np.arange(ne)
        for l in range(nloc):
            pos = lattice[l]
            on_end = [(int(pos[a]) in (0, p)) for a in range(d)]
            n_interior = d - sum(on_end)
            if n_interior == 0:
                bits = [int(pos[a]) // p for a in range(d)]
                dofs[:, l] = elems[:, self._corner_id(bits)]
            elif n_interior == 1:
                a = next(x for x in range(d) if not on_end[x])
                if d == 2:
                    other = 1 - a
                    b = int(pos[other]) // p
                    le = a * 2 + b
                else:
                    others = [x for x in range(3) if x != a]
                    b1 = int(pos[others[0]]) // p
                    b2 = int(pos[others[1]]) // p
                    le = a * 4 + b2 * 2 + b1
                k = int(pos[a]) - 1
                kk = np.where(edge_flip[:, le], p - 2 - k, k)
                dofs[:, l] = edge_base + edge_ids[:, le] * per_edge + kk
            elif n_interior == 2 and d == 3:
                fa = next(x for x in range(3) if on_end[x])
                side = int(pos[fa]) // p
                f = 2 * fa + side
                t1, t2 = [x for x in range(3) if x != fa]
                s = int(pos[t1])
                t = int(pos[t2])
                tr = face_tr[:, f]
                S = tr[:, 0] + s * tr[:, 2] + t * tr[:, 4]
                T = tr[:, 1] + s * tr[:, 3] + t * tr[:, 5]
                idx = (S - 1) + per_edge * (T - 1)
                dofs[:, l] = face_base + face_ids[:, f] * per_face + idx
            else:
                idx = 0
                stride = 1
                for a in range(d):
                    idx += (int(pos[a]) - 1) * stride
                    stride *= p - 1
                dofs[:, l] = int_base + erange * per_int + idx

        self.element_dofs = dofs
        self.num_edges = n_edges
        self.num_faces = n_faces

    def _count_edges_fast(self):
        mesh, d = self.mesh, self.dim
        elems = mesh.elements
        pairs = []
        for edge in self._local_edges():
            a = edge[0]
            bits_lo = [0] * d
            if d == 2:
                bits_lo[1 - a] = edge[1][0]
            else:
                others = edge[2]
                bits_lo[others[0]], bits_lo[others[1]] = edge[1]
            bits_hi = bits_lo.copy()
            bits_hi[a] = 1
            va = elems[:, self._corner_id(bits_lo)]
            vb = elems[:, self._corner_id(bits_hi)]
            pairs.append(np.minimum(va, vb) * mesh.num_vertices + np.maximum(va, vb))
        return int(np.unique(np.concatenate(pairs)).size)

    def _count_faces_fast(self):
        from .mesh import local_face_corners

        elems = self.mesh.elements
        rows = [np.sort(elems[:, local_face_corners(3, f)], axis=1) for f in range(6)]
        return int(np.unique(np.concatenate(rows), axis=0).shape[0])

    # -- geometry ---------------------------------------------------------

    def _compute_node_coords(self):
        d = self.dim
        coords_all = element_node_coords(self)
        ns = self.ndofs_scalar
        nloc = self.element_dofs.shape[1]
        # first occurrence in element-major scan order defines the owner
        flat = self.element_dofs.ravel()
        vals, first = np.unique(flat, return_index=True)
        coords = np.zeros((ns, d))
        owner_elem = np.full(ns, -1, dtype=np.int64)
        owner_local = np.zeros(ns, dtype=np.int64)
        coords[vals] = coords_all.reshape(-1, d)[first]
        owner_elem[vals] = first // nloc
        owner_local[vals] = first % nloc
        self.node_coords = coords
        self.dof_owner_elem = owner_elem
        self.dof_owner_local = owner_local

    # -- basic properties --------------------------------------------------

    @property
    def ndofs(self) -> int:
        return self.vdim * self.ndofs_scalar

    @property
    def nloc(self) -> int:
        return (self.p + 1) ** self.dim

    def component(self, x, c):
        """View of component c of a struct-of-arrays vector."""
        ns = self.ndofs_scalar
        return x[c * ns : (c + 1) * ns]

    # -- gather / scatter ---------------------------------------------------

    def gather(self, x):
        """Element-local copies of a scalar-component vector: (ne, nloc)."""
        return x[self.element_dofs]

    def scatter_add(self, xloc):
        """Adjoint of gather: accumulate element-local values into a vector."""
        return np.bincount(
            self.element_dofs.ravel(),
            weights=np.ascontiguousarray(xloc).ravel(),
            minlength=self.ndofs_scalar,
        )

    # -- boundary -----------------------------------------------------------

    def boundary_dof_set(self, attributes=None):
        """Sorted scalar DoF indices lying on the selected boundary faces."""
        mesh = self.mesh
        known = mesh.boundary_attributes()
        if attributes is None:
            attributes = known
        else:
            attributes = set(int(a) for a in attributes)
            bad = attributes - known
            if bad:
                raise ValueError(f"unknown boundary attributes {sorted(bad)}")
        p, d = self.p, self.dim
        lattice = _local_lattice(p, d)
        out = []
        for e, f, attr in mesh.boundary_faces:
            if int(attr) not in attributes:
                continue
            axis, side = divmod(int(f), 2)
            sel = lattice[:, axis] == (p if side else 0)
            out.append(self.element_dofs[int(e), sel])
        if not out:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(out))

    def expand_dofs(self, scalar_dofs, components=None):
        """Vector-space indices of scalar DoFs for the given components."""
        comps = range(self.vdim) if components is None else components
        ns = self.ndofs_scalar
        return np.concatenate([np.asarray(scalar_dofs) + c * ns for c in comps])

    # -- interpolation and measurement ---------------------------------------

    def project(self, f):
        """Nodal interpolation of a callable f(points) onto the space.

        Scalar spaces expect f to return (n,), vector spaces (n, vdim).
        """
        vals = np.asarray(f(self.node_coords), dtype=np.float64)
        if self.vdim == 1:
            if vals.shape != (self.ndofs_scalar,):
                raise ValueError(f"projection callable returned shape {vals.shape}")
            return vals.copy()
        if vals.shape != (self.ndofs_scalar, self.vdim):
            raise ValueError(f"projection callable returned shape {vals.shape}")
        return vals.T.reshape(-1).copy()

    def eval_at_quad(self, x, B=None):
        """Values of each component at tensor quadrature points: (vdim, ne, nq)."""
        B = self.basis.B if B is None else B
        d, n = self.dim, self.p + 1
        out = []
        for c in range(self.vdim):
            loc = self.gather(self.component(x, c))
            ne = loc.shape[0]
            if d == 2:
                v = kernels.apply_tensor_2d(loc.reshape(ne, n, n), B, B)
            else:
                v = kernels.apply_tensor_3d(loc.reshape(ne, n, n, n), B, B, B)
            out.append(v.reshape(ne, -1))
        return np.stack(out, axis=0)

    def l2_norm(self, x, n_q=None):
        return self.l2_error(x, None, n_q=n_q)

    def l2_error(self, x, exact=None, n_q=None):
        """L2 norm of x - exact (or of x when exact is None), over-integrated.

        The default rule uses p+3 points per direction, one finer than the
        operators, so the measurement does not inherit their quadrature.
        """
        n_q = (self.p + 3) if n_q is None else n_q
        rule = quadrature_rule(GAUSS_LEGENDRE, n_q)
        geom = compute_geometric_factors(self.mesh, rule)
        B, _ = self.basis.eval_matrices_at(rule.points)
        vals = self.eval_at_quad(x, B=B)  # (vdim, ne, nq)
        if exact is not None:
            pts = geom.xq.reshape(-1, self.dim)
            ex = np.asarray(exact(pts), dtype=np.float64)
            if self.vdim == 1:
                ex = ex.reshape(1, vals.shape[1], vals.shape[2])
            else:
                ex = ex.T.reshape(self.vdim, vals.shape[1], vals.shape[2])
            vals = vals - ex
        wd = geom.detj * geom.w[None, :]
        return float(np.sqrt(np.sum(vals**2 * wd[None, :, :])))

    def integral(self, x, n_q=None):
        """Integral of a scalar field over the domain."""
        if self.vdim != 1:
            raise ValueError("integral is defined for scalar spaces")
        n_q = (self.p + 2) if n_q is None else n_q
        rule = quadrature_rule(GAUSS_LEGENDRE, n_q)
        geom = compute_geometric_factors(self.mesh, rule)
        B, _ = self.basis.eval_matrices_at(rule.points)
        vals = self.eval_at_quad(x, B=B)[0]
        return float(np.sum(vals * geom.detj * geom.w[None, :]))


@dataclass
class GridFunction:
    """Coefficients of a finite element function, plus export helpers."""

    space: FESpace
    data: np.ndarray = None

    def __post_init__(self):
        if self.data is None:
            self.data = np.zeros(self.space.ndofs)
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.shape != (self.space.ndofs,):
            raise ValueError(
                f"coefficient vector has shape {self.data.shape}, expected ({self.space.ndofs},)"
            )

    def components(self):
        return self.data.reshape(self.space.vdim, self.space.ndofs_scalar)

    def save_vtk(self, path, name="u"):
        write_vtk_gridfunction(self, path, name=name)


def element_node_coords(space: FESpace):
    """Physical positions of every element's nodal lattice, (ne, nloc, d).

    Shared lattice nodes appear once per touching element, each mapped
    through that element's own geometry; on periodic meshes the copies
    differ by the period.
    """
    mesh, p, d = space.mesh, space.p, space.dim
    nodes = space.basis.nodes
    lattice = _local_lattice(p, d)
    ncorner = 2**d
    # multilinear shape functions at the nodal lattice
    shp = np.ones((lattice.shape[0], ncorner))
    for c in range(ncorner):
        for a in range(d):
            bit = (c >> a) & 1
            t = nodes[lattice[:, a]]
            shp[:, c] *= (1.0 + t) / 2.0 if bit else (1.0 - t) / 2.0
    return np.einsum("lc,ecd->eld", shp, mesh.corners)


def sub_cell_local_ids(p: int, d: int):
    """Local lattice ids of the p^d nodal sub-cells, (p^d, 2^d)."""
    n = p + 1
    sub = []
    if d == 2:
        for j in range(p):
            for i in range(p):
                base = i + n * j
                sub.append([base, base + 1, base + n, base + n + 1])
    else:
        for k in range(p):
            for j in range(p):
                for i in range(p):
                    base = i + n * (j + n * k)
                    sub.append(
                        [
                            base,
                            base + 1,
                            base + n,
                            base + n + 1,
                            base + n * n,
                            base + n * n + 1,
                            base + n * n + n,
                            base + n * n + n + 1,
                        ]
                    )
    return np.array(sub, dtype=np.int64)


def sub_cell_connectivity(space: FESpace):
    """Connectivity of the p^d nodal sub-cells of every element.

    Returns (ne * p^d, 2^d) global scalar DoF ids with corners in
    lexicographic order.  This is both the refined mesh used by low-order
    preconditioners and the representation used for solution export.
    """
    p, d = space.p, space.dim
    ne = space.mesh.num_elements
    sub = sub_cell_local_ids(p, d)
    conn = space.element_dofs[:, sub]  # (ne, p^d, 2^d)
    return conn.reshape(ne * sub.shape[0], 2**d)


_VTK_FROM_LEX = {2: [0, 1, 3, 2], 3: [0, 1, 3, 2, 4, 5, 7, 6]}
_VTK_CELL_TYPE = {2: 9, 3: 12}


def write_vtk_gridfunction(gf: GridFunction, path, name="u"):
    """Write a function as legacy ASCII VTK on the nodal sub-cell grid."""
    space = gf.space
    d = space.dim
    conn = sub_cell_connectivity(space)
    perm = _VTK_FROM_LEX[d]
    npts = space.ndofs_scalar
    comps = gf.components()
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\nflowbench solution\nASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {npts} double\n")
        for v in space.node_coords:
            row = list(v) + [0.0] * (3 - d)
            f.write(" ".join(f"{x:.16g}" for x in row) + "\n")
        ncell = conn.shape[0]
        nc = 2**d
        f.write(f"CELLS {ncell} {ncell * (nc + 1)}\n")
        for row in conn:
            f.write(f"{nc} " + " ".join(str(int(row[c])) for c in perm) + "\n")
        f.write(f"CELL_TYPES {ncell}\n")
        for _ in range(ncell):
            f.write(f"{_VTK_CELL_TYPE[d]}\n")
        f.write(f"POINT_DATA {npts}\n")
        if space.vdim == 1:
            f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            for x in comps[0]:
                f.write(f"{x:.16g}\n")
        else:
            f.write(f"VECTORS {name} double\n")
            for i in range(npts):
                vals = list(comps[:, i]) + [0.0] * (3 - space.vdim)
                f.write(" ".join(f"{x:.16g}" for x in vals) + "\n")
