"""Tensor-product meshes of quadrilaterals and hexahedra.

Element corners are kept in lexicographic order (x fastest).  Topology
(``elements``) refers to vertex classes, which periodic generation may
identify across opposite sides; geometry (``corners``) always stores the
unwrapped physical coordinates per element so the mapping stays correct on
periodic meshes.
"""

from dataclasses import dataclass, field

import numpy as np

from .basis import QuadratureRule1D


@dataclass
class Mesh:
    """An unstructured mesh of tensor-product elements.

    Attributes:
        dim: spatial dimension, 2 or 3.
        vertices: (nv, dim) representative coordinates of the vertex classes.
        elements: (ne, 2^dim) vertex-class ids per element, lexicographic.
        corners: (ne, 2^dim, dim) physical corner coordinates per element.
        boundary_faces: (nbf, 3) rows of (element, local_face, attribute);
            local face 2*axis + side with side 0 = low, 1 = high.
        periodic: per-axis periodicity flags (generator meshes only).
    """

    dim: int
    vertices: np.ndarray
    elements: np.ndarray
    corners: np.ndarray
    boundary_faces: np.ndarray
    periodic: tuple = ()

    @property
    def num_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def num_elements(self) -> int:
        return self.elements.shape[0]

    def boundary_attributes(self):
        if self.boundary_faces.shape[0] == 0:
            return set()
        return set(int(a) for a in self.boundary_faces[:, 2])


def local_face_corners(dim: int, face: int):
    """Local corner ids (lexicographic) lying on the given local face."""
    axis, side = divmod(face, 2)
    ids = []
    for c in range(2**dim):
        bits = [(c >> a) & 1 for a in range(dim)]
        if bits[axis] == side:
            ids.append(c)
    return ids


def cartesian_mesh(counts, lows=None, highs=None, periodic=None) -> Mesh:
    """Uniform Cartesian mesh of the box [lows, highs] with counts cells.

    Periodic directions identify the vertex classes of opposite sides, which
    removes the corresponding boundary faces.  Periodic directions require at
    least 3 cells so that entity keys built from vertex pairs stay unique.
    """
    counts = tuple(int(c) for c in counts)
    d = len(counts)
    if d not in (2, 3):
        raise ValueError(f"dimension must be 2 or 3, got {d}")
    if any(c < 1 for c in counts):
        raise ValueError(f"cell counts must be positive, got {counts}")
    lows = tuple(float(x) for x in (lows if lows is not None else (0.0,) * d))
    highs = tuple(float(x) for x in (highs if highs is not None else (1.0,) * d))
    periodic = tuple(bool(b) for b in (periodic if periodic is not None else (False,) * d))
    if any(h <= lo for lo, h in zip(lows, highs)):
        raise ValueError("highs must exceed lows")
    for a in range(d):
        if periodic[a] and counts[a] < 3:
            raise ValueError("periodic directions need at least 3 cells")

    nv_axis = [counts[a] if periodic[a] else counts[a] + 1 for a in range(d)]
    axes_1d = [np.linspace(lows[a], highs[a], counts[a] + 1) for a in range(d)]

    def vid(idx):
        # lexicographic vertex-class id, wrapping periodic directions
        out = 0
        stride = 1
        for a in range(d):
            ia = idx[a] % counts[a] if periodic[a] else idx[a]
            out += ia * stride
            stride *= nv_axis[a]
        return out

    nv = int(np.prod(nv_axis))
    vertices = np.zeros((nv, d))
    grids = np.meshgrid(*[axes_1d[a][: nv_axis[a]] for a in range(d)], indexing="ij")
    for a in range(d):
        vertices[:, a] = grids[a].transpose(*reversed(range(d))).ravel()

    ne = int(np.prod(counts))
    ncorner = 2**d
    elements = np.zeros((ne, ncorner), dtype=np.int64)
    corners = np.zeros((ne, ncorner, d))
    e = 0
    ranges = [range(counts[a]) for a in range(d)]
    # element loop in lexicographic order, x fastest
    if d == 2:
        iter_cells = ((ix, iy) for iy in ranges[1] for ix in ranges[0])
    else:
        iter_cells = ((ix, iy, iz) for iz in ranges[2] for iy in ranges[1] for ix in ranges[0])
    for cell in iter_cells:
        for c in range(ncorner):
            bits = [(c >> a) & 1 for a in range(d)]
            idx = tuple(cell[a] + bits[a] for a in range(d))
            elements[e, c] = vid(idx)
            corners[e, c] = [axes_1d[a][idx[a]] for a in range(d)]
        e += 1

    bfaces = []
    for a in range(d):
        if periodic[a]:
            continue
        for side in (0, 1):
            face = 2 * a + side
            attr = face + 1
            target = counts[a] - 1 if side else 0
            for e in range(ne):
                cell = _cell_of(e, counts)
                if cell[a] == target:
                    bfaces.append((e, face, attr))
    boundary_faces = (
        np.array(sorted(bfaces), dtype=np.int64) if bfaces else np.zeros((0, 3), dtype=np.int64)
    )
    return Mesh(d, vertices, elements, corners, boundary_faces, periodic)


def _cell_of(e, counts):
    cell = []
    for a in range(len(counts)):
        cell.append(e % counts[a])
        e //= counts[a]
    return tuple(cell)


def perturb_mesh(mesh: Mesh, amplitude: float, seed: int = 0) -> Mesh:
    """Displace vertex classes by a random amount scaled to the local cell size.

    Boundary vertices of non-periodic directions stay put so the domain shape
    is preserved.  Corner coordinates move with their vertex class, keeping
    periodic wrap images consistent.
    """
    rng = np.random.default_rng(seed)
    d = mesh.dim
    disp = rng.uniform(-amplitude, amplitude, size=mesh.vertices.shape)
    # characteristic spacing from the first element's bounding box
    sizes = mesh.corners[:, :, :].max(axis=1) - mesh.corners[:, :, :].min(axis=1)
    h = sizes.min()
    disp *= h
    if mesh.boundary_faces.shape[0]:
        fixed = np.zeros(mesh.num_vertices, dtype=bool)
        for e, f, _ in mesh.boundary_faces:
            for c in local_face_corners(d, int(f)):
                fixed[mesh.elements[int(e), c]] = True
        disp[fixed] = 0.0
    vertices = mesh.vertices + disp
    corners = mesh.corners + disp[mesh.elements]
    return Mesh(d, vertices, mesh.elements, corners, mesh.boundary_faces.copy(), mesh.periodic)


@dataclass
class GeometricFactors:
    """Mapping data at the tensor-product points of a 1D rule.

    Attributes:
        rule: the underlying 1D rule.
        xq: (ne, nq, dim) physical coordinates of the points.
        jac: (ne, nq, dim, dim) Jacobians d x_i / d xi_j.
        detj: (ne, nq) Jacobian determinants.
        jinv: (ne, nq, dim, dim) inverse Jacobians.
        w: (nq,) tensor-product quadrature weights.
    """

    rule: QuadratureRule1D
    xq: np.ndarray
    jac: np.ndarray
    detj: np.ndarray
    jinv: np.ndarray
    w: np.ndarray = field(repr=False)


def _q1_shape_1d(t):
    return np.stack([(1.0 - t) / 2.0, (1.0 + t) / 2.0], axis=-1)  # (nq, 2)


def _q1_dshape_1d(t):
    n = t.shape[0]
    return np.stack([np.full(n, -0.5), np.full(n, 0.5)], axis=-1)


def _tensor_points(pts, d):
    """Tensor product of 1D points, x fastest (lexicographic)."""
    if d == 2:
        X0, X1 = np.meshgrid(pts, pts, indexing="ij")
        return np.stack([X0.T.ravel(), X1.T.ravel()], axis=1)
    X0, X1, X2 = np.meshgrid(pts, pts, pts, indexing="ij")
    return np.stack(
        [X0.transpose(2, 1, 0).ravel(), X1.transpose(2, 1, 0).ravel(), X2.transpose(2, 1, 0).ravel()],
        axis=1,
    )


def compute_geometric_factors(mesh: Mesh, rule: QuadratureRule1D) -> GeometricFactors:
    """Evaluate the bilinear/trilinear element maps at tensor rule points."""
    d = mesh.dim
    pts = _tensor_points(rule.points, d)  # (nq, d) reference coords
    nq = pts.shape[0]
    shp1 = [_q1_shape_1d(pts[:, a]) for a in range(d)]  # each (nq, 2)
    dshp1 = [_q1_dshape_1d(pts[:, a]) for a in range(d)]
    ncorner = 2**d
    N = np.ones((nq, ncorner))
    dN = np.ones((nq, ncorner, d))
    for c in range(ncorner):
        for a in range(d):
            bit = (c >> a) & 1
            N[:, c] *= shp1[a][:, bit]
            for b in range(d):
                dN[:, c, b] *= dshp1[a][:, bit] if a == b else shp1[a][:, bit]
    xq = np.einsum("qc,ecd->eqd", N, mesh.corners)
    jac = np.einsum("qcb,ecd->eqdb", dN, mesh.corners)
    if d == 2:
        detj = jac[..., 0, 0] * jac[..., 1, 1] - jac[..., 0, 1] * jac[..., 1, 0]
        jinv = np.empty_like(jac)
        jinv[..., 0, 0] = jac[..., 1, 1]
        jinv[..., 0, 1] = -jac[..., 0, 1]
        jinv[..., 1, 0] = -jac[..., 1, 0]
        jinv[..., 1, 1] = jac[..., 0, 0]
        jinv /= detj[..., None, None]
    else:
        a = jac
        detj = (
            a[..., 0, 0] * (a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1])
            - a[..., 0, 1] * (a[..., 1, 0] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 0])
            + a[..., 0, 2] * (a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0])
        )
        jinv = np.empty_like(a)
        jinv[..., 0, 0] = a[..., 1, 1] * a[..., 2, 2] - a[..., 1, 2] * a[..., 2, 1]
        jinv[..., 0, 1] = a[..., 0, 2] * a[..., 2, 1] - a[..., 0, 1] * a[..., 2, 2]
        jinv[..., 0, 2] = a[..., 0, 1] * a[..., 1, 2] - a[..., 0, 2] * a[..., 1, 1]
        jinv[..., 1, 0] = a[..., 1, 2] * a[..., 2, 0] - a[..., 1, 0] * a[..., 2, 2]
        jinv[..., 1, 1] = a[..., 0, 0] * a[..., 2, 2] - a[..., 0, 2] * a[..., 2, 0]
        jinv[..., 1, 2] = a[..., 0, 2] * a[..., 1, 0] - a[..., 0, 0] * a[..., 1, 2]
        jinv[..., 2, 0] = a[..., 1, 0] * a[..., 2, 1] - a[..., 1, 1] * a[..., 2, 0]
        jinv[..., 2, 1] = a[..., 0, 1] * a[..., 2, 0] - a[..., 0, 0] * a[..., 2, 1]
        jinv[..., 2, 2] = a[..., 0, 0] * a[..., 1, 1] - a[..., 0, 1] * a[..., 1, 0]
        jinv /= detj[..., None, None]
    if np.any(detj <= 0.0):
        raise ValueError("element mapping is not orientation preserving (det J <= 0)")
    w1 = rule.weights
    if d == 2:
        w = np.einsum("j,i->ji", w1, w1).ravel()
    else:
        w = np.einsum("k,j,i->kji", w1, w1, w1).ravel()
    return GeometricFactors(rule, xq, jac, detj, jinv, w)


# corner permutations between lexicographic and VTK cell orderings
_VTK_FROM_LEX = {2: [0, 1, 3, 2], 3: [0, 1, 3, 2, 4, 5, 7, 6]}
_VTK_CELL_TYPE = {2: 9, 3: 12}


def write_vtk_mesh(mesh: Mesh, path, point_data=None):
    """Write the mesh (and optional per-vertex fields) as legacy ASCII VTK."""
    d = mesh.dim
    perm = _VTK_FROM_LEX[d]
    ncorner = 2**d
    with open(path, "w") as f:
        f.write("# vtk DataFile Version 3.0\nflowbench mesh\nASCII\n")
        f.write("DATASET UNSTRUCTURED_GRID\n")
        f.write(f"POINTS {mesh.num_vertices} double\n")
        for v in mesh.vertices:
            row = list(v) + [0.0] * (3 - d)
            f.write(" ".join(f"{x:.16g}" for x in row) + "\n")
        ne = mesh.num_elements
        f.write(f"CELLS {ne} {ne * (ncorner + 1)}\n")
        for conn in mesh.elements:
            f.write(f"{ncorner} " + " ".join(str(int(conn[c])) for c in perm) + "\n")
        f.write(f"CELL_TYPES {ne}\n")
        for _ in range(ne):
            f.write(f"{_VTK_CELL_TYPE[d]}\n")
        if point_data:
            f.write(f"POINT_DATA {mesh.num_vertices}\n")
            for name, arr in point_data.items():
                arr = np.asarray(arr)
                if arr.ndim == 1:
                    f.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                    for x in arr:
                        f.write(f"{x:.16g}\n")
                else:
                    f.write(f"VECTORS {name} double\n")
                    for row in arr:
                        vals = list(row) + [0.0] * (3 - arr.shape[1])
                        f.write(" ".join(f"{x:.16g}" for x in vals) + "\n")


def read_vtk_mesh(path) -> Mesh:
    """Read a legacy ASCII VTK unstructured grid of quads or hexahedra."""
    with open(path) as f:
        tokens = f.read().split()
    it = iter(range(len(tokens)))

    def find(word):
        for i, t in enumerate(tokens):
            if t.upper() == word:
                return i
        raise ValueError(f"missing {word} section")

    ip = find("POINTS")
    npts = int(tokens[ip + 1])
    coords = np.array(tokens[ip + 3 : ip + 3 + 3 * npts], dtype=np.float64).reshape(npts, 3)
    ic = find("CELLS")
    ncell = int(tokens[ic + 1])
    pos = ic + 3
    cells = []
    for _ in range(ncell):
        k = int(tokens[pos])
        cells.append([int(t) for t in tokens[pos + 1 : pos + 1 + k]])
        pos += k + 1
    itp = find("CELL_TYPES")
    ctypes = [int(t) for t in tokens[itp + 2 : itp + 2 + ncell]]
    if all(t == 9 for t in ctypes):
        d = 2
    elif all(t == 12 for t in ctypes):
        d = 3
    else:
        raise ValueError("only meshes of all-quad or all-hexahedron cells are supported")
    perm = _VTK_FROM_LEX[d]
    inv = np.argsort(perm)
    elements = np.array(cells, dtype=np.int64)[:, inv]
    vertices = coords[:, :d].copy()
    corners = vertices[elements]
    boundary_faces = _detect_boundary_faces(d, elements)
    return Mesh(d, vertices, elements, corners, boundary_faces, (False,) * d)


def _detect_boundary_faces(d, elements):
    seen = {}
    for e in range(elements.shape[0]):
        for face in range(2 * d):
            ids = tuple(sorted(int(elements[e, c]) for c in local_face_corners(d, face)))
            if ids in seen:
                seen[ids] = None
            else:
                seen[ids] = (e, face)
    rows = [(e, f, 1) for v in seen.values() if v is not None for e, f in [v]]
    return np.array(sorted(rows), dtype=np.int64) if rows else np.zeros((0, 3), dtype=np.int64)


def interior_face_counts(mesh: Mesh):
    """Map from face key to the number of incident elements (for validation)."""
    counts = {}
    for e in range(mesh.num_elements):
        for face in range(2 * mesh.dim):
            ids = tuple(sorted(int(mesh.elements[e, c]) for c in local_face_corners(mesh.dim, face)))
            counts[ids] = counts.get(ids, 0) + 1
    return counts
