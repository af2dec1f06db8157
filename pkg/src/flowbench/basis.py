"""1D nodal bases and quadrature on the reference interval [-1, 1].

Gauss-Lobatto points serve as interpolation nodes; Gauss-Legendre rules
supply the quadrature.  Basis evaluation at arbitrary points goes through
barycentric Lagrange interpolation, which stays well conditioned at high
degree.
"""

from dataclasses import dataclass, field

import numpy as np

GAUSS_LEGENDRE = "gauss_legendre"
GAUSS_LOBATTO = "gauss_lobatto"


def gauss_lobatto_nodes(n: int):
    """Nodes and weights of the n-point Gauss-Lobatto rule on [-1, 1].

    Interior nodes are the roots of P'_{n-1}, found by Newton iteration from
    Chebyshev-Lobatto initial guesses.  Weights are 2 / (N (N+1) P_N(x)^2)
    with N = n - 1.

    Args:
        n: number of points, n >= 2.

    Returns:
        (nodes, weights) as float64 arrays of length n, nodes ascending,
        endpoints exactly -1 and 1.
    """
    if n < 2:
        raise ValueError(f"Gauss-Lobatto rule needs n >= 2, got {n}")
    N = n - 1
    x = -np.cos(np.pi * np.arange(n) / N)
    x[0], x[-1] = -1.0, 1.0
    if n > 2:
        xi = x[1:-1].copy()
        for _ in range(100):
            # P_N and P'_N by the Legendre recurrence
            p0 = np.ones_like(xi)
            p1 = xi.copy()
            for k in range(2, N + 1):
                p0, p1 = p1, ((2 * k - 1) * xi * p1 - (k - 1) * p0) / k
            dp = N * (xi * p1 - p0) / (xi * xi - 1.0)
            # f = (1 - x^2) P'_N has the interior Lobatto points as roots;
            # f' = -2x P'_N + (1-x^2) P''_N and the Legendre ODE gives
            # (1-x^2) P''_N = 2x P'_N - N(N+1) P_N, so f' = -N(N+1) P_N.
            f = (1.0 - xi * xi) * dp
            df = -N * (N + 1) * p1
            dx = f / df
            xi -= dx
            if np.max(np.abs(dx)) < 1e-15:
                break
        x[1:-1] = xi
    # symmetrize to kill stray last-ulp asymmetry
    x = 0.5 * (x - x[::-1])
    pN = np.ones_like(x)
    p1 = x.copy()
    if N >= 1:
        pNm1, pN = pN, p1
        for k in range(2, N + 1):
            pNm1, pN = pN, ((2 * k - 1) * x * pN - (k - 1) * pNm1) / k
    w = 2.0 / (N * (N + 1) * pN * pN)
    return x, w


def gauss_legendre_rule(n: int):
    """Nodes and weights of the n-point Gauss-Legendre rule on [-1, 1]."""
    if n < 1:
        raise ValueError(f"Gauss-Legendre rule needs n >= 1, got {n}")
    x, w = np.polynomial.legendre.leggauss(n)
    return x.astype(np.float64), w.astype(np.float64)


@dataclass(frozen=True)
class QuadratureRule1D:
    """A 1D quadrature rule on [-1, 1]."""

    kind: str
    points: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.points.shape[0]


def quadrature_rule(kind: str, n: int) -> QuadratureRule1D:
    if kind == GAUSS_LEGENDRE:
        x, w = gauss_legendre_rule(n)
    elif kind == GAUSS_LOBATTO:
        x, w = gauss_lobatto_nodes(n)
    else:
        raise ValueError(f"unknown quadrature kind {kind!r}")
    return QuadratureRule1D(kind, x, w)


def barycentric_weights(nodes):
    """Barycentric weights of the Lagrange basis on the given nodes."""
    x = np.asarray(nodes, dtype=np.float64)
    diff = x[:, None] - x[None, :]
    np.fill_diagonal(diff, 1.0)
    w = 1.0 / np.prod(diff, axis=1)
    return w


def nodal_differentiation_matrix(nodes):
    """Differentiation matrix on the nodes: (Df)_i = p'(x_i) for the
    interpolant p of the nodal values f."""
    x = np.asarray(nodes, dtype=np.float64)
    w = barycentric_weights(x)
    n = x.shape[0]
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                D[i, j] = (w[j] / w[i]) / (x[i] - x[j])
        D[i, i] = -np.sum(D[i])
    return D


def build_eval_matrices(nodes, points):
    """Values and derivatives of the nodal Lagrange basis at given points.

    Args:
        nodes: interpolation nodes (degree p basis has p+1 of them).
        points: evaluation points (e.g. a quadrature rule's points).

    Returns:
        (B, D) with B[q, j] = phi_j(points[q]) and D[q, j] = phi_j'(points[q]).
    """
    x = np.asarray(nodes, dtype=np.float64)
    pts = np.asarray(points, dtype=np.float64)
    wb = barycentric_weights(x)
    n = x.shape[0]
    nq = pts.shape[0]
    B = np.zeros((nq, n))
    D = np.zeros((nq, n))
    Dn = None
    for q in range(nq):
        d = pts[q] - x
        hit = np.nonzero(d == 0.0)[0]
        if hit.size:
            j = hit[0]
            B[q, j] = 1.0
            if Dn is None:
                Dn = nodal_differentiation_matrix(x)
            D[q, :] = Dn[j, :]
            continue
        r = wb / d
        s1 = np.sum(r)
        s2 = np.sum(r / d)
        lq = r / s1
        B[q, :] = lq
        D[q, :] = lq * (s2 / s1 - 1.0 / d)
    return B, D


@dataclass(frozen=True)
class Basis1D:
    """Degree-p nodal basis on Gauss-Lobatto points with a quadrature rule.

    B and D hold basis values and derivatives at the rule's points.
    """

    p: int
    nodes: np.ndarray
    node_weights: np.ndarray = field(repr=False)
    quad: QuadratureRule1D = field(repr=False)
    B: np.ndarray = field(repr=False)
    D: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.p + 1

    def eval_matrices_at(self, points):
        """B and D for this basis at arbitrary points."""
        return build_eval_matrices(self.nodes, points)


def make_basis(p: int, n_q: int | None = None, quad_kind: str = GAUSS_LEGENDRE) -> Basis1D:
    """Construct the degree-p Gauss-Lobatto nodal basis.

    The default quadrature is the (p+2)-point Gauss-Legendre rule, enough for
    mass-matrix integrands on affine elements with margin for metric terms.
    Passing ``quad_kind="gauss_lobatto"`` with ``n_q = p+1`` collocates the
    rule with the nodes (B becomes the identity).
    """
    if p < 1:
        raise ValueError(f"basis degree must be >= 1, got {p}")
    nodes, node_w = gauss_lobatto_nodes(p + 1)
    if n_q is None:
        n_q = p + 2
    rule = quadrature_rule(quad_kind, n_q)
    B, D = build_eval_matrices(nodes, rule.points)
    return Basis1D(p=p, nodes=nodes, node_weights=node_w, quad=rule, B=B, D=D)
