"""Polynomial bases, quadrature and L2 projections on triangles and segments.

Cell bases are L2(T)-orthonormal and are obtained by modified Gram-Schmidt
applied to the scaled monomials ((x - x_T)/h_T)^a ((y - y_T)/h_T)^b in graded
order. Because the order is graded, the first dim P_d functions of a degree-D
basis span P_d(T) for every d <= D; the HHO code relies on this to share one
basis between the cell unknowns and the reconstruction.

Everything here is vectorised over a leading "cell" axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np
from numpy.polynomial import legendre
from scipy.special import roots_jacobi, roots_legendre

MAX_DEGREE = 60

__all__ = [
    "MAX_DEGREE",
    "Quadrature",
    "cell_rule",
    "facet_rule",
    "dim_p",
    "monomial_exponents",
    "CellBasis",
    "FacetBasis",
    "facet_reference_values",
    "project_cell",
    "project_facet",
    "directional",
    "UnsupportedOrderError",
]


class UnsupportedOrderError(ValueError):
    pass


def dim_p(d: int) -> int:
    """Dimension of P_d in two variables."""
    return (d + 1) * (d + 2) // 2 if d >= 0 else 0


@lru_cache(maxsize=None)
def monomial_exponents(d: int) -> np.ndarray:
    """Exponents (a, b) of x^a y^b in graded order: 1; x, y; x^2, xy, y^2; ..."""
    exps = [(deg - b, b) for deg in range(d + 1) for b in range(deg + 1)]
    return np.array(exps, dtype=int).reshape(-1, 2)


@dataclass(frozen=True)
class Quadrature:
    """Reference quadrature rule.

    For cells the points are coordinates (xi, eta) on the reference triangle
    with vertices (0,0), (1,0), (0,1) and the weights sum to 1/2. For facets
    the points are parameters in [0, 1] and the weights sum to 1.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    def map_to_cells(self, vertices: np.ndarray):
        """Physical points (nc, nq, 2) and weights (nc, nq) on each triangle."""
        v0 = vertices[:, 0]
        e1 = vertices[:, 1] - v0
        e2 = vertices[:, 2] - v0
        xi, eta = self.points[:, 0], self.points[:, 1]
        pts = v0[:, None, :] + xi[None, :, None] * e1[:, None, :] + eta[None, :, None] * e2[:, None, :]
        det = np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        return pts, det[:, None] * self.weights[None, :]

    def map_to_segments(self, a: np.ndarray, b: np.ndarray):
        """Physical points (..., nq, 2) and weights (..., nq) on segments a -> b."""
        s = self.points
        pts = a[..., None, :] + s[:, None] * (b - a)[..., None, :]
        length = np.linalg.norm(b - a, axis=-1)
        return pts, length[..., None] * self.weights


def _check_degree(degree: int) -> None:
    if degree < 0:
        raise ValueError(f"quadrature degree must be non-negative, got {degree}")
    if degree > MAX_DEGREE:
        raise UnsupportedOrderError(
            f"quadrature degree {degree} exceeds the maximum supported degree {MAX_DEGREE}"
        )


@lru_cache(maxsize=None)
def cell_rule(degree: int) -> Quadrature:
    """Collapsed (Stroud conical) Gauss rule, exact for total degree ``degree``.

    Positive weights, interior points, n^2 points with n = ceil((degree + 1)/2).
    """
    _check_degree(degree)
    n = max(1, (degree + 2) // 2)
    # Gauss-Jacobi(1, 0) absorbs the Duffy Jacobian (1 - u)
    tu, wu = roots_jacobi(n, 1.0, 0.0)
    tv, wv = roots_legendre(n)
    u = 0.5 * (1.0 + tu)
    v = 0.5 * (1.0 + tv)
    wu = 0.25 * wu
    wv = 0.5 * wv
    U, V = np.meshgrid(u, v, indexing="ij")
    pts = np.column_stack([U.ravel(), ((1.0 - U) * V).ravel()])
    w = np.outer(wu, wv).ravel()
    return Quadrature(pts, w, degree)


@lru_cache(maxsize=None)
def facet_rule(degree: int) -> Quadrature:
    """Gauss-Legendre rule on [0, 1] exact for polynomials of degree ``degree``."""
    _check_degree(degree)
    n = max(1, (degree + 2) // 2)
    t, w = roots_legendre(n)
    return Quadrature(0.5 * (1.0 + t), 0.5 * w, degree)


def _falling(p: np.ndarray, i: int) -> np.ndarray:
    out = np.ones_like(p, dtype=float)
    for r in range(i):
        out = out * (p - r)
    return out


def monomial_table(points, centers, h, degree: int, order: int) -> dict:
    """Derivatives of the scaled monomials at points.

    points: (nc, np, 2); centers: (nc, 2); h: (nc,). Returns a dict mapping the
    multi-index (i, j) with i + j <= order to arrays (nc, np, nmono) holding
    d^{i+j}/dx^i dy^j of ((x - x_T)/h_T)^a ((y - y_T)/h_T)^b.
    """
    if order > 4:
        raise UnsupportedOrderError(f"derivative order {order} > 4 is not supported")
    exps = monomial_exponents(degree)
    X = (points[..., 0] - centers[:, None, 0]) / h[:, None]
    Y = (points[..., 1] - centers[:, None, 1]) / h[:, None]
    xpow = [np.ones_like(X)]
    ypow = [np.ones_like(Y)]
    for _ in range(degree):
        xpow.append(xpow[-1] * X)
        ypow.append(ypow[-1] * Y)
    xpow = np.stack(xpow, axis=-1)
    ypow = np.stack(ypow, axis=-1)
    a, b = exps[:, 0], exps[:, 1]
    table = {}
    for tot in range(order + 1):
        scale = h[:, None, None] ** (-tot)
        for i in range(tot, -1, -1):
            j = tot - i
            coef = _falling(a, i) * _falling(b, j)
            ea = np.maximum(a - i, 0)
            eb = np.maximum(b - j, 0)
            table[(i, j)] = scale * coef * xpow[..., ea] * ypow[..., eb]
    return table


class CellBasis:
    """L2(T)-orthonormal basis of P_degree(T) on a batch of triangles.

    Attributes
    ----------
    vertices : (nc, 3, 2)
    centers, h, area : centroid, diameter and area of each cell
    coeffs : (nc, nmono, dim) coefficients in the scaled monomials
    """

    def __init__(self, vertices: np.ndarray, degree: int, quad_degree: int | None = None):
        vertices = np.asarray(vertices, dtype=float)
        if vertices.ndim == 2:
            vertices = vertices[None]
        self.vertices = vertices
        self.degree = degree
        self.dim = dim_p(degree)
        self.centers = vertices.mean(axis=1)
        edges = vertices[:, [1, 2, 0]] - vertices[:, [2, 0, 1]]
        self.h = np.linalg.norm(edges, axis=-1).max(axis=1)
        e1 = vertices[:, 1] - vertices[:, 0]
        e2 = vertices[:, 2] - vertices[:, 0]
        self.area = 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
        qd = 2 * degree if quad_degree is None else quad_degree
        self.coeffs = self._orthonormalise(cell_rule(max(qd, 2 * degree)))

    def _orthonormalise(self, rule: Quadrature) -> np.ndarray:
        pts, w = rule.map_to_cells(self.vertices)
        V = monomial_table(pts, self.centers, self.h, self.degree, 0)[(0, 0)]
        sw = np.sqrt(w)[..., None]
        nc, _, n = V.shape
        coeffs = np.broadcast_to(np.eye(n), (nc, n, n)).copy()
        Q = V * sw
        # modified Gram-Schmidt, two passes
        for _ in range(2):
            for j in range(n):
                for i in range(j):
                    r = np.einsum("cq,cq->c", Q[:, :, i], Q[:, :, j])
                    Q[:, :, j] -= r[:, None] * Q[:, :, i]
                    coeffs[:, :, j] -= r[:, None] * coeffs[:, :, i]
                nrm = np.sqrt(np.einsum("cq,cq->c", Q[:, :, j], Q[:, :, j]))
                Q[:, :, j] /= nrm[:, None]
                coeffs[:, :, j] /= nrm[:, None]
        # correct the coefficients against the Gram matrix of the evaluated basis;
        # L^{-T} is upper triangular, so the graded hierarchy is preserved
        Vc = np.einsum("cqm,cmb->cqb", V, coeffs) * sw
        L = np.linalg.cholesky(np.einsum("cqi,cqj->cij", Vc, Vc))
        coeffs = np.swapaxes(np.linalg.solve(L, np.swapaxes(coeffs, 1, 2)), 1, 2)
        return coeffs

    def eval(self, points: np.ndarray, order: int = 0, dim: int | None = None) -> dict:
        """Derivative table {(i, j): (nc, np, dim)} of the basis at points (nc, np, 2)."""
        mono = monomial_table(points, self.centers, self.h, self.degree, order)
        C = self.coeffs if dim is None else self.coeffs[:, :, :dim]
        return {key: np.einsum("cpm,cmb->cpb", val, C) for key, val in mono.items()}

    def values(self, points: np.ndarray, dim: int | None = None) -> np.ndarray:
        return self.eval(points, 0, dim)[(0, 0)]

    def gram(self, quad_degree: int | None = None) -> np.ndarray:
        rule = cell_rule(2 * self.degree if quad_degree is None else quad_degree)
        pts, w = rule.map_to_cells(self.vertices)
        V = self.values(pts)
        return np.einsum("cq,cqi,cqj->cij", w, V, V)


def facet_reference_values(s, degree: int, deriv: int = 0) -> np.ndarray:
    """sqrt(2j + 1) d^deriv/ds^deriv P_j(2s - 1) for j <= degree, shape (ns, degree + 1).

    Multiplying by |F|^(-1/2 - deriv) gives the orthonormal facet basis and its
    arc-length derivatives.
    """
    t = 2.0 * np.asarray(s, dtype=float) - 1.0
    cols = []
    for j in range(degree + 1):
        c = np.zeros(j + 1)
        c[j] = 1.0
        if deriv:
            c = legendre.legder(c, deriv) * 2.0**deriv if j >= deriv else np.zeros(1)
        cols.append(legendre.legval(t, c))
    return np.stack(cols, axis=-1) * np.sqrt(2.0 * np.arange(degree + 1) + 1.0)


class FacetBasis:
    """Orthonormal basis of P_d(F) on segments a -> b.

    The functions are scaled Legendre polynomials in the arc-length parameter,
    sqrt((2j + 1)/|F|) P_j(2s/|F| - 1); this is exactly what Gram-Schmidt
    produces from the monomials ((s - |F|/2)/h_F)^j.
    """

    def __init__(self, a: np.ndarray, b: np.ndarray, degree: int):
        self.a = np.asarray(a, dtype=float)
        self.b = np.asarray(b, dtype=float)
        self.degree = degree
        self.dim = degree + 1
        self.length = np.linalg.norm(self.b - self.a, axis=-1)

    def values_at(self, s: np.ndarray, deriv: int = 0) -> np.ndarray:
        """Values (..., ns, dim) at reference parameters s in [0, 1]."""
        P = facet_reference_values(s, self.degree, deriv)
        return P * (np.asarray(self.length) ** (-0.5 - deriv))[..., None, None]


def project_cell(basis: CellBasis, f, degree: int | None = None, quad_degree: int | None = None) -> np.ndarray:
    """Coefficients (nc, dim) of the L2 projection of f onto the cell basis.

    ``f`` is called with an array of points (..., 2) and must return (...).
    """
    dim = basis.dim if degree is None else dim_p(degree)
    qd = quad_degree if quad_degree is not None else 2 * basis.degree + 4
    pts, w = cell_rule(qd).map_to_cells(basis.vertices)
    V = basis.values(pts, dim)
    return np.einsum("cq,cq,cqb->cb", w, f(pts), V)


def project_facet(basis: FacetBasis, f, quad_degree: int | None = None) -> np.ndarray:
    """Coefficients (..., dim) of the L2(F) projection of f onto the facet basis."""
    qd = quad_degree if quad_degree is not None else 2 * basis.degree + 4
    rule = facet_rule(qd)
    pts, w = rule.map_to_segments(basis.a, basis.b)
    V = basis.values_at(rule.points)
    return np.einsum("...q,...q,...qb->...b", w, f(pts), V)


def directional(table: dict, n: np.ndarray, t: np.ndarray | None = None) -> dict:
    """Directional derivatives from a derivative table.

    n and t are unit vectors broadcastable against the leading axes of the
    table entries with a trailing axis of length 2 (e.g. (nc, np, 2)). The
    result may contain 'n', 't', 'nn', 'nt', 'tt', 'nlap', 'ttn', 'lap',
    'bilap', depending on which orders are present.
    """
    out = {}
    nx, ny = n[..., 0, None], n[..., 1, None]
    if t is None:
        t = np.stack([-n[..., 1], n[..., 0]], axis=-1)
    tx, ty = t[..., 0, None], t[..., 1, None]
    if (1, 0) in table:
        out["n"] = table[(1, 0)] * nx + table[(0, 1)] * ny
        out["t"] = table[(1, 0)] * tx + table[(0, 1)] * ty
    if (2, 0) in table:
        xx, xy, yy = table[(2, 0)], table[(1, 1)], table[(0, 2)]
        out["nn"] = xx * nx * nx + 2 * xy * nx * ny + yy * ny * ny
        out["nt"] = xx * nx * tx + xy * (nx * ty + ny * tx) + yy * ny * ty
        out["tt"] = xx * tx * tx + 2 * xy * tx * ty + yy * ty * ty
        out["lap"] = xx + yy
    if (3, 0) in table:
        xxx, xxy, xyy, yyy = table[(3, 0)], table[(2, 1)], table[(1, 2)], table[(0, 3)]
        out["nlap"] = (xxx + xyy) * nx + (xxy + yyy) * ny

        def d3(a, b, c):
            ax, ay = a
            bx, by = b
            cx, cy = c
            return (
                xxx * ax * bx * cx
                + xxy * (ax * bx * cy + ax * by * cx + ay * bx * cx)
                + xyy * (ax * by * cy + ay * bx * cy + ay * by * cx)
                + yyy * ay * by * cy
            )

        out["ttn"] = d3((tx, ty), (tx, ty), (nx, ny))
    if (4, 0) in table:
        out["bilap"] = table[(4, 0)] + 2 * table[(2, 2)] + table[(0, 4)]
    return out


def binomial_moment(a: int, b: int) -> float:
    """Integral of x^a y^b over the reference triangle, a! b! / (a + b + 2)!."""
    return 1.0 / ((a + b + 2) * (a + b + 1) * comb(a + b, a))
