"""Brute-force reference for the local reconstruction and stabilisations.

Everything here is deliberately naive: raw monomials x^a y^b, tensor Gauss
quadrature collapsed onto the triangle, a full saddle-point solve with
explicit constraint rows, and the stabilisation assembled term by term from
quadrature. The package cell basis is used only to give meaning to the cell
unknowns, so both implementations act on the same local vectors.
"""
from math import factorial

import numpy as np
from numpy.polynomial import legendre

from hhoplate.polyspace import CellBasis

FACETS = [(1, 2), (2, 0), (0, 1)]


def gauss01(n):
    x, w = legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def triangle_rule(tri, n=24):
    """Collapsed tensor Gauss rule on a triangle."""
    u, wu = gauss01(n)
    U, V = np.meshgrid(u, u, indexing="ij")
    W = np.outer(wu, wu) * (1.0 - U)
    lam1, lam2 = U.ravel(), (V * (1.0 - U)).ravel()
    e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
    jac = abs(e1[0] * e2[1] - e1[1] * e2[0])
    pts = tri[0] + lam1[:, None] * e1 + lam2[:, None] * e2
    return pts, W.ravel() * jac


def exponents(d):
    return [(a, t - a) for t in range(d + 1) for a in range(t, -1, -1)]


def mono(pts, d, i=0, j=0):
    """Values of d^{i+j}/dx^i dy^j of all monomials of degree <= d, shape (np, dim)."""
    x, y = pts[:, 0], pts[:, 1]
    cols = []
    for a, b in exponents(d):
        if a < i or b < j:
            cols.append(np.zeros_like(x))
            continue
        c = factorial(a) / factorial(a - i) * factorial(b) / factorial(b - j)
        cols.append(c * x ** (a - i) * y ** (b - j))
    return np.stack(cols, axis=1)


def directional(pts, d, dirs):
    """Derivative of all monomials along the listed unit vectors."""
    out = 0.0
    order = len(dirs)
    # expand the product of directional derivatives into partials
    for mask in range(2**order):
        coef, i = 1.0, 0
        for r, v in enumerate(dirs):
            if mask >> r & 1:
                coef *= v[1]
            else:
                coef *= v[0]
                i += 1
        out = out + coef * mono(pts, d, i, order - i)
    return out


def legendre_facet(s, degree, length):
    cols = []
    for j in range(degree + 1):
        c = np.zeros(j + 1)
        c[j] = 1.0
        cols.append(np.sqrt((2 * j + 1) / length) * legendre.legval(2 * s - 1, c))
    return np.stack(cols, axis=1)


def brute_force(tri, k, ell=None, variant="source", sigma=1.0, nq=24):
    """Return (R in the package P_{k+2} basis, S, R in monomials) for one triangle."""
    tri = np.asarray(tri, float)
    ell = k + 2 if ell is None else ell
    m = max(k - 1, 0)
    dr = k + 2
    nl = (ell + 1) * (ell + 2) // 2
    nloc = nl + 3 * (m + 1) + 3 * (k + 1) + 3
    nr = (dr + 1) * (dr + 2) // 2
    vs = [slice(nl + f * (m + 1), nl + (f + 1) * (m + 1)) for f in range(3)]
    ns = [slice(nl + 3 * (m + 1) + f * (k + 1), nl + 3 * (m + 1) + (f + 1) * (k + 1)) for f in range(3)]
    vx = [nl + 3 * (m + 1) + 3 * (k + 1) + v for v in range(3)]

    pts, w = triangle_rule(tri, nq)
    area = w.sum()
    sides = [np.linalg.norm(tri[b] - tri[a]) for a, b in FACETS]
    h = max(sides)
    cell = CellBasis(tri, max(ell, dr))
    phi = cell.values(pts[None])[0]  # (nq, dim)

    # Hessian Gram matrix and right-hand side, test function by test function
    Hxx, Hxy, Hyy = mono(pts, dr, 2, 0), mono(pts, dr, 1, 1), mono(pts, dr, 0, 2)
    K = (Hxx.T * w) @ Hxx + 2 * (Hxy.T * w) @ Hxy + (Hyy.T * w) @ Hyy
    bil = mono(pts, dr, 4, 0) + 2 * mono(pts, dr, 2, 2) + mono(pts, dr, 0, 4)
    F = np.zeros((nr, nloc))
    F[:, :nl] = (bil.T * w) @ phi[:, :nl]
    C = np.zeros((3, nr))
    G = np.zeros((3, nloc))
    C[0] = w @ mono(pts, dr)
    C[1] = w @ mono(pts, dr, 1, 0)
    C[2] = w @ mono(pts, dr, 0, 1)
    G[0, :nl] = w @ phi[:, :nl]

    s, ws = gauss01(nq)
    facet_data = []
    for f, (a, b) in enumerate(FACETS):
        L = sides[f]
        t = (tri[b] - tri[a]) / L
        n = np.array([t[1], -t[0]])
        fp = tri[a] + s[:, None] * (tri[b] - tri[a])
        fw = ws * L
        psi = legendre_facet(s, m, L)
        chi = legendre_facet(s, k, L)
        nlap = directional(fp, dr, [n, (1, 0), (1, 0)]) + directional(fp, dr, [n, (0, 1), (0, 1)])
        ttn = directional(fp, dr, [t, t, n])
        nn = directional(fp, dr, [n, n])
        F[:, vs[f]] -= ((nlap + ttn).T * fw) @ psi
        F[:, ns[f]] += (nn.T * fw) @ chi
        G[1:, vs[f]] += np.outer(n, fw @ psi)
        # ridge terms: [v d_tn p] evaluated at the end (+) and start (-) of the facet
        for vert, sign in ((b, 1.0), (a, -1.0)):
            F[:, vx[vert]] += sign * directional(tri[vert][None], dr, [t, n])[0]
        facet_data.append((fp, fw, psi, chi, n, L))

    kkt = np.block([[K, C.T], [C, np.zeros((3, 3))]])
    sol = np.linalg.solve(kkt, np.vstack([F, G]))
    Rm = sol[:nr]

    # reconstruction as values at quadrature points, then in the package basis
    Rvals = mono(pts, dr) @ Rm
    R = (phi[:, :nr].T * w) @ Rvals

    # projection of R onto P_ell by a monomial Gram solve
    Ml = mono(pts, ell)
    proj = Ml @ np.linalg.solve((Ml.T * w) @ Ml, (Ml.T * w) @ Rvals)
    res_cell = phi[:, :nl] @ np.eye(nl, nloc) - proj

    if variant == "source":
        wc = h**-4
        wv = [h**-3] * 3
        wn = [h**-1] * 3
        wvert = np.full(3, h**-2)
    else:
        lf = [h**2 * L / area for L in sides]
        lef = [h**2 / L for L in sides]
        wc = sigma * h**-4
        wv = [sigma * h**-2 / lf[f] for f in range(3)]
        wn = [sigma / lf[f] for f in range(3)]
        wvert = np.zeros(3)
        for f, (a, b) in enumerate(FACETS):
            wvert[a] += sigma / (lf[f] * lef[f])
            wvert[b] += sigma / (lf[f] * lef[f])

    S = wc * (res_cell.T * w) @ res_cell
    for f, (fp, fw, psi, chi, n, L) in enumerate(facet_data):
        Rtr = mono(fp, dr) @ Rm
        Rdn = directional(fp, dr, [n]) @ Rm
        dv = -(psi.T * fw) @ Rtr
        dv[:, vs[f]] += np.eye(m + 1)
        dn = -(chi.T * fw) @ Rdn
        dn[:, ns[f]] += np.eye(k + 1)
        Gv = (psi.T * fw) @ psi
        Gn = (chi.T * fw) @ chi
        S += wv[f] * dv.T @ Gv @ dv + wn[f] * dn.T @ Gn @ dn
    for v in range(3):
        d = -(mono(tri[v][None], dr) @ Rm)[0]
        d[vx[v]] += 1.0
        S += wvert[v] * np.outer(d, d)
    return R, S, Rm
