"""Per-cell HHO operators for the clamped plate.

Local unknowns of a triangle T are ordered as

    [ v_T (dim P_ell) | v_F on facets 0,1,2 (m+1 each) |
      beta_F on facets 0,1,2 (k+1 each) | v_E at vertices 0,1,2 ]

with local facet i opposite local vertex i. ``beta_F`` is the normal
derivative w.r.t. the outer normal of T. Facet polynomials are expressed in
the orthonormal Legendre basis along the *global* facet orientation, so that
neighbouring cells agree on the meaning of shared coefficients.

The reconstruction is returned as a matrix mapping local unknowns to the
coefficients of R_T v_h in the orthonormal basis of P_{k+2}(T). Cell unknowns
and reconstruction share the same graded basis, so Pi_T^ell of a P_{k+2}
polynomial is just a truncation of its coefficient vector.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .polyspace import CellBasis, cell_rule, dim_p, directional, facet_reference_values, facet_rule

__all__ = [
    "DofLayout",
    "LocalOperators",
    "ReconstructionError",
    "local_weights_eigen",
    "LOCAL_FACET_VERTS",
]

# local facet i = (v_{i+1}, v_{i+2}), counter-clockwise in the cell
LOCAL_FACET_VERTS = np.array([[1, 2], [2, 0], [0, 1]])


class ReconstructionError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class DofLayout:
    """Polynomial degrees and local block sizes.

    k is the degree of the facet normal derivatives, ``ell`` the cell degree
    (default k + 2) and m = max(k - 1, 0) the degree of the facet values.
    """

    k: int
    ell: int | None = None

    def __post_init__(self):
        if self.k < 0:
            raise ValueError(f"k must be >= 0, got {self.k}")
        if self.ell is None:
            object.__setattr__(self, "ell", self.k + 2)
        if self.ell < max(self.k - 2, 0):
            raise ValueError(f"ell must be >= max(k - 2, 0) = {max(self.k - 2, 0)}, got {self.ell}")

    @property
    def m(self) -> int:
        return max(self.k - 1, 0)

    @property
    def n_cell(self) -> int:
        return dim_p(self.ell)

    @property
    def n_value(self) -> int:
        return self.m + 1

    @property
    def n_normal(self) -> int:
        return self.k + 1

    @property
    def n_rec(self) -> int:
        """dim P_{k+2}."""
        return dim_p(self.k + 2)

    @property
    def basis_degree(self) -> int:
        return max(self.ell, self.k + 2)

    @property
    def n_local(self) -> int:
        return self.n_cell + 3 * self.n_value + 3 * self.n_normal + 3

    def value_slice(self, f: int) -> slice:
        o = self.n_cell + f * self.n_value
        return slice(o, o + self.n_value)

    def normal_slice(self, f: int) -> slice:
        o = self.n_cell + 3 * self.n_value + f * self.n_normal
        return slice(o, o + self.n_normal)

    def vertex_index(self, v: int) -> int:
        return self.n_cell + 3 * self.n_value + 3 * self.n_normal + v

    @property
    def quad_degree(self) -> int:
        """Exactness used for all bilinear terms."""
        return 2 * self.basis_degree + 2

    @property
    def data_degree(self) -> int:
        """Exactness used for non-polynomial data."""
        return self.quad_degree + 4


def _geometry(vertices):
    v = vertices
    a = v[:, LOCAL_FACET_VERTS[:, 0]]
    b = v[:, LOCAL_FACET_VERTS[:, 1]]
    d = b - a
    length = np.linalg.norm(d, axis=-1)
    outward = np.stack([d[..., 1], -d[..., 0]], axis=-1) / length[..., None]
    return a, b, length, outward


def local_weights_eigen(h, area, facet_length):
    """Weights ell_T(F) = h_T^2 |F| / |T| and, in 2D, ell_T(E, F) = h_T^2 / |F|."""
    lf = h[:, None] ** 2 * facet_length / area[:, None]
    lef = h[:, None] ** 2 / facet_length
    return lf, lef


class LocalOperators:
    """Reconstruction, stabilisation and local matrices on a batch of triangles.

    Parameters
    ----------
    vertices : (nc, 3, 2) counter-clockwise triangles, or a single (3, 2) triangle
    layout : DofLayout
    facet_flip : (nc, 3) bool, True where the global orientation of local facet
        i runs from v_{i+2} to v_{i+1}. Defaults to the local orientation.
    variant : "source" or "eigen"
    sigma : stabilisation parameter of the eigen variant
    """

    def __init__(self, vertices, layout: DofLayout, facet_flip=None, variant: str = "source",
                 sigma: float = 1.0):
        vertices = np.asarray(vertices, dtype=float)
        if vertices.ndim == 2:
            vertices = vertices[None]
        if variant not in ("source", "eigen"):
            raise ValueError(f"unknown stabilisation variant {variant!r}")
        if variant == "eigen" and not sigma > 0:
            raise ValueError(f"sigma must be positive, got {sigma}")
        self.vertices = vertices
        self.layout = layout
        self.variant = variant
        self.sigma = float(sigma)
        nc = len(vertices)
        self.facet_flip = np.zeros((nc, 3), bool) if facet_flip is None else np.asarray(facet_flip, bool)
        self.basis = CellBasis(vertices, layout.basis_degree, quad_degree=layout.quad_degree)
        self.h = self.basis.h
        self.area = self.basis.area
        a, b, self.facet_length, self.normal = _geometry(vertices)
        flip = self.facet_flip[..., None]
        self.facet_start = np.where(flip, b, a)
        self.facet_end = np.where(flip, a, b)
        self._build()

    # -- facet helpers -----------------------------------------------------
    def facet_points(self, degree: int):
        """Points (nc, 3, nq, 2), weights (nc, 3, nq) and parameters (nq,) along global orientation."""
        rule = facet_rule(degree)
        pts, w = rule.map_to_segments(self.facet_start, self.facet_end)
        return pts, w, rule.points

    def facet_basis_values(self, s, degree: int, deriv: int = 0):
        P = facet_reference_values(s, degree, deriv)
        return P[None, None] * (self.facet_length ** (-0.5 - deriv))[..., None, None]

    def _eval_on_facets(self, pts, order, dim=None):
        nc, nf, nq, _ = pts.shape
        tab = self.basis.eval(pts.reshape(nc, nf * nq, 2), order, dim)
        return {key: val.reshape(nc, nf, nq, -1) for key, val in tab.items()}

    # -- construction ------------------------------------------------------
    def _build(self):
        L = self.layout
        nc = len(self.vertices)
        nr, nl, nloc = L.n_rec, L.n_cell, L.n_local
        qd = L.quad_degree

        pts, w = cell_rule(qd).map_to_cells(self.vertices)
        tab = self.basis.eval(pts, 4)
        phi = tab[(0, 0)]
        hx, hxy, hy = tab[(2, 0)][..., :nr], tab[(1, 1)][..., :nr], tab[(0, 2)][..., :nr]
        K = (np.einsum("cq,cqi,cqj->cij", w, hx, hx) + 2 * np.einsum("cq,cqi,cqj->cij", w, hxy, hxy)
             + np.einsum("cq,cqi,cqj->cij", w, hy, hy))
        self.hessian_gram = K

        B = np.zeros((nc, nr, nloc))
        bilap = tab[(4, 0)] + 2 * tab[(2, 2)] + tab[(0, 4)]
        B[:, :, :nl] = np.einsum("cq,cqi,cqj->cij", w, bilap[..., :nr], phi[..., :nl])
        Cons = np.zeros((nc, 3, nr))
        Cons[:, 0] = np.einsum("cq,cqi->ci", w, phi[..., :nr])
        Cons[:, 1] = np.einsum("cq,cqi->ci", w, tab[(1, 0)][..., :nr])
        Cons[:, 2] = np.einsum("cq,cqi->ci", w, tab[(0, 1)][..., :nr])
        Drhs = np.zeros((nc, 3, nloc))
        Drhs[:, 0, :nl] = np.einsum("cq,cqj->cj", w, phi[..., :nl])

        fpts, fw, s = self.facet_points(qd)
        ftab = self._eval_on_facets(fpts, 3, nr)
        n = self.normal[:, :, None, :]
        dd = directional(ftab, n)
        psi = self.facet_basis_values(s, L.m)
        chi = self.facet_basis_values(s, L.k)
        self.trace_proj = np.einsum("cfq,cfqj,cfqi->cfji", fw, psi, ftab[(0, 0)])
        self.normal_proj = np.einsum("cfq,cfqj,cfqi->cfji", fw, chi, dd["n"])
        for f in range(3):
            vs, ns = L.value_slice(f), L.normal_slice(f)
            B[:, :, vs] = -np.einsum("cq,cqj,cqi->cij", fw[:, f], psi[:, f], dd["nlap"][:, f] + dd["ttn"][:, f])
            B[:, :, ns] = np.einsum("cq,cqj,cqi->cij", fw[:, f], chi[:, f], dd["nn"][:, f])
            Drhs[:, 1:, vs] = np.einsum("cq,cqj,cd->cdj", fw[:, f], psi[:, f], self.normal[:, f])

        vtab = self.basis.eval(self.vertices, 2, nr)
        self.vertex_values = vtab[(0, 0)]  # (nc, 3, nr)
        H = np.stack([np.stack([vtab[(2, 0)], vtab[(1, 1)]], -1),
                      np.stack([vtab[(1, 1)], vtab[(0, 2)]], -1)], -2)  # (nc, 3, nr, 2, 2)
        for v in range(3):
            col = L.vertex_index(v)
            for f in range(3):
                if f == v:
                    continue
                other = LOCAL_FACET_VERTS[f][LOCAL_FACET_VERTS[f] != v][0]
                e = (self.vertices[:, v] - self.vertices[:, other]) / self.facet_length[:, f, None]
                B[:, :, col] += np.einsum("cd,cide,ce->ci", self.normal[:, f], H[:, v], e)

        self.rec_rhs = B
        self.constraint = Cons
        self.constraint_rhs = Drhs
        self.R = self._solve_reconstruction(K, B, Cons, Drhs)

    @staticmethod
    def _solve_reconstruction(K, B, Cons, Drhs):
        # the first three orthonormal functions span P_1 = ker(hessian): K vanishes
        # on them and the three mean constraints fix their coefficients
        Khh = K[:, 3:, 3:]
        try:
            Lc = np.linalg.cholesky(Khh)
        except np.linalg.LinAlgError as exc:
            raise ReconstructionError("singular reconstruction system (Hessian Gram matrix)") from exc
        y = np.linalg.solve(Lc, B[:, 3:])
        r_high = np.linalg.solve(np.swapaxes(Lc, 1, 2), y)
        C1 = Cons[:, :, :3]
        rhs = Drhs - np.einsum("cij,cjk->cik", Cons[:, :, 3:], r_high)
        try:
            r_low = np.linalg.solve(C1, rhs)
        except np.linalg.LinAlgError as exc:
            raise ReconstructionError("singular mean-value constraints") from exc
        return np.concatenate([r_low, r_high], axis=1)

    # -- stabilisation -----------------------------------------------------
    @cached_property
    def residual_ops(self):
        """Residual maps (D_cell, D_value[f], D_normal[f], D_vertex[v]) on local vectors."""
        L = self.layout
        nc = len(self.vertices)
        nl, nr, nloc = L.n_cell, L.n_rec, L.n_local
        R = self.R
        Rpad = np.zeros((nc, max(nl, nr), nloc))
        Rpad[:, :nr] = R
        Dc = -Rpad[:, :nl].copy()
        Dc[:, np.arange(nl), np.arange(nl)] += 1.0
        Dv, Dn, Dx = [], [], []
        for f in range(3):
            d = -np.einsum("cji,cil->cjl", self.trace_proj[:, f], R)
            sl = L.value_slice(f)
            d[:, np.arange(L.n_value), np.arange(sl.start, sl.stop)] += 1.0
            Dv.append(d)
            d = -np.einsum("cji,cil->cjl", self.normal_proj[:, f], R)
            sl = L.normal_slice(f)
            d[:, np.arange(L.n_normal), np.arange(sl.start, sl.stop)] += 1.0
            Dn.append(d)
        for v in range(3):
            d = -np.einsum("ci,cil->cl", self.vertex_values[:, v], R)
            d[:, L.vertex_index(v)] += 1.0
            Dx.append(d[:, None, :])
        return Dc, Dv, Dn, Dx

    @cached_property
    def stab_weights(self):
        """(cell, value[f], normal[f], vertex[v]) weights, each of shape (nc,) or (nc, 3)."""
        h = self.h
        if self.variant == "source":
            ones = np.ones((len(h), 3))
            return h**-4, h[:, None] ** -3 * ones, h[:, None] ** -1 * ones, h[:, None] ** -2 * ones
        sg = self.sigma
        lf, lef = local_weights_eigen(h, self.area, self.facet_length)
        wv = sg * h[:, None] ** -2 / lf
        wn = sg / lf
        # vertex v lies on the two local facets f != v
        per_facet = sg / (lf * lef)
        wx = per_facet.sum(axis=1, keepdims=True) - per_facet
        return sg * h**-4, wv, wn, wx

    @cached_property
    def S(self):
        """Stabilisation matrices (nc, nloc, nloc)."""
        Dc, Dv, Dn, Dx = self.residual_ops
        wc, wv, wn, wx = self.stab_weights
        S = wc[:, None, None] * np.einsum("cil,cim->clm", Dc, Dc)
        for f in range(3):
            S += wv[:, f, None, None] * np.einsum("cil,cim->clm", Dv[f], Dv[f])
            S += wn[:, f, None, None] * np.einsum("cil,cim->clm", Dn[f], Dn[f])
        for v in range(3):
            S += wx[:, v, None, None] * np.einsum("cil,cim->clm", Dx[v], Dx[v])
        return S

    def stabilization_terms(self, x):
        """The four stabilisation contributions s_T(x, x) per cell, shape (nc, 4)."""
        Dc, Dv, Dn, Dx = self.residual_ops
        wc, wv, wn, wx = self.stab_weights
        out = np.zeros((len(x), 4))
        out[:, 0] = wc * np.sum(np.einsum("cil,cl->ci", Dc, x) ** 2, axis=1)
        for f in range(3):
            out[:, 1] += wv[:, f] * np.sum(np.einsum("cil,cl->ci", Dv[f], x) ** 2, axis=1)
            out[:, 2] += wn[:, f] * np.sum(np.einsum("cil,cl->ci", Dn[f], x) ** 2, axis=1)
        for v in range(3):
            out[:, 3] += wx[:, v] * np.sum(np.einsum("cil,cl->ci", Dx[v], x) ** 2, axis=1)
        return out

    @cached_property
    def stiffness(self):
        """a_T = R^T K R + S, shape (nc, nloc, nloc)."""
        A = np.einsum("cil,cij,cjm->clm", self.R, self.hessian_gram, self.R) + self.S
        return 0.5 * (A + np.swapaxes(A, 1, 2))

    @cached_property
    def mass(self):
        """Cell-block mass (u_T, v_T)_T: identity on the cell block, zero elsewhere."""
        L = self.layout
        M = np.zeros((len(self.vertices), L.n_local, L.n_local))
        M[:, np.arange(L.n_cell), np.arange(L.n_cell)] = 1.0
        return M

    def load(self, f, quad_degree: int | None = None):
        """Local load vectors (nc, nloc); only the cell block is non-zero."""
        L = self.layout
        qd = L.data_degree if quad_degree is None else quad_degree
        pts, w = cell_rule(qd).map_to_cells(self.vertices)
        phi = self.basis.values(pts, L.n_cell)
        out = np.zeros((len(self.vertices), L.n_local))
        out[:, :L.n_cell] = np.einsum("cq,cq,cqj->cj", w, f(pts), phi)
        return out

    # -- interpolation -----------------------------------------------------
    def interpolate(self, v, grad, quad_degree: int | None = None):
        """I_T v for callables v(points) -> (...) and grad(points) -> (..., 2)."""
        L = self.layout
        qd = L.data_degree if quad_degree is None else quad_degree
        nc = len(self.vertices)
        x = np.zeros((nc, L.n_local))
        pts, w = cell_rule(qd).map_to_cells(self.vertices)
        phi = self.basis.values(pts, L.n_cell)
        x[:, :L.n_cell] = np.einsum("cq,cq,cqj->cj", w, v(pts), phi)
        fpts, fw, s = self.facet_points(qd)
        psi = self.facet_basis_values(s, L.m)
        chi = self.facet_basis_values(s, L.k)
        vals = v(fpts)
        dn = np.einsum("cfqd,cfd->cfq", grad(fpts), self.normal)
        for f in range(3):
            x[:, L.value_slice(f)] = np.einsum("cq,cq,cqj->cj", fw[:, f], vals[:, f], psi[:, f])
            x[:, L.normal_slice(f)] = np.einsum("cq,cq,cqj->cj", fw[:, f], dn[:, f], chi[:, f])
        vv = v(self.vertices)
        for i in range(3):
            x[:, L.vertex_index(i)] = vv[:, i]
        return x

    # -- evaluation of reconstructions --------------------------------------
    def reconstruct(self, x):
        """Coefficients (nc, n_rec) of R_T x in the orthonormal P_{k+2} basis."""
        return np.einsum("cil,cl->ci", self.R, x)

    def eval_poly(self, coeffs, points, order: int = 0):
        """Derivative table of sum_i coeffs[c, i] phi_i at points (nc, np, 2)."""
        tab = self.basis.eval(points, order, coeffs.shape[1])
        return {key: np.einsum("cpi,ci->cp", val, coeffs) for key, val in tab.items()}
