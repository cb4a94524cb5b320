"""Global assembly, static condensation and solvers.

Global unknowns are numbered [cells | interior facet values | interior facet
normal derivatives | interior vertices]. Boundary facet and vertex unknowns do
not exist (clamped boundary conditions are imposed strongly). Facet normal
derivatives are stored once per facet w.r.t. nu_F; the scatter applies the
sign nu_F . nu_dT of each neighbour.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .local import LOCAL_FACET_VERTS, DofLayout, LocalOperators
from .mesh import Mesh

__all__ = [
    "DofMap",
    "AssembledSystem",
    "CondensedSystem",
    "SPDError",
    "EigenSolverError",
    "AssemblyError",
    "assemble",
    "condense",
    "solve_spd",
    "solve_source",
    "solve_gevp",
    "leb",
    "leb_alpha_coefficient",
    "LEBResult",
    "dump_matrix",
    "DENSE_EIGEN_LIMIT",
]

# above this many cell unknowns the eigensolver works with the implicit
# condensed operator instead of a dense Schur complement
DENSE_EIGEN_LIMIT = 2000


class SPDError(np.linalg.LinAlgError):
    pass


class EigenSolverError(RuntimeError):
    pass


class AssemblyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DofMap:
    n_cells: int
    layout: DofLayout
    interior_facets: np.ndarray
    interior_vertices: np.ndarray
    value_offset: int
    normal_offset: int
    vertex_offset: int
    n_dofs: int
    local_to_global: np.ndarray  # (nc, nloc), -1 for eliminated boundary unknowns
    local_sign: np.ndarray  # (nc, nloc)

    @property
    def n_cell_dofs(self) -> int:
        return self.value_offset

    @property
    def n_skeleton_dofs(self) -> int:
        return self.n_dofs - self.value_offset

    def gather(self, x: np.ndarray) -> np.ndarray:
        """Local vectors (nc, nloc) from a global vector."""
        l2g = self.local_to_global
        out = np.where(l2g >= 0, x[np.maximum(l2g, 0)], 0.0)
        return out * self.local_sign

    def scatter_values(self, xloc: np.ndarray) -> np.ndarray:
        """Global vector from consistent local vectors (boundary entries dropped)."""
        x = np.zeros(self.n_dofs)
        mask = self.local_to_global >= 0
        x[self.local_to_global[mask]] = (xloc * self.local_sign)[mask]
        return x


def build_dofmap(mesh: Mesh, layout: DofLayout) -> DofMap:
    nc = mesh.n_cells
    nl, nm, nk = layout.n_cell, layout.n_value, layout.n_normal
    int_f = np.flatnonzero(~mesh.boundary_facet)
    used = np.zeros(mesh.n_points, dtype=bool)
    used[mesh.cells.ravel()] = True
    int_v = np.flatnonzero(~mesh.boundary_vertex & used)
    f_index = np.full(mesh.n_facets, -1)
    f_index[int_f] = np.arange(len(int_f))
    v_index = np.full(mesh.n_points, -1)
    v_index[int_v] = np.arange(len(int_v))
    voff = nc * nl
    noff = voff + len(int_f) * nm
    xoff = noff + len(int_f) * nk
    ndof = xoff + len(int_v)

    l2g = np.full((nc, layout.n_local), -1, dtype=np.int64)
    sign = np.ones((nc, layout.n_local))
    l2g[:, :nl] = np.arange(nc)[:, None] * nl + np.arange(nl)
    for f in range(3):
        fi = f_index[mesh.cell_facets[:, f]]
        inner = fi >= 0
        vs, ns = layout.value_slice(f), layout.normal_slice(f)
        l2g[inner, vs] = voff + fi[inner, None] * nm + np.arange(nm)
        l2g[inner, ns] = noff + fi[inner, None] * nk + np.arange(nk)
        sign[:, ns] = mesh.cell_facet_signs[:, f, None]
    for v in range(3):
        vi = v_index[mesh.cells[:, v]]
        l2g[vi >= 0, layout.vertex_index(v)] = xoff + vi[vi >= 0]
    return DofMap(nc, layout, int_f, int_v, voff, noff, xoff, ndof, l2g, sign)


def facet_flips(mesh: Mesh) -> np.ndarray:
    """True where the global orientation of local facet i opposes the local one."""
    start_local = mesh.cells[:, LOCAL_FACET_VERTS[:, 0]]
    return mesh.facets[mesh.cell_facets, 0] != start_local


@dataclass(eq=False)
class AssembledSystem:
    mesh: Mesh
    layout: DofLayout
    ops: LocalOperators
    dofmap: DofMap
    A: sp.csr_matrix
    B: sp.csr_matrix
    rhs: np.ndarray
    variant: str = "source"
    sigma: float = 1.0
    _cache: dict = field(default_factory=dict, repr=False)

    @property
    def n_dofs(self) -> int:
        return self.dofmap.n_dofs

    def interpolate(self, v: Callable, grad: Callable, quad_degree: int | None = None) -> np.ndarray:
        """Global interpolation I_h v of a function vanishing to first order on the boundary."""
        return self.dofmap.scatter_values(self.ops.interpolate(v, grad, quad_degree))

    def local(self, x: np.ndarray) -> np.ndarray:
        return self.dofmap.gather(x)

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        """Coefficients (nc, dim P_{k+2}) of R_h x per cell."""
        return self.ops.reconstruct(self.local(x))


def _scatter(values: np.ndarray, dm: DofMap) -> sp.csr_matrix:
    l2g, s = dm.local_to_global, dm.local_sign
    rows = np.broadcast_to(l2g[:, :, None], values.shape)
    cols = np.broadcast_to(l2g[:, None, :], values.shape)
    vals = values * s[:, :, None] * s[:, None, :]
    mask = (rows >= 0) & (cols >= 0)
    M = sp.coo_matrix((vals[mask], (rows[mask], cols[mask])), shape=(dm.n_dofs, dm.n_dofs))
    return M.tocsr()


def assemble(mesh: Mesh, layout: DofLayout, variant: str = "source", f: Callable | None = None,
             sigma: float = 1.0, quad_degree: int | None = None) -> AssembledSystem:
    """Assemble a_h, b_h and (f, v_T) on ``mesh``.

    ``variant`` selects the stabilisation: "source" or "eigen" (with ``sigma``).
    """
    if not isinstance(layout, DofLayout):
        raise AssemblyError("layout must be a DofLayout")
    if mesh.cells.ndim != 2 or mesh.cells.shape[1] != 3 or mesh.cells.max() >= mesh.n_points:
        raise AssemblyError("mesh cell table inconsistent with its points")
    ops = LocalOperators(mesh.vertices, layout, facet_flips(mesh), variant, sigma)
    dm = build_dofmap(mesh, layout)
    A = _scatter(ops.stiffness, dm)
    A = ((A + A.T) * 0.5).tocsr()
    B = _scatter(ops.mass, dm)
    rhs = np.zeros(dm.n_dofs)
    if f is not None:
        loc = ops.load(f, quad_degree)
        np.add.at(rhs, dm.local_to_global[:, :layout.n_cell].ravel(), loc[:, :layout.n_cell].ravel())
    return AssembledSystem(mesh, layout, ops, dm, A, B, rhs, variant, sigma)


# -- linear algebra ------------------------------------------------------------
class _SparseCholeskyLike:
    """Sparse LU without pivoting on a symmetric ordering; positive pivots certify SPD."""

    def __init__(self, A):
        A = sp.csc_matrix(A)
        try:
            self.lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                                options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise SPDError(f"factorisation failed: {exc}") from exc
        d = self.lu.U.diagonal()
        if not np.array_equal(self.lu.perm_r, self.lu.perm_c) or np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise SPDError("matrix is not symmetric positive definite (non-positive pivot)")
        self.shape = A.shape

    def solve(self, b):
        return self.lu.solve(np.asarray(b, dtype=float))


def factorize_spd(A):
    """Factorisation object with ``solve``; raises SPDError if A is not SPD."""
    if sp.issparse(A):
        return _SparseCholeskyLike(A)
    A = np.asarray(A, dtype=float)
    try:
        c = sla.cho_factor(A)
    except np.linalg.LinAlgError as exc:
        raise SPDError("matrix is not symmetric positive definite (non-positive pivot)") from exc

    class _Dense:
        shape = A.shape

        def solve(self, b):
            return sla.cho_solve(c, b)

    return _Dense()


def _norm_inf(A) -> float:
    if sp.issparse(A):
        return float(abs(A).sum(axis=1).max()) if A.shape[0] else 0.0
    return float(np.abs(A).sum(axis=1).max()) if A.shape[0] else 0.0


def relative_residual(A, x, b) -> float:
    """Normwise backward error ||b - A x|| / (||A|| ||x|| + ||b||) in the max norm."""
    r = np.abs(b - A @ x).max(initial=0.0)
    scale = _norm_inf(A) * np.abs(x).max(initial=0.0) + np.abs(b).max(initial=0.0)
    return float(r / scale) if scale > 0 else 0.0


def solve_spd(A, b, rtol: float = 1e-10) -> np.ndarray:
    """Direct symmetric solve with one step of iterative refinement.

    Raises SPDError for matrices that are not SPD or when the normwise
    relative residual exceeds ``rtol``.
    """
    fac = factorize_spd(A)
    b = np.asarray(b, dtype=float)
    x = fac.solve(b)
    x = x + fac.solve(b - A @ x)
    res = relative_residual(A, x, b)
    if res > rtol:
        raise SPDError(f"relative residual {res:.2e} exceeds {rtol:.0e}")
    return x


@dataclass(eq=False)
class CondensedSystem:
    """Schur complement on the kept partition plus the elimination map."""

    kind: str
    keep: np.ndarray
    eliminate: np.ndarray
    matrix: object
    rhs: np.ndarray
    _decondense: Callable = field(repr=False)

    def decondense(self, y: np.ndarray) -> np.ndarray:
        """Full vector from the kept unknowns (eliminated part recovered exactly)."""
        return self._decondense(y)

    @property
    def size(self) -> int:
        return len(self.keep)


def _cell_blocks(A: sp.spmatrix, nc: int, nl: int) -> np.ndarray:
    Att = sp.coo_matrix(A[: nc * nl, : nc * nl])
    blocks = np.zeros((nc, nl, nl))
    c = Att.row // nl
    if np.any(Att.col // nl != c):
        raise AssemblyError("cell block of A is not block diagonal")
    blocks[c, Att.row % nl, Att.col % nl] = Att.data
    return blocks


def condense(system: AssembledSystem, eliminate: str = "cells") -> CondensedSystem:
    """Static condensation.

    ``eliminate="cells"`` removes the block-diagonal cell unknowns (source
    problem); ``eliminate="skeleton"`` removes facet and vertex unknowns
    (eigenproblem; the dense Schur complement on the cell unknowns).
    """
    A = system.A.tocsr()
    dm = system.dofmap
    nT = dm.n_cell_dofs
    T = np.arange(nT)
    S = np.arange(nT, dm.n_dofs)
    b = system.rhs
    if eliminate == "cells":
        nc, nl = dm.n_cells, system.layout.n_cell
        blocks = _cell_blocks(A, nc, nl)
        try:
            Lc = np.linalg.cholesky(blocks)
        except np.linalg.LinAlgError as exc:
            raise SPDError("singular cell block in static condensation") from exc
        Linv = np.linalg.inv(Lc)
        inv = np.einsum("cki,ckj->cij", Linv, Linv)
        Binv = sp.bsr_matrix((inv, np.arange(nc), np.arange(nc + 1)), shape=(nT, nT)).tocsr()
        Ats = A[:nT][:, nT:]
        Ast = A[nT:][:, :nT]
        Ass = A[nT:][:, nT:]
        schur = (Ass - Ast @ Binv @ Ats).tocsr()
        schur = ((schur + schur.T) * 0.5).tocsr()
        rhs = b[nT:] - Ast @ (Binv @ b[:nT])

        def decondense(y):
            x = np.empty(dm.n_dofs)
            x[nT:] = y
            x[:nT] = Binv @ (b[:nT] - Ats @ y)
            return x

        return CondensedSystem("cells", S, T, schur, rhs, decondense)
    if eliminate == "skeleton":
        Ass = A[nT:][:, nT:]
        Ast = A[nT:][:, :nT]
        Att = A[:nT][:, :nT]
        fac = factorize_spd(Ass) if len(S) else None
        if fac is None:
            schur = Att.toarray()
        else:
            X = fac.solve(Ast.toarray())
            schur = Att.toarray() - Ast.T @ X
        schur = 0.5 * (schur + schur.T)
        rhs = b[:nT] - (Ast.T @ fac.solve(b[nT:]) if fac is not None else 0.0)

        def decondense(y):
            x = np.empty(dm.n_dofs)
            x[:nT] = y
            if fac is not None:
                x[nT:] = fac.solve(b[nT:] - Ast @ y)
            return x

        return CondensedSystem("skeleton", T, S, schur, rhs, decondense)
    raise ValueError(f"eliminate must be 'cells' or 'skeleton', got {eliminate!r}")


def solve_source(system: AssembledSystem) -> np.ndarray:
    """Solve a_h(u_h, .) = (f, .) via condensation of the cell unknowns."""
    cs = condense(system, "cells")
    y = solve_spd(cs.matrix, cs.rhs) if cs.size else np.zeros(0)
    return cs.decondense(y)


@dataclass(eq=False)
class EigenResult:
    values: np.ndarray
    vectors: np.ndarray  # (n_dofs, count), b_h-orthonormal
    n_available: int
    method: str


def _normalise_signs(vectors, nT, reference=None):
    for j in range(vectors.shape[1]):
        cell = vectors[:nT, j]
        if reference is not None:
            s = float(np.dot(cell, reference[:nT] if reference.ndim == 1 else reference[:nT, j]))
        else:
            big = np.abs(cell) > 1e-8 * np.abs(cell).max()
            s = float(cell[np.argmax(big)])
        if s < 0:
            vectors[:, j] *= -1.0
    return vectors


def solve_gevp(system: AssembledSystem, count: int = 1, reference: np.ndarray | None = None,
               method: str = "auto") -> EigenResult:
    """Smallest ``count`` eigenpairs of a_h(u, v) = lambda b_h(u, v).

    The skeleton unknowns are eliminated exactly. Small problems use a dense
    symmetric eigensolver on the Schur complement; larger ones run Lanczos on
    the inverse of the condensed operator (one sparse factorisation of A).
    Eigenvectors are b_h-orthonormal and signed so that their cell part has
    a non-negative inner product with ``reference`` (or a positive first
    significant coefficient).
    """
    dm = system.dofmap
    nT = dm.n_cell_dofs
    if count < 1 or count > nT:
        raise EigenSolverError(f"requested {count} eigenpairs but only N = {nT} exist")
    Btt = system.B[:nT][:, :nT]
    if abs(Btt - sp.identity(nT)).max() > 1e-12:
        raise EigenSolverError("cell mass matrix is not the identity; orthonormal cell bases expected")
    if method == "auto":
        method = "dense" if nT <= DENSE_EIGEN_LIMIT else "lanczos"
    A = system.A.tocsr()
    if method == "dense":
        cs = condense(system, "skeleton")
        try:
            vals, Y = sla.eigh(cs.matrix, subset_by_index=[0, count - 1])
        except np.linalg.LinAlgError as exc:
            raise EigenSolverError(f"dense eigensolver failed: {exc}") from exc
        vecs = np.column_stack([cs.decondense(Y[:, j]) for j in range(count)])
    elif method == "lanczos":
        fac = factorize_spd(A)
        n = dm.n_dofs

        def apply_inverse(x):
            z = np.zeros(n)
            z[:nT] = np.ravel(x)
            return fac.solve(z)[:nT]

        op = spla.LinearOperator((nT, nT), matvec=apply_inverse, dtype=float)
        ncv = min(nT, max(2 * count + 1, 20))
        v0 = np.ones(nT)
        try:
            mu, Y = spla.eigsh(op, k=count, which="LA", ncv=ncv, v0=v0, tol=1e-13, maxiter=5000)
        except spla.ArpackNoConvergence as exc:
            raise EigenSolverError(
                f"Lanczos did not converge: {len(exc.eigenvalues)} of {count} eigenpairs after maxiter"
            ) from exc
        order = np.argsort(-mu)
        mu, Y = mu[order], Y[:, order]
        vals = 1.0 / mu
        vecs = np.empty((n, count))
        for j in range(count):
            z = np.zeros(n)
            z[:nT] = Y[:, j]
            vecs[:, j] = vals[j] * fac.solve(z)
            vecs[:nT, j] = Y[:, j]
    else:
        raise ValueError(f"unknown eigensolver method {method!r}")
    norms = np.sqrt(np.einsum("ij,ij->j", vecs[:nT], vecs[:nT]))
    vecs = vecs / norms
    vecs = _normalise_signs(vecs, nT, reference)
    return EigenResult(np.asarray(vals), vecs, nT, method)


# -- lower eigenvalue bound ----------------------------------------------------
def leb_alpha_coefficient(n: int = 2) -> float:
    """alpha / sigma = 1/pi^4 + c_tr/pi^2 + c_tr + c_tr (2/pi + n/pi^2), c_tr = (2 + (n+1)/pi)/pi."""
    pi = math.pi
    ctr = (2.0 + (n + 1) / pi) / pi
    return 1 / pi**4 + ctr / pi**2 + ctr + ctr * (2 / pi + n / pi**2)


@dataclass(frozen=True)
class LEBResult:
    value: float
    alpha: float
    beta: float
    # True when alpha + beta lambda_h <= 1, i.e. the bound equals lambda_h
    direct: bool = False


def leb(lambda_h: float, sigma: float, h_max: float, n: int = 2) -> LEBResult:
    """min{1, 1/(alpha + beta lambda_h)} lambda_h with alpha = sigma * coef, beta = h^4/pi^4."""
    if lambda_h <= 0 or sigma <= 0 or h_max <= 0:
        raise ValueError("lambda_h, sigma and h_max must be positive")
    alpha = sigma * leb_alpha_coefficient(n)
    beta = h_max**4 / math.pi**4
    q = alpha + beta * lambda_h
    return LEBResult(min(1.0, 1.0 / q) * lambda_h, alpha, beta, q <= 1.0)


def dump_matrix(A, path) -> None:
    """Write ``row col value`` lines (0-based) for external verification."""
    C = sp.coo_matrix(A)
    order = np.lexsort((C.col, C.row))
    with open(path, "w") as fh:
        for r, c, v in zip(C.row[order], C.col[order], C.data[order]):
            fh.write(f"{r} {c} {v:.17g}\n")
