"""Error estimators, exact errors, Doerfler marking and adaptive drivers."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .local import DofLayout
from .mesh import Mesh, refine, refine_uniform
from .polyspace import CellBasis, cell_rule, directional, facet_rule
from .system import AssembledSystem, assemble, leb, solve_gevp, solve_source

__all__ = [
    "Indicators",
    "FacetJumps",
    "oscillation",
    "mu_jumps",
    "eta_source",
    "eta_eigen",
    "exact_errors",
    "dorfler_mark",
    "eoc",
    "ConvergenceHistory",
    "HISTORY_COLUMNS",
    "adaptive_source",
    "adaptive_eigen",
]

HISTORY_COLUMNS = ("step", "ndof", "hmax", "eta", "energy_err", "l2_err", "lambda_h", "leb", "seconds")


# -- oscillation ---------------------------------------------------------------
def oscillation(f: Callable, mesh: Mesh, ell: int, quad_degree: int | None = None) -> np.ndarray:
    """Per-cell osc(f, T)^2 = h_T^4 ||(1 - Pi_T^ell) f||_T^2."""
    qd = 2 * ell + 10 if quad_degree is None else quad_degree
    basis = CellBasis(mesh.vertices, ell, quad_degree=2 * ell + 2)
    pts, w = cell_rule(qd).map_to_cells(mesh.vertices)
    phi = basis.values(pts)
    fv = np.broadcast_to(f(pts), w.shape)
    c = np.einsum("cq,cq,cqj->cj", w, fv, phi)
    r = fv - np.einsum("cqj,cj->cq", phi, c)
    return basis.h**4 * np.einsum("cq,cq->c", w, r * r)


# -- facet jumps ---------------------------------------------------------------
@dataclass(frozen=True)
class FacetJumps:
    """Weighted squared jump norms per facet (boundary facets use the trace)."""

    value: np.ndarray  # h_F^-3 ||[R u]||^2
    normal: np.ndarray  # h_F^-1 ||[d_n R u]||^2
    nn: np.ndarray | None = None  # h_F ||[d_nn R u]||^2, interior facets only
    nlap: np.ndarray | None = None  # h_F^3 ||[d_n lap R u]||^2, interior facets only

    @property
    def mu2(self) -> np.ndarray:
        return self.value + self.normal


def mu_jumps(system: AssembledSystem, x: np.ndarray, higher: bool = False) -> FacetJumps:
    """Jump contributions of mu^2 for the reconstruction R_h x, one entry per facet.

    With ``higher`` the interior-facet terms of d_nn and d_n lap are added.
    """
    mesh, ops, L = system.mesh, system.ops, system.layout
    coeffs = system.reconstruct(x)
    qd = L.quad_degree
    pts, _, _ = ops.facet_points(qd)
    order = 3 if higher else 1
    tab = ops._eval_on_facets(pts, order, L.n_rec)
    vals = {key: np.einsum("cfqi,ci->cfq", t, coeffs) for key, t in tab.items()}
    dd = directional(vals, ops.normal)
    sign = mesh.cell_facet_signs[:, :, None]
    nF = mesh.n_facets
    hF = mesh.facet_length
    rule = facet_rule(qd)
    wF = hF[:, None] * rule.weights[None, :]

    def jump(contrib):
        J = np.zeros((nF, len(rule.weights)))
        np.add.at(J, mesh.cell_facets, contrib)
        return np.einsum("fq,fq->f", wF, J * J)

    # even-order normal derivatives flip with nu_F, odd orders with nu_dT
    value = hF**-3 * jump(sign * vals[(0, 0)])
    normal = hF**-1 * jump(dd["n"])
    if not higher:
        return FacetJumps(value, normal)
    interior = ~mesh.boundary_facet
    nn = np.where(interior, hF * jump(sign * dd["nn"]), 0.0)
    nlap = np.where(interior, hF**3 * jump(dd["nlap"]), 0.0)
    return FacetJumps(value, normal, nn, nlap)


# -- estimators ----------------------------------------------------------------
@dataclass(frozen=True)
class Indicators:
    """Per-cell indicator components and the global estimator decomposition.

    Per-cell values attribute each facet term to every adjacent cell, while the
    global sums count each facet once.
    """

    jump: np.ndarray
    stab: np.ndarray
    osc: np.ndarray
    extra: np.ndarray
    mu2: float
    stab2: float
    osc2: float
    extra2: float

    @property
    def cell(self) -> np.ndarray:
        """Refinement indicators eta(T)^2."""
        return self.jump + self.stab + self.osc + self.extra

    @property
    def eta2(self) -> float:
        return self.mu2 + self.stab2 + self.osc2 + self.extra2

    @property
    def eta(self) -> float:
        return math.sqrt(self.eta2)


def _per_cell(mesh: Mesh, facet_values: np.ndarray) -> np.ndarray:
    return facet_values[mesh.cell_facets].sum(axis=1)


def eta_source(system: AssembledSystem, x: np.ndarray, f: Callable) -> tuple[float, Indicators]:
    """Global estimator eta and per-cell indicators for the source problem.

    For ell >= 1, eta^2 = mu^2 + |u_h|_s^2 + osc(f)^2. For ell = 0 the
    oscillation is replaced by interior d_nn and d_n lap jumps plus the volume
    residual ||h^2 (f - bilap R_h u_h)||^2.
    """
    mesh, L = system.mesh, system.layout
    low = L.ell == 0
    jumps = mu_jumps(system, x, higher=low)
    stab = system.ops.stabilization_terms(system.local(x)).sum(axis=1)
    osc = oscillation(f, mesh, L.ell, L.data_degree)
    if not low:
        extra = np.zeros(mesh.n_cells)
        ind = Indicators(_per_cell(mesh, jumps.mu2), stab, osc, extra,
                         float(jumps.mu2.sum()), float(stab.sum()), float(osc.sum()), 0.0)
        return ind.eta, ind
    facet_extra = jumps.nn + jumps.nlap
    vol = _volume_residual(system, x, f)
    extra = _per_cell(mesh, facet_extra) + vol
    ind = Indicators(_per_cell(mesh, jumps.mu2), stab, np.zeros(mesh.n_cells), extra,
                     float(jumps.mu2.sum()), float(stab.sum()), 0.0, float(facet_extra.sum() + vol.sum()))
    return ind.eta, ind


def _volume_residual(system: AssembledSystem, x: np.ndarray, f: Callable) -> np.ndarray:
    ops, L = system.ops, system.layout
    pts, w = cell_rule(L.data_degree).map_to_cells(ops.vertices)
    tab = ops.eval_poly(system.reconstruct(x), pts, 4)
    r = f(pts) - (tab[(4, 0)] + 2 * tab[(2, 2)] + tab[(0, 4)])
    return ops.h**4 * np.einsum("cq,cq->c", w, r * r)


def eta_eigen(system: AssembledSystem, x: np.ndarray) -> tuple[float, Indicators]:
    """eta_hat^2 = mu^2 + |u_h|_s^2 with per-cell indicators."""
    mesh = system.mesh
    jumps = mu_jumps(system, x)
    stab = system.ops.stabilization_terms(system.local(x)).sum(axis=1)
    zero = np.zeros(mesh.n_cells)
    ind = Indicators(_per_cell(mesh, jumps.mu2), stab, zero, zero,
                     float(jumps.mu2.sum()), float(stab.sum()), 0.0, 0.0)
    return ind.eta, ind


def exact_errors(system: AssembledSystem, x: np.ndarray, u: Callable, hessian: Callable,
                 quad_degree: int | None = None) -> tuple[float, float]:
    """Energy error ||D^2_pw(u - R_h x)|| and cell error ||Pi^ell u - x_T||.

    ``hessian(points)`` returns (..., 2, 2).
    """
    ops, L = system.ops, system.layout
    # smooth exact solutions are resolved well beyond the polynomial degree
    qd = max(L.data_degree + 8, 20) if quad_degree is None else quad_degree
    pts, w = cell_rule(qd).map_to_cells(ops.vertices)
    tab = ops.eval_poly(system.reconstruct(x), pts, 2)
    H = hessian(pts)
    exx = H[..., 0, 0] - tab[(2, 0)]
    exy = H[..., 0, 1] - tab[(1, 1)]
    eyy = H[..., 1, 1] - tab[(0, 2)]
    energy = math.sqrt(float(np.sum(w * (exx**2 + 2 * exy**2 + eyy**2))))
    phi = ops.basis.values(pts, L.n_cell)
    proj = np.einsum("cq,cq,cqj->cj", w, u(pts), phi)
    xT = system.local(x)[:, : L.n_cell]
    l2 = math.sqrt(float(np.sum((proj - xT) ** 2)))
    return energy, l2


# -- marking and rates ---------------------------------------------------------
def dorfler_mark(indicators: Sequence[float], theta: float = 0.5) -> np.ndarray:
    """Smallest set M with sum_M eta(T)^2 >= theta * sum_T eta(T)^2.

    ``indicators`` are the squared values eta(T)^2. Cells are taken in
    descending order, ties broken by ascending cell id. Returns sorted ids.
    """
    if not (0.0 < theta <= 1.0):
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    vals = np.asarray(indicators, dtype=float)
    if vals.ndim != 1 or np.any(vals < 0) or not np.all(np.isfinite(vals)):
        raise ValueError("indicators must be a 1-d array of finite non-negative values")
    if vals.size == 0 or vals.sum() == 0.0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(vals.size), -vals))
    cum = np.cumsum(vals[order])
    n = int(np.searchsorted(cum, theta * cum[-1], side="left")) + 1
    return np.sort(order[: min(n, vals.size)])


def eoc(errors: Sequence[float], x: Sequence[float], abscissa: str = "sqrt_ndof") -> np.ndarray:
    """Experimental orders of convergence between consecutive rows.

    ``x`` holds ndof (abscissa "ndof" or "sqrt_ndof") or mesh sizes ("h").
    Rates are positive for decreasing errors; pairs with equal abscissa give nan.
    """
    e = np.asarray(errors, dtype=float)
    t = np.asarray(x, dtype=float)
    if e.shape != t.shape:
        raise ValueError("errors and abscissa values must have the same length")
    if abscissa == "ndof":
        denom = np.log(t[1:] / t[:-1])
    elif abscissa == "sqrt_ndof":
        denom = 0.5 * np.log(t[1:] / t[:-1])
    elif abscissa == "h":
        denom = np.log(t[:-1] / t[1:])
    else:
        raise ValueError(f"abscissa must be 'ndof', 'sqrt_ndof' or 'h', got {abscissa!r}")
    with np.errstate(divide="ignore", invalid="ignore"):
        num = np.log(e[:-1] / e[1:])
        return np.where(denom != 0, num / np.where(denom != 0, denom, 1.0), np.nan)


# -- history -------------------------------------------------------------------
@dataclass
class ConvergenceHistory:
    rows: list = field(default_factory=list)
    components: list = field(default_factory=list)

    def append(self, **row) -> None:
        unknown = set(row) - set(HISTORY_COLUMNS)
        if unknown:
            raise KeyError(f"unknown history columns {sorted(unknown)}")
        if self.rows and row["ndof"] <= self.rows[-1]["ndof"]:
            raise ValueError("ndof must increase strictly along a convergence history")
        self.rows.append({c: row.get(c) for c in HISTORY_COLUMNS})

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([np.nan if r[name] is None else r[name] for r in self.rows], dtype=float)

    def eoc(self, name: str, abscissa: str = "sqrt_ndof") -> np.ndarray:
        x = self.column("hmax" if abscissa == "h" else "ndof")
        return eoc(self.column(name), x, abscissa)

    @staticmethod
    def _fmt(v) -> str:
        if v is None:
            return ""
        if isinstance(v, (int, np.integer)):
            return str(int(v))
        return repr(float(v))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for r in self.rows:
            w.writerow([self._fmt(r[c]) for c in HISTORY_COLUMNS])
        return buf.getvalue()

    def components_csv(self) -> str:
        cols = ("step", "mu2", "stab2", "osc2", "extra2", "eta2")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.components:
            w.writerow([self._fmt(r[c]) for c in cols])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConvergenceHistory":
        h = cls()
        for rec in csv.DictReader(io.StringIO(text)):
            row = {}
            for c in HISTORY_COLUMNS:
                s = rec.get(c, "")
                row[c] = None if s == "" else (int(s) if c in ("step", "ndof") else float(s))
            h.append(**row)
        return h


# -- adaptive drivers ----------------------------------------------------------
@dataclass
class StepState:
    """What a driver hands to its per-step callback."""

    step: int
    mesh: Mesh
    system: AssembledSystem
    solution: np.ndarray
    indicators: Indicators


def adaptive_source(mesh: Mesh, layout: DofLayout, f: Callable, *, theta: float = 0.5,
                    max_ndof: int = 10**4, adaptive: bool = True, uniform_bisections: int = 2,
                    exact: tuple[Callable, Callable] | None = None, max_steps: int = 200,
                    record_timing: bool = False, callback: Callable | None = None) -> ConvergenceHistory:
    """Solve, estimate, mark and refine until ndof >= max_ndof.

    With ``adaptive=False`` every step refines all cells ``uniform_bisections``
    times (two bisections halve h). ``exact=(u, hessian)`` adds the energy and
    cell L2 errors to the history.
    """
    hist = ConvergenceHistory()
    for step in range(max_steps):
        t0 = time.perf_counter()
        system = assemble(mesh, layout, "source", f)
        u = solve_source(system)
        eta, ind = eta_source(system, u, f)
        errs = exact_errors(system, u, *exact) if exact is not None else (None, None)
        seconds = time.perf_counter() - t0 if record_timing else None
        hist.append(step=step, ndof=system.n_dofs, hmax=mesh.h_max, eta=eta,
                    energy_err=errs[0], l2_err=errs[1], seconds=seconds)
        hist.components.append(dict(step=step, mu2=ind.mu2, stab2=ind.stab2, osc2=ind.osc2,
                                    extra2=ind.extra2, eta2=ind.eta2))
        if callback is not None:
            callback(StepState(step, mesh, system, u, ind))
        if system.n_dofs >= max_ndof:
            break
        if adaptive:
            mesh = refine(mesh, dorfler_mark(ind.cell, theta))
        else:
            mesh = refine_uniform(mesh, uniform_bisections)
    return hist


def adaptive_eigen(mesh: Mesh, layout: DofLayout, *, sigma: float = 0.4086, index: int = 1,
                   theta: float = 0.5, max_ndof: int = 10**4, adaptive: bool = True,
                   uniform_bisections: int = 2, max_steps: int = 200, record_timing: bool = False,
                   callback: Callable | None = None) -> ConvergenceHistory:
    """Adaptive loop for the eigenvalue lambda_h(index) with its lower bound.

    A step refines uniformly whenever alpha + beta lambda_h > 1 (or when
    ``adaptive`` is off); otherwise it applies Doerfler marking to eta_hat.
    """
    if layout.ell != layout.k + 2:
        raise ValueError("the eigenvalue problem requires ell = k + 2")
    hist = ConvergenceHistory()
    for step in range(max_steps):
        t0 = time.perf_counter()
        system = assemble(mesh, layout, "eigen", sigma=sigma)
        res = solve_gevp(system, index)
        lam = float(res.values[index - 1])
        u = res.vectors[:, index - 1]
        bound = leb(lam, sigma, mesh.h_max)
        eta, ind = eta_eigen(system, u)
        seconds = time.perf_counter() - t0 if record_timing else None
        hist.append(step=step, ndof=system.n_dofs, hmax=mesh.h_max, eta=eta, lambda_h=lam,
                    leb=bound.value, seconds=seconds)
        hist.components.append(dict(step=step, mu2=ind.mu2, stab2=ind.stab2, osc2=0.0,
                                    extra2=0.0, eta2=ind.eta2))
        if callback is not None:
            callback(StepState(step, mesh, system, u, ind))
        if system.n_dofs >= max_ndof:
            break
        if adaptive and bound.direct:
            mesh = refine(mesh, dorfler_mark(ind.cell, theta))
        else:
            mesh = refine_uniform(mesh, uniform_bisections if not adaptive else 1)
    return hist
