"""Conforming triangulations with newest-vertex bisection.

Cells are stored counter-clockwise as (v0, v1, v2) where v0 is the newest
vertex; the refinement edge is (v1, v2). Local facet i is the side opposite
local vertex i.

Facet orientation: a facet is stored as (a, b) with tangent t = (b - a)/|F|
and normal nu_F = rot90(t) = (-t_y, t_x). Interior facets use a < b; boundary
facets are ordered so that nu_F is the outer normal of the domain. The cell
T_+ is the one whose outer normal on F equals nu_F.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

__all__ = ["Mesh", "MeshError", "build_initial", "refine", "refine_uniform", "classify"]


class MeshError(ValueError):
    """Invalid or non-conforming mesh input."""


def _signed_area(p0, p1, p2):
    return 0.5 * ((p1[..., 0] - p0[..., 0]) * (p2[..., 1] - p0[..., 1])
                  - (p1[..., 1] - p0[..., 1]) * (p2[..., 0] - p0[..., 0]))


@dataclass(frozen=True, eq=False)
class Mesh:
    points: np.ndarray
    cells: np.ndarray
    # parent cell index for every cell (identity on the initial mesh)
    parent: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "points", np.ascontiguousarray(self.points, dtype=float))
        object.__setattr__(self, "cells", np.ascontiguousarray(self.cells, dtype=np.int64))
        self.points.setflags(write=False)
        self.cells.setflags(write=False)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_points(self) -> int:
        return len(self.points)

    @cached_property
    def vertices(self) -> np.ndarray:
        """(nc, 3, 2) vertex coordinates per cell."""
        return self.points[self.cells]

    @cached_property
    def area(self) -> np.ndarray:
        v = self.vertices
        return _signed_area(v[:, 0], v[:, 1], v[:, 2])

    @cached_property
    def side_lengths(self) -> np.ndarray:
        """Length of local facet i (opposite vertex i), shape (nc, 3)."""
        v = self.vertices
        return np.linalg.norm(v[:, [2, 0, 1]] - v[:, [1, 2, 0]], axis=-1)

    @cached_property
    def diameter(self) -> np.ndarray:
        return self.side_lengths.max(axis=1)

    @cached_property
    def shape_regularity(self) -> np.ndarray:
        """rho(T) = h_T / inradius."""
        inradius = 2.0 * self.area / self.side_lengths.sum(axis=1)
        return self.diameter / inradius

    @property
    def h_max(self) -> float:
        return float(self.diameter.max())

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices.mean(axis=1)

    # -- facets -----------------------------------------------------------
    @cached_property
    def _facet_data(self):
        nc = self.n_cells
        loc = np.array([[1, 2], [2, 0], [0, 1]])
        pairs = self.cells[:, loc]  # (nc, 3, 2), ccw within the cell
        key = np.sort(pairs, axis=-1).reshape(-1, 2)
        uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inv = inv.reshape(nc, 3)
        if np.any(counts > 2):
            bad = np.flatnonzero(counts > 2)[0]
            cells_on = np.flatnonzero((inv == bad).any(axis=1))
            raise MeshError(
                f"non-conforming mesh: facet {tuple(uniq[bad])} shared by cells {tuple(cells_on[:3])}"
            )
        facets = uniq.copy()
        boundary = counts == 1
        # boundary facets: orient clockwise w.r.t. the single cell so rot90(t) is outward
        flat_pairs = pairs.reshape(-1, 2)
        first = np.full(len(uniq), -1)
        order = np.arange(nc * 3)
        first[inv.ravel()[::-1]] = order[::-1]
        bidx = np.flatnonzero(boundary)
        ccw = flat_pairs[first[bidx]]
        facets[bidx] = ccw[:, ::-1]
        # neighbours and signs
        a = self.points[facets[:, 0]]
        b = self.points[facets[:, 1]]
        t = b - a
        length = np.linalg.norm(t, axis=1)
        t = t / length[:, None]
        nu = np.column_stack([-t[:, 1], t[:, 0]])
        # outer normal of local facet i in cell: ccw edge p->q has outward rot_{-90}
        pq = self.points[pairs[..., 1]] - self.points[pairs[..., 0]]
        out = np.stack([pq[..., 1], -pq[..., 0]], axis=-1)
        sign = np.sign(np.einsum("cfi,cfi->cf", out, nu[inv])).astype(np.int64)
        plus = np.full(len(uniq), -1)
        minus = np.full(len(uniq), -1)
        cidx = np.repeat(np.arange(nc), 3)
        s = sign.ravel()
        plus[inv.ravel()[s > 0]] = cidx[s > 0]
        minus[inv.ravel()[s < 0]] = cidx[s < 0]
        return dict(facets=facets, cell_facets=inv, cell_signs=sign, boundary=boundary,
                    length=length, normal=nu, tangent=t, plus=plus, minus=minus)

    @property
    def facets(self) -> np.ndarray:
        """(nf, 2) facet vertex indices, oriented as described in the module doc."""
        return self._facet_data["facets"]

    @property
    def n_facets(self) -> int:
        return len(self.facets)

    @property
    def cell_facets(self) -> np.ndarray:
        """(nc, 3) global facet index of local facet i."""
        return self._facet_data["cell_facets"]

    @property
    def cell_facet_signs(self) -> np.ndarray:
        """(nc, 3) nu_F . nu_dT on local facet i, in {+1, -1}."""
        return self._facet_data["cell_signs"]

    @property
    def boundary_facet(self) -> np.ndarray:
        return self._facet_data["boundary"]

    @property
    def facet_length(self) -> np.ndarray:
        return self._facet_data["length"]

    @property
    def facet_normal(self) -> np.ndarray:
        return self._facet_data["normal"]

    @property
    def facet_tangent(self) -> np.ndarray:
        return self._facet_data["tangent"]

    @property
    def facet_plus(self) -> np.ndarray:
        return self._facet_data["plus"]

    @property
    def facet_minus(self) -> np.ndarray:
        """Cell T_- of each facet, -1 on boundary facets."""
        return self._facet_data["minus"]

    @cached_property
    def boundary_vertex(self) -> np.ndarray:
        flag = np.zeros(self.n_points, dtype=bool)
        flag[self.facets[self.boundary_facet].ravel()] = True
        return flag

    # -- I/O ----------------------------------------------------------------
    def to_ascii(self) -> str:
        lines = [f"cells {self.n_cells} vertices {self.n_points}"]
        lines += [f"{x:.17g} {y:.17g}" for x, y in self.points]
        lines += [f"{a} {b} {c}" for a, b, c in self.cells]
        return "\n".join(lines) + "\n"

    def save_ascii(self, path) -> None:
        Path(path).write_text(self.to_ascii())

    @classmethod
    def from_ascii(cls, text: str) -> "Mesh":
        lines = text.strip().splitlines()
        head = lines[0].split()
        nc, nv = int(head[1]), int(head[3])
        pts = np.array([[float(t) for t in ln.split()] for ln in lines[1:1 + nv]])
        cells = np.array([[int(t) for t in ln.split()] for ln in lines[1 + nv:1 + nv + nc]])
        return cls(pts, cells)


def _check_conforming(points: np.ndarray, cells: np.ndarray) -> None:
    """Exhaustive pairwise test: two cells may only share a full side or a vertex."""
    tris = points[cells]
    area = _signed_area(tris[:, 0], tris[:, 1], tris[:, 2])
    if np.any(np.abs(area) <= 1e-14 * max(1.0, float(np.abs(area).max(initial=0.0)))):
        bad = int(np.argmin(np.abs(area)))
        raise MeshError(f"degenerate cell {bad}")
    nc = len(cells)
    lo = tris.min(axis=1)
    hi = tris.max(axis=1)
    for i in range(nc):
        cand = np.flatnonzero(np.all(lo[i + 1:] < hi[i] - 1e-12, axis=1) & np.all(hi[i + 1:] > lo[i] + 1e-12, axis=1)) + i + 1
        for j in cand:
            if _interiors_overlap(tris[i], tris[j]):
                raise MeshError(f"non-conforming cells {i} and {j}: interiors overlap")
    # hanging nodes: a vertex lying in the relative interior of a side
    loc = np.array([[1, 2], [2, 0], [0, 1]])
    sides = np.unique(np.sort(cells[:, loc].reshape(-1, 2), axis=1), axis=0)
    a = points[sides[:, 0]]
    b = points[sides[:, 1]]
    for v, p in enumerate(points):
        d = b - a
        s = np.einsum("fi,fi->f", p - a, d) / np.einsum("fi,fi->f", d, d)
        off = np.abs(d[:, 0] * (p - a)[:, 1] - d[:, 1] * (p - a)[:, 0]) / np.linalg.norm(d, axis=1)
        hit = (s > 1e-12) & (s < 1 - 1e-12) & (off < 1e-12)
        if np.any(hit):
            f = int(np.flatnonzero(hit)[0])
            owners = np.flatnonzero(np.isin(cells, sides[f]).sum(axis=1) == 2)
            other = np.flatnonzero((cells == v).any(axis=1))
            raise MeshError(
                f"non-conforming cells {int(owners[0])} and {int(other[0])}: hanging vertex {v}"
            )


def _interiors_overlap(t1: np.ndarray, t2: np.ndarray) -> bool:
    """Separating axis test with a small tolerance; touching does not count."""
    tol = 1e-12 * max(np.ptp(t1, axis=0).max(), np.ptp(t2, axis=0).max())
    for tri in (t1, t2):
        for i in range(3):
            e = tri[(i + 1) % 3] - tri[i]
            n = np.array([-e[1], e[0]])
            p1 = t1 @ n
            p2 = t2 @ n
            if p1.max() <= p2.min() + tol * np.linalg.norm(n) or p2.max() <= p1.min() + tol * np.linalg.norm(n):
                return False
    return True


def _longest_edge_first(points: np.ndarray, cells: np.ndarray) -> np.ndarray:
    """Rotate each cell so that the refinement edge (v1, v2) is its longest side and orient ccw."""
    cells = cells.copy()
    tris = points[cells]
    neg = _signed_area(tris[:, 0], tris[:, 1], tris[:, 2]) < 0
    cells[neg] = cells[neg][:, [0, 2, 1]]
    tris = points[cells]
    lengths = np.linalg.norm(tris[:, [2, 0, 1]] - tris[:, [1, 2, 0]], axis=-1)
    # first index among maximal lengths up to rounding, deterministic
    lmax = lengths.max(axis=1, keepdims=True)
    opp = np.argmax(lengths >= lmax * (1 - 1e-12), axis=1)
    rot = (np.arange(3)[None, :] + opp[:, None]) % 3
    return np.take_along_axis(cells, rot, axis=1)


def build_initial(domain: str = "lshape", points=None, cells=None) -> Mesh:
    """Initial triangulation.

    ``lshape``: (-1,1)^2 minus [0,1]x[-1,0], six triangles obtained by cutting
    the three unit squares along the diagonal through the origin.
    ``unit_square``: (0,1)^2 cut along the diagonal (0,0)-(1,1).
    ``custom``: user supplied ``points`` and ``cells``, checked for conformity.
    """
    if domain == "lshape":
        points = np.array([[0, 0], [1, 0], [1, 1], [0, 1], [-1, 1], [-1, 0], [-1, -1], [0, -1]], float)
        cells = np.array([[0, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 5], [0, 5, 6], [0, 6, 7]])
    elif domain == "unit_square":
        points = np.array([[0, 0], [1, 0], [1, 1], [0, 1]], float)
        cells = np.array([[0, 1, 2], [0, 2, 3]])
    elif domain == "custom":
        if points is None or cells is None:
            raise MeshError("custom domain needs points and cells")
        points = np.asarray(points, float)
        cells = np.asarray(cells, dtype=np.int64)
        if points.ndim != 2 or points.shape[1] != 2 or cells.ndim != 2 or cells.shape[1] != 3:
            raise MeshError("points must be (n, 2) and cells (m, 3)")
        if cells.min() < 0 or cells.max() >= len(points):
            raise MeshError("cell vertex index out of range")
        _check_conforming(points, cells)
    else:
        raise MeshError(f"unknown domain {domain!r}; expected lshape, unit_square or custom")
    cells = _longest_edge_first(points, cells)
    mesh = Mesh(points, cells, np.arange(len(cells)))
    _ = mesh._facet_data  # validates facet multiplicity
    return mesh


def refine(mesh: Mesh, marked) -> Mesh:
    """Newest-vertex bisection of the marked cells plus conforming closure.

    Returns a new mesh whose ``parent`` array maps every child to its cell in
    ``mesh``. Unmarked cells untouched by the closure keep their vertex order.
    """
    marked = np.asarray(sorted(set(int(c) for c in np.atleast_1d(marked))), dtype=np.int64)
    nc = mesh.n_cells
    if marked.size and (marked.min() < 0 or marked.max() >= nc):
        raise IndexError("marked cell index out of range")
    if marked.size == 0:
        return Mesh(mesh.points, mesh.cells, np.arange(nc))

    cf = mesh.cell_facets  # local facet i opposite vertex i; refinement edge is facet 0
    edge_marked = np.zeros(mesh.n_facets, dtype=bool)
    edge_marked[cf[marked, 0]] = True
    while True:
        touched = edge_marked[cf].any(axis=1)
        ref = cf[touched, 0]
        if edge_marked[ref].all():
            break
        edge_marked[ref] = True

    medges = np.flatnonzero(edge_marked)
    fv = mesh.facets[medges]
    mid = 0.5 * (mesh.points[fv[:, 0]] + mesh.points[fv[:, 1]])
    midpoint = np.full(mesh.n_facets, -1, dtype=np.int64)
    midpoint[medges] = mesh.n_points + np.arange(len(medges))
    points = np.vstack([mesh.points, mid])

    # edge lookup for children: key (min, max) -> midpoint index
    key_to_mid = {(int(min(a, b)), int(max(a, b))): int(m) for (a, b), m in zip(fv, midpoint[medges])}

    out_cells = []
    out_parent = []
    for c in range(nc):
        v0, v1, v2 = (int(x) for x in mesh.cells[c])
        if not edge_marked[cf[c, 0]]:
            out_cells.append((v0, v1, v2))
            out_parent.append(c)
            continue
        m = midpoint[cf[c, 0]]
        for child in ((m, v0, v1), (m, v2, v0)):
            a, b = child[1], child[2]
            mm = key_to_mid.get((min(a, b), max(a, b)))
            if mm is None:
                out_cells.append(child)
                out_parent.append(c)
            else:
                n0 = child[0]
                out_cells.append((mm, n0, a))
                out_cells.append((mm, b, n0))
                out_parent += [c, c]
    return Mesh(points, np.array(out_cells, dtype=np.int64), np.array(out_parent, dtype=np.int64))


def refine_uniform(mesh: Mesh, rounds: int = 1) -> Mesh:
    """Bisect every cell ``rounds`` times; returns the mesh with parents w.r.t. the input."""
    parent = np.arange(mesh.n_cells)
    for _ in range(rounds):
        mesh = refine(mesh, np.arange(mesh.n_cells))
        parent = parent[mesh.parent]
    return Mesh(mesh.points, mesh.cells, parent)


@dataclass(frozen=True)
class EntityTables:
    interior_facets: np.ndarray
    boundary_facets: np.ndarray
    interior_vertices: np.ndarray
    boundary_vertices: np.ndarray
    cell_facet_signs: np.ndarray
    # sign of nu_dF at (start, end) of each facet: -1 at the start, +1 at the end
    facet_endpoint_signs: np.ndarray


def classify(mesh: Mesh) -> EntityTables:
    bf = mesh.boundary_facet
    bv = mesh.boundary_vertex
    used = np.zeros(mesh.n_points, dtype=bool)
    used[mesh.cells.ravel()] = True
    return EntityTables(
        interior_facets=np.flatnonzero(~bf),
        boundary_facets=np.flatnonzero(bf),
        interior_vertices=np.flatnonzero(~bv & used),
        boundary_vertices=np.flatnonzero(bv),
        cell_facet_signs=mesh.cell_facet_signs,
        facet_endpoint_signs=np.tile([-1, 1], (mesh.n_facets, 1)),
    )
