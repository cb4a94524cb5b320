"""Hybrid high-order discretisation of the clamped plate (biharmonic) problem.

Source problems with a posteriori error control, guaranteed lower eigenvalue
bounds, and adaptive mesh refinement on triangulations.
"""
from .mesh import Mesh, MeshError, build_initial, refine, refine_uniform, classify
from .local import DofLayout, LocalOperators
from .system import assemble, condense, solve_source, solve_gevp, leb

__all__ = [
    "Mesh",
    "MeshError",
    "build_initial",
    "refine",
    "refine_uniform",
    "classify",
    "DofLayout",
    "LocalOperators",
    "assemble",
    "condense",
    "solve_source",
    "solve_gevp",
    "leb",
]
__version__ = "0.1.0"
