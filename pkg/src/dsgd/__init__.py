"""Discontinuous skeletal gradient discretisations on polygonal meshes."""

from .core import Discretization, SpaceSpec, SpecError, interpolate, seminorms
from .kernels import BACKEND
from .mesh import MeshFamilySpec, PolytopalMesh, from_polygons, generate, load, save
from .schemes import ProblemSpec, measure_errors, newton_solve, solve
from .stabilization import StabilizationKind, build_stabilization

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Discretization",
    "MeshFamilySpec",
    "PolytopalMesh",
    "ProblemSpec",
    "SpaceSpec",
    "SpecError",
    "StabilizationKind",
    "build_stabilization",
    "from_polygons",
    "generate",
    "interpolate",
    "load",
    "measure_errors",
    "newton_solve",
    "save",
    "seminorms",
    "solve",
]
