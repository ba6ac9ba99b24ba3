"""SIMP topology optimization on dynamically adapted quadtree meshes."""
from .config import AdaptationPolicy, ProblemConfig, load_config, parse_config
from .driver import DesignState, RunReport, adapt_mesh, mark_elements, run, should_adapt
from .fem import BoundarySpec, ConfigurationError, FixedBC, MaterialSpec, PointLoad, Selector, assemble
from .io import DensityRaster, design_difference, rasterize, write_outputs
from .linsolve import minres, solve_equilibrium
from .mesh import AdaptiveMesh, MarkSet, create_uniform, enforce_compatibility
from .topopt import OCParams, ContinuationSchedule, filter_sensitivities, oc_update, sensitivities

__all__ = [
    "AdaptationPolicy", "AdaptiveMesh", "BoundarySpec", "ConfigurationError", "ContinuationSchedule",
    "DensityRaster", "DesignState", "FixedBC", "MarkSet", "MaterialSpec", "OCParams", "PointLoad",
    "ProblemConfig", "RunReport", "Selector", "adapt_mesh", "assemble", "create_uniform",
    "design_difference", "enforce_compatibility", "filter_sensitivities", "load_config", "mark_elements",
    "minres", "oc_update", "parse_config", "rasterize", "run", "sensitivities", "should_adapt",
    "solve_equilibrium", "write_outputs",
]
