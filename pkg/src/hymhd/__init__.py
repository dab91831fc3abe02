"""Hybrid high-order solver for the unsteady incompressible MHD equations."""

from .mesh import (GeometryCache, Mesh, MeshFormatError, MeshTopologyError,
                   compute_geometry, generate_structured_mesh, load_mesh)
from .hybrid import (DivergenceReport, HybridScalarField, HybridSpace,
                     HybridVectorField, LocalOperatorSet)
from .solver import (MHDSystem, Problem, SimulationState, SolverConfig,
                     SolverError, Trajectory, run_simulation, time_step_count,
                     upwind_coefficients)
from .mms import (ErrorReport, ExactSolution2D, compute_eoc, energy_error,
                  estimate_infsup_constant, forcing_terms_2d,
                  manufactured_problem, peclet_report)

__version__ = "0.1.0"

__all__ = [
    "GeometryCache", "Mesh", "MeshFormatError", "MeshTopologyError",
    "compute_geometry", "generate_structured_mesh", "load_mesh",
    "DivergenceReport", "HybridScalarField", "HybridSpace",
    "HybridVectorField", "LocalOperatorSet",
    "MHDSystem", "Problem", "SimulationState", "SolverConfig", "SolverError",
    "Trajectory", "run_simulation", "time_step_count", "upwind_coefficients",
    "ErrorReport", "ExactSolution2D", "compute_eoc", "energy_error",
    "estimate_infsup_constant", "forcing_terms_2d", "manufactured_problem",
    "peclet_report",
]
