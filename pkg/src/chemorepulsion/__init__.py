"""Finite-element solver for a chemo-repulsion system with quadratic production.

The (u, sigma = grad v) system is advanced by an energy-stable backward-Euler
scheme solved with Picard or Newton iteration; v is recovered from u after
each step.  Manufactured solutions and convergence tables live in
:mod:`chemorepulsion.mms`.
"""
from .fem import (FeFunction, FeSpace, Field, FormTag, Norms, RhsTag, Spaces, assemble_bilinear, assemble_linear,
                  integrate, make_spaces, norms, quadrature)
from .mesh import Mesh, read_mesh, unit_square_mesh, write_mesh
from .mms import (ConstantSolution, ErrorAccumulator, ExactSolution, TrigSolution, convergence_table,
                  forcing_terms, run_mms, sweep_tables)
from .projections import ProjectionProblem, Projectors, initialize_state, ritz_project
from .scheme import (Forcing, NonlinearSolveError, RunResult, Scheme, SolverConfig, State, StepReport,
                     quadratic_rate_fit)
from .sparse import LinearSolveError, coo_to_csr, solve_general, solve_spd

__all__ = [
    "ConstantSolution", "ErrorAccumulator", "ExactSolution", "FeFunction", "FeSpace", "Field", "Forcing",
    "FormTag", "LinearSolveError", "Mesh", "NonlinearSolveError", "Norms", "ProjectionProblem", "Projectors",
    "RhsTag", "RunResult", "Scheme", "SolverConfig", "Spaces", "State", "StepReport", "TrigSolution",
    "assemble_bilinear", "assemble_linear", "convergence_table", "coo_to_csr", "forcing_terms",
    "initialize_state", "integrate", "make_spaces", "norms", "quadratic_rate_fit", "quadrature", "read_mesh",
    "ritz_project", "run_mms", "solve_general", "solve_spd", "sweep_tables", "unit_square_mesh", "write_mesh",
]
