"""Same forced steps with both nonlinear solvers: identical answers, different iteration counts."""
import numpy as np

from chemorepulsion import (Scheme, SolverConfig, TrigSolution, forcing_terms, initialize_state,
                            make_spaces, unit_square_mesh)

exact = TrigSolution()
spaces = make_spaces(unit_square_mesh(16))
start = initialize_state(spaces, exact.u_field, exact.sigma_field, exact.v_field)
forcing = forcing_terms(exact)

for k in (1e-4, 1e-2):
    states = {}
    for method in ("picard", "newton"):
        scheme = Scheme(spaces, SolverConfig(k=k, T=k, method=method, tol=1e-10))
        states[method], rep = scheme.step(start, forcing)
        incs = ", ".join(f"{x:.1e}" for x in rep.increments)
        print(f"k={k:g} {method:6s} {rep.iterations} iterations, increments {incs}")
    diff = np.max(np.abs(states["picard"].u.coefficients - states["newton"].u.coefficients))
    print(f"  max |u_picard - u_newton| = {diff:.1e}")
