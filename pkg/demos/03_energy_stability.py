"""Unforced run with a large time step: energy decays, mass of u is conserved."""
from chemorepulsion import Scheme, SolverConfig, TrigSolution, initialize_state, make_spaces, unit_square_mesh

exact = TrigSolution()
spaces = make_spaces(unit_square_mesh(12))
start = initialize_state(spaces, exact.u_field, exact.sigma_field, exact.v_field)
scheme = Scheme(spaces, SolverConfig(k=0.1, T=2.0, method="newton"))

print(f"initial energy {scheme.energy(start.u, start.sigma):.10f}")
result = scheme.run(start)
for r in result.reports[::4]:
    print(f"n={r.n:3d} t={r.t:4.1f} energy={r.energy:.10f} mass={r.mass:.15f} "
          f"law residual={r.energy_law_residual:+.1e}")
