"""Ritz projection error orders for the three element spaces."""
from chemorepulsion import FeSpace, ProjectionProblem, TrigSolution, make_spaces, norms, unit_square_mesh
from chemorepulsion.mms import fitted_order

exact = TrigSolution()
cases = {"u  (P1)": (lambda mesh: FeSpace(mesh, 1), exact.u_field),
         "v  (P2)": (lambda mesh: FeSpace(mesh, 2), exact.v_field),
         "sigma (P1 vector)": (lambda mesh: make_spaces(mesh).sigma, exact.sigma_field)}
for label, (make, field) in cases.items():
    l2, h1 = [], []
    for m in (8, 16, 32):
        e = norms(ProjectionProblem(make(unit_square_mesh(m))).project(field, 0.0), field, 0.0)
        l2.append((m, e.l2))
        h1.append((m, e.h1))
    print(f"{label:18s} L2 order {fitted_order(l2):.3f}   H1 order {fitted_order(h1):.3f}")
