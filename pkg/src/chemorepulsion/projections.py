"""Elliptic (Ritz) projections onto the discrete spaces.

Scalar spaces project with ``(grad ., grad .) + (., .)``; the vector space
projects with ``(div ., div .) + (rot ., rot .) + (., .)`` restricted to the
``sigma . n = 0`` constrained space.  The operator matrix does not depend on
time, so each :class:`ProjectionProblem` factorizes it once.
"""
from __future__ import annotations

import numpy as np

from .fem import (DEFAULT_QUAD_DEGREE, FeFunction, FeSpace, Field, FormTag, Spaces, assemble_bilinear,
                  constrain_vector, load_vector)
from .sparse import DEFAULT_TOL, Factorization, LinearSolveError, relative_residual


class ProjectionProblem:
    """Ritz projection onto ``space``, with a cached factorization."""

    def __init__(self, space: FeSpace, quad_degree=DEFAULT_QUAD_DEGREE, tol=DEFAULT_TOL):
        self.space = space
        self.quad_degree = quad_degree
        self.tol = tol
        form = FormTag.B_FORM if space.is_vector else FormTag.A_FORM
        self.matrix = assemble_bilinear(form, space, space, quad_degree=quad_degree)
        self._factor = Factorization(self.matrix)

    def rhs(self, exact: Field, t=0.0):
        """The operator's bilinear form applied to ``exact`` and each test function."""
        pts = self.space.tabulate(self.quad_degree).points
        x, y = pts[..., 0], pts[..., 1]
        val = np.asarray(exact.value(x, y, t), dtype=float)
        grad = np.asarray(exact.grad(x, y, t), dtype=float)
        if not self.space.is_vector:
            return load_vector(self.space, values=np.broadcast_to(val, x.shape),
                               grads=np.broadcast_to(grad, x.shape + (2,)), quad_degree=self.quad_degree)
        grad = np.broadcast_to(grad, x.shape + (2, 2))
        b = load_vector(self.space, values=np.broadcast_to(val, x.shape + (2,)),
                        div=grad[..., 0, 0] + grad[..., 1, 1], rot=grad[..., 1, 0] - grad[..., 0, 1],
                        quad_degree=self.quad_degree)
        return constrain_vector(b, self.space)

    def project(self, exact: Field, t=0.0):
        b = self.rhs(exact, t)
        x = self._factor.solve(b)
        res = relative_residual(self.matrix, x, b)
        if res > self.tol:
            raise LinearSolveError(f"Ritz projection residual {res:.3e} exceeds {self.tol:.1e}", res)
        return FeFunction(self.space, x)


def ritz_project(problem: ProjectionProblem, exact: Field, t=0.0):
    return problem.project(exact, t)


class Projectors:
    """The three projections R_h^u, R_h^sigma, R_h^v for a set of spaces."""

    def __init__(self, spaces: Spaces, quad_degree=DEFAULT_QUAD_DEGREE):
        self.u = ProjectionProblem(spaces.u, quad_degree)
        self.sigma = ProjectionProblem(spaces.sigma, quad_degree)
        self.v = ProjectionProblem(spaces.v, quad_degree)


def initialize_state(spaces: Spaces, u0: Field, sigma0: Field, v0: Field, t=0.0, projectors=None):
    """Initial discrete fields as Ritz projections of the initial data."""
    from .scheme import State

    projectors = projectors or Projectors(spaces)
    return State(0, t, projectors.u.project(u0, t), projectors.sigma.project(sigma0, t),
                 projectors.v.project(v0, t))
