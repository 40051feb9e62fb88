"""Backward-Euler time stepping for the chemo-repulsion system in (u, sigma).

Each step solves the coupled nonlinear system

    (dt u, ubar) + (grad u, grad ubar) + (u sigma, grad ubar)          = (f, ubar)
    (dt sigma, sbar) + B(sigma, sbar) - 2 (u grad u, sbar)             = (g, sbar)

by Picard or Newton iteration, then recovers the chemical concentration from

    (dt v, vbar) + (grad v, grad vbar) + (v, vbar) = (u**2, vbar) + (h, vbar).

``B`` is the div-rot-identity form.  The transport term and the production
term are assembled as exact transposes of each other (up to the factor 2),
which is what makes every Picard iterate satisfy the discrete energy law.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from .fem import (FeFunction, FormTag, RhsTag, Spaces, assemble_bilinear, assemble_linear)
from .sparse import DEFAULT_TOL, Factorization, LinearSolveError, solve_direct, solve_general

logger = logging.getLogger(__name__)

PICARD = "picard"
NEWTON = "newton"
DEFAULT_MAX_ITER = {PICARD: 50, NEWTON: 20}


@dataclass
class SolverConfig:
    k: float = 1e-5
    T: float = 1e-3
    method: str = NEWTON
    tol: float = 1e-6
    max_nl_iter: Optional[int] = None
    linear_solver: str = "direct"  # or "bicgstab" (falls back to LU on failure)
    linear_tol: float = DEFAULT_TOL
    linear_max_iter: Optional[int] = None
    # relative increment tests switch to absolute below this denominator
    abs_floor: float = 1e-14
    # increments below this fraction of the combined (u, sigma) L2 size are roundoff and count as converged
    roundoff_floor: float = 1e-12
    # warn when k (|u|_1 + |sigma|_1)^4 exceeds this; uniqueness is not guaranteed beyond it
    uniqueness_threshold: float = 1e3
    # scales both transport terms; 0 decouples into two heat equations
    coupling: float = 1.0
    quad_degree: int = 6

    def __post_init__(self):
        if self.method not in DEFAULT_MAX_ITER:
            raise ValueError(f"method must be 'picard' or 'newton', got {self.method!r}")
        if not self.k > 0:
            raise ValueError(f"k must be positive, got {self.k}")
        if not self.T >= self.k:
            raise ValueError(f"T must be at least k, got T={self.T}, k={self.k}")
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if not self.roundoff_floor >= 0:
            raise ValueError(f"roundoff_floor must be non-negative, got {self.roundoff_floor}")
        if self.linear_solver not in ("direct", "bicgstab"):
            raise ValueError(f"linear_solver must be 'direct' or 'bicgstab', got {self.linear_solver!r}")
        if self.max_nl_iter is None:
            self.max_nl_iter = DEFAULT_MAX_ITER[self.method]

    @property
    def n_steps(self):
        n = self.T / self.k
        if abs(n - round(n)) > 1e-9 * n:
            raise ValueError(f"T/k = {n} is not an integer")
        return int(round(n))


@dataclass
class State:
    n: int
    t: float
    u: FeFunction
    sigma: FeFunction
    v: FeFunction


@dataclass
class Forcing:
    """Right-hand sides ``f(x, y, t)``, ``g(x, y, t)`` (2-vector) and ``h(x, y, t)``."""
    f: Optional[Callable] = None
    g: Optional[Callable] = None
    h: Optional[Callable] = None


@dataclass
class IterationTrace:
    rel_u: list = field(default_factory=list)
    rel_sigma: list = field(default_factory=list)
    # combined H1-type norm sqrt(|du|_A^2 + |dsigma|_B^2) of each increment
    h1: list = field(default_factory=list)

    @property
    def increments(self):
        return [max(a, b) for a, b in zip(self.rel_u, self.rel_sigma)]

    @property
    def iterations(self):
        return len(self.rel_u)


@dataclass
class StepReport:
    n: int
    t: float
    iterations: int
    increments: list
    increments_h1: list
    energy: float
    energy_law_residual: float
    dissipation: float
    mass: float
    v_mass_balance_residual: float
    v_mass_scale: float
    scheme_residual: float


@dataclass
class RunResult:
    final: State
    reports: list
    snapshots: dict


class NonlinearSolveError(RuntimeError):
    def __init__(self, message, trace=None, step=None):
        super().__init__(message)
        self.trace = trace
        self.step = step


class Scheme:
    """Operators and solvers for one set of spaces and one solver configuration.

    The time-independent matrices are assembled once here; only the
    transport blocks are re-assembled inside the nonlinear iteration.
    Instances keep no per-run state, so one mesh can drive several runs.
    """

    def __init__(self, spaces: Spaces, config: SolverConfig):
        self.spaces = spaces
        self.config = config
        U, S, V = spaces.u, spaces.sigma, spaces.v
        q = config.quad_degree
        self.M_u = assemble_bilinear(FormTag.MASS, U, U, quad_degree=q)
        self.K_u = assemble_bilinear(FormTag.STIFFNESS, U, U, quad_degree=q)
        self.A_u = self.M_u + self.K_u
        self.M_s = assemble_bilinear(FormTag.MASS, S, S, quad_degree=q)
        self.B_s = assemble_bilinear(FormTag.B_FORM, S, S, quad_degree=q)
        self.M_v = assemble_bilinear(FormTag.MASS, V, V, quad_degree=q)
        self.A_v = assemble_bilinear(FormTag.A_FORM, V, V, quad_degree=q)
        self.mass_u = np.asarray(self.M_u.sum(axis=0)).ravel()  # u -> int u
        self.mass_v = np.asarray(self.M_v.sum(axis=0)).ravel()
        k = config.k
        self._uu_time = (self.M_u / k + self.K_u).tocsr()
        self._ss = (self.M_s / k + self.B_s).tocsr()
        self._v_factor = Factorization(self.M_v / k + self.A_v)
        self._warned = False

    # -- small helpers -------------------------------------------------------

    @staticmethod
    def _sq(M, x):
        return float(x @ (M @ x))

    def _next_time(self, prev):
        # t_n = t_0 + n k, without accumulating rounding over many steps
        k = self.config.k
        return (prev.t - prev.n * k) + (prev.n + 1) * k

    def _conv(self, w):
        """Transport block (w sigma, grad ubar) and production block 2 (w grad u, sbar)."""
        U, S, q = self.spaces.u, self.spaces.sigma, self.config.quad_degree
        C = assemble_bilinear(FormTag.CONV_U_SIGMA, U, S, w, quad_degree=q)
        D = assemble_bilinear(FormTag.CONV_GRADU, S, U, w, quad_degree=q)
        c = self.config.coupling
        return c * C, c * D

    def _loads(self, forcing, t):
        U, S, V, q = self.spaces.u, self.spaces.sigma, self.spaces.v, self.config.quad_degree
        F = G = H = None
        if forcing is not None:
            if forcing.f is not None:
                F = assemble_linear(RhsTag.L2_SOURCE, U, forcing.f, t, quad_degree=q)
            if forcing.g is not None:
                G = assemble_linear(RhsTag.L2_SOURCE, S, forcing.g, t, quad_degree=q)
            if forcing.h is not None:
                H = assemble_linear(RhsTag.L2_SOURCE, V, forcing.h, t, quad_degree=q)
        return F, G, H

    def _solve_block(self, A, b):
        cfg = self.config
        A = sp.csr_matrix(A)
        try:
            if cfg.linear_solver == "direct":
                return solve_direct(A, b)
            return solve_general(A, b, tol=cfg.linear_tol, max_iter=cfg.linear_max_iter)
        except (LinearSolveError, RuntimeError) as exc:
            raise LinearSolveError(
                f"block solve failed ({exc}); the Newton Jacobian may be singular, try a smaller k") from exc

    # -- nonlinear solvers ---------------------------------------------------

    def picard_iterate(self, prev: State, forcing: Optional[Forcing] = None, t=None, loads=None):
        """Fixed-point iteration freezing u in both transport terms."""
        return self._iterate(prev, forcing, t, loads, newton=False)

    def newton_iterate(self, prev: State, forcing: Optional[Forcing] = None, t=None, loads=None):
        """Newton iteration on the coupled (u, sigma) residual."""
        return self._iterate(prev, forcing, t, loads, newton=True)

    def _iterate(self, prev, forcing, t, loads, newton):
        cfg = self.config
        k = cfg.k
        t = self._next_time(prev) if t is None else t
        U, S = self.spaces.u, self.spaces.sigma
        nu = U.n_dofs
        F, G, _ = self._loads(forcing, t) if loads is None else loads
        rhs_u0 = self.M_u @ prev.u.coefficients / k
        rhs_s0 = self.M_s @ prev.sigma.coefficients / k
        if F is not None:
            rhs_u0 = rhs_u0 + F
        if G is not None:
            rhs_s0 = rhs_s0 + G

        u_old = prev.u.coefficients.copy()
        s_old = prev.sigma.coefficients.copy()
        trace = IterationTrace()
        max_iter = cfg.max_nl_iter
        for _ in range(max_iter):
            w = FeFunction(U, u_old)
            C, D = self._conv(w)
            A_uu, A_su = self._uu_time, -D
            rhs_u, rhs_s = rhs_u0, rhs_s0
            if newton:
                q, c = cfg.quad_degree, cfg.coupling
                T = assemble_bilinear(FormTag.CONV_U_FROZEN_SIGMA, U, U, FeFunction(S, s_old), quad_degree=q)
                P = assemble_bilinear(FormTag.CONV_U_FROZEN_GRADW, S, U, w, quad_degree=q)
                A_uu = A_uu + c * T
                A_su = A_su - c * P
                rhs_u = rhs_u + C @ s_old
                rhs_s = rhs_s - D @ u_old
            A = sp.bmat([[A_uu, C], [A_su, self._ss]], format="csr")
            x = self._solve_block(A, np.concatenate([rhs_u, rhs_s]))
            u_new, s_new = x[:nu], x[nu:]

            du, ds = u_new - u_old, s_new - s_old
            rel_u, abs_u, size_u = self._relative(self.M_u, du, u_old)
            rel_s, abs_s, size_s = self._relative(self.M_s, ds, s_old)
            trace.rel_u.append(rel_u)
            trace.rel_sigma.append(rel_s)
            trace.h1.append(np.sqrt(self._sq(self.A_u, du) + self._sq(self.B_s, ds)))
            u_old, s_old = u_new, s_new
            floor = cfg.roundoff_floor * np.hypot(size_u, size_s)
            if all(rel <= cfg.tol or inc <= floor for rel, inc in ((rel_u, abs_u), (rel_s, abs_s))):
                return FeFunction(U, u_new), FeFunction(S, s_new), trace
        method = NEWTON if newton else PICARD
        raise NonlinearSolveError(
            f"{method} did not converge in {max_iter} iterations (last increment {trace.increments[-1]:.3e})",
            trace, prev.n + 1)

    def _relative(self, M, d, ref):
        num = np.sqrt(max(self._sq(M, d), 0.0))
        den = np.sqrt(max(self._sq(M, ref), 0.0))
        rel = num / den if den >= self.config.abs_floor else num
        return rel, num, den

    # -- v recovery and diagnostics ------------------------------------------

    def recover_v(self, prev_v: FeFunction, u_n: FeFunction, forcing: Optional[Forcing] = None, t=0.0, H=None):
        """One SPD solve for the chemical concentration, given the new u."""
        k = self.config.k
        b = self.M_v @ prev_v.coefficients / k + assemble_linear(
            RhsTag.U_SQUARED, self.spaces.v, u_n, quad_degree=self.config.quad_degree)
        if H is None and forcing is not None and forcing.h is not None:
            _, _, H = self._loads(Forcing(h=forcing.h), t)
        if H is not None:
            b = b + H
        return FeFunction(self.spaces.v, self._v_factor.solve(b))

    def energy(self, u: FeFunction, sigma: FeFunction):
        return 0.5 * self._sq(self.M_u, u.coefficients) + 0.25 * self._sq(self.M_s, sigma.coefficients)

    def residual(self, prev: State, u: FeFunction, sigma: FeFunction, forcing=None, t=None, loads=None):
        """Nonlinear residual vectors of the (u, sigma) system at a candidate solution."""
        k = self.config.k
        t = self._next_time(prev) if t is None else t
        F, G, _ = self._loads(forcing, t) if loads is None else loads
        C, D = self._conv(u)
        uc, sc = u.coefficients, sigma.coefficients
        r_u = self.M_u @ (uc - prev.u.coefficients) / k + self.K_u @ uc + C @ sc
        r_s = self.M_s @ (sc - prev.sigma.coefficients) / k + self.B_s @ sc - D @ uc
        if F is not None:
            r_u -= F
        if G is not None:
            r_s -= G
        return r_u, r_s

    def _check_uniqueness(self, u, sigma):
        k = self.config.k
        size = np.sqrt(self._sq(self.A_u, u.coefficients)) + np.sqrt(self._sq(self.B_s, sigma.coefficients))
        if k * size**4 > self.config.uniqueness_threshold and not self._warned:
            logger.warning("k*(|u|_1 + |sigma|_1)^4 = %.3g exceeds %.3g; the discrete solution may not be unique",
                           k * size**4, self.config.uniqueness_threshold)
            self._warned = True

    # -- stepping -----------------------------------------------------------

    def step(self, prev: State, forcing: Optional[Forcing] = None):
        """Advance one time step; returns the new state and its diagnostics."""
        cfg = self.config
        t = self._next_time(prev)
        solver = self.newton_iterate if cfg.method == NEWTON else self.picard_iterate
        loads = self._loads(forcing, t)
        try:
            u, sigma, trace = solver(prev, forcing, t, loads)
        except NonlinearSolveError as exc:
            exc.step = prev.n + 1
            raise
        v = self.recover_v(prev.v, u, forcing, t, H=loads[2])
        state = State(prev.n + 1, t, u, sigma, v)
        self._check_uniqueness(u, sigma)
        return state, self._report(prev, state, trace, forcing, loads)

    def _report(self, prev, state, trace, forcing, loads):
        k = self.config.k
        u, s = state.u.coefficients, state.sigma.coefficients
        du = (u - prev.u.coefficients) / k
        ds = (s - prev.sigma.coefficients) / k
        E0, E1 = self.energy(prev.u, prev.sigma), self.energy(state.u, state.sigma)
        dissipation = (0.5 * k * self._sq(self.M_u, du) + 0.25 * k * self._sq(self.M_s, ds)
                       + self._sq(self.K_u, u) + 0.5 * self._sq(self.B_s, s))
        F, G, H = loads
        work = 0.0
        if F is not None:
            work += float(F @ u)
        if G is not None:
            work += 0.5 * float(G @ s)
        law = (E1 - E0) / k + dissipation - work

        v_int, v_prev_int = float(self.mass_v @ state.v.coefficients), float(self.mass_v @ prev.v.coefficients)
        u_sq = float(assemble_linear(RhsTag.U_SQUARED, self.spaces.v, state.u,
                                     quad_degree=self.config.quad_degree).sum())
        h_int = float(H.sum()) if H is not None else 0.0
        dv = (v_int - v_prev_int) / k
        v_bal = dv - u_sq + v_int - h_int

        r_u, r_s = self.residual(prev, state.u, state.sigma, forcing, state.t, loads)
        scale = np.sqrt(np.sum((self.M_u @ u / k) ** 2) + np.sum((self.M_s @ s / k) ** 2))
        return StepReport(
            n=state.n, t=state.t, iterations=trace.iterations, increments=trace.increments,
            increments_h1=list(trace.h1), energy=E1, energy_law_residual=law, dissipation=dissipation,
            mass=float(self.mass_u @ u), v_mass_balance_residual=v_bal,
            v_mass_scale=max(1.0, abs(u_sq), abs(v_int), abs(dv)),
            scheme_residual=float(np.sqrt(r_u @ r_u + r_s @ r_s) / max(scale, 1e-300)))

    def run(self, initial: State, forcing: Optional[Forcing] = None, snapshot_stride=0, on_step=None):
        """March ``T/k`` steps from ``initial``.

        ``on_step(state, report)`` is called after every step.  With
        ``snapshot_stride > 0`` every stride-th state is kept (plus the final
        one); with 0 only the final state is.
        """
        state = initial
        reports, snapshots = [], {}
        for _ in range(self.config.n_steps):
            state, report = self.step(state, forcing)
            reports.append(report)
            if snapshot_stride and state.n % snapshot_stride == 0:
                snapshots[state.n] = state
            if on_step is not None:
                on_step(state, report)
        snapshots[state.n] = state
        return RunResult(state, reports, snapshots)


def quadratic_rate_fit(traces, floor=0.0):
    """Fit ``e_l = C * e_{l-1}**2`` over successive increments of several traces.

    ``traces`` are increment lists (one per nonlinear solve).  Pairs whose
    newer increment is at or below ``floor`` (roundoff) are skipped.  Returns
    ``(C, spread, n_pairs)`` where ``C`` is the geometric-mean constant and
    ``spread`` the largest ``|log10(ratio / C)|`` over the pairs used.
    """
    logs = [np.log10(b) - 2.0 * np.log10(a)
            for inc in traces for a, b in zip(inc, inc[1:]) if b > floor and a > 0]
    if not logs:
        return float("nan"), float("nan"), 0
    c = float(np.mean(logs))
    return 10.0**c, float(np.max(np.abs(np.array(logs) - c))), len(logs)
