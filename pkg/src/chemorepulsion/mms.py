"""Manufactured solutions, error accumulation and convergence tables."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .fem import FeFunction, Field, make_spaces, norms
from .mesh import unit_square_mesh
from .projections import Projectors, initialize_state
from .scheme import Forcing, Scheme, SolverConfig

TWO_PI = 2.0 * np.pi


class ExactSolution:
    """Closed-form fields with the derivatives the forcing terms need.

    Subclasses provide ``u, grad_u, lap_u, u_t``, ``v, grad_v, lap_v, v_t``,
    and for ``sigma = grad v``: ``sigma, grad_sigma, sigma_t, grad_div_sigma``.
    All take ``(x, y, t)`` and broadcast over arrays; vector results stack
    their components on a trailing axis.
    """

    def div_sigma(self, x, y, t):
        J = self.grad_sigma(x, y, t)
        return J[..., 0, 0] + J[..., 1, 1]

    def rot_sigma(self, x, y, t):
        J = self.grad_sigma(x, y, t)
        return J[..., 1, 0] - J[..., 0, 1]

    @property
    def u_field(self):
        return Field(self.u, self.grad_u)

    @property
    def sigma_field(self):
        return Field(self.sigma, self.grad_sigma)

    @property
    def v_field(self):
        return Field(self.v, self.grad_v)


class TrigSolution(ExactSolution):
    """u = e^-t (c + 2), v = (1 + sin t)(c + 2), c = cos(2 pi x) cos(2 pi y)."""

    _cache = (None, None, None)

    def _phi(self, x, y):
        # the forcing terms query many derivatives at the same point arrays
        cx_, cy_, trig = self._cache
        if x is cx_ and y is cy_:
            return trig
        trig = (np.cos(TWO_PI * x), np.cos(TWO_PI * y), np.sin(TWO_PI * x), np.sin(TWO_PI * y))
        self._cache = (x, y, trig)
        return trig

    def _base(self, x, y):
        cx, cy, _, _ = self._phi(x, y)
        return cx * cy + 2.0

    def _grad_base(self, x, y):
        cx, cy, sx, sy = self._phi(x, y)
        return np.stack(np.broadcast_arrays(-TWO_PI * sx * cy, -TWO_PI * cx * sy), axis=-1)

    def _hess_base(self, x, y):
        cx, cy, sx, sy = self._phi(x, y)
        a = -TWO_PI**2 * cx * cy
        b = TWO_PI**2 * sx * sy
        a, b = np.broadcast_arrays(a, b)
        return np.stack([np.stack([a, b], -1), np.stack([b, a], -1)], -2)

    def _lap_base(self, x, y):
        cx, cy, _, _ = self._phi(x, y)
        return -2.0 * TWO_PI**2 * cx * cy

    @staticmethod
    def _tv(t):
        return 1.0 + np.sin(t)

    @staticmethod
    def _lift(a, extra):
        # time factors are scalars or per-point arrays; align them with vector/matrix results
        a = np.asarray(a)
        return a.reshape(a.shape + (1,) * extra)

    def u(self, x, y, t):
        return np.exp(-t) * self._base(x, y)

    def grad_u(self, x, y, t):
        return self._lift(np.exp(-t), 1) * self._grad_base(x, y)

    def lap_u(self, x, y, t):
        return np.exp(-t) * self._lap_base(x, y)

    def u_t(self, x, y, t):
        return -self.u(x, y, t)

    def v(self, x, y, t):
        return self._tv(t) * self._base(x, y)

    def grad_v(self, x, y, t):
        return self._lift(self._tv(t), 1) * self._grad_base(x, y)

    def lap_v(self, x, y, t):
        return self._tv(t) * self._lap_base(x, y)

    def v_t(self, x, y, t):
        return np.cos(t) * self._base(x, y)

    def sigma(self, x, y, t):
        return self.grad_v(x, y, t)

    def grad_sigma(self, x, y, t):
        return self._lift(self._tv(t), 2) * self._hess_base(x, y)

    def sigma_t(self, x, y, t):
        return self._lift(np.cos(t), 1) * self._grad_base(x, y)

    def grad_div_sigma(self, x, y, t):
        # div grad phi = -8 pi^2 (phi - 2), so grad div sigma = -8 pi^2 sigma
        return -2.0 * TWO_PI**2 * self.sigma(x, y, t)


class ConstantSolution(ExactSolution):
    """u = c, sigma = 0, v = c**2: a steady state of the unforced system."""

    def __init__(self, c=1.0):
        self.c = float(c)

    def _const(self, x, y, value):
        return np.full(np.broadcast(x, y).shape, value)

    def _zero_vec(self, x, y):
        return np.zeros(np.broadcast(x, y).shape + (2,))

    def u(self, x, y, t):
        return self._const(x, y, self.c)

    def grad_u(self, x, y, t):
        return self._zero_vec(x, y)

    def lap_u(self, x, y, t):
        return self._const(x, y, 0.0)

    def u_t(self, x, y, t):
        return self._const(x, y, 0.0)

    def v(self, x, y, t):
        return self._const(x, y, self.c**2)

    grad_v = grad_u
    lap_v = lap_u
    v_t = u_t

    def sigma(self, x, y, t):
        return self._zero_vec(x, y)

    def grad_sigma(self, x, y, t):
        return np.zeros(np.broadcast(x, y).shape + (2, 2))

    sigma_t = sigma
    grad_div_sigma = sigma


def forcing_terms(exact: ExactSolution):
    """Right-hand sides that make ``exact`` solve the forced system.

    f = u_t - lap u - div(u sigma)
    g = sigma_t - grad div sigma + sigma - grad(u^2)   (rot sigma = 0)
    h = v_t - lap v + v - u^2
    """
    def f(x, y, t):
        u = exact.u(x, y, t)
        div_flux = np.sum(exact.grad_u(x, y, t) * exact.sigma(x, y, t), axis=-1) + u * exact.div_sigma(x, y, t)
        return exact.u_t(x, y, t) - exact.lap_u(x, y, t) - div_flux

    def g(x, y, t):
        u = exact.u(x, y, t)[..., None]
        return (exact.sigma_t(x, y, t) - exact.grad_div_sigma(x, y, t) + exact.sigma(x, y, t)
                - 2.0 * u * exact.grad_u(x, y, t))

    def h(x, y, t):
        return exact.v_t(x, y, t) - exact.lap_v(x, y, t) + exact.v(x, y, t) - exact.u(x, y, t) ** 2

    return Forcing(f, g, h)


# norms tracked per step; "disc" entries measure against the Ritz projection
ERROR_KEYS = (
    "u_l2", "u_h1", "u_disc_l2", "u_disc_h1",
    "sigma_l2", "sigma_h1", "sigma_disc_l2", "sigma_disc_h1",
    "v_l2", "v_h1", "v_disc_l2", "v_disc_h1",
)


@dataclass
class ErrorAccumulator:
    """Per-step error records and their discrete-in-time aggregates.

    ``l2`` aggregates are ``sqrt(k * sum_n e_n^2)``, ``linf`` aggregates are
    ``max_n e_n``.  By default the l2 sum runs over n >= 1 and the max over
    n >= 0.
    """
    k: float
    l2_include_initial: bool = False
    linf_include_initial: bool = True
    steps: list = field(default_factory=list)
    records: list = field(default_factory=list)

    def add(self, n, errors):
        self.steps.append(n)
        self.records.append(dict(errors))

    def record_step(self, state, exact: ExactSolution, projectors: Projectors, quad_degree=6):
        self.add(state.n, step_errors(state, exact, projectors, quad_degree))
        return self

    def series(self, key):
        return np.array([r[key] for r in self.records])

    def _mask(self, include_initial):
        steps = np.array(self.steps)
        return steps >= (0 if include_initial else 1)

    def linf(self, key):
        vals = self.series(key)[self._mask(self.linf_include_initial)]
        return float(vals.max()) if len(vals) else 0.0

    def l2(self, key):
        vals = self.series(key)[self._mask(self.l2_include_initial)]
        return float(np.sqrt(self.k * np.sum(vals**2)))

    def final(self, key):
        return float(self.records[-1][key])


def step_errors(state, exact: ExactSolution, projectors: Projectors, quad_degree=6):
    """Total and discrete errors of every field at ``state.t``."""
    t = state.t
    out = {}
    for name, fn, fld, proj in (("u", state.u, exact.u_field, projectors.u),
                                ("sigma", state.sigma, exact.sigma_field, projectors.sigma),
                                ("v", state.v, exact.v_field, projectors.v)):
        total = norms(fn, fld, t, quad_degree)
        R = proj.project(fld, t)
        disc = norms(FeFunction(fn.space, R.coefficients - fn.coefficients), None, t, quad_degree)
        out[f"{name}_l2"], out[f"{name}_h1"] = total.l2, total.h1
        out[f"{name}_disc_l2"], out[f"{name}_disc_h1"] = disc.l2, disc.h1
    return out


# (table name, accumulator key, aggregate) for the quantities reported per sweep
TABLE_NORMS = (
    ("u_linf_l2", "u_l2", "linf"),
    ("u_disc_linf_l2", "u_disc_l2", "linf"),
    ("u_l2_h1", "u_h1", "l2"),
    ("u_disc_l2_h1", "u_disc_h1", "l2"),
    ("v_linf_h1", "v_h1", "linf"),
    ("v_disc_linf_h1", "v_disc_h1", "linf"),
    ("sigma_linf_l2", "sigma_l2", "linf"),
    ("sigma_l2_h1", "sigma_h1", "l2"),
)


def aggregate(acc: ErrorAccumulator, key, kind):
    return acc.linf(key) if kind == "linf" else acc.l2(key)


@dataclass
class TableRow:
    m: int
    error: float
    order: float | None


def convergence_table(runs):
    """Orders between consecutive ``(m, error)`` rows.

    ``order = log(e_coarse / e_fine) / log(m_fine / m_coarse)``; the first row
    and any row touching an exactly-zero error get ``None``.
    """
    runs = sorted(runs, key=lambda r: r[0])
    if len(runs) < 2:
        raise ValueError("need at least two runs")
    ms = [m for m, _ in runs]
    if len(set(ms)) != len(ms):
        raise ValueError(f"mesh sizes must be distinct, got {ms}")
    rows = [TableRow(runs[0][0], float(runs[0][1]), None)]
    for (mc, ec), (mf, ef) in zip(runs, runs[1:]):
        order = None
        if ec > 0 and ef > 0:
            order = math.log(ec / ef) / math.log(mf / mc)
        rows.append(TableRow(mf, float(ef), order))
    return rows


def fitted_order(runs):
    """Least-squares slope of ``-log(error)`` against ``log(m)``."""
    ms = np.array([m for m, _ in runs], dtype=float)
    es = np.array([e for _, e in runs], dtype=float)
    keep = es > 0
    slope, _ = np.polyfit(np.log(ms[keep]), -np.log(es[keep]), 1)
    return float(slope)


def write_table_csv(path, rows, name="error"):
    """``m,<name>,order`` with 6 significant digits; blank order on the first row."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["m", name, "order"])
        for r in rows:
            w.writerow([r.m, f"{r.error:.6g}", "" if r.order is None else f"{r.order:.6g}"])


@dataclass
class MMSRun:
    m: int
    accumulator: ErrorAccumulator
    reports: list
    final: object


def run_mms(m, config: SolverConfig = None, exact: ExactSolution = None, degrees=(1, 1, 2),
            l2_include_initial=False, linf_include_initial=True, on_step=None):
    """Forced run on the ``m x m`` unit-square mesh with per-step error tracking."""
    config = config or SolverConfig()
    exact = exact or TrigSolution()
    spaces = make_spaces(unit_square_mesh(m), degrees)
    projectors = Projectors(spaces, config.quad_degree)
    initial = initialize_state(spaces, exact.u_field, exact.sigma_field, exact.v_field, 0.0, projectors)
    acc = ErrorAccumulator(config.k, l2_include_initial, linf_include_initial)
    acc.record_step(initial, exact, projectors, config.quad_degree)

    def record(state, report):
        acc.record_step(state, exact, projectors, config.quad_degree)
        if on_step is not None:
            on_step(state, report)

    result = Scheme(spaces, config).run(initial, forcing_terms(exact), on_step=record)
    return MMSRun(m, acc, result.reports, result.final)


def sweep_tables(runs):
    """Convergence tables for every tracked norm from a list of :class:`MMSRun`."""
    return {name: convergence_table([(r.m, aggregate(r.accumulator, key, kind)) for r in runs])
            for name, key, kind in TABLE_NORMS}
