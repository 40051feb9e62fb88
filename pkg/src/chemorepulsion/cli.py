"""Command-line driver: single runs, convergence sweeps and stability studies.

Usage::

    python3 -m chemorepulsion run --m 40 --out results/run
    python3 -m chemorepulsion converge --m 40,50,60,70,80 --out results/tables
    python3 -m chemorepulsion stability --m 20 --k 1e-4 --T 1e-2 --out results/stab

Settings come from built-in defaults, then an optional ``--config`` file of
``key = value`` lines, then command-line flags (later sources win).
"""
from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fem import make_spaces
from .mesh import Mesh, unit_square_mesh
from .mms import (TABLE_NORMS, TableRow, TrigSolution, aggregate, convergence_table, fitted_order, run_mms,
                  write_table_csv)
from .projections import Projectors, initialize_state
from .scheme import NonlinearSolveError, Scheme, SolverConfig
from .sparse import LinearSolveError

logger = logging.getLogger(__name__)

MODES = ("run", "converge", "stability")
PROBLEMS = ("mms", "homogeneous")

# keys accepted in a config file, grouped by the (optional) section they may appear in
SECTIONS = {
    "problem": ("m", "k", "T", "problem"),
    "solver": ("method", "tol", "max_nl_iter", "linear_solver", "linear_tol", "abs_floor",
               "uniqueness_threshold", "quad_degree"),
    "errors": ("l2_include_initial", "linf_include_initial"),
    "output": ("out", "snapshots", "energy_tol", "mass_tol"),
}
TOP_SECTION = "__top__"


class ConfigError(ValueError):
    """Invalid configuration; the message names the key and the constraint."""


@dataclass
class RunConfig:
    mode: str = "run"
    m: list = field(default_factory=lambda: [40])
    k: float = 1e-5
    T: float = 1e-3
    method: str = "newton"
    tol: float = 1e-6
    out: str = "output"
    snapshots: int = 0
    problem: str = "mms"
    max_nl_iter: Optional[int] = None
    linear_solver: str = "direct"
    linear_tol: float = 1e-10
    abs_floor: float = 1e-14
    uniqueness_threshold: float = 1e3
    quad_degree: int = 6
    l2_include_initial: bool = False
    linf_include_initial: bool = True
    # roundoff allowance for "energy never increases", relative to the energy
    energy_tol: float = 1e-13
    mass_tol: float = 1e-10

    def solver_config(self) -> SolverConfig:
        return SolverConfig(k=self.k, T=self.T, method=self.method, tol=self.tol, max_nl_iter=self.max_nl_iter,
                            linear_solver=self.linear_solver, linear_tol=self.linear_tol, abs_floor=self.abs_floor,
                            uniqueness_threshold=self.uniqueness_threshold, quad_degree=self.quad_degree)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _parse_m(text):
    try:
        values = [int(s) for s in str(text).replace(" ", "").split(",") if s]
    except ValueError:
        raise ConfigError(f"m: expected an integer or comma-separated integers, got {text!r}") from None
    if not values:
        raise ConfigError("m: at least one mesh size is required")
    return values


def _convert(key, raw):
    if key == "m":
        return _parse_m(raw)
    kind = _FIELDS[key].type
    text = str(raw).strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind == "int":
            return int(text)
        if kind == "Optional[int]":
            return None if text.lower() in ("", "none", "default") else int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from None
    return text


def read_config_file(path):
    """Key/value pairs from a config file; unknown sections or keys are errors."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc}") from None
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__",
                                       inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive (T vs t)
    try:
        parser.read_string(f"[{TOP_SECTION}]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"config: malformed file {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        allowed = _FIELDS.keys() - {"mode"} if section == TOP_SECTION else SECTIONS.get(section)
        if allowed is None:
            raise ConfigError(f"config: unknown section [{section}] (allowed: {', '.join(SECTIONS)})")
        for key, raw in parser.items(section):
            if key not in allowed:
                where = "" if section == TOP_SECTION else f" in section [{section}]"
                raise ConfigError(f"{key}: unknown key{where}")
            if key in values:
                raise ConfigError(f"{key}: given more than once")
            values[key] = _convert(key, raw)
    return values


def validate(cfg: RunConfig):
    if cfg.mode not in MODES:
        raise ConfigError(f"mode: must be one of {', '.join(MODES)}, got {cfg.mode!r}")
    if cfg.method not in ("picard", "newton"):
        raise ConfigError(f"method: must be picard or newton, got {cfg.method!r}")
    if cfg.problem not in PROBLEMS:
        raise ConfigError(f"problem: must be one of {', '.join(PROBLEMS)}, got {cfg.problem!r}")
    if cfg.linear_solver not in ("direct", "bicgstab"):
        raise ConfigError(f"linear_solver: must be direct or bicgstab, got {cfg.linear_solver!r}")
    for key in ("k", "T", "tol", "linear_tol", "abs_floor", "uniqueness_threshold", "mass_tol"):
        value = getattr(cfg, key)
        if not (math.isfinite(value) and value > 0):
            raise ConfigError(f"{key}: must be a positive number, got {value}")
    if not (math.isfinite(cfg.energy_tol) and cfg.energy_tol >= 0):
        raise ConfigError(f"energy_tol: must be non-negative, got {cfg.energy_tol}")
    if cfg.T < cfg.k:
        raise ConfigError(f"T: must be at least k (T={cfg.T}, k={cfg.k})")
    n = cfg.T / cfg.k
    if abs(n - round(n)) > 1e-9 * n:
        raise ConfigError(f"T: T/k = {n:.12g} must be an integer (T={cfg.T}, k={cfg.k})")
    if any(m < 1 for m in cfg.m):
        raise ConfigError(f"m: mesh sizes must be positive, got {cfg.m}")
    if cfg.mode == "converge":
        if len(cfg.m) < 2:
            raise ConfigError("m: converge mode needs at least two mesh sizes")
        if any(b <= a for a, b in zip(cfg.m, cfg.m[1:])):
            raise ConfigError(f"m: mesh list must be strictly increasing in converge mode, got {cfg.m}")
    elif len(cfg.m) != 1:
        raise ConfigError(f"m: {cfg.mode} mode takes a single mesh size, got {cfg.m}")
    if cfg.snapshots < 0:
        raise ConfigError(f"snapshots: must be >= 0, got {cfg.snapshots}")
    if cfg.max_nl_iter is not None and cfg.max_nl_iter < 1:
        raise ConfigError(f"max_nl_iter: must be >= 1, got {cfg.max_nl_iter}")
    if cfg.quad_degree not in range(1, 7):
        raise ConfigError(f"quad_degree: must be in 1..6, got {cfg.quad_degree}")
    return cfg


def parse_config(mode, path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides`` (flag values, ``None`` = unset)."""
    values = {"mode": mode}
    if path is not None:
        values.update(read_config_file(path))
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        if key not in _FIELDS:
            raise ConfigError(f"{key}: unknown key")
        values[key] = _convert(key, raw) if isinstance(raw, str) else raw
    return validate(RunConfig(**values))


# -- output ---------------------------------------------------------------------

def write_vtk(state, path):
    """Legacy ASCII VTK unstructured grid with point data ``u``, ``v`` and ``sigma``.

    Higher-order dofs are dropped: every field is written at the mesh vertices.
    """
    mesh = state.u.space.mesh
    nv = mesh.n_vertices
    u = state.u.coefficients[:nv]
    v = state.v.coefficients[:nv]
    ns = state.sigma.space.n_scalar
    sig = np.stack([state.sigma.coefficients[:nv], state.sigma.coefficients[ns:ns + nv]], axis=1)
    lines = ["# vtk DataFile Version 3.0", f"chemorepulsion n={state.n} t={state.t!r}", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {nv} double"]
    lines += [f"{x:.17g} {y:.17g} 0" for x, y in mesh.vertices]
    lines.append(f"CELLS {mesh.n_triangles} {4 * mesh.n_triangles}")
    lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    lines.append(f"CELL_TYPES {mesh.n_triangles}")
    lines += ["5"] * mesh.n_triangles
    lines.append(f"POINT_DATA {nv}")
    for name, data in (("u", u), ("v", v)):
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [f"{x:.17g}" for x in data]
    lines.append("VECTORS sigma double")
    lines += [f"{a:.17g} {b:.17g} 0" for a, b in sig]
    try:
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write VTK file {path}: {exc}") from exc


def read_vtk(path):
    """Parse a file written by :func:`write_vtk`; returns ``(mesh, point_data)``."""
    with open(path) as fh:
        tokens = fh.read().split("\n")
    it = iter(tokens[4:])
    data = {}
    points = triangles = None
    for line in it:
        parts = line.split()
        if not parts:
            continue
        head = parts[0]
        if head == "POINTS":
            n = int(parts[1])
            points = np.array([[float(s) for s in next(it).split()[:2]] for _ in range(n)])
        elif head == "CELLS":
            n = int(parts[1])
            triangles = np.array([[int(s) for s in next(it).split()[1:]] for _ in range(n)])
        elif head == "CELL_TYPES":
            for _ in range(int(parts[1])):
                next(it)
        elif head == "SCALARS":
            next(it)  # LOOKUP_TABLE
            data[parts[1]] = np.array([float(next(it)) for _ in range(len(points))])
        elif head == "VECTORS":
            data[parts[1]] = np.array([[float(s) for s in next(it).split()[:2]] for _ in range(len(points))])
    if points is None or triangles is None:
        raise ValueError(f"{path}: missing POINTS or CELLS section")
    return Mesh(points, triangles), data


def _ensure_out(cfg):
    os.makedirs(cfg.out, exist_ok=True)
    return cfg.out


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _num(x):
    return repr(float(x))


# -- commands -------------------------------------------------------------------

def _initial_state(spaces, exact, quad_degree):
    projectors = Projectors(spaces, quad_degree)
    return initialize_state(spaces, exact.u_field, exact.sigma_field, exact.v_field, 0.0, projectors)


def cmd_run(cfg: RunConfig):
    """One run on one mesh; writes the per-step log, errors (forced runs) and VTK snapshots."""
    out = _ensure_out(cfg)
    m = cfg.m[0]
    scfg = cfg.solver_config()
    rows, snaps = [], []

    def on_step(state, report):
        rows.append([report.n, _num(report.t), report.iterations, _num(report.energy),
                     _num(report.energy_law_residual), _num(report.mass), _num(report.v_mass_balance_residual),
                     _num(report.scheme_residual)])
        if cfg.snapshots and state.n % cfg.snapshots == 0:
            snaps.append(state)

    header = ["n", "t", "iterations", "energy", "energy_law_residual", "mass", "v_mass_balance_residual",
              "scheme_residual"]
    status = 0
    try:
        if cfg.problem == "mms":
            run = run_mms(m, scfg, l2_include_initial=cfg.l2_include_initial,
                          linf_include_initial=cfg.linf_include_initial, on_step=on_step)
            acc = run.accumulator
            keys = sorted(acc.records[0])
            _write_rows(os.path.join(out, "errors.csv"), ["n"] + keys,
                        [[n] + [_num(r[k]) for k in keys] for n, r in zip(acc.steps, acc.records)])
            summary = [[name, _num(aggregate(acc, key, kind))] for name, key, kind in TABLE_NORMS]
            _write_rows(os.path.join(out, "error_summary.csv"), ["norm", "error"], summary)
            for name, value in summary:
                print(f"{name:>16s}  {float(value):.6e}")
            final = run.final
        else:
            spaces = make_spaces(unit_square_mesh(m))
            initial = _initial_state(spaces, TrigSolution(), cfg.quad_degree)
            final = Scheme(spaces, scfg).run(initial, None, on_step=on_step).final
    except (NonlinearSolveError, LinearSolveError) as exc:
        logger.error("step %s failed: %s", getattr(exc, "step", "?"), exc)
        status = 1
        final = None
    _write_rows(os.path.join(out, "steps.csv"), header, rows)
    for state in snaps:
        write_vtk(state, os.path.join(out, f"state_{state.n:06d}.vtk"))
    if final is not None:
        write_vtk(final, os.path.join(out, "final.vtk"))
    return status


def cmd_converge(cfg: RunConfig):
    """MMS sweep over the mesh list; one CSV per tracked norm plus fitted orders."""
    out = _ensure_out(cfg)
    scfg = cfg.solver_config()
    done, status = [], 0
    for m in cfg.m:
        logger.info("converge: m=%d", m)
        try:
            run = run_mms(m, scfg, l2_include_initial=cfg.l2_include_initial,
                          linf_include_initial=cfg.linf_include_initial)
        except (NonlinearSolveError, LinearSolveError) as exc:
            logger.error("m=%d: step %s failed: %s", m, getattr(exc, "step", "?"), exc)
            status = 1
            break
        done.append((m, {name: aggregate(run.accumulator, key, kind) for name, key, kind in TABLE_NORMS}))

    summary = []
    for name, _, _ in TABLE_NORMS:
        pairs = [(m, errs[name]) for m, errs in done]
        if len(pairs) >= 2:
            rows = convergence_table(pairs)
            order = fitted_order(pairs)
        else:
            rows = [TableRow(m, e, None) for m, e in pairs]
            order = None
        write_table_csv(os.path.join(out, f"{name}.csv"), rows, name)
        summary.append((name, order))
        text = "n/a" if order is None else f"{order:.4f}"
        print(f"{name:>16s}  fitted order {text}  ({len(pairs)} meshes)")
    _write_rows(os.path.join(out, "summary.csv"), ["norm", "fitted_order"],
                [[n, "" if o is None else f"{o:.6g}"] for n, o in summary])
    return status


def check_stability(energies, masses, energy_tol, mass_tol):
    """First step index violating monotone energy or mass conservation, with a reason."""
    m0 = masses[0]
    for n in range(1, len(energies)):
        if energies[n] - energies[n - 1] > energy_tol * max(abs(energies[n - 1]), 1.0):
            return n, f"energy increased from {energies[n - 1]!r} to {energies[n]!r}"
        if abs(masses[n] - m0) > mass_tol:
            return n, f"mass drifted by {masses[n] - m0:.3e} (limit {mass_tol:.1e})"
    return None


def cmd_stability(cfg: RunConfig):
    """Unforced run from the trigonometric initial data; checks energy decay and mass."""
    out = _ensure_out(cfg)
    spaces = make_spaces(unit_square_mesh(cfg.m[0]))
    initial = _initial_state(spaces, TrigSolution(), cfg.quad_degree)
    scheme = Scheme(spaces, cfg.solver_config())
    mass0 = float(scheme.mass_u @ initial.u.coefficients)
    rows = [[0, _num(0.0), _num(scheme.energy(initial.u, initial.sigma)), "", _num(mass0), 0]]
    energies, masses = [scheme.energy(initial.u, initial.sigma)], [mass0]

    def on_step(state, report):
        rows.append([report.n, _num(report.t), _num(report.energy), _num(report.energy_law_residual),
                     _num(report.mass), report.iterations])
        energies.append(report.energy)
        masses.append(report.mass)
        if cfg.snapshots and state.n % cfg.snapshots == 0:
            write_vtk(state, os.path.join(out, f"state_{state.n:06d}.vtk"))

    status = 0
    try:
        scheme.run(initial, None, on_step=on_step)
    except (NonlinearSolveError, LinearSolveError) as exc:
        logger.error("step %s failed: %s", getattr(exc, "step", "?"), exc)
        status = 1
    _write_rows(os.path.join(out, "stability.csv"),
                ["n", "t", "energy", "energy_law_residual", "mass", "picard_or_newton_iters"], rows)
    bad = check_stability(energies, masses, cfg.energy_tol, cfg.mass_tol)
    if bad is not None:
        logger.error("stability check failed at step %d: %s", *bad)
        print(f"FAIL at step {bad[0]}: {bad[1]}")
        return 1
    if status == 0:
        print(f"OK: {len(energies) - 1} steps, energy {energies[0]:.10g} -> {energies[-1]:.10g}, "
              f"max mass drift {max(abs(x - mass0) for x in masses):.3e}")
    return status


COMMANDS = {"run": cmd_run, "converge": cmd_converge, "stability": cmd_stability}


def build_parser():
    parser = argparse.ArgumentParser(prog="chemorepulsion",
                                     description="Finite-element solver for a chemo-repulsion system.")
    parser.add_argument("--log-level", default="INFO", help="logging level (default INFO)")
    sub = parser.add_subparsers(dest="mode", metavar="{run,converge,stability}")
    sub.required = True
    helps = {"run": "single run (forced trigonometric problem unless problem = homogeneous)",
             "converge": "convergence sweep over a strictly increasing mesh list",
             "stability": "unforced run checking energy decay and mass conservation"}
    for mode in MODES:
        p = sub.add_parser(mode, help=helps[mode])
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--m", help="mesh size m (m x m cells); comma-separated list for converge")
        p.add_argument("--k", type=float, help="time step")
        p.add_argument("--T", type=float, help="final time; T/k must be an integer")
        p.add_argument("--method", choices=("picard", "newton"))
        p.add_argument("--tol", type=float, help="nonlinear relative increment tolerance")
        p.add_argument("--out", help="output directory")
        p.add_argument("--snapshots", type=int, help="write a VTK file every this many steps (0 = final only)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {key: getattr(args, key) for key in ("m", "k", "T", "method", "tol", "out", "snapshots")}
    try:
        cfg = parse_config(args.mode, args.config, overrides)
    except ConfigError as exc:
        parser.error(str(exc))
    return COMMANDS[cfg.mode](cfg)


if __name__ == "__main__":
    sys.exit(main())
