"""Spatial convergence on a short forced run, with the time step small enough to be negligible.

Fine meshes take minutes; this uses m = 8, 12, 16, 24 so it finishes in seconds.
"""
from chemorepulsion import SolverConfig, run_mms, sweep_tables

config = SolverConfig(k=1e-5, T=1e-4, method="newton", tol=1e-6)
runs = [run_mms(m, config) for m in (8, 12, 16, 24)]
for name, rows in sweep_tables(runs).items():
    orders = ", ".join("-" if r.order is None else f"{r.order:.3f}" for r in rows)
    print(f"{name:16s} errors {rows[0].error:.2e} .. {rows[-1].error:.2e}   orders {orders}")
