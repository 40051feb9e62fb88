"""Forced run against the trigonometric manufactured solution on a 16x16 mesh.

Prints the per-step errors of each field and the final energy.
"""
from chemorepulsion import SolverConfig, run_mms

config = SolverConfig(k=1e-3, T=1e-2, method="newton")
run = run_mms(16, config)
acc = run.accumulator

print(f"{len(run.reports)} steps, final t = {run.final.t:.3g}")
for key in ("u_l2", "u_h1", "sigma_l2", "v_h1"):
    print(f"  {key:9s} final {acc.final(key):.3e}   max over steps {acc.linf(key):.3e}")
print(f"Newton iterations per step: {[r.iterations for r in run.reports]}")
