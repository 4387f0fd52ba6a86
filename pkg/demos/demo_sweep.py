"""
How the price on time shapes the final time
===========================================

Sweep the final-time weight eta and watch t_f shrink as time gets expensive.
"""

import logging
import time

from fftcs import double_integrator_spec, run

logging.basicConfig(level=logging.ERROR)

etas = [0.0, 0.2, 0.5, 0.8, 1.0, 2.0, 10.0]

# %%
# Each eta is an independent solve from the same straight-line guess.
rows = []
t0 = time.perf_counter()
for eta in etas:
    res = run(double_integrator_spec(eta=eta))
    rows.append((eta, res.t_f, res.iterations, res.converged, res.solution.sigma))
print(f"sweep took {time.perf_counter() - t0:.0f} s\n")

# %%
# When eta is 0 only the covariance cost is left. Larger eta pushes the
# dilation toward sigma_min.
print(f"{'eta':>5} {'t_f':>7} {'iters':>5}  min/max sigma")
for eta, tf, it, ok, sig in rows:
    flag = "" if ok else "  (not converged)"
    print(f"{eta:5g} {tf:7.4f} {it:5d}  {sig.min():.3f}/{sig.max():.3f}{flag}")

tfs = [r[1] for r in rows]
print("\nnonincreasing in eta:", all(b <= a + 1e-9 for a, b in zip(tfs, tfs[1:])))
