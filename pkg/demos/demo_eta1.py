"""
Steering the drag double integrator in free final time
======================================================

Solve the additive-noise transfer from rest at the origin to rest at unit
position, then roll the feedback policy out on the nonlinear SDE.
"""

import logging

import numpy as np

from fftcs import double_integrator_spec, run
from fftcs.montecarlo import validate

logging.basicConfig(level=logging.ERROR)

# %%
# The built-in instance: N = 30 intervals, |u| <= 5 as two half-spaces with
# a 10% violation budget each, eta = 1 pricing the final time.
spec = double_integrator_spec(eta=1.0)
print(f"{spec.N} intervals, dilation in [{spec.sigma_min}, {spec.sigma_max}]")

# %%
# The loop warm-starts without chance constraints, then iterates until both
# the merit change and the nonlinear defects drop below 1e-5.
result = run(spec, callback=lambda r: print(
    f"iter {r.iteration:2d}  dJ={r.DeltaJ:+.2e}  chi={r.chi:.1e}  t_f={r.t_f:.4f}"))
print(f"\n{result.status} after {result.iterations} iterations, t_f = {result.t_f:.4f}")

# %%
# The dilation profile shows where the solver stretches or compresses time.
sol = result.solution
for k in range(0, spec.N, 5):
    print(f"  k={k:2d}  sigma={sol.sigma[k]:.3f}  v={sol.v[k, 0]:+.3f}  "
          f"K={np.array2string(result.gains[k, 0], precision=3)}")

# %%
# Monte Carlo check with 1000 Milstein rollouts: the planned covariance
# against what the nonlinear system actually does under the policy.
report = validate(spec.dynamics, result, spec)
planned = np.sqrt(np.diag(sol.Sigma_x[-1]))
print(f"terminal std: planned {np.round(planned, 4)}, empirical {np.round(report.terminal_std, 4)}")
print(f"worst-case control violation rate {report.worst_case_control_risk:.3f}, "
      f"Cantelli bound {report.worst_case_control_dr_risk:.3f}")
