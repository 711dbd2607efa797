"""Penalized backward equation: one value per control, squeezed together.

For penalty n the solution v^n(s, mode, a) is the value with the control
frozen at a, pulled down toward the best alternative at rate n.  As n
grows the dependence on a disappears and the common limit is the primal
value.
"""
import numpy as np

from pdmpctl.bsde import PenalizedScheme, StabilityError, compare_to_primal, grid_samples, solve_penalized_grid
from pdmpctl.primal import solve
from pdmpctl.randomization import Lambda0
from pdmpctl.toys import switching_toy

model = switching_toy()
lam0 = Lambda0.uniform(2)
V = solve(model, n_times=201)
samples = grid_samples(V, every=10)
print(f"primal V(0, mode 0) = {V(0.0, [0.0], 0):.4f}")
print(" n    v(a=0)   v(a=1)   sup error  control spread")
for n in (0, 1, 2, 5, 10, 50):
    sol = solve_penalized_grid(model, lam0, PenalizedScheme(n, dt=0.005))
    v = sol.values_all(0.0, [0.0], 0)
    rep = compare_to_primal(sol, V, samples)
    print(f"{n:2d}  {v[0]:.4f}   {v[1]:.4f}   {rep['sup_error']:.4f}     {rep['control_spread']:.4f}")

try:
    solve_penalized_grid(model, lam0, PenalizedScheme(500, dt=0.005))
except StabilityError as exc:
    print("large penalties need smaller steps:", exc)
print("penalty mass E[K_T] at n=50 (mode 0):",
      np.round(solve_penalized_grid(model, lam0, PenalizedScheme(50)).penalty_mass[0, 0], 4))
