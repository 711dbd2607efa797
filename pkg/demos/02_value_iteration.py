"""Primal value of a two-mode switching model, three ways.

The model has a costly mode 0 that it leaves slowly in the dark and quickly
under light, and a cheap mode 1.  We compute the value by iterating the
first-jump Bellman operator, check it against a brute-force expansion over
a few jumps, and finally test the dynamic programming identity by Monte
Carlo.
"""
import numpy as np

from pdmpctl.primal import brute_force_value, dpp_residual, solve
from pdmpctl.toys import switching_toy

model = switching_toy()
V = solve(model, n_times=101)
print("value iteration residuals:", " ".join(f"{r:.1e}" for r in V.residuals))
ratios = np.array(V.residuals[1:]) / np.array(V.residuals[:-1])
print(f"observed contraction factor about {ratios[-3:].mean():.3f}")

B = brute_force_value(model, times=V.times[::10], jump_cap=5)
gap = max(abs(B(t, [0.0], m) - V(t, [0.0], m)) for t in V.times[::10] for m in model.modes)
print(f"brute force (5 jumps) vs iteration: sup gap {gap:.2e}, truncation bound {B.meta['truncation_bound']:.1e}")

for m in model.modes:
    print(f"V(0, mode {m}) = {V(0.0, [0.0], m):.5f}")

r, se = dpp_residual(V, model, 0.0, [0.0], 0, n_paths=4000, seed=1)
print(f"dynamic programming residual at (0, mode 0): {r:+.4f} +- {se:.4f}")
