"""Replace the control by a jump process and optimize its intensity.

Under the reference law the control switches at the epochs of a Poisson
clock.  Reweighting those epochs by a positive table nu(mode, control)
changes the law, and the expected cost under the best table approaches the
primal value from above.
"""
from pdmpctl.primal import solve
from pdmpctl.randomization import Estimator, Lambda0, NuPolicy, TabularNuFamily, estimate_dual, minimize_over_nu
from pdmpctl.toys import switching_toy

model = switching_toy()
lam0 = Lambda0.uniform(2)
V0 = solve(model, n_times=101)(0.0, [0.0], 0)
print(f"primal value from mode 0 in the dark: {V0:.4f}")

for nu in (NuPolicy.one(), NuPolicy.constant(2.0)):
    d = estimate_dual(model, lam0, nu, 0.0, [0.0], 0, 0.0, 2000, 7, Estimator.DIRECT)
    w = estimate_dual(model, lam0, nu, 0.0, [0.0], 0, 0.0, 2000, 8, Estimator.WEIGHTED)
    print(f"nu = {nu.name:9s} direct {d[0]:.4f} +- {d[1]:.4f}   reweighted {w[0]:.4f} +- {w[1]:.4f}")

res = minimize_over_nu(model, lam0, TabularNuFamily(model), 0.0, [0.0], 0, 0.0,
                       n_paths=500, seed=3, budget=40)
print(f"after {res.evaluations} evaluations: J = {res.value:.4f} +- {res.stderr:.4f} (fresh paths)")
print("best table (rows = modes, columns = controls):")
print(res.nu(0.0, None, 0, 0).round(3), res.nu(0.0, None, 1, 0).round(3))
print(f"gap to primal: {res.value - V0:+.4f}")
