import csv
import json

import numpy as np
import pytest

from pdmpctl.bsde import (
    PenalizedScheme,
    Representation,
    StabilityError,
    coefficient_basis,
    compare_to_primal,
    constant_basis,
    constraint_violation,
    grid_samples,
    indicator_basis,
    restrict_controls,
    solve_penalized_grid,
    solve_penalized_regression,
)
from pdmpctl.primal import brute_force_value, solve
from pdmpctl.randomization import Lambda0, NuPolicy, estimate_dual
from pdmpctl.toys import constant_cost_toy, switching_toy

LAM0 = Lambda0.uniform(2)


@pytest.fixture(scope="module")
def toy():
    return switching_toy()


@pytest.fixture(scope="module")
def ladder(toy):
    return {n: solve_penalized_grid(toy, LAM0, PenalizedScheme(n, dt=0.005)) for n in (0, 1, 5, 50)}


class TestStability:
    def test_refuses_unstable_step(self, toy):
        with pytest.raises(StabilityError, match="reduce the time step"):
            solve_penalized_grid(toy, LAM0, PenalizedScheme(10, dt=0.1))

    def test_negative_penalty(self, toy):
        with pytest.raises(ValueError):
            solve_penalized_grid(toy, LAM0, PenalizedScheme(-1))

    def test_stability_recorded(self, ladder):
        assert ladder[50].diagnostics["stability"] == pytest.approx(0.005 * 51)


class TestGrid:
    def test_zero_costs(self):
        sol = solve_penalized_grid(constant_cost_toy(0.0), LAM0, PenalizedScheme(5, dt=0.01))
        assert np.all(sol.table() == 0.0)

    def test_constant_cost_is_exact(self):
        sol = solve_penalized_grid(constant_cost_toy(1.5), LAM0, PenalizedScheme(5, dt=0.01))
        tab = sol.table()
        assert np.allclose(tab, 1.5 * (1 - sol.times)[:, None, None, None], atol=1e-12)

    def test_terminal_condition(self, toy, ladder):
        tab = ladder[5].table()
        assert np.array_equal(tab[-1, :, 0, 0], [0.5, 0.0])
        assert np.array_equal(tab[-1, :, 0, 0], tab[-1, :, 0, 1])

    @pytest.mark.parametrize("a", [0.0, 1.0])
    def test_no_penalty_is_frozen_control(self, toy, ladder, a):
        frozen = brute_force_value(restrict_controls(toy, [a]), times=np.array([0.0, 0.5]), jump_cap=5)
        for t in (0.0, 0.5):
            for mode in toy.modes:
                assert ladder[0].value(t, [0.0], mode, a) == pytest.approx(frozen(t, [0.0], mode), abs=2e-3)

    def test_values_decrease_with_penalty(self, ladder):
        tabs = [ladder[n].table() for n in (0, 1, 5, 50)]
        for lo, hi in zip(tabs[1:], tabs[:-1]):
            assert np.all(lo <= hi + 1e-12)

    def test_constraint_violation_shrinks(self, ladder, toy):
        V = solve(toy, n_times=201)
        samples = grid_samples(V, every=10)
        viol = [constraint_violation(ladder[n], samples) for n in (0, 1, 5, 50)]
        assert all(b <= a + 1e-12 for a, b in zip(viol, viol[1:]))
        assert viol[-1] <= 1e-2

    def test_penalty_mass_nonnegative(self, ladder):
        assert ladder[0].diagnostics["penalty_mass_max"] == 0.0
        assert np.all(ladder[50].penalty_mass >= 0)

    def test_limit_below_dual(self, toy, ladder):
        mean, se = estimate_dual(toy, LAM0, NuPolicy.one(), 0.0, [0.0], 0, 0.0, 2000, 5)
        assert ladder[50].value(0.0, [0.0], 0, 0.0) <= mean + 3 * se

    def test_limit_approaches_primal(self, toy, ladder):
        V = solve(toy, n_times=201)
        report = compare_to_primal(ladder[50], V, grid_samples(V, every=10))
        assert report["sup_error"] < 2e-2

    def test_files(self, ladder, tmp_path):
        ladder[1].to_files(tmp_path / "b.csv", tmp_path / "b.json", manifest={"seed": 1})
        with open(tmp_path / "b.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["s", "mode", "a", "value"]
        assert len(rows) == 1 + ladder[1].times.size * 2 * 2
        side = json.loads((tmp_path / "b.json").read_text())
        assert side["n_penalty"] == 1 and side["manifest"] == {"seed": 1}


class TestCompare:
    def test_identical_gives_zero(self, toy):
        frozen = restrict_controls(toy, [1.0])
        sol = solve_penalized_grid(frozen, Lambda0([1.0]), PenalizedScheme(3, dt=0.01))
        report = compare_to_primal(sol, sol.grids[0], grid_samples(sol.grids[0], every=5))
        assert report["sup_error"] == 0.0 and report["control_spread"] == 0.0


class TestRegression:
    def test_constant_basis_on_homogeneous_toy(self):
        m = constant_cost_toy(1.0)
        scheme = PenalizedScheme(2, dt=0.05, representation=Representation.REGRESSION,
                                 basis=constant_basis(), n_paths=200)
        sol = solve_penalized_regression(m, LAM0, scheme, seed=1)
        for t in (0.0, 0.5):
            assert sol.value(t, [0.0], 0, 0.0) == pytest.approx(1.0 - t, abs=1e-10)

    def test_rich_basis_matches_grid(self, toy):
        grid = solve_penalized_grid(toy, LAM0, PenalizedScheme(5, dt=0.02))
        scheme = PenalizedScheme(5, dt=0.02, representation=Representation.REGRESSION,
                                 basis=indicator_basis(toy), n_paths=4000)
        reg = solve_penalized_regression(toy, LAM0, scheme, seed=2)
        for t in (0.0, 0.5):
            for mode in toy.modes:
                for a in toy.controls:
                    assert reg.value(t, [0.0], mode, a) == pytest.approx(grid.value(t, [0.0], mode, a), abs=5e-2)

    def test_path_budget_check(self, toy):
        scheme = PenalizedScheme(1, representation=Representation.REGRESSION,
                                 basis=coefficient_basis(toy, 1), n_paths=50)
        with pytest.raises(ValueError, match="path budget"):
            solve_penalized_regression(toy, LAM0, scheme)

    def test_off_grid_time(self):
        m = constant_cost_toy(1.0)
        scheme = PenalizedScheme(1, dt=0.1, representation=Representation.REGRESSION,
                                 basis=constant_basis(), n_paths=100)
        sol = solve_penalized_regression(m, LAM0, scheme, seed=0)
        with pytest.raises(ValueError, match="time grid"):
            sol.value(0.05, [0.0], 0, 0.0)
