import numpy as np
import pytest

from pdmpctl.pdmp import AffineDrift, PdmpModel
from pdmpctl.primal import (
    Lattice,
    ValueGrid,
    a_priori_bound,
    apply_T,
    bellman_update,
    brute_force_value,
    dpp_residual,
    solve,
)
from pdmpctl.toys import constant_cost_toy, switching_toy, tabular_toy


def one_mode(rate=2.0, cost=1.0, terminal=0.5, horizon=1.0):
    return tabular_toy([[rate]], [[1.0]], [[cost]], [terminal], [0.0], horizon)


def grid_of(model, value, n_times=11):
    times = np.linspace(0, model.horizon, n_times)
    return ValueGrid(times, Lattice((), model.n_coeffs), model.modes,
                     np.full((n_times, len(model.modes), 1), float(value)))


def decaying_terminal(K=2):
    """Pure heat flow, no jumps, terminal cost equal to the first coefficient."""
    return PdmpModel(
        n_coeffs=K,
        controls=[0.0],
        drift=lambda mode, a: AffineDrift.zero(K),
        rate=lambda x, mode, a: np.zeros(np.shape(x)[:-1]),
        kernel=lambda x, mode, a: ([0], np.ones(np.shape(x)[:-1] + (1,))),
        running_cost=lambda x, mode, a: np.zeros(np.shape(x)[:-1]),
        terminal_cost=lambda x, mode: np.asarray(x)[..., 0],
        rate_bound=1e-9,
        horizon=0.1,
        cost_bounds=(0.0, 1.0),
        modes=(0,),
    )


class TestApplyT:
    @pytest.mark.parametrize("t", [0.0, 0.4, 0.9])
    def test_one_jump_closed_form(self, t):
        lam, f, g, c = 2.0, 1.0, 0.5, 0.7
        m = one_mode(lam, f, g)
        L = 1.0 - t
        expected = f * (1 - np.exp(-lam * L)) / lam + c * (1 - np.exp(-lam * L)) + np.exp(-lam * L) * g
        got = apply_T(m, grid_of(m, c, 101), t, [0.0], 0, substeps=4)
        assert got == pytest.approx(expected, abs=1e-8)

    def test_terminal_time_returns_terminal_cost(self):
        m = one_mode()
        assert apply_T(m, grid_of(m, 3.0), 1.0, [0.0], 0) == 0.5

    def test_time_outside_horizon(self):
        m = one_mode()
        with pytest.raises(ValueError):
            apply_T(m, grid_of(m, 0.0), 1.5, [0.0], 0)

    def test_monotone(self):
        m = switching_toy()
        lo, hi = grid_of(m, 0.0), grid_of(m, 0.0)
        rng = np.random.default_rng(0)
        lo.values = rng.uniform(-1, 1, lo.values.shape)
        hi.values = lo.values + rng.uniform(0, 1, lo.values.shape)
        assert np.all(bellman_update(m, lo) <= bellman_update(m, hi) + 1e-14)


class TestSolve:
    def test_zero_costs_give_zero(self):
        V = solve(constant_cost_toy(0.0), n_times=21)
        assert np.max(np.abs(V.values)) == 0.0

    @pytest.mark.parametrize("c", [0.5, 2.0])
    def test_constant_running_cost(self, c):
        V = solve(constant_cost_toy(c), n_times=21)
        expected = c * (1.0 - V.times)
        assert np.allclose(V.values, expected[:, None, None], atol=1e-8)

    def test_a_priori_bound(self):
        m = switching_toy()
        V = solve(m, n_times=51)
        assert np.max(np.abs(V.values)) <= a_priori_bound(m) + 1e-12
        assert a_priori_bound(m) == pytest.approx(1.1 + 0.5)

    def test_residuals_shrink(self):
        V = solve(switching_toy(), n_times=51)
        r = np.asarray(V.residuals)
        assert r[-1] <= 1e-8 and np.all(r[1:] < r[:-1])
        assert V.meta["converged"]

    def test_light_helps_in_costly_mode(self):
        m = switching_toy()
        V = solve(m, n_times=51)
        dark = tabular_toy([[0.1], [0.3]], [[0, 1], [1, 0]], [[1.0], [0.0]], [0.5, 0.0], [0.0])
        Vd = solve(dark, n_times=51)
        assert V(0.0, [0.0], 0) < Vd(0.0, [0.0], 0)

    def test_field_lattice(self):
        m = decaying_terminal()
        lat = Lattice((np.linspace(-1, 1, 5),), 2)
        V = solve(m, lat, n_times=11, substeps=2)
        for t in (0.0, 0.05):
            for x1 in (-0.8, 0.3):
                assert V(t, [x1, 0.0], 0) == pytest.approx(np.exp(-np.pi**2 * (0.1 - t)) * x1, abs=1e-9)

    def test_dpp_residual_small(self):
        m = switching_toy()
        V = solve(m, n_times=101)
        r, se = dpp_residual(V, m, 0.0, [0.0], 0, n_paths=2000, seed=3)
        assert abs(r) <= 3 * se + 1e-3


class TestValueGrid:
    def test_round_trip(self, tmp_path):
        V = solve(switching_toy(), n_times=11)
        V.to_files(tmp_path / "v.csv", tmp_path / "v.json")
        W = ValueGrid.from_files(tmp_path / "v.csv", tmp_path / "v.json")
        assert W.modes == V.modes
        assert np.allclose(W.values, V.values, rtol=1e-11, atol=0)
        assert W.residuals == pytest.approx(V.residuals)

    def test_lattice_round_trip(self, tmp_path):
        V = solve(decaying_terminal(), Lattice((np.linspace(-1, 1, 3),), 2), n_times=5)
        V.to_files(tmp_path / "v.csv", tmp_path / "v.json")
        W = ValueGrid.from_files(tmp_path / "v.csv", tmp_path / "v.json")
        assert np.allclose(W.values, V.values, rtol=1e-11)
        assert W(0.0, [0.5, 0.0], 0) == pytest.approx(V(0.0, [0.5, 0.0], 0))

    def test_no_extrapolation(self):
        V = solve(decaying_terminal(), Lattice((np.linspace(-1, 1, 3),), 2), n_times=5)
        with pytest.raises(ValueError, match="outside"):
            V(0.0, [1.5, 0.0], 0)
        with pytest.raises(ValueError, match="time"):
            V(0.2, [0.0, 0.0], 0)

    def test_bad_lattice(self):
        with pytest.raises(ValueError):
            Lattice((np.array([1.0, 0.0]),), 1)
        with pytest.raises(ValueError):
            Lattice((np.arange(2.0), np.arange(2.0)), 1)


class TestBruteForce:
    def test_constant_cost(self):
        for cap in (2, 5):
            V = brute_force_value(constant_cost_toy(1.0), times=np.linspace(0, 1, 5), jump_cap=cap)
            gap = (1 - V.times)[:, None] - V.values[:, :, 0]
            assert np.all(gap >= -1e-12) and gap.max() <= V.meta["truncation_bound"]
        assert gap.max() < 1e-3

    def test_matches_solver(self):
        m = switching_toy()
        times = np.linspace(0, 1, 11)
        B = brute_force_value(m, times=times, jump_cap=5)
        V = solve(m, n_times=101)
        for i, t in enumerate(times):
            for mi, mode in enumerate(m.modes):
                assert B.values[i, mi, 0] == pytest.approx(V(t, [0.0], mode), abs=1e-3)
        assert B.meta["truncation_bound"] < 1e-4

    def test_truncation_tolerance(self):
        with pytest.raises(ValueError, match="truncation"):
            brute_force_value(one_mode(rate=10.0), jump_cap=1, tol=1e-6)
