import csv
import math

import numpy as np
import pytest

from pdmpctl.pdmp import path_rng
from pdmpctl.randomization import (
    Estimator,
    JumpKind,
    Lambda0,
    NuPolicy,
    TabularNuFamily,
    doleans_weight,
    dual_cost,
    dual_samples,
    estimate_dual,
    minimize_over_nu,
    simulate_xi,
)
from pdmpctl.toys import constant_cost_toy, constant_rate_toy, switching_toy


@pytest.fixture(scope="module")
def toy():
    return switching_toy()


def paths(model, lam0, nu, n, seed=0, mode=0, a=0.0):
    return [simulate_xi(model, lam0, nu, 0.0, [0.0], mode, a, path_rng(seed, i, "test")) for i in range(n)]


class TestLambda0:
    def test_uniform(self):
        lam = Lambda0.uniform(4, 2.0)
        assert np.allclose(lam.weights, 0.5) and lam.mass == 2.0

    @pytest.mark.parametrize("w", [[], [1.0, 0.0], [1.0, np.inf]])
    def test_invalid(self, w):
        with pytest.raises(ValueError):
            Lambda0(w)

    def test_size_must_match_controls(self, toy):
        with pytest.raises(ValueError):
            simulate_xi(toy, Lambda0.uniform(3), None, 0.0, [0.0], 0, 0.0, path_rng(0, 0))


class TestNuPolicy:
    def test_out_of_bounds(self):
        nu = NuPolicy(lambda s, x, m, i: 5.0, 0.1, 2.0)
        with pytest.raises(ValueError):
            nu(0.0, None, 0, 0)

    def test_bad_bounds(self):
        with pytest.raises(ValueError):
            NuPolicy(lambda *a: 1.0, 0.0, 1.0)


class TestWeight:
    def test_unit_nu_gives_unit_weight(self, toy):
        for p in paths(toy, Lambda0.uniform(2), None, 50):
            assert doleans_weight(p, NuPolicy.one(), Lambda0.uniform(2)) == 1.0

    def test_constant_nu_closed_form(self, toy):
        lam0 = Lambda0.uniform(2, 1.5)
        for p in paths(toy, lam0, None, 50, seed=1):
            n_ctl = len(p.control_jumps)
            expected = math.exp(-lam0.mass * 1.0) * 2.0**n_ctl
            assert doleans_weight(p, NuPolicy.constant(2.0), lam0) == pytest.approx(expected, rel=1e-12)

    def test_no_control_jumps(self, toy):
        lam0 = Lambda0.uniform(2, 1.0)
        quiet = [p for p in paths(toy, lam0, None, 200, seed=2) if not p.control_jumps]
        assert quiet
        for p in quiet:
            assert doleans_weight(p, NuPolicy.constant(2.0), lam0) == pytest.approx(math.exp(-1.0))

    def test_non_constant_rule_matches_constant(self, toy):
        lam0 = Lambda0.uniform(2)
        const = NuPolicy.constant(1.7)
        same = NuPolicy(lambda s, x, m, i: 1.7, 1.0, 1.7, False)
        for p in paths(toy, lam0, None, 20, seed=3):
            assert doleans_weight(p, same, lam0) == pytest.approx(doleans_weight(p, const, lam0), rel=1e-10)


class TestSimulation:
    def test_control_jumps_are_poisson(self):
        m = constant_rate_toy(rate=0.5)
        lam0 = Lambda0([1.5])
        counts = np.array([len(p.control_jumps) for p in paths(m, lam0, None, 4000)])
        assert abs(counts.mean() - 1.5) < 4 * math.sqrt(1.5 / 4000)
        assert abs(counts.var() - 1.5) < 0.15

    def test_doubling_nu_doubles_intensity(self):
        m = constant_rate_toy(rate=0.5)
        lam0 = Lambda0([1.5])
        counts = np.array([len(p.control_jumps) for p in paths(m, lam0, NuPolicy.constant(2.0), 4000)])
        assert abs(counts.mean() - 3.0) < 4 * math.sqrt(3.0 / 4000)

    def test_mode_jumps_keep_their_rate(self):
        m = constant_rate_toy(rate=0.8)
        counts = np.array([len(p.mode_jumps) for p in paths(m, Lambda0([2.0]), None, 4000)])
        assert abs(counts.mean() - 0.8) < 4 * math.sqrt(0.8 / 4000)

    def test_segments_tile_horizon(self, toy):
        for p in paths(toy, Lambda0.uniform(2, 3.0), None, 20):
            ends = [s.end for s in p.segments]
            starts = [s.start for s in p.segments]
            assert starts[0] == 0.0 and ends[-1] == 1.0
            assert starts[1:] == ends[:-1]
            assert len(p.jumps) == len(p.segments) - 1
            assert all(k in (JumpKind.MODE, JumpKind.CONTROL) for _, k, _ in p.jumps)


class TestEstimators:
    def test_dual_cost_constant(self):
        m = constant_cost_toy(2.0)
        for p in paths(m, Lambda0.uniform(2), None, 10):
            assert dual_cost(m, p) == pytest.approx(2.0)

    def test_dual_cost_terminal(self, toy):
        lam0 = Lambda0.uniform(2, 1e-9)
        p = simulate_xi(toy, lam0, None, 1.0, [0.0], 0, 0.0, path_rng(0, 0))
        assert dual_cost(toy, p) == 0.5

    def test_direct_equals_weighted_for_unit_nu(self, toy):
        args = (toy, Lambda0.uniform(2), NuPolicy.one(), 0.0, [0.0], 0, 0.0, 200, 9)
        d = dual_samples(*args, method=Estimator.DIRECT)
        w = dual_samples(*args, method=Estimator.WEIGHTED)
        assert np.array_equal(d, w)

    def test_direct_and_weighted_agree(self, toy):
        lam0 = Lambda0.uniform(2)
        nu = NuPolicy.constant(1.5)
        d, sd = estimate_dual(toy, lam0, nu, 0.0, [0.0], 0, 0.0, 3000, 10, Estimator.DIRECT)
        w, sw = estimate_dual(toy, lam0, nu, 0.0, [0.0], 0, 0.0, 3000, 11, Estimator.WEIGHTED)
        assert abs(d - w) <= 4 * math.hypot(sd, sw)

    def test_needs_two_paths(self, toy):
        with pytest.raises(ValueError):
            estimate_dual(toy, Lambda0.uniform(2), NuPolicy.one(), 0.0, [0.0], 0, 0.0, 1, 0)

    def test_steering_intensity_lowers_cost(self, toy):
        lam0 = Lambda0.uniform(2)
        fam = TabularNuFamily(toy)
        steer = fam.policy(np.log([[0.01, 20.0], [20.0, 0.01]]))
        base, s0 = estimate_dual(toy, lam0, NuPolicy.one(), 0.0, [0.0], 0, 0.0, 2000, 12)
        good, s1 = estimate_dual(toy, lam0, steer, 0.0, [0.0], 0, 0.0, 2000, 12)
        assert good < base - 3 * math.hypot(s0, s1)


class TestSearch:
    def test_flat_objective(self, tmp_path):
        m = constant_cost_toy(0.0)
        res = minimize_over_nu(m, Lambda0.uniform(2), TabularNuFamily(m, by_mode=False),
                               0.0, [0.0], 0, 0.0, n_paths=20, seed=1, budget=15)
        assert res.value == 0.0 and res.stderr == 0.0
        assert res.evaluations <= 15

    def test_search_improves_and_traces(self, toy, tmp_path):
        lam0 = Lambda0.uniform(2)
        fam = TabularNuFamily(toy)
        res = minimize_over_nu(toy, lam0, fam, 0.0, [0.0], 0, 0.0, n_paths=200, seed=2, budget=25)
        assert res.search_value <= res.trace[0][2]
        assert res.evaluations == len(res.trace) <= 25
        res.write_trace(tmp_path / "trace.csv")
        with open(tmp_path / "trace.csv", newline="") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["iteration", "parameters", "mean", "stderr"]
        assert len(rows) == res.evaluations + 1
        assert len(rows[1][1].split()) == 4

    def test_family_clips(self, toy):
        nu = TabularNuFamily(toy).policy(np.full(4, 50.0))
        assert np.all(nu(0.0, None, 0, 0) == 20.0)
