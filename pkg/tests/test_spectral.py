import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pdmpctl.spectral import (
    NormKind,
    SpectralField,
    eval_pointwise,
    h1_tail,
    inner,
    norm,
    project,
    semigroup_apply,
)

coeff_vectors = arrays(np.float64, 16, elements=st.floats(-1e3, 1e3, allow_nan=False))


def f_k(k, K=4):
    return SpectralField.basis(k, K)


class TestProject:
    def test_basis_function_recovered(self):
        v = project(lambda z: np.sqrt(2) * np.sin(np.pi * z), 4, panels=256)
        assert np.allclose(v.coeffs, [1, 0, 0, 0], atol=1e-10)

    def test_zero_function(self):
        assert np.all(project(lambda z: 0 * z, 7).coeffs == 0)

    def test_parabola_first_coefficient(self):
        # closed form of the first sine coefficient of z(1 - z)
        v = project(lambda z: z * (1 - z), 1, panels=1024)
        assert v.coeffs[0] == pytest.approx(4 * np.sqrt(2) / np.pi**3, abs=1e-10)
        assert v.coeffs[0] == pytest.approx(0.182442, abs=1e-6)

    def test_odd_panels_rejected(self):
        with pytest.raises(ValueError):
            project(lambda z: z, 4, panels=7)

    def test_nonfinite_samples_reported(self):
        with pytest.raises(ValueError, match="z=0.5"), np.errstate(divide="ignore"):
            project(lambda z: 1 / (z - 0.5), 4, panels=8)

    def test_band_limited_round_trip(self):
        c = np.array([0.3, -1.2, 0.0, 2.5, 0.7])
        v = project(lambda z: eval_pointwise(c, z), 5, panels=512)
        assert np.allclose(v.coeffs, c, atol=1e-10)


class TestEval:
    def test_dirichlet_boundary(self):
        c = np.random.default_rng(0).normal(size=9)
        assert eval_pointwise(c, 0.0) == pytest.approx(0.0, abs=1e-12)
        assert eval_pointwise(c, 1.0) == pytest.approx(0.0, abs=1e-12)

    def test_first_mode_midpoint(self):
        assert eval_pointwise(f_k(1), 0.5) == pytest.approx(np.sqrt(2), abs=1e-12)

    def test_second_mode_quarter(self):
        assert eval_pointwise(f_k(2), 0.25) == pytest.approx(1.414214, abs=1e-6)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            eval_pointwise(f_k(1), 1.5)


class TestNorms:
    def test_unit_mode(self):
        assert norm(f_k(1), NormKind.L2) == pytest.approx(1.0)
        assert norm(f_k(1), NormKind.MINUS1) == pytest.approx(1 / np.sqrt(1 + np.pi**2), abs=1e-15)
        assert norm(f_k(1), NormKind.MINUS1) == pytest.approx(0.303314, abs=1e-6)

    @given(coeff_vectors)
    def test_ordering(self, c):
        lo, mid, hi = (norm(c, k) for k in (NormKind.MINUS1, NormKind.L2, NormKind.H1V))
        assert lo <= mid * (1 + 1e-12) and mid <= hi * (1 + 1e-12)

    def test_ordering_on_1000_fields(self):
        c = np.random.default_rng(1).normal(size=(1000, 32))
        lo, mid, hi = (norm(c, k) for k in (NormKind.MINUS1, NormKind.L2, NormKind.H1V))
        assert np.all(lo <= mid) and np.all(mid <= hi)


class TestInner:
    def test_orthogonal_modes(self):
        assert inner(f_k(1), f_k(2)) == 0.0

    def test_scaling(self):
        assert inner(f_k(1) * 2.0, f_k(1) * 3.0) == pytest.approx(6.0)

    @given(coeff_vectors)
    def test_self_inner_is_squared_norm(self, c):
        assert inner(c, c) == pytest.approx(norm(c) ** 2, rel=1e-12, abs=1e-12)

    def test_mismatched_dimension(self):
        with pytest.raises(ValueError):
            inner(f_k(1, 4), f_k(1, 5))


class TestSemigroup:
    def test_zero_time_identity(self):
        c = np.arange(1.0, 6.0)
        assert np.array_equal(semigroup_apply(c, 0.0).coeffs, c)

    def test_first_mode_decay(self):
        out = semigroup_apply(f_k(1), 0.1, 1.0)
        assert out.coeffs[0] == pytest.approx(np.exp(-0.1 * np.pi**2), abs=1e-15)
        assert out.coeffs[0] == pytest.approx(0.372708, abs=1e-6)

    @settings(max_examples=50)
    @given(coeff_vectors, st.floats(0, 0.5), st.floats(0, 0.5), st.floats(0.1, 3.0))
    def test_semigroup_law(self, c, r1, r2, diff):
        two = semigroup_apply(semigroup_apply(c, r1, diff), r2, diff).coeffs
        one = semigroup_apply(c, r1 + r2, diff).coeffs
        assert np.allclose(two, one, rtol=1e-12, atol=1e-14 * (1 + np.abs(c).max()))

    def test_contraction_equality_on_first_mode(self):
        for r in (0.01, 0.1, 1.0):
            out = semigroup_apply(f_k(1), r)
            for kind in (NormKind.L2, NormKind.MINUS1):
                assert norm(out, kind) == pytest.approx(np.exp(-r * np.pi**2) * norm(f_k(1), kind), abs=1e-12)

    @pytest.mark.parametrize("r, c", [(-0.1, 1.0), (0.1, 0.0), (0.1, -1.0)])
    def test_invalid_arguments(self, r, c):
        with pytest.raises(ValueError):
            semigroup_apply(f_k(1), r, c)


def test_field_rejects_nonfinite():
    with pytest.raises(ValueError):
        SpectralField(np.array([1.0, np.nan]))


def test_tail_vanishes_for_band_limited_input():
    assert h1_tail(lambda z: np.sqrt(2) * np.sin(3 * np.pi * z), 4) == pytest.approx(0.0, abs=1e-9)
    assert h1_tail(lambda z: z * (1 - z), 4) > 0
