import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dualflow.errors import CapabilityError, ConcavityError, DomainError, RegularityError
from dualflow.market import lognormal_density_quantile
from dualflow.utility import (CustomUtility, Exponential, ExponentialMixture, ProbeGrid, check_regularity,
                              conjugate, conjugate_array, evaluate, marginal_inverse, mixture_bounds,
                              quadratic_utility, regularity_coefficients, utility_from_dict)

gammas = st.floats(0.3, 3.0)
log_ys = st.floats(-4.0, 4.0)


class TestEvaluate:
    def test_exponential_values(self):
        u = Exponential(2.0)
        assert evaluate(u, 0.0, 0) == -1.0
        assert evaluate(u, 0.0, 1) == 2.0
        assert evaluate(u, 0.0, 2) == -4.0

    def test_exponential_marginal_at_one(self):
        assert evaluate(Exponential(1.0), 1.0, 1) == pytest.approx(math.exp(-1.0), rel=1e-15)

    def test_mixture_second_derivative(self, mixture):
        assert evaluate(mixture, 0.0, 2) == pytest.approx(-2.5, abs=1e-15)

    def test_order_too_high(self):
        u = CustomUtility(derivatives=(lambda x: -np.exp(-x), lambda x: np.exp(-x)), name="short")
        with pytest.raises(CapabilityError):
            evaluate(u, 0.0, 2)
        with pytest.raises(CapabilityError):
            evaluate(Exponential(1.0), 0.0, 5)

    def test_non_finite_x(self):
        with pytest.raises(DomainError):
            evaluate(Exponential(1.0), math.inf)

    def test_invalid_parameters(self):
        with pytest.raises(DomainError):
            Exponential(-1.0)
        with pytest.raises(DomainError):
            ExponentialMixture((0.3, 0.3), (1.0, 2.0))

    @given(gammas, st.floats(-5, 5))
    def test_exponential_risk_aversion_is_gamma(self, g, x):
        u = Exponential(g)
        assert float(u.risk_aversion(x)) == pytest.approx(g, rel=1e-12)
        assert u.derivative(x, 1) > 0 and u.derivative(x, 2) < 0


class TestConjugate:
    def test_exponential_unit(self):
        c = conjugate(Exponential(1.0), 1.0)
        assert c.u_tilde == pytest.approx(-1.0, abs=1e-14)
        assert c.x_star == pytest.approx(0.0, abs=1e-14)

    def test_exponential_at_e(self):
        c = conjugate(Exponential(1.0), math.e)
        assert c.x_star == pytest.approx(-1.0, abs=1e-13)
        assert c.u_tilde == pytest.approx(0.0, abs=1e-13)

    def test_mixture_against_dense_grid(self, mixture):
        # brute-force maximisation of U(x) - x y on 10^6 points of [-20, 20], then a
        # parabolic refinement through the best three grid points
        x = np.linspace(-20.0, 20.0, 1_000_001)
        f = mixture(x) - x
        i = int(np.argmax(f))
        h = x[1] - x[0]
        f0, f1, f2 = f[i - 1], f[i], f[i + 1]
        x_ref = x[i] + 0.5 * h * (f0 - f2) / (f0 - 2 * f1 + f2)
        c = conjugate(mixture, 1.0)
        assert c.x_star == pytest.approx(x_ref, abs=1e-6)
        assert c.u_tilde == pytest.approx(f.max(), abs=1e-6)
        # root of ½e^{-x} + e^{-2x} = 1
        assert 0.5 * math.exp(-c.x_star) + math.exp(-2 * c.x_star) == pytest.approx(1.0, abs=1e-12)

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            conjugate(Exponential(1.0), 0.0)
        with pytest.raises(DomainError):
            conjugate(Exponential(1.0), -1.0)

    def test_bracket_failure_is_regularity_error(self):
        # U' bounded below by 1: no solution of U'(x) = 0.5
        u = CustomUtility(derivatives=(lambda x: x - np.exp(-x), lambda x: 1 + np.exp(-x),
                                       lambda x: -np.exp(-x), lambda x: np.exp(-x)), name="floor")
        with pytest.raises(RegularityError):
            conjugate(u, 0.5)

    @given(gammas, log_ys)
    def test_exponential_closed_form(self, g, ly):
        y = math.exp(ly)
        c = conjugate(Exponential(g), y)
        assert c.u_tilde == pytest.approx((y / g) * (math.log(y / g) - 1), rel=1e-11, abs=1e-12)
        assert c.d1 == pytest.approx(math.log(y / g) / g, abs=1e-11)
        assert c.d2 == pytest.approx(1.0 / (g * y), rel=1e-11)
        assert c.d3 == pytest.approx(-1.0 / (g * y * y), rel=1e-11)

    @given(st.floats(0.1, 0.9), st.floats(0.3, 1.5), st.floats(1.6, 4.0), log_ys)
    def test_fenchel_young_and_marginal(self, w, g1, g2, ly):
        u = ExponentialMixture((w, 1 - w), (g1, g2))
        y = math.exp(ly)
        c = conjugate(u, y)
        assert float(u.derivative(c.x_star, 1)) == pytest.approx(y, rel=1e-11)
        assert float(u(c.x_star)) - c.x_star * y == pytest.approx(c.u_tilde, rel=1e-12, abs=1e-12)
        assert c.d1 == -c.x_star

    @given(st.floats(0.1, 0.9), log_ys)
    def test_derivative_ladder_against_differences(self, w, ly):
        # first, second and third derivatives of the conjugate against centred differences
        u = ExponentialMixture((w, 1 - w), (1.0, 2.0))
        y = math.exp(ly)
        h = 1e-3 * y
        ys = y + h * np.arange(-2, 3)
        _, ut, d1, d2, _ = conjugate_array(u, ys)
        c = conjugate(u, y)
        assert c.d1 == pytest.approx((ut[3] - ut[1]) / (2 * h), rel=1e-6, abs=1e-6)
        assert c.d2 == pytest.approx((d1[3] - d1[1]) / (2 * h), rel=1e-6)
        assert c.d3 == pytest.approx((d2[3] - d2[1]) / (2 * h), rel=1e-5)

    def test_third_derivative_sign(self, mixture):
        # Ũ''' = U'''(x*) / U''(x*)^3, which is negative for exponential families
        c = conjugate(mixture, 0.7)
        x = c.x_star
        assert c.d3 == pytest.approx(float(mixture.derivative(x, 3) / mixture.derivative(x, 2) ** 3), rel=1e-14)
        assert c.d3 < 0

    @given(st.floats(-30, 30))
    def test_marginal_inverse_roundtrip(self, x):
        u = ExponentialMixture((0.25, 0.75), (0.5, 3.0))
        y = float(u.derivative(x, 1))
        assert float(marginal_inverse(u, y)) == pytest.approx(x, abs=1e-9 * (1 + abs(x)))

    def test_fenchel_roundtrip_on_grid(self, mixture):
        from scipy.optimize import minimize_scalar

        for u in (Exponential(0.5), Exponential(2.0), mixture):
            for x in np.linspace(-5, 5, 11):
                r = minimize_scalar(lambda ly: float(conjugate_array(u, np.exp(ly), order=0)[1]) + x * math.exp(ly),
                                    bounds=(-15, 15), method="bounded", options={"xatol": 1e-12})
                assert float(u(x)) == pytest.approx(r.fun, abs=1e-6)


class TestRegularityCoefficients:
    def test_exponential_constants(self):
        for x in (-3.0, 0.0, 7.0):
            assert regularity_coefficients(Exponential(3.0), x) == pytest.approx((3, 3, 1 / 3, 1 / 3), rel=1e-14)
        assert regularity_coefficients(Exponential(1.0), 0.0) == pytest.approx((1, 1, 1, 1))

    def test_mixture_limit(self, mixture):
        r = [regularity_coefficients(mixture, x)[0] for x in (10.0, 20.0, 40.0)]
        assert r[0] > r[1] >= r[2] >= 1.0
        assert r[2] - 1.0 < 1e-15 + 2 * math.exp(-40.0)

    def test_concavity_violation(self):
        u = CustomUtility(derivatives=(lambda x: x, lambda x: np.ones_like(x), lambda x: np.zeros_like(x),
                                       lambda x: np.zeros_like(x)), name="linear")
        with pytest.raises(ConcavityError):
            regularity_coefficients(u, 0.0)

    @given(st.floats(0.1, 0.9), st.floats(0.3, 1.5), st.floats(1.6, 4.0), st.floats(-20, 20))
    def test_mixture_risk_aversion_between_gammas(self, w, g1, g2, x):
        r1 = regularity_coefficients(ExponentialMixture((w, 1 - w), (g1, g2)), x)[0]
        assert g1 * (1 - 1e-12) <= r1 <= g2 * (1 + 1e-12)


class TestCheckRegularity:
    def test_exponential(self):
        r = check_regularity(Exponential(1.0))
        assert r.inada_pass and r.r1_pass and r.rav1_pass
        assert r.rav1_bounds == pytest.approx((1.0, 1.0))
        assert r.gate_failures == []

    def test_mixture_bounds(self, mixture):
        r = check_regularity(mixture)
        assert r.rav1_bounds == pytest.approx(mixture_bounds(mixture), abs=1e-9)
        lo, hi = r.rav1_bounds
        assert 0 < lo <= hi < math.inf

    def test_quadratic_fails_inada(self):
        r = check_regularity(quadratic_utility())
        assert not r.inada_pass
        assert "inada" in r.gate_failures

    def test_lognormal_density_is_unbounded(self, merton):
        r = check_regularity(Exponential(1.0), market=merton)
        assert r.r1_pass and r.r2_pass is False
        # oracle: the far quantiles of a lognormal Z_T keep growing
        assert lognormal_density_quantile(merton, 1 - 1e-6) > 2 * lognormal_density_quantile(merton, 1 - 1e-3)

    def test_probe_grid_minimum(self):
        with pytest.raises(DomainError):
            ProbeGrid(x_max=10.0)

    def test_record_is_flat(self):
        rec = check_regularity(Exponential(2.0)).to_record()
        assert rec["rav1_c1"] == pytest.approx(2.0) and rec["rav1_c2"] == pytest.approx(2.0)
        assert all(not isinstance(v, dict) for v in rec.values())
        assert any("not numerically verifiable" in n for n in rec["notes"])

    def test_b_ranges_bounded(self, mixture):
        r = check_regularity(mixture)
        assert r.r1_pass
        assert all(math.isfinite(v) for v in (*r.b1_range, *r.b2_range))


def test_utility_documents_roundtrip(mixture):
    for u in (Exponential(1.5), mixture):
        assert utility_from_dict(u.to_dict()) == u
    with pytest.raises(KeyError):
        utility_from_dict({"variant": "exponential"})
