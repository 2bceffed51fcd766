
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.interpolate import PchipInterpolator

from dualflow.duality import CompleteFlow, fit_order, wealth_and_strategy_flow
from dualflow.errors import BlowUpError, ExtrapolationError, RepresentationError
from dualflow.inverse import (closed_form_inverse, divergence_form_check, integrate_inverse_sde, invert_pathwise,
                              merton_feedback, pchip_rows, roundtrip_residual)
from dualflow.market import BlackScholes, TimeGrid, simulate_paths
from dualflow.utility import Exponential


@pytest.fixture(scope="module")
def exp_flow(merton):
    p = simulate_paths(merton, TimeGrid(1.0, 16), 300, seed=1)
    return wealth_and_strategy_flow(Exponential(1.0), merton, np.linspace(-6, 6, 25), p)


@pytest.fixture(scope="module")
def mix_flow(merton, mixture):
    p = simulate_paths(merton, TimeGrid(1.0, 8), 60, seed=2)
    return wealth_and_strategy_flow(mixture, merton, np.linspace(-6, 6, 25), p)


class TestInversion:
    def test_exponential_closed_form(self, exp_flow):
        targets = np.array([-1.0, 0.0, 0.5])
        inv = invert_pathwise(exp_flow, targets)
        p = exp_flow.paths
        expect = targets[None, None, :] - 0.125 * p.times[None, :, None] + p.log_z[:, :, None]
        assert np.abs(inv.psi - expect).max() < 1e-10
        assert np.array_equal(inv.psi[:, 0, :], np.broadcast_to(targets, inv.psi[:, 0, :].shape))

    def test_monotone_in_x(self, mix_flow):
        inv = invert_pathwise(mix_flow, np.linspace(-1, 1, 7))
        assert np.all(np.diff(inv.psi, axis=2) > 0)

    def test_mixture_residual(self, mix_flow):
        targets = np.array([-1.0, 0.0, 1.0])
        inv = invert_pathwise(mix_flow, targets)
        assert roundtrip_residual(mix_flow.flow, mix_flow.paths, inv) <= 1e-8 * 2

    def test_mixture_against_bisection(self, mix_flow):
        # plain bisection on the exact flow for a handful of (path, time) pairs
        inv = invert_pathwise(mix_flow, np.array([0.7]))
        p = mix_flow.paths
        for i, k in ((0, 3), (17, 5), (59, 8)):
            lo, hi = -6.0, 6.0
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                X = mix_flow.flow.at(float(p.times[k]), p.Z[i:i + 1, k], p.S[i:i + 1, k], np.array([mid])).X
                lo, hi = (mid, hi) if float(np.ravel(X)[0]) < 0.7 else (lo, mid)
            assert inv.psi[i, k, 0] == pytest.approx(0.5 * (lo + hi), abs=1e-10)

    def test_composition(self, mix_flow):
        # psi_t(X_t(z)) = z through the closed-form inverse
        p = mix_flow.paths
        z = np.array([-0.5, 0.0, 0.5])
        for k in (1, 4, 8):
            t = float(p.times[k])
            sl = mix_flow.flow.at(t, p.Z[:, k], p.S[:, k], z)
            psi = mix_flow.flow.inverse(t, p.Z[:, k, None], sl.X)
            assert np.abs(psi - z).max() <= 1e-8

    def test_closed_form_vs_inverted(self, mix_flow):
        t = np.array([-0.5, 0.5])
        a = invert_pathwise(mix_flow, t)
        b = closed_form_inverse(mix_flow.flow, mix_flow.paths, t)
        assert np.abs(a.psi - b.psi).max() <= 1e-6

    def test_extrapolation(self, exp_flow):
        with pytest.raises(ExtrapolationError) as e:
            invert_pathwise(exp_flow, np.array([100.0]))
        assert e.value.path is not None


class TestInverseSDE:
    def test_exponential_strong_error(self, merton):
        fine = simulate_paths(merton, TimeGrid(1.0, 1024), 400, seed=3)
        u = Exponential(1.0)
        hs, errs = [], []
        for factor in (16, 8, 4, 2):
            p = fine.coarsen(factor)
            cf = CompleteFlow(u, merton)
            sde = integrate_inverse_sde(cf, np.array([0.0]), p, np.linspace(-10, 10, 41))
            exact = closed_form_inverse(cf, p, np.array([0.0]))
            hs.append(p.grid.dt)
            errs.append(float(np.mean(np.abs(sde.psi[:, -1, 0] - exact.psi[:, -1, 0]))))
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all((ratios >= 1.2) & (ratios <= 1.7)), ratios
        assert fit_order(hs, errs) >= 0.4

    def test_no_opportunity(self):
        m = BlackScholes(0.0, 0.2)
        p = simulate_paths(m, TimeGrid(1.0, 8), 20, seed=1)
        sde = integrate_inverse_sde(CompleteFlow(Exponential(1.0), m), np.array([-1.0, 2.0]), p,
                                    np.linspace(-5, 5, 11))
        assert np.all(sde.psi == np.array([-1.0, 2.0]))

    def test_mixture_agrees_with_inversion(self, merton, mixture):
        p = simulate_paths(merton, TimeGrid(1.0, 64), 40, seed=4)
        cf = CompleteFlow(mixture, merton)
        sde = integrate_inverse_sde(cf, np.array([0.0]), p, np.linspace(-8, 8, 161))
        exact = closed_form_inverse(cf, p, np.array([0.0]))
        assert np.abs(sde.psi - exact.psi).max() < 0.1

    def test_blow_up_guard(self, merton):
        p = simulate_paths(merton, TimeGrid(1.0, 16), 200, seed=5)
        cf = CompleteFlow(Exponential(1.0), merton)
        with pytest.raises(BlowUpError):
            integrate_inverse_sde(cf, np.array([0.0]), p, np.linspace(-0.05, 0.05, 5))
        frozen = integrate_inverse_sde(cf, np.array([0.0]), p, np.linspace(-0.05, 0.05, 5), on_exit="freeze")
        assert frozen.metadata["exits"] > 0


class TestDivergenceForm:
    def test_no_opportunity_exact_zero(self):
        m = BlackScholes(0.0, 0.2)
        p = simulate_paths(m, TimeGrid(1.0, 16), 20, seed=1)
        wf = wealth_and_strategy_flow(Exponential(1.0), m, np.linspace(-2, 2, 21), p)
        inv = closed_form_inverse(wf.flow, p, wf.x)
        rep = divergence_form_check(wf, inv, merton_feedback(wf.flow))
        assert rep["residual_mean_per_unit_time"].value == 0.0

    def test_exponential_small(self, merton):
        p = simulate_paths(merton, TimeGrid(1.0, 128), 100, seed=6)
        wf = wealth_and_strategy_flow(Exponential(1.0), merton, np.linspace(-2, 2, 41), p)
        inv = closed_form_inverse(wf.flow, p, wf.x)
        rep = divergence_form_check(wf, inv, merton_feedback(wf.flow), spatial_stride=32)
        assert rep.passed
        assert rep["spatial_component"].value < 1e-12

    def test_wrong_feedback(self, merton):
        p = simulate_paths(merton, TimeGrid(1.0, 8), 10, seed=7)
        wf = wealth_and_strategy_flow(Exponential(1.0), merton, np.linspace(-2, 2, 21), p)
        inv = closed_form_inverse(wf.flow, p, wf.x)
        H = merton_feedback(wf.flow)
        with pytest.raises(RepresentationError):
            divergence_form_check(wf, inv, lambda t, S, w: 2 * H(t, S, w))


class TestPchip:
    @given(st.lists(st.floats(0.01, 5.0), min_size=4, max_size=12), st.floats(0.0, 1.0))
    def test_against_reference(self, incs, frac):
        z = np.cumsum([0.0] + incs[:-1])
        vals = np.cumsum(np.sin(np.arange(z.size)) + 0.3 * np.arange(z.size) ** 0.5)
        q = z[0] + frac * (z[-1] - z[0])
        got, out = pchip_rows(z, vals[None, :], np.array([q]))
        assert not out[0]
        assert got[0] == pytest.approx(float(PchipInterpolator(z, vals)(q)), rel=1e-10, abs=1e-10)

    @given(st.lists(st.floats(-3, 3), min_size=5, max_size=10))
    def test_monotone_data_stays_monotone(self, steps):
        z = np.linspace(0, 1, len(steps))
        vals = np.cumsum(np.abs(steps) + 1e-3)
        q = np.linspace(0, 1, 200)
        got, _ = pchip_rows(z, np.broadcast_to(vals, (200, vals.size)).copy(), q)
        assert np.all(np.diff(got) >= -1e-12)

    def test_outside_flagged(self):
        z = np.linspace(0, 1, 5)
        _, out = pchip_rows(z, np.ones((2, 5)), np.array([-0.1, 1.2]))
        assert out.all()
