import numpy as np
import pytest

from dualflow.basis_risk import FactorGrid, solve_distortion, solve_semilinear, value_fields
from dualflow.bspde import (d_axis, d2_axis, d_time, derivative_value_decomposition_check, dual_bspde_residual,
                            estimate_dual_decomposition, estimate_primal_decomposition, estimator_agreement,
                            martingale_field_derivative_check, primal_bspde_residual, transport,
                            transport_checks)
from dualflow.duality import ValueField, dynamic_fields, wealth_and_strategy_flow
from dualflow.errors import CapabilityError, ConcavityError, GridError
from dualflow.kernel import LognormalDualKernel
from dualflow.market import BasisRisk, BlackScholes, MarkovSharpe, TimeGrid, empirical_martingale_test, simulate_paths
from dualflow.utility import Exponential

T_GRID = np.linspace(0, 1, 201)
X_GRID = np.linspace(-3, 3, 201)
Y_GRID = np.geomspace(0.07, 12, 201)


@pytest.fixture(scope="module")
def exp_fields(merton):
    return dynamic_fields(Exponential(1.0), merton, T_GRID, X_GRID, Y_GRID)


@pytest.fixture(scope="module")
def flat_fields():
    m = BlackScholes(0.0, 0.2)
    return m, dynamic_fields(Exponential(1.0), m, np.linspace(0, 1, 21), np.linspace(-2, 2, 21),
                             np.geomspace(0.25, 4, 21))


@pytest.fixture(scope="module")
def basis_setup():
    m = BasisRisk(rho=0.9)
    u = Exponential(1.0)
    x = np.linspace(-4, 4, 201)
    y = np.geomspace(0.05, 20, 201)
    P = value_fields(u, solve_semilinear(m, 200), x, y)[0]
    Pd, D = value_fields(u, solve_distortion(m, 200), x, y)
    return m, u, P, Pd, D


class TestFiniteDifferences:
    def test_exact_on_polynomials(self):
        x = np.linspace(-1, 2, 31)
        h = x[1] - x[0]
        v = 3 * x**2 - x + 1
        assert np.allclose(d_axis(v, h, 0), 6 * x - 1, atol=1e-10)
        assert np.allclose(d2_axis(v, h, 0), 6.0, atol=1e-8)
        c = x**4
        assert np.allclose(d_axis(c, h, 0, 4)[2:-2], 4 * x[2:-2] ** 3, atol=1e-10)

    def test_time_stencil_second_order(self):
        t = np.linspace(0, 1, 11)
        assert np.allclose(d_time(t**2, t[1]), 2 * t, atol=1e-12)

    def test_bad_accuracy(self):
        with pytest.raises(ValueError):
            d_axis(np.zeros(5), 0.1, 0, 3)


class TestDecomposition:
    def test_exponential_drift_oracle(self, exp_fields, merton):
        pf, df = exp_fields
        P = estimate_primal_decomposition(pf, merton)
        assert np.all(P.phi == 0) and np.all(P.phi_perp == 0)
        # dA/dt = -V_t = -(θ²/2) V
        expect = -0.125 * pf.V[:, None, :]
        assert np.abs(P.increasing_density - expect).max() < 1e-4
        D = estimate_dual_decomposition(df, merton)
        # dÃ/dt = (θ²/2) y/γ
        expect_d = 0.125 * Y_GRID[None, None, :]
        assert np.abs(D.increasing_density - expect_d).max() < 1e-9 * 12 + 1e-10
        assert np.all(D.increasing_density[D.interior()] >= 0)

    def test_clock_conversion(self, exp_fields, merton):
        P = estimate_primal_decomposition(exp_fields[0], merton)
        q = P.per_qv(S=1.0, sigma=0.2)
        assert q["lambda"].ravel()[0] == pytest.approx(2.5)
        assert np.allclose(q["drift"], P.drift / 0.04)

    def test_no_opportunity(self, flat_fields):
        m, (pf, df) = flat_fields
        for dec in (estimate_primal_decomposition(pf, m), estimate_dual_decomposition(df, m)):
            assert np.all(dec.drift == 0) and np.all(dec.phi == 0)

    def test_basis_risk_ratio(self, basis_setup):
        m, u, P, _, _ = basis_setup
        dec = estimate_primal_decomposition(P, m)
        sl = dec.interior()
        assert np.abs(dec.phi_perp[sl]).max() > 1e-3
        nz = np.abs(dec.phi[sl]) > 1e-8
        ratio = dec.phi_perp[sl][nz] / dec.phi[sl][nz]
        assert np.allclose(ratio, m.rho_perp / m.rho, rtol=1e-12)

    def test_capability(self, exp_fields):
        with pytest.raises(CapabilityError):
            estimate_primal_decomposition(exp_fields[0], MarkovSharpe(0.3, 0.1, 0.2))
        with pytest.raises(CapabilityError):
            estimate_primal_decomposition(exp_fields[1], BlackScholes(0.1, 0.2))
        with pytest.raises(CapabilityError):
            estimate_primal_decomposition(object(), BlackScholes(0.1, 0.2))


class TestPrimalResidual:
    def test_exponential(self, exp_fields, merton):
        rep = primal_bspde_residual(estimate_primal_decomposition(exp_fields[0], merton), Exponential(1.0))
        assert rep.passed, rep.failures
        assert rep["primal_residual_max"].value <= 1e-3
        assert rep["terminal_condition"].value == 0.0

    def test_refinement_order(self, merton):
        t = np.linspace(0, 1, 401)
        res = []
        for n in (101, 201):
            pf, _ = dynamic_fields(Exponential(1.0), merton, t, np.linspace(-3, 3, n), np.geomspace(0.1, 10, 5))
            res.append(primal_bspde_residual(estimate_primal_decomposition(pf, merton))["primal_residual_max"].value)
        assert res[0] / res[1] >= 3.5

    def test_no_opportunity_exact_zero(self, flat_fields):
        m, (pf, df) = flat_fields
        assert primal_bspde_residual(estimate_primal_decomposition(pf, m))["primal_residual_max"].value == 0.0
        assert dual_bspde_residual(estimate_dual_decomposition(df, m))["dual_residual_max"].value == 0.0

    def test_concavity_error(self, merton):
        t = np.linspace(0, 1, 11)
        x = np.linspace(-1, 1, 11)
        V = np.exp(x)[None, :] * np.ones_like(t)[:, None]
        field = ValueField(t, x, V, V, V, V)
        with pytest.raises(ConcavityError):
            primal_bspde_residual(estimate_primal_decomposition(field, merton))

    def test_residual_grid_exported(self, exp_fields, merton):
        rep = primal_bspde_residual(estimate_primal_decomposition(exp_fields[0], merton))
        assert rep.arrays["residual"].shape == (201, 1, 201)
        assert "residual" not in rep.to_record()


class TestDualResidual:
    def test_exponential(self, exp_fields, merton):
        rep = dual_bspde_residual(estimate_dual_decomposition(exp_fields[1], merton), Exponential(1.0))
        assert rep.passed, rep.failures

    def test_convexity_error(self, exp_fields, merton):
        dec = estimate_dual_decomposition(exp_fields[1], merton)
        dec.V2 = -dec.V2
        with pytest.raises(ConcavityError):
            dual_bspde_residual(dec)

    def test_basis_risk_and_reading(self, basis_setup):
        m, u, P, _, D = basis_setup
        rep = dual_bspde_residual(estimate_dual_decomposition(D, m), u,
                                  primal=estimate_primal_decomposition(P, m), threshold=5e-2)
        assert rep.passed, rep.failures
        assert rep.metadata["matching_reading"].startswith("dual")

    def test_basis_risk_refinement(self):
        m, u = BasisRisk(rho=0.9), Exponential(1.0)
        res = []
        for nf, ny in ((61, 51), (121, 101)):
            E = solve_distortion(m, 100, FactorGrid(-3, 3, nf))
            _, D = value_fields(u, E, np.linspace(-4, 4, ny), np.geomspace(0.05, 20, ny))
            res.append(dual_bspde_residual(estimate_dual_decomposition(D, m))["dual_residual_max"].value)
        assert res[0] / res[1] >= 3.0


class TestTransport:
    def test_exponential(self, exp_fields, merton):
        P = estimate_primal_decomposition(exp_fields[0], merton, use_analytic=True)
        D = estimate_dual_decomposition(exp_fields[1], merton, use_analytic=True)
        rep = transport_checks(P, D)
        assert rep["curvature_transport_max"].value <= 1e-4
        assert rep["integrand_residual"].value == 0.0
        assert rep["conjugacy_max"].value <= 1e-4

    def test_no_opportunity(self, flat_fields):
        m, (pf, df) = flat_fields
        rep = transport_checks(estimate_primal_decomposition(pf, m, use_analytic=True),
                               estimate_dual_decomposition(df, m, use_analytic=True))
        for name in ("integrand_residual", "orthogonal_integrand_residual", "drift_transport_relative",
                     "dual_drift_identity_relative"):
            assert rep[name].value == 0.0

    def test_basis_risk(self, basis_setup):
        m, u, P, Pd, D = basis_setup
        Pdec = estimate_primal_decomposition(P, m)
        rep = transport_checks(Pdec, estimate_dual_decomposition(D, m), tol_abs=1e-2)
        assert rep["integrand_relative_residual"].value <= 1e-2
        assert rep["orthogonal_integrand_relative_residual"].value <= 1e-2
        assert estimator_agreement(Pdec, estimate_primal_decomposition(Pd, m)).passed

    def test_out_of_grid(self, merton):
        pf, df = dynamic_fields(Exponential(1.0), merton, np.linspace(0, 1, 5), np.linspace(-1, 1, 21),
                                np.geomspace(0.01, 100, 21))
        P = estimate_primal_decomposition(pf, merton)
        D = estimate_dual_decomposition(df, merton)
        with pytest.raises(GridError):
            transport_checks(P, D)
        rep = transport_checks(P, D, on_outside="mask")
        assert np.isfinite(rep["curvature_transport_max"].value)

    def test_interpolation_exact_on_cubics(self, exp_fields, merton):
        P = estimate_primal_decomposition(exp_fields[0], merton)
        vals = (X_GRID**3)[None, None, :]
        q = np.array([[[-1.234, 0.5, 2.1]]])
        assert np.allclose(transport(P, vals, q), q**3, atol=1e-12)


class TestDerivativeDecomposition:
    def test_exponential_commutation(self, exp_fields, merton):
        rep = derivative_value_decomposition_check(exp_fields[0], merton)
        assert rep.passed, rep.failures

    def test_no_opportunity(self, flat_fields):
        m, (pf, _) = flat_fields
        rep = derivative_value_decomposition_check(pf, m)
        assert rep["drift_commutation_max"].value == 0.0

    def test_basis_risk(self, basis_setup):
        m, _, P, _, _ = basis_setup
        assert derivative_value_decomposition_check(P, m, threshold=1e-2).passed

    def test_martingale_field_product(self, merton, mixture):
        # fourth-order differences in x with h = 0.01
        p = simulate_paths(merton, TimeGrid(1.0, 8), 50, seed=1)
        x = np.linspace(-1, 1, 201)
        for u in (Exponential(1.0), mixture):
            wf = wealth_and_strategy_flow(u, merton, x, p)
            rep = martingale_field_derivative_check(wf, wf.flow.kernel)
            assert rep.passed, rep.failures
        assert np.all(wealth_and_strategy_flow(Exponential(1.0), merton, x, p).X1 == 1.0)


def test_value_along_optimal_paths_has_no_drift(merton, mixture):
    p = simulate_paths(merton, TimeGrid(1.0, 8), 20_000, seed=2)
    wf = wealth_and_strategy_flow(mixture, merton, np.array([0.0]), p)
    ker = LognormalDualKernel(mixture, 0.5, 1.0)
    vals = np.stack([ker.primal(float(t), wf.X[:, k, 0]).V for k, t in enumerate(p.times)], axis=1)
    vals[:, -1] = mixture(wf.X[:, -1, 0])
    assert empirical_martingale_test(vals).passed
