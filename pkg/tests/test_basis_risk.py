import math

import numpy as np
import pytest

from dualflow.basis_risk import (BasisRiskFlow, FactorGrid, basis_risk_wealth_flow, entropy_mc, solve_distortion,
                                 solve_semilinear, value_fields)
from dualflow.duality import fit_order
from dualflow.errors import CapabilityError, GridError
from dualflow.market import BasisRisk, TimeGrid, simulate_paths
from dualflow.utility import Exponential


@pytest.fixture(scope="module")
def model():
    return BasisRisk(rho=0.9)


@pytest.fixture(scope="module")
def fields(model):
    return solve_distortion(model), solve_semilinear(model)


def test_constant_sharpe_closed_form():
    # θ(y) ≡ θ0 makes the entropy deterministic: H = θ0²(T - t)/2
    # (Crank-Nicolson time error only: second order in the step)
    m = BasisRisk(theta1=0.0, rho=0.6)
    for solve in (solve_distortion, solve_semilinear):
        err = [np.abs(H.H - 0.125 * (1 - H.t)[:, None]).max() for H in (solve(m, 50), solve(m, 100))]
        assert err[1] < 1e-7
        assert err[1] < 1e-13 or err[0] / err[1] > 3.5


def test_routes_agree(fields):
    d, s = fields
    inner = slice(10, -10)
    assert np.abs(d.H[:, inner] - s.H[:, inner]).max() / np.abs(d.H).max() < 1e-3


def test_terminal_zero(fields):
    for H in fields:
        assert np.all(H.H[-1] == 0.0)


def test_against_monte_carlo(model, fields):
    h_mc, se = entropy_mc(model, n_paths=40_000, seed=3, n_steps=100)
    h_pde = float(fields[0].value(0.0, model.y0))
    # Euler bias of the factor at 100 steps is well below 1e-3
    assert abs(h_mc - h_pde) <= 3 * se + 1e-3


def test_factor_grid_refinement_order(model):
    ref = solve_distortion(model, 50, FactorGrid(n=961))
    y0 = np.linspace(-1, 1, 5)
    errs = [np.abs(solve_distortion(model, 50, FactorGrid(n=n)).value(0.0, y0) - ref.value(0.0, y0)).max()
            for n in (61, 121, 241)]
    assert fit_order([6 / 60, 6 / 120, 6 / 240], errs) >= 1.8


def test_value_fields_conjugate(model, fields):
    u = Exponential(2.0)
    x = np.linspace(-1, 1, 5)
    y = np.geomspace(0.2, 5, 5)
    V, Vt = value_fields(u, fields[0], x, y)
    H = fields[0].H[:, :, None]
    # V(x) = Ṽ(y) + x y at the conjugate point y = V'(x) = γ e^{-γx - H}
    yx = 2.0 * np.exp(-2.0 * x[None, None, :] - H)
    vt_at = (yx / 2) * (np.log(yx / 2) - 1 + H)
    assert np.allclose(V.V, vt_at + x[None, None, :] * yx, atol=1e-13)
    assert Vt.dual and not V.dual
    with pytest.raises(CapabilityError):
        value_fields(__import__("dualflow").ExponentialMixture((0.5, 0.5), (1, 2)), fields[0], x, y)


def test_dual_density_is_martingale_measure(model):
    p = simulate_paths(model, TimeGrid(1.0, 50), 20_000, seed=4)
    flow = BasisRiskFlow(Exponential(1.0), model, paths=p)
    zs = flow.dual_density()
    assert np.all(zs[:, 0] == 1.0)
    zT = zs[:, -1]
    assert abs(zT.mean() - 1) <= 3 * zT.std(ddof=1) / math.sqrt(zT.size) + 5e-3
    sz = zT * p.S[:, -1]
    assert abs(sz.mean() - 1) <= 3 * sz.std(ddof=1) / math.sqrt(sz.size) + 5e-3


def test_wealth_flow_shape_and_strategy(model):
    p = simulate_paths(model, TimeGrid(1.0, 20), 100, seed=5)
    wf = basis_risk_wealth_flow(Exponential(1.0), model, np.array([-1.0, 0.0, 1.0]), p)
    assert wf.X.shape == (100, 21, 3)
    # wealth-independent strategy: X(x) - x identical across x
    assert np.allclose(wf.X[:, :, 0] + 1, wf.X[:, :, 1], atol=1e-14)
    assert np.allclose(wf.X[:, :, 1], wf.gains()[:, :, 1], atol=1e-12)


def test_grid_errors(model, fields):
    with pytest.raises(GridError):
        fields[0].value(0.0, 10.0)
    with pytest.raises(GridError):
        fields[0].value(0.00123, 0.0)
    with pytest.raises(GridError):
        solve_distortion(model, 10, FactorGrid(1.0, 3.0, 41))


def test_flow_needs_exponential(model, mixture):
    with pytest.raises(CapabilityError):
        BasisRiskFlow(mixture, model)
