"""Exponential utility with a non-traded factor (basis risk).

With ``V(t, x) = -exp(-γ x - H(t, Y_t))`` the entropy field ``H`` solves the
semilinear terminal-value problem

    H_t + (b - ρ a θ) H_y + ½ a² H_yy + ½ θ² - ½ a² (1 - ρ²) H_y² = 0,   H(T) = 0,

and the power transform ``H = -δ ln F`` with ``δ = 1/(1 - ρ²)`` linearises it:

    F_t + (b - ρ a θ) F_y + ½ a² F_yy - ½ (1 - ρ²) θ² F = 0,   F(T) = 1,

so ``F(t, y) = E^Q[exp(-½(1 - ρ²) ∫_t^T θ(Y_s)² ds) | Y_t = y]`` under the
minimal martingale measure.  Both equations are solved on a factor grid
(Crank-Nicolson for ``F``; Crank-Nicolson with explicit second-order
extrapolation of the quadratic term for ``H``) and ``F(0, y_0)`` is also
estimated by Monte Carlo.  The optimal strategy is
``pi = (θ - ρ a H_y) / (γ σ S)``, independent of wealth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.interpolate import CubicSpline
from scipy.sparse import diags
from scipy.sparse.linalg import splu

from .duality import FlowSlice, WealthFlow
from .errors import CapabilityError, GridError
from .market import BasisRisk, PathBundle, TimeGrid, simulate_paths
from .utility import Exponential, Utility

FloatArray = NDArray[np.float64]


def entropy_mc(model: BasisRisk, n_paths: int = 100_000, seed: int = 0, n_steps: int = 200,
               threads: int = 1) -> tuple[float, float]:
    """Monte Carlo ``H_0 = -δ ln F(0, y_0)`` with a delta-method standard error."""
    paths = simulate_paths(model, TimeGrid(model.T, n_steps), n_paths, seed, "Q", threads=threads)
    th = model.theta_of(paths.Y[:, :-1])
    g = np.exp(-0.5 * (1 - model.rho**2) * np.sum(th**2, axis=1) * paths.grid.dt)
    F = float(g.mean())
    se_F = float(g.std(ddof=1) / math.sqrt(n_paths))
    delta = 1.0 / (1 - model.rho**2)
    return -delta * math.log(F), delta * se_F / F


@dataclass
class FactorGrid:
    lo: float = -3.0
    hi: float = 3.0
    n: int = 241

    @property
    def y(self) -> FloatArray:
        return np.linspace(self.lo, self.hi, self.n)


def _generator_matrix(model: BasisRisk, y: FloatArray):
    """Tridiagonal ``c ∂_y + ½ a² ∂_yy`` with ``c = b - ρ a θ`` (upwind first order at the edges)."""
    h = y[1] - y[0]
    c = model.drift(y) - model.rho * model.vol(y) * model.theta_of(y)
    d = 0.5 * model.vol(y) ** 2 * np.ones_like(y)
    lower = d / h**2 - c / (2 * h)
    main = -2 * d / h**2
    upper = d / h**2 + c / (2 * h)
    # edges: no curvature, one-sided drift pointing into the domain
    main[0], upper[0] = -c[0] / h, c[0] / h
    lower[-1], main[-1] = -c[-1] / h, c[-1] / h
    if c[0] < 0 or c[-1] > 0:
        raise GridError("factor drift under Q points out of the grid; widen the factor grid")
    return diags([lower[1:], main, upper[:-1]], [-1, 0, 1], format="csc")


def _dy(H: FloatArray, h: float) -> FloatArray:
    return np.gradient(H, h, edge_order=2)


@dataclass
class EntropyField:
    """``H(t, y)`` on a (time, factor) grid with spline access in the factor."""

    t: FloatArray
    y: FloatArray
    H: FloatArray            # (n_t, n_y)
    method: str
    metadata: dict = field(default_factory=dict)
    _splines: dict = field(default_factory=dict, repr=False)

    def _spline(self, k: int) -> CubicSpline:
        s = self._splines.get(k)
        if s is None:
            s = self._splines[k] = CubicSpline(self.y, self.H[k])
        return s

    def index(self, t: float) -> int:
        k = int(round(t / (self.t[1] - self.t[0])))
        if abs(self.t[k] - t) > 1e-9:
            raise GridError(f"time {t} not on the entropy grid")
        return k

    def value(self, t: float, y: ArrayLike, nu: int = 0) -> FloatArray:
        y = np.asarray(y, dtype=float)
        if np.any((y < self.y[0]) | (y > self.y[-1])):
            raise GridError("factor value outside the entropy grid")
        return self._spline(self.index(t))(y, nu)

    def restrict(self, t_grid: TimeGrid) -> "EntropyField":
        """Subsample to the times of a coarser grid dividing this one."""
        idx = [self.index(float(t)) for t in t_grid.times]
        return EntropyField(self.t[idx], self.y, self.H[idx], self.method, dict(self.metadata))


def solve_distortion(model: BasisRisk, n_steps: int = 200, grid: FactorGrid | None = None) -> EntropyField:
    """Crank-Nicolson solution of the linear equation for ``F``; returns ``H = -δ ln F``."""
    grid = grid or FactorGrid()
    y = grid.y
    dt = model.T / n_steps
    L = _generator_matrix(model, y)
    k = diags(0.5 * (1 - model.rho**2) * model.theta_of(y) ** 2, format="csc")
    A = L - k
    eye = diags(np.ones_like(y), format="csc")
    lhs = splu((eye - 0.5 * dt * A).tocsc())
    rhs_op = (eye + 0.5 * dt * A).tocsr()
    F = np.empty((n_steps + 1, y.size))
    F[-1] = 1.0
    for n in range(n_steps, 0, -1):
        F[n - 1] = lhs.solve(rhs_op @ F[n])
    if np.any(F <= 0):
        raise GridError("distortion function lost positivity")
    delta = 1.0 / (1 - model.rho**2)
    t = np.linspace(0.0, model.T, n_steps + 1)
    t[-1] = model.T
    return EntropyField(t, y, -delta * np.log(F), "distortion",
                        {"scheme": "crank-nicolson", "n_steps": n_steps, "n_y": y.size,
                         "F0": float(np.interp(model.y0, y, F[0]))})


def solve_semilinear(model: BasisRisk, n_steps: int = 200, grid: FactorGrid | None = None) -> EntropyField:
    """Direct solve of the semilinear equation for ``H``.

    Crank-Nicolson on the linear part, the quadratic term ``-½ a²(1-ρ²) H_y²``
    extrapolated explicitly (Adams-Bashforth 2).
    """
    grid = grid or FactorGrid()
    y = grid.y
    h = y[1] - y[0]
    dt = model.T / n_steps
    L = _generator_matrix(model, y)
    eye = diags(np.ones_like(y), format="csc")
    lhs = splu((eye - 0.5 * dt * L).tocsc())
    rhs_op = (eye + 0.5 * dt * L).tocsr()
    src = 0.5 * model.theta_of(y) ** 2
    q = 0.5 * model.vol(y) ** 2 * (1 - model.rho**2)

    def nonlinear(H):
        return -q * _dy(H, h) ** 2

    H = np.empty((n_steps + 1, y.size))
    H[-1] = 0.0
    n_prev = nonlinear(H[-1])
    for n in range(n_steps, 0, -1):
        n_cur = nonlinear(H[n])
        n_half = n_cur if n == n_steps else 1.5 * n_cur - 0.5 * n_prev
        H[n - 1] = lhs.solve(rhs_op @ H[n] + dt * (src + n_half))
        n_prev = n_cur
    t = np.linspace(0.0, model.T, n_steps + 1)
    t[-1] = model.T
    return EntropyField(t, y, H, "semilinear", {"scheme": "crank-nicolson/AB2", "n_steps": n_steps,
                                                "n_y": y.size})


# --------------------------------------------------------------------------
# value fields over (t, factor, x) and (t, factor, y)
# --------------------------------------------------------------------------


@dataclass
class FactorValueField:
    """Value field on a (t, factor, wealth-or-dual) grid; ``V`` shape ``(n_t, n_f, n_k)``."""

    t: FloatArray
    f: FloatArray
    k: FloatArray
    V: FloatArray
    dual: bool
    metadata: dict = field(default_factory=dict)


def value_fields(utility: Utility, entropy: EntropyField, x_grid: ArrayLike, y_grid: ArrayLike
                 ) -> tuple[FactorValueField, FactorValueField]:
    """``V = -exp(-γ x - H)`` and ``Ṽ = (y/γ)(ln(y/γ) - 1 + H)`` from an entropy field."""
    if not isinstance(utility, Exponential):
        raise CapabilityError("basis-risk fields need exponential utility")
    g = utility.gamma
    x = np.asarray(x_grid, dtype=float)
    yd = np.asarray(y_grid, dtype=float)
    H = entropy.H[:, :, None]
    V = -np.exp(-g * x[None, None, :] - H)
    Vt = (yd / g)[None, None, :] * (np.log(yd / g)[None, None, :] - 1 + H)
    meta = {"entropy": entropy.method, **entropy.metadata, "gamma": g}
    return (FactorValueField(entropy.t, entropy.y, x, V, False, dict(meta)),
            FactorValueField(entropy.t, entropy.y, yd, Vt, True, dict(meta)))


# --------------------------------------------------------------------------
# wealth flow
# --------------------------------------------------------------------------


class BasisRiskFlow:
    """Optimal exponential-utility flow on a basis-risk path bundle.

    The strategy does not depend on wealth, so ``X_t(x) = x + G_t`` with the
    gains ``G`` accumulated (Euler) along the bundle's paths.
    """

    def __init__(self, utility: Utility, model: BasisRisk, entropy: EntropyField | None = None,
                 paths: PathBundle | None = None):
        if not isinstance(utility, Exponential):
            raise CapabilityError("basis-risk flow needs exponential utility")
        self.utility, self.model = utility, model
        if entropy is None:
            # time grid refining the path grid so every path time is a node
            n = paths.grid.n_steps if paths is not None else 200
            entropy = solve_distortion(model, n * max(1, math.ceil(200 / n)))
        self.entropy = entropy
        self.paths = paths
        self.gains: FloatArray | None = None
        if paths is not None:
            self.bind(paths)

    def strategy(self, t: float, S: FloatArray, Y: FloatArray) -> FloatArray:
        m = self.model
        hy = self.entropy.value(t, Y, 1)
        return (m.theta_of(Y) - m.rho * m.vol(Y) * hy) / (self.utility.gamma * m.sigma * S)

    def bind(self, paths: PathBundle) -> None:
        if paths.Y is None:
            raise CapabilityError("basis-risk flow needs factor paths")
        self.paths = paths
        G = np.zeros((paths.n_paths, paths.times.size))
        dS = np.diff(paths.S, axis=1)
        for k, t in enumerate(paths.times[:-1]):
            G[:, k + 1] = G[:, k] + self.strategy(float(t), paths.S[:, k], paths.Y[:, k]) * dS[:, k]
        self.gains = G

    def at(self, t, Z, S, z, Y=None) -> FlowSlice:
        k = self.paths.grid.index(t)
        z = np.asarray(z, dtype=float)
        G = self.gains[:, k]
        if z.ndim == 2 or z.shape != G.shape:
            G = G[:, None]
            pi = self.strategy(t, np.asarray(S), np.asarray(Y))[:, None] if k < self.paths.grid.n_steps else None
        else:
            pi = self.strategy(t, np.asarray(S), np.asarray(Y)) if k < self.paths.grid.n_steps else None
        X = z + G
        if pi is None:  # no trading decision at T
            pi = np.zeros_like(X)
        pi = np.broadcast_to(pi, X.shape)
        return FlowSlice(X, pi, np.ones_like(X), np.zeros_like(X), np.zeros_like(X))

    def dual_density(self) -> FloatArray:
        """Density ``Z*_t`` of the dual optimizer along the bound paths (``Z*_0 = 1``).

        From ``V'(t, X_t(x)) = y Z*_t``: ``Z*_t = exp(-γ G_t - H(t, Y_t) + H(0, y_0))``.
        """
        p = self.paths
        H = np.stack([self.entropy.value(float(t), p.Y[:, k]) for k, t in enumerate(p.times)], axis=1)
        return np.exp(-self.utility.gamma * self.gains - H + H[:, :1])


def basis_risk_wealth_flow(utility: Utility, model: BasisRisk, x_grid: ArrayLike, paths: PathBundle,
                           entropy: EntropyField | None = None) -> WealthFlow:
    from .duality import wealth_and_strategy_flow

    flow = BasisRiskFlow(utility, model, entropy, paths)
    return wealth_and_strategy_flow(utility, model, x_grid, paths, flow=flow)

