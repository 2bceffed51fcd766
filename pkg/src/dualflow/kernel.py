"""Dual and primal value functions for constant-Sharpe complete markets.

With a constant Sharpe ratio ``theta`` the ratio ``R = Z_T / Z_t`` is
lognormal with ``log R ~ N(-v/2, v)``, ``v = theta^2 (T - t)``, and
independent of ``F_t``.  The dynamic dual value is then deterministic,

    Ṽ(t, w) = E Ũ(w R),     Ṽ^(k)(t, w) = E[R^k Ũ^(k)(w R)],

and is computed by Gauss-Hermite quadrature.  The primal value follows by
conjugacy: ``V'(t, x) = w`` solves ``-Ṽ'(t, w) = x`` and

    V = Ṽ + x w,   V'' = -1/Ṽ'',   V''' = -Ṽ'''/Ṽ''^3.

The exponential utility uses the closed forms instead of quadrature unless
``closed_form=False``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.interpolate import CubicSpline

from .errors import DualityError
from .utility import Exponential, Utility, conjugate_array, marginal_inverse


@lru_cache(maxsize=16)
def gauss_hermite(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and probability weights for expectations over a standard normal."""
    g, w = hermegauss(n)
    return g, w / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class PrimalValues:
    V: np.ndarray
    V1: np.ndarray
    V2: np.ndarray
    V3: np.ndarray
    w: np.ndarray  # = V1, the dual point


class LognormalDualKernel:
    """Dual/primal value functions of a utility under a lognormal density ratio."""

    def __init__(self, utility: Utility, theta: float, T: float, n_nodes: int = 80,
                 closed_form: bool = True, table_range: tuple[float, float] = (-16.0, 16.0),
                 table_points: int = 1601):
        self.utility = utility
        self.theta = float(theta)
        self.T = float(T)
        self.n_nodes = n_nodes
        self.closed = closed_form and isinstance(utility, Exponential)
        self._table_u = np.linspace(*table_range, table_points)
        self._tables: dict[float, list[CubicSpline]] = {}

    # ---------------------------------------------------------------- dual side
    def variance(self, t):
        return self.theta**2 * np.maximum(self.T - np.asarray(t, dtype=float), 0.0)

    def dual(self, t, w, order: int = 3) -> tuple[np.ndarray, ...]:
        """``(Ṽ, Ṽ', ..., Ṽ^(order))`` at ``(t, w)``; ``t`` broadcasts against ``w``."""
        t, w = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(w, dtype=float))
        v = self.variance(t)
        if self.closed:
            g = self.utility.gamma
            out = [(w / g) * (np.log(w / g) - 1 + 0.5 * v),
                   (np.log(w / g) + 0.5 * v) / g,
                   1.0 / (g * w),
                   -1.0 / (g * w**2)]
            return tuple(out[: order + 1])
        nodes, probs = gauss_hermite(self.n_nodes)
        R = np.exp(-0.5 * v[..., None] + np.sqrt(v)[..., None] * nodes)
        parts = conjugate_array(self.utility, (w[..., None] * R).ravel(), order=order)
        out = []
        for k in range(order + 1):
            vals = parts[k + 1].reshape(R.shape)
            out.append(np.sum(probs * R**k * vals, axis=-1))
        return tuple(out)

    def _table(self, t: float) -> list[CubicSpline]:
        key = float(t)
        tab = self._tables.get(key)
        if tab is None:
            u = self._table_u
            vals = self.dual(np.full(u.shape, key), np.exp(u), order=3)
            tab = [CubicSpline(u, v) for v in vals]
            self._tables[key] = tab
        return tab

    def dual_fast(self, t: float, w, order: int = 3) -> tuple[np.ndarray, ...]:
        """Like :meth:`dual` at a single time, through a cached spline table in log w.

        Points outside the table fall back to direct quadrature.
        """
        w = np.asarray(w, dtype=float)
        if self.closed:
            return self.dual(t, w, order)
        u = np.log(w)
        tab = self._table(t)
        out = [s(u) for s in tab[: order + 1]]
        outside = (u < self._table_u[0]) | (u > self._table_u[-1])
        if np.any(outside):
            exact = self.dual(t, w[outside], order)
            for k in range(order + 1):
                out[k][outside] = exact[k]
        return tuple(out)

    # -------------------------------------------------------------- primal side
    def dual_point(self, t, x, tol: float = 1e-13, max_iter: int = 100) -> np.ndarray:
        """Solve ``-Ṽ'(t, w) = x`` for ``w = V'(t, x)``."""
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        if self.closed:
            g = self.utility.gamma
            return g * np.exp(-g * x - 0.5 * self.variance(t))
        u = np.log(self.utility.derivative(x, 1))  # exact at t = T
        if t.size >= 256 and np.all(t == t.flat[0]):
            # cheap pre-iteration on the spline table, exact quadrature polish below
            t0 = float(t.flat[0])
            for _ in range(max_iter):
                _, d1, d2 = self.dual_fast(t0, np.exp(u), order=2)
                step = np.clip((-d1 - x) / (np.exp(u) * d2), -2.0, 2.0)
                u = u + step
                if np.all(np.abs(step) < 1e-7):
                    break
        for _ in range(max_iter):
            _, d1, d2 = self.dual(t, np.exp(u), order=2)
            f = -d1 - x
            if np.all(np.abs(f) <= tol * (1.0 + np.abs(x))):
                return np.exp(u)
            step = f / (np.exp(u) * d2)
            u = u + np.clip(step, -2.0, 2.0)
        raise DualityError("inversion of -Ṽ'(t, .) did not converge; widen the dual grid")

    def primal(self, t, x) -> PrimalValues:
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        if self.closed:
            g = self.utility.gamma
            e = np.exp(-g * x - 0.5 * self.variance(t))
            return PrimalValues(-e, g * e, -g**2 * e, g**3 * e, g * e)
        w = self.dual_point(t, x)
        d0, d1, d2, d3 = self.dual(t, w, order=3)
        return PrimalValues(d0 + x * w, w, -1.0 / d2, -d3 / d2**3, w)

    def wealth_inverse_static(self, w) -> np.ndarray:
        """``(V')^{-1}(w) = -Ṽ'(0, w)`` through the time-0 table."""
        return -self.dual_fast(0.0, w, order=1)[1]

    def terminal_wealth(self, w) -> np.ndarray:
        """``-Ũ'(w) = (U')^{-1}(w)`` computed exactly."""
        return marginal_inverse(self.utility, w)
