"""Semimartingale decompositions of value fields and the BSPDE identities.

A value field ``v(t, f, k)`` (``f`` a Markov factor, absent in complete
models; ``k`` wealth ``x`` or dual variable ``y``) has, under ``P``,

    dv = D dt + phi dW + phi_perp dW_perp,
    D = v_t + b v_f + ½ a² v_ff,   phi = ρ a v_f,   phi_perp = sqrt(1-ρ²) a v_f.

Everything is stored per unit calendar time and per unit Brownian motion;
the ``<M>`` clock densities follow by dividing drifts by ``σ² S²`` and
integrands by ``σ S`` (``λ² d<M> = θ² dt``).  Time derivatives are
second-order one-sided differences pointing towards the terminal slice;
``k`` and ``f`` derivatives are centred (log-grid chain rule for ``y``);
the two outer layers of each spatial grid are excluded from residual norms.

With these conventions the primal and dual equations read

    D = ½ (phi' + θ v')² / v''                                  (primal)
    D̃ = θ y phĩ' - ½ θ² y² ṽ'' + ½ (phĩ'_perp)² / ṽ''          (dual)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .basis_risk import FactorValueField
from .duality import DualValueField, ValueField
from .errors import CapabilityError, ConcavityError, GridError
from .market import BasisRisk, BlackScholes, MarketSpec
from .report import ResidualReport
from .utility import Utility, conjugate_array

FloatArray = NDArray[np.float64]


# --------------------------------------------------------------------------
# finite differences
# --------------------------------------------------------------------------


def d_axis(v: FloatArray, h: float, axis: int, accuracy: int = 2) -> FloatArray:
    """First derivative along ``axis`` on a uniform grid (centred interior)."""
    if accuracy == 2:
        return np.gradient(v, h, axis=axis, edge_order=2)
    if accuracy != 4:
        raise ValueError("accuracy must be 2 or 4")
    v = np.moveaxis(v, axis, -1)
    out = np.gradient(v, h, axis=-1, edge_order=2)
    out[..., 2:-2] = (v[..., :-4] - 8 * v[..., 1:-3] + 8 * v[..., 3:-1] - v[..., 4:]) / (12 * h)
    return np.moveaxis(out, -1, axis)


def d2_axis(v: FloatArray, h: float, axis: int, accuracy: int = 2) -> FloatArray:
    """Second derivative along ``axis`` on a uniform grid."""
    v = np.moveaxis(v, axis, -1)
    out = np.empty_like(v)
    out[..., 1:-1] = (v[..., :-2] - 2 * v[..., 1:-1] + v[..., 2:]) / h**2
    if accuracy == 4:
        out[..., 2:-2] = (-v[..., :-4] + 16 * v[..., 1:-3] - 30 * v[..., 2:-2]
                          + 16 * v[..., 3:-1] - v[..., 4:]) / (12 * h**2)
    out[..., 0] = (2 * v[..., 0] - 5 * v[..., 1] + 4 * v[..., 2] - v[..., 3]) / h**2
    out[..., -1] = (2 * v[..., -1] - 5 * v[..., -2] + 4 * v[..., -3] - v[..., -4]) / h**2
    return np.moveaxis(out, -1, axis)


def d_time(v: FloatArray, dt: float) -> FloatArray:
    """Second-order one-sided time derivative along axis 0, stencils reaching towards ``T``."""
    # written in differences so that a field constant in t gives exactly zero
    out = np.empty_like(v)
    out[:-2] = (4 * (v[1:-1] - v[:-2]) - (v[2:] - v[:-2])) / (2 * dt)
    out[-2] = (v[-1] - v[-3]) / (2 * dt)
    out[-1] = (4 * (v[-1] - v[-2]) - (v[-1] - v[-3])) / (2 * dt)
    return out


def _uniform_step(g: FloatArray, what: str) -> float:
    h = float(g[1] - g[0])
    if not np.allclose(np.diff(g), h, rtol=1e-8, atol=1e-14):
        raise GridError(f"{what} grid must be uniform")
    return h


def k_derivatives(V: FloatArray, k: FloatArray, dual: bool, accuracy: int = 2):
    """First and second derivatives along the last axis (uniform x or log-uniform y)."""
    if dual:
        u = np.log(k)
        h = _uniform_step(u, "log-y")
        Vu = d_axis(V, h, -1, accuracy)
        Vuu = d2_axis(V, h, -1, accuracy)
        return Vu / k, (Vuu - Vu) / k**2
    h = _uniform_step(k, "x")
    return d_axis(V, h, -1, accuracy), d2_axis(V, h, -1, accuracy)


# --------------------------------------------------------------------------
# decomposition
# --------------------------------------------------------------------------


@dataclass
class DecompositionField:
    """Drift and martingale integrands of a value field, shape ``(n_t, n_f, n_k)``.

    ``drift`` is the signed ``dt``-density ``D``; the increasing process
    has density ``-D`` for both the primal ``A`` and
    the dual ``Ã`` (``v = v_0 - A + ...``).  Integrands are per unit ``W``.
    """

    t: FloatArray
    f: FloatArray | None
    k: FloatArray
    dual: bool
    V: FloatArray
    V1: FloatArray
    V2: FloatArray
    drift: FloatArray
    phi: FloatArray
    phi_perp: FloatArray
    phi1: FloatArray
    phi_perp1: FloatArray
    theta: FloatArray          # broadcastable to (n_t, n_f, n_k)
    metadata: dict = field(default_factory=dict)

    @property
    def increasing_density(self) -> FloatArray:
        """``dA/dt`` (primal) or ``dÃ/dt`` (dual), i.e. ``-D``."""
        return -self.drift

    def per_qv(self, S: float, sigma: float) -> dict:
        """Drift per unit ``<M>`` and integrands per unit ``M`` at price ``S``."""
        return {"drift": self.drift / (sigma * S) ** 2, "phi": self.phi / (sigma * S),
                "phi_perp": self.phi_perp, "lambda": self.theta / (sigma * S)}

    def interior(self, layers: int = 2) -> tuple[slice, slice, slice]:
        fs = slice(None) if self.f is None or self.f.size < 2 * layers + 1 else slice(layers, -layers)
        return slice(None), fs, slice(layers, -layers)


def _as_3d(field_) -> tuple[FloatArray, FloatArray | None, FloatArray, bool, dict, tuple | None]:
    if isinstance(field_, FactorValueField):
        return field_.t, field_.f, field_.k, field_.dual, field_.metadata, None
    if isinstance(field_, ValueField):
        return (field_.t, None, field_.x, False, field_.metadata,
                (field_.V, field_.V1, field_.V2))
    if isinstance(field_, DualValueField):
        return (field_.t, None, field_.y, True, field_.metadata,
                (field_.V, field_.V1, field_.V2))
    raise CapabilityError("decomposition needs a Markov value field")


def _estimate(field_, model: MarketSpec, use_analytic: bool = True, accuracy: int = 2) -> DecompositionField:
    t, f, k, dual, meta, analytic = _as_3d(field_)
    dt = _uniform_step(t, "time")
    if analytic is not None:
        V = analytic[0][:, None, :]
    else:
        V = field_.V
    if use_analytic and analytic is not None:
        V1, V2 = analytic[1][:, None, :], analytic[2][:, None, :]
    else:
        V1, V2 = k_derivatives(V, k, dual, accuracy)
    drift = d_time(V, dt)
    if f is None:
        if isinstance(model, BasisRisk):
            raise CapabilityError("basis-risk fields carry a factor coordinate")
        if not isinstance(model, BlackScholes):
            raise CapabilityError("non-Markov value field")
        phi = np.zeros_like(V)
        theta = np.full((1, 1, 1), model.sharpe)
        rho, rho_perp = 1.0, 0.0
    else:
        if not isinstance(model, BasisRisk):
            raise CapabilityError("factor fields need the basis-risk model")
        hf = _uniform_step(f, "factor")
        Vf = d_axis(V, hf, 1)
        Vff = d2_axis(V, hf, 1)
        b = model.drift(f)[None, :, None]
        a = model.vol(f) * np.ones_like(f)
        a = a[None, :, None]
        drift = drift + b * Vf + 0.5 * a**2 * Vff
        rho, rho_perp = model.rho, model.rho_perp
        phi = a * Vf
        theta = model.theta_of(f)[None, :, None]
    phi_m, phi_p = rho * phi, rho_perp * phi
    phi1 = k_derivatives(phi_m, k, dual, accuracy)[0]
    phi_perp1 = k_derivatives(phi_p, k, dual, accuracy)[0]
    md = {**meta, "dt": dt, "n_t": t.size, "n_k": k.size,
          "n_f": 1 if f is None else f.size, "derivatives": "analytic" if (use_analytic and analytic) else
          f"finite difference (order {accuracy})"}
    return DecompositionField(t, f, k, dual, V, V1, V2, drift, phi_m, phi_p, phi1, phi_perp1, theta, md)


def estimate_primal_decomposition(field_, model: MarketSpec, use_analytic: bool = False,
                                  accuracy: int = 2) -> DecompositionField:
    """Drift and integrands of ``V(t, x)``; x-derivatives by finite differences unless
    ``use_analytic`` and the field carries them."""
    if getattr(field_, "dual", False) or isinstance(field_, DualValueField):
        raise CapabilityError("expected a primal field")
    return _estimate(field_, model, use_analytic, accuracy)


def estimate_dual_decomposition(field_, model: MarketSpec, use_analytic: bool = False,
                                accuracy: int = 2) -> DecompositionField:
    """Mirror of :func:`estimate_primal_decomposition` on a (t, y) grid."""
    if isinstance(field_, ValueField) or (isinstance(field_, FactorValueField) and not field_.dual):
        raise CapabilityError("expected a dual field")
    return _estimate(field_, model, use_analytic, accuracy)


# --------------------------------------------------------------------------
# residuals
# --------------------------------------------------------------------------


def _norms(r: FloatArray) -> tuple[float, float]:
    return float(np.max(np.abs(r))), float(np.sqrt(np.mean(r**2)))


def primal_bspde_residual(dec: DecompositionField, utility: Utility | None = None,
                          threshold: float = 1e-3) -> ResidualReport:
    """``D - ½ (phi' + θ V')² / V''`` on the interior grid (``dt`` clock)."""
    sl = dec.interior()
    if np.any(dec.V2[sl] >= 0):
        raise ConcavityError("V'' >= 0 on the interior grid")
    r = dec.drift - 0.5 * (dec.phi1 + dec.theta * dec.V1) ** 2 / dec.V2
    r_int = r[sl]
    mx, l2 = _norms(r_int)
    rep = ResidualReport("primal_bspde", metadata={**dec.metadata, "clock": "dt"})
    rep.add("primal_residual_max", mx, threshold)
    rep.add("primal_residual_l2", l2, threshold)
    rep.add("supermartingale_sign_violation", float(np.max(np.maximum(dec.drift[sl], 0.0))), threshold,
            note="A increasing: drift of V must be <= 0")
    if utility is not None:
        term = float(np.max(np.abs(dec.V[-1] - utility.derivative(dec.k, 0)[None, :])))
        rep.add("terminal_condition", term, 0.0)
    rep.arrays["residual"] = r
    return rep


def dual_bspde_residual(dec: DecompositionField, utility: Utility | None = None,
                        primal: DecompositionField | None = None, threshold: float = 1e-3) -> ResidualReport:
    """Dual BSPDE residual; both readings of the orthogonal term are reported.

    The dual reading uses ``phĩ'_perp(t, y)``; the primal reading uses
    ``phi'_perp(t, x)`` at ``x = -Ṽ'(t, y)`` (needs ``primal``).  The pass
    flag follows the dual reading.
    """
    sl = dec.interior()
    if np.any(dec.V2[sl] <= 0):
        raise ConcavityError("Ṽ'' <= 0 on the interior grid")
    y = dec.k[None, None, :]
    base = dec.theta * y * dec.phi1 - 0.5 * dec.theta**2 * y**2 * dec.V2
    r_dual = dec.drift - (base + 0.5 * dec.phi_perp1**2 / dec.V2)
    mx, l2 = _norms(r_dual[sl])
    rep = ResidualReport("dual_bspde", metadata={**dec.metadata, "clock": "dt"})
    rep.add("dual_residual_max", mx, threshold)
    rep.add("dual_residual_l2", l2, threshold)
    rep.add("dual_increasing_sign_violation", float(np.max(np.maximum(dec.drift[sl], 0.0))), threshold,
            note="dÃ/dt = -D̃ must be >= 0")
    if utility is not None:
        ut = conjugate_array(utility, dec.k, order=0)[1]
        rep.add("terminal_condition", float(np.max(np.abs(dec.V[-1] - ut[None, :]))), 1e-12)
    if primal is not None:
        x_of_y = -dec.V1
        pp1 = transport(primal, primal.phi_perp1, x_of_y)
        r_primal = dec.drift - (base + 0.5 * pp1**2 / dec.V2)
        mx_p = float(np.max(np.abs(r_primal[sl])))
        rep.add("dual_residual_primal_reading_max", mx_p, math.inf, note="reported only")
        rep.metadata["matching_reading"] = "dual (phĩ'_perp)" if mx <= mx_p else "primal (phi'_perp)"
    rep.arrays["residual"] = r_dual
    return rep


def transport(primal: DecompositionField, values: FloatArray, x_query: FloatArray,
              on_outside: str = "raise") -> FloatArray:
    """Evaluate a primal grid quantity at ``x_query`` (same ``t``/``f`` layout).

    Four-point Lagrange interpolation along the uniform x grid; queries
    outside the interior x range raise :class:`GridError` (or become NaN
    with ``on_outside="nan"``).
    """
    x = primal.k
    h = _uniform_step(x, "x")
    lo, hi = x[2], x[-3]
    q = np.asarray(x_query, dtype=float)
    bad = (q < lo) | (q > hi)
    if np.any(bad) and on_outside == "raise":
        raise GridError(f"transport map leaves the x grid: range [{q.min():.4g}, {q.max():.4g}] "
                        f"vs interior [{lo:.4g}, {hi:.4g}]")
    qc = np.clip(q, lo, hi)
    j = np.clip(np.floor((qc - x[0]) / h).astype(int), 1, x.size - 3)
    s = (qc - x[j]) / h
    lead = np.broadcast_shapes(values.shape[:-1], q.shape[:-1])
    vals = np.broadcast_to(values, lead + (x.size,))
    jj = np.broadcast_to(j, lead + j.shape[-1:])
    s = np.broadcast_to(s, jj.shape)

    def take(o):
        return np.take_along_axis(vals, jj + o, -1)

    vm, v0, v1, v2 = take(-1), take(0), take(1), take(2)
    out = (-s * (s - 1) * (s - 2) / 6 * vm + (s + 1) * (s - 1) * (s - 2) / 2 * v0
           - (s + 1) * s * (s - 2) / 2 * v1 + (s + 1) * s * (s - 1) / 6 * v2)
    if on_outside == "nan":
        out = np.where(bad, np.nan, out)
    return out


def _rel(a: FloatArray, b: FloatArray) -> float:
    d = np.abs(a - b)
    scale = np.nanmax(np.abs(b))
    if scale == 0.0:
        return float(np.nanmax(d))
    return float(np.nanmax(d) / scale)


def transport_checks(primal: DecompositionField, dual: DecompositionField,
                    tol_abs: float = 1e-4, tol_rel: float = 1e-2, on_outside: str = "raise") -> ResidualReport:
    """Transport of integrands, curvature and drift between the primal and dual fields.

    With ``x(y) = -Ṽ'(t, y)``: ``phĩ = phi(x(y))``, ``phĩ_perp = phi_perp(x(y))``,
    ``Ṽ'' = -1/V''(x(y))``, ``phĩ' = phi'(x(y))/V''(x(y))`` and the drift
    identity ``D̃ = D - ½ phi'²/V'' - ½ phi'_perp²/V''`` at ``x(y)``.
    Integrand identities are relative to the sup-norm of the dual side
    (absolute when that vanishes); the last time slice is excluded.
    Dual points mapped outside the primal x grid raise :class:`GridError`
    unless ``on_outside="mask"``, which drops them from the norms.
    """
    if primal.t.size != dual.t.size or not np.allclose(primal.t, dual.t):
        raise GridError("primal and dual fields need the same time grid")
    xq = -dual.V1
    sl = dual.interior()
    cut = (slice(0, -1),) + sl[1:]

    def at_x(q):
        return transport(primal, q, xq, "nan" if on_outside == "mask" else "raise")

    rep = ResidualReport("transport", metadata={"n_t": dual.t.size, "n_y": dual.k.size})
    pairs = {
        "integrand": (dual.phi, at_x(primal.phi)),
        "orthogonal_integrand": (dual.phi_perp, at_x(primal.phi_perp)),
        "integrand_derivative": (dual.phi1, at_x(primal.phi1) / at_x(primal.V2)),
        "orthogonal_integrand_derivative": (dual.phi_perp1, at_x(primal.phi_perp1) / at_x(primal.V2)),
    }
    for name, (a, b) in pairs.items():
        a_, b_ = a[cut], b[cut]
        if np.nanmax(np.abs(a_)) == 0 and np.nanmax(np.abs(b_)) == 0:
            rep.add(f"{name}_residual", 0.0, tol_abs, note="both sides vanish")
        else:
            rep.add(f"{name}_relative_residual", _rel(b_, a_), tol_rel)
    v2x = at_x(primal.V2)
    rep.add("curvature_transport_max", float(np.nanmax(np.abs(dual.V2 + 1.0 / v2x)[sl])), tol_abs)
    drift_x = (at_x(primal.drift) - 0.5 * at_x(primal.phi1) ** 2 / v2x
               - 0.5 * at_x(primal.phi_perp1) ** 2 / v2x)
    rep.add("drift_transport_relative", _rel(drift_x[cut], dual.drift[cut]), tol_rel)
    y = dual.k[None, None, :]
    dual_drift = (dual.theta * y * dual.phi1 - 0.5 * dual.theta**2 * y**2 * dual.V2
                  + 0.5 * dual.phi_perp1**2 / dual.V2)
    rep.add("dual_drift_identity_relative", _rel(dual_drift[cut], dual.drift[cut]), tol_rel)
    conj = at_x(primal.V) - (dual.V - y * dual.V1)
    rep.add("conjugacy_max", float(np.nanmax(np.abs(conj[sl]))), tol_abs)
    return rep


def estimator_agreement(a: DecompositionField, b: DecompositionField, tol: float = 2e-2) -> ResidualReport:
    """Relative sup-norm disagreement of two independent decomposition estimates."""
    sl = a.interior()
    cut = (slice(0, -1),) + sl[1:]
    rep = ResidualReport("estimator_agreement", metadata={"a": a.metadata.get("entropy"),
                                                          "b": b.metadata.get("entropy")})
    for name in ("drift", "phi", "phi_perp"):
        rep.add(f"{name}_relative_difference", _rel(getattr(a, name)[cut], getattr(b, name)[cut]), tol)
    return rep


def derivative_value_decomposition_check(field_, model: MarketSpec, threshold: float = 1e-4
                                         ) -> ResidualReport:
    """Drift of ``V'`` against the x-derivative of the drift of ``V``.

    ``V'`` is taken from the field's analytic derivative when present (a
    fourth-order difference otherwise); ``∂_x D`` uses fourth-order centred
    differences.  The same is done for the ``M``-integrand.
    """
    dec = _estimate(field_, model, use_analytic=True, accuracy=4)
    t, f, k, dual, meta, analytic = _as_3d(field_)
    if dual:
        raise CapabilityError("expected a primal field")
    h = _uniform_step(k, "x")
    V1 = dec.V1 if analytic is not None else d_axis(dec.V, h, -1, 4)
    if isinstance(field_, FactorValueField):
        d_field = FactorValueField(t, f, k, V1, False, meta)
    else:
        d_field = ValueField(t, k, V1[:, 0, :], V1[:, 0, :], V1[:, 0, :], V1[:, 0, :], meta)
    ddec = _estimate(d_field, model, use_analytic=False, accuracy=4)
    sl = dec.interior(3)
    rep = ResidualReport("derivative_value_decomposition", metadata={**meta})
    dx_drift = d_axis(dec.drift, h, -1, 4)
    rep.add("drift_commutation_max", float(np.max(np.abs(ddec.drift - dx_drift)[sl])), threshold)
    dx_phi = d_axis(dec.phi, h, -1, 4)
    rep.add("integrand_commutation_max", float(np.max(np.abs(ddec.phi - dx_phi)[sl])), threshold)
    return rep


def martingale_field_derivative_check(flow, kernel, times_idx: list[int] | None = None, threshold: float = 1e-6) -> ResidualReport:
    """``ℳ'(t, x) = ℳ̄(t, x) X'_t(x)`` along simulated paths.

    ``ℳ(t, x) = V(t, X_t(x))`` is differentiated in ``x`` with fourth-order
    differences; ``ℳ̄(t, x) = V'(t, X_t(x))``.  Reported relative to
    ``max |ℳ̄ X'|``.
    """
    x = flow.x
    h = _uniform_step(x, "x")
    n_t = flow.times.size
    idx = times_idx if times_idx is not None else sorted({0, n_t // 4, n_t // 2, (3 * n_t) // 4, n_t - 1})
    rep = ResidualReport("martingale_field_derivative", metadata={"times": [float(flow.times[k]) for k in idx]})
    worst = 0.0
    for k in idx:
        pv = kernel.primal(float(flow.times[k]), flow.X[:, k, :])
        m_prime = d_axis(pv.V, h, -1, 4)[:, 2:-2]
        rhs = (pv.V1 * flow.X1[:, k, :])[:, 2:-2]
        worst = max(worst, float(np.max(np.abs(m_prime - rhs)) / np.max(np.abs(rhs))))
    rep.add("product_identity_relative_residual", worst, threshold)
    return rep
