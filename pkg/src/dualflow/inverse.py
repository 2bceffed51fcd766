"""Inverse of the optimal wealth map, ``psi_t(x) = X_t^{-1}(x)``.

Two independent routes:

* :func:`invert_pathwise` brackets ``x`` between grid values of the monotone
  map ``z -> X_t(z)``, interpolates linearly and polishes with Newton
  steps against the exact flow;
* :func:`integrate_inverse_sde` integrates

      dpsi = -(pi/X') dS + (pi' pi / X'^2) d<S> - ½ (X'' pi^2 / X'^3) d<S>

  by Euler-Maruyama, with the coefficients tabulated on a z grid and read
  off by monotone cubic (Fritsch-Carlson) interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .duality import CompleteFlow, Flow, WealthFlow
from .errors import BlowUpError, ExtrapolationError, RepresentationError
from .market import PathBundle
from .report import ResidualReport

FloatArray = NDArray[np.float64]


@dataclass
class InverseFlowField:
    """``psi`` of shape ``(n_paths, n_times, n_x)`` for targets ``x``."""

    x: FloatArray
    times: FloatArray
    psi: FloatArray
    method: str
    metadata: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.psi.shape[0]


# --------------------------------------------------------------------------
# monotone cubic interpolation, one curve per row
# --------------------------------------------------------------------------


def _edge_slope(h0, h1, d0, d1):
    s = ((2 * h0 + h1) * d0 - h0 * d1) / (h0 + h1)
    s = np.where(np.sign(s) != np.sign(d0), 0.0, s)
    return np.where((np.sign(d0) != np.sign(d1)) & (np.abs(s) > 3 * np.abs(d0)), 3 * d0, s)


def pchip_slopes(z: FloatArray, vals: FloatArray) -> FloatArray:
    """Fritsch-Carlson node slopes for every row of ``vals`` on the common grid ``z``."""
    h = np.diff(z)
    delta = np.diff(vals, axis=-1) / h
    d = np.zeros_like(vals)
    if z.size == 2:
        d[...] = delta
        return d
    w1 = 2 * h[1:] + h[:-1]
    w2 = h[1:] + 2 * h[:-1]
    dl, dr = delta[..., :-1], delta[..., 1:]
    same = dl * dr > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        hm = (w1 + w2) / (w1 / dl + w2 / dr)
    d[..., 1:-1] = np.where(same, hm, 0.0)
    d[..., 0] = _edge_slope(h[0], h[1], delta[..., 0], delta[..., 1])
    d[..., -1] = _edge_slope(h[-1], h[-2], delta[..., -1], delta[..., -2])
    return d


def pchip_rows(z: FloatArray, vals: FloatArray, q: FloatArray) -> tuple[FloatArray, NDArray[np.bool_]]:
    """Evaluate row ``i`` of the monotone interpolant at ``q[i]``.

    ``vals`` has shape ``(n, n_z)``, ``q`` shape ``(n,)`` or ``(n, m)``.
    Returns the values and a mask of queries outside ``[z[0], z[-1]]``.
    """
    q = np.asarray(q, dtype=float)
    outside = (q < z[0]) | (q > z[-1]) | ~np.isfinite(q)
    qc = np.clip(np.where(np.isfinite(q), q, z[0]), z[0], z[-1])
    d = pchip_slopes(z, vals)
    i = np.clip(np.searchsorted(z, qc, side="right") - 1, 0, z.size - 2)
    rows = np.arange(vals.shape[0]).reshape((-1,) + (1,) * (q.ndim - 1))
    h = z[i + 1] - z[i]
    s = (qc - z[i]) / h
    y0, y1 = vals[rows, i], vals[rows, i + 1]
    m0, m1 = d[rows, i] * h, d[rows, i + 1] * h
    s2, s3 = s * s, s * s * s
    out = ((2 * s3 - 3 * s2 + 1) * y0 + (s3 - 2 * s2 + s) * m0
           + (-2 * s3 + 3 * s2) * y1 + (s3 - s2) * m1)
    return out, outside


# --------------------------------------------------------------------------
# route 1: pathwise inversion
# --------------------------------------------------------------------------


def invert_pathwise(flow: WealthFlow, x_targets: ArrayLike, newton_steps: int = 8,
                    tol: float = 1e-12) -> InverseFlowField:
    """Solve ``X_t(psi) = x`` per path and grid time.

    The bracket comes from the grid values ``flow.X``; linear interpolation
    gives the start point and Newton steps on the exact flow (kept inside
    the bracket) reduce ``|X_t(psi) - x|`` to ``tol (1 + |x|)``.
    """
    xt = np.asarray(x_targets, dtype=float)
    paths = flow.paths
    n_p, n_t, _ = flow.X.shape
    psi = np.empty((n_p, n_t, xt.size))
    z = flow.x
    if np.any(np.diff(flow.X, axis=2) <= 0):
        bad = np.argwhere(np.diff(flow.X, axis=2) <= 0)[0]
        raise ExtrapolationError("wealth map is not strictly increasing on its grid",
                                 int(bad[0]), int(bad[1]))
    worst = 0.0
    for k in range(n_t):
        Xk = flow.X[:, k, :]
        lo_ok = Xk[:, :1] <= xt[None, :]
        hi_ok = Xk[:, -1:] >= xt[None, :]
        if not (np.all(lo_ok) and np.all(hi_ok)):
            p = int(np.argwhere(~(lo_ok & hi_ok))[0, 0])
            raise ExtrapolationError(f"target outside the sampled range of X_t at t={flow.times[k]:g}",
                                     p, k)
        if k == 0:
            psi[:, 0, :] = xt
            continue
        j = np.empty((n_p, xt.size), dtype=int)
        for c, target in enumerate(xt):
            j[:, c] = np.clip((Xk < target).sum(axis=1) - 1, 0, z.size - 2)
        rows = np.arange(n_p)[:, None]
        x0, x1 = Xk[rows, j], Xk[rows, j + 1]
        a, b = z[j], z[j + 1]
        p = a + (xt[None, :] - x0) / (x1 - x0) * (b - a)
        t = float(flow.times[k])
        Zk, Sk = paths.Z[:, k], paths.S[:, k]
        Yk = None if paths.Y is None else paths.Y[:, k]
        scale = tol * (1 + np.abs(xt[None, :]))
        for _ in range(newton_steps + 1):
            sl = flow.flow.at(t, Zk, Sk, p, Yk)
            r = sl.X - xt[None, :]
            if np.all(np.abs(r) <= scale):
                break
            a = np.where(r < 0, np.maximum(a, p), a)
            b = np.where(r > 0, np.minimum(b, p), b)
            step = p - r / sl.X1
            p = np.where(np.abs(r) <= scale, p,
                         np.where((step >= a) & (step <= b), step, 0.5 * (a + b)))
        worst = max(worst, float(np.max(np.abs(r) / (1 + np.abs(xt[None, :])))))
        psi[:, k, :] = p
    return InverseFlowField(xt, flow.times.copy(), psi, "inversion",
                            {"max_relative_residual": worst, "newton_steps": newton_steps})


def closed_form_inverse(flow: CompleteFlow, paths: PathBundle, x_targets: ArrayLike) -> InverseFlowField:
    """``psi_t(x) = -Ṽ'(0, V'(t, x)/Z_t)`` on every grid time."""
    xt = np.asarray(x_targets, dtype=float)
    psi = np.empty((paths.n_paths, paths.times.size, xt.size))
    for k, t in enumerate(paths.times):
        psi[:, k, :] = flow.inverse(float(t), paths.Z[:, k, None], xt[None, :])
    psi[:, 0, :] = xt
    return InverseFlowField(xt, paths.times.copy(), psi, "closed form")


def roundtrip_residual(flow: Flow, paths: PathBundle, inv: InverseFlowField) -> float:
    """``sup |X_t(psi_t(x)) - x|`` over paths, times and targets."""
    worst = 0.0
    for k, t in enumerate(paths.times):
        sl = flow.at(float(t), paths.Z[:, k], paths.S[:, k], inv.psi[:, k, :],
                     None if paths.Y is None else paths.Y[:, k])
        worst = max(worst, float(np.max(np.abs(sl.X - inv.x[None, :]))))
    return worst


# --------------------------------------------------------------------------
# route 2: the inverse-flow SDE
# --------------------------------------------------------------------------


def inverse_sde_coefficients(flow: Flow, t: float, Z: FloatArray, S: FloatArray, z: FloatArray,
                             sigma: float, Y: FloatArray | None = None) -> tuple[FloatArray, FloatArray]:
    """Per-path coefficient tables on ``z``: loading on ``dS`` and drift per ``dt``."""
    sl = flow.at(t, Z, S, z, Y)
    X1 = sl.X1
    load = -sl.pi / X1
    qv = (sigma * np.asarray(S)[:, None]) ** 2  # d<S>/dt
    drift = (sl.pi1 * sl.pi / X1**2 - 0.5 * sl.X2 * sl.pi**2 / X1**3) * qv
    return np.broadcast_to(load, drift.shape), drift


def integrate_inverse_sde(flow: Flow, x_targets: ArrayLike, paths: PathBundle, z_grid: ArrayLike,
                          on_exit: str = "raise") -> InverseFlowField:
    """Euler-Maruyama solution of the inverse-flow SDE on the bundle's grid.

    ``on_exit="raise"`` turns any excursion of ``psi`` outside the z grid into
    :class:`BlowUpError`; ``"freeze"`` stops the offending paths and counts
    them in ``metadata["exits"]``.
    """
    xt = np.asarray(x_targets, dtype=float)
    z = np.asarray(z_grid, dtype=float)
    sigma = flow.model.sigma
    n_p, n_t = paths.n_paths, paths.times.size
    psi = np.empty((n_p, n_t, xt.size))
    cur = np.broadcast_to(xt, (n_p, xt.size)).copy()
    psi[:, 0, :] = cur
    alive = np.ones_like(cur, dtype=bool)
    exits = 0
    dt = paths.grid.dt
    dS = np.diff(paths.S, axis=1)
    for k in range(n_t - 1):
        t = float(paths.times[k])
        Yk = None if paths.Y is None else paths.Y[:, k]
        load, drift = inverse_sde_coefficients(flow, t, paths.Z[:, k], paths.S[:, k], z, sigma, Yk)
        c_load, out1 = pchip_rows(z, np.ascontiguousarray(load), cur)
        c_drift, out2 = pchip_rows(z, drift, cur)
        out = (out1 | out2) & alive
        if np.any(out):
            exits += int(out.sum())
            if on_exit == "raise":
                raise BlowUpError(f"inverse flow left the z grid at t={t:g}", exits)
            alive &= ~out
        step = c_load * dS[:, k, None] + c_drift * dt
        cur = np.where(alive, cur + step, cur)
        psi[:, k + 1, :] = cur
    return InverseFlowField(xt, paths.times.copy(), psi, "sde",
                            {"exits": exits, "dt": dt, "z_grid": [float(z[0]), float(z[-1]), z.size]})


# --------------------------------------------------------------------------
# divergence-form PSDE
# --------------------------------------------------------------------------


def merton_feedback(flow: CompleteFlow) -> Callable:
    """``H_t(w) = theta (-V'(t, w) / V''(t, w)) / (sigma S_t)`` so that ``pi_t(x) = H_t(X_t(x))``.

    The returned callable maps ``(t, S, w)`` to an array shaped like ``w``
    broadcast against ``S[:, None]``.
    """
    th, sig = flow.theta, flow.model.sigma

    def H(t: float, S: FloatArray, w: FloatArray) -> FloatArray:
        if flow.exponential:
            r = np.full(np.shape(w), 1.0 / flow.utility.gamma)
        else:
            pv = flow.kernel.primal(t, w)
            r = -pv.V1 / pv.V2
        return th * r / (sig * np.asarray(S)[:, None])

    return H


def divergence_form_check(flow: WealthFlow, inverse: InverseFlowField, H: Callable,
                          spatial_stride: int = 0, representation_tol: float = 1e-8,
                          threshold: float = 5e-2) -> ResidualReport:
    """Residual of ``dpsi = -H psi' dS + ½ (H^2 psi')' d<S>`` on the target grid.

    ``psi'`` and ``(H^2 psi')'`` are centred differences in ``x`` (uniform
    grid).  Per-step residuals are accumulated along each path; the reported
    statistic is the largest path-mean absolute accumulated residual per
    unit time over interior targets (the two outer layers are excluded).

    With ``spatial_stride > 0`` the finite-difference coefficients are also
    compared, every ``spatial_stride`` steps, with the same coefficients
    built from exact derivatives ``psi' = 1/X'(psi)``,
    ``psi'' = -X''(psi)/X'(psi)^3`` and a fine-step derivative of ``H``; this
    is the spatial (Δx) component of the residual.
    """
    paths = flow.paths
    x = inverse.x
    h = float(x[1] - x[0])
    if not np.allclose(np.diff(x), h, rtol=1e-9, atol=0):
        raise ValueError("divergence-form check needs a uniform x grid")
    sig, dt, T = flow.flow.model.sigma, paths.grid.dt, paths.grid.T
    psi = inverse.psi
    n_t = paths.times.size
    n_p = paths.n_paths

    rep_err = 0.0
    for k in range(0, n_t, max(1, (n_t - 1) // 8)):
        Hk = H(float(paths.times[k]), paths.S[:, k], flow.X[:, k, :])
        rep_err = max(rep_err, float(np.max(np.abs(flow.pi[:, k, :] - Hk) / (1 + np.abs(Hk)))))
    if rep_err > representation_tol:
        raise RepresentationError(f"strategy is not of the form H_t(X_t(x)): mismatch {rep_err:.3g}")

    inner = slice(2, -2)
    cum = np.zeros((n_p, x.size - 4))
    worst = 0.0
    spatial = []
    xb = np.broadcast_to(x, (n_p, x.size))
    for k in range(n_t - 1):
        t = float(paths.times[k])
        Sk = paths.S[:, k]
        Hk = H(t, Sk, xb)
        p = psi[:, k, :]
        d1 = np.gradient(p, h, axis=1)
        div = np.gradient(Hk**2 * d1, h, axis=1)
        qv = (sig * Sk[:, None]) ** 2
        dS = (paths.S[:, k + 1] - Sk)[:, None]
        cum += (psi[:, k + 1, :] - p + Hk * d1 * dS - 0.5 * div * qv * dt)[:, inner]
        worst = max(worst, float(np.max(np.mean(np.abs(cum), axis=0))))
        if spatial_stride and k % spatial_stride == 0 and k > 0:
            sl = flow.flow.at(t, paths.Z[:, k], Sk, p)
            e1 = 1.0 / sl.X1
            e2 = -sl.X2 / sl.X1**3
            eps = 1e-4 * h
            Hp = (H(t, Sk, xb + eps) - H(t, Sk, xb - eps)) / (2 * eps)
            ediv = 2 * Hk * Hp * e1 + Hk**2 * e2
            diff_load = np.abs(Hk * (d1 - e1)) * sig * Sk[:, None]
            diff_drift = 0.5 * np.abs(div - ediv) * qv
            spatial.append(float(np.max(np.mean((diff_load + diff_drift)[:, inner], axis=0))))
    rep = ResidualReport("divergence_form", metadata={"dt": dt, "dx": h, "n_paths": n_p,
                                                      "representation_error": rep_err})
    rep.add("residual_mean_per_unit_time", worst / T, threshold)
    rep.add("residual_max_per_unit_time", float(np.max(np.abs(cum))) / T, math.inf, note="reported only")
    if spatial:
        rep.add("spatial_component", max(spatial), math.inf,
                note="finite-difference part of the coefficients, per unit time")
    return rep
