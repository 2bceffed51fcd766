"""Utility functions on the whole real line and their convex conjugates.

A utility is represented by its derivative ladder ``U, U', U'', U'''``
(and ``U''''`` for the exponential families).  The convex conjugate

    Ũ(y) = sup_x (U(x) - x y),   y > 0,

is computed by solving ``U'(x) = y`` with a bracketed, safeguarded Newton
iteration on ``log U'``, which is exact in one step for the exponential
utility and converges monotonically for mixtures of exponentials.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy.special import logsumexp

from .errors import CapabilityError, ConcavityError, DomainError, RegularityError

FloatArray = NDArray[np.float64]

ROOT_TOL = 1e-13
_MAX_BRACKET = 1e6


class Utility:
    """Base class.  Subclasses implement ``derivative`` for ``order <= max_order``."""

    max_order: int = 3

    def derivative(self, x: ArrayLike, order: int = 0) -> FloatArray:
        raise NotImplementedError

    def log_marginal(self, x: ArrayLike) -> FloatArray:
        """``log U'(x)``, ``-inf`` where ``U'(x) <= 0``."""
        up = self.derivative(x, 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(up > 0, np.log(np.where(up > 0, up, 1.0)), -np.inf)

    def risk_aversion(self, x: ArrayLike) -> FloatArray:
        return -self.derivative(x, 2) / self.derivative(x, 1)

    def initial_root_guess(self, log_y: FloatArray) -> FloatArray:
        return np.zeros_like(log_y)

    def log_marginal_and_ra(self, x):
        """``(log U'(x), -U''(x)/U'(x))`` in one pass."""
        return self.log_marginal(x), self.risk_aversion(x)

    # set when log U' is convex and the initial guess is a lower bound of the
    # root, so plain Newton converges monotonically without a bracket
    monotone_newton = False

    def to_dict(self) -> dict:
        raise NotImplementedError

    def __call__(self, x):
        return self.derivative(x, 0)


@dataclass(frozen=True)
class Exponential(Utility):
    """U(x) = -exp(-gamma x)."""

    gamma: float
    max_order: int = field(default=4, init=False, repr=False)

    def __post_init__(self):
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise DomainError(f"gamma must be positive and finite, got {self.gamma}")

    def derivative(self, x, order=0):
        _check_order(self, order)
        x = np.asarray(x, dtype=float)
        return -((-self.gamma) ** order) * np.exp(-self.gamma * x)

    def log_marginal(self, x):
        return math.log(self.gamma) - self.gamma * np.asarray(x, dtype=float)

    def risk_aversion(self, x):
        return np.full_like(np.asarray(x, dtype=float), self.gamma)

    def initial_root_guess(self, log_y):
        return (math.log(self.gamma) - log_y) / self.gamma

    monotone_newton = True

    def to_dict(self):
        return {"variant": "exponential", "gamma": float(self.gamma)}


@dataclass(frozen=True)
class ExponentialMixture(Utility):
    """U(x) = -sum_i w_i exp(-gamma_i x) with positive weights summing to one."""

    weights: tuple[float, ...]
    gammas: tuple[float, ...]
    max_order: int = field(default=4, init=False, repr=False)

    def __post_init__(self):
        w = tuple(float(v) for v in self.weights)
        g = tuple(float(v) for v in self.gammas)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "gammas", g)
        if len(w) == 0 or len(w) != len(g):
            raise DomainError("weights and gammas must be non-empty and of equal length")
        if any(v <= 0 for v in w) or abs(sum(w) - 1.0) > 1e-12:
            raise DomainError("weights must be positive and sum to 1")
        if any(not (v > 0 and math.isfinite(v)) for v in g):
            raise DomainError("gammas must be positive and finite")

    def _terms(self, x):
        x = np.asarray(x, dtype=float)
        g = np.asarray(self.gammas)
        return x, g.reshape((-1,) + (1,) * x.ndim), np.asarray(self.weights).reshape((-1,) + (1,) * x.ndim)

    def derivative(self, x, order=0):
        _check_order(self, order)
        x, g, w = self._terms(x)
        return -np.sum(w * (-g) ** order * np.exp(-g * x), axis=0)

    def log_marginal(self, x):
        x, g, w = self._terms(x)
        return logsumexp(np.log(w * g) - g * x, axis=0)

    def risk_aversion(self, x):
        return self.log_marginal_and_ra(x)[1]

    def log_marginal_and_ra(self, x):
        # R1 is the mean of the gammas under weights proportional to w_i gamma_i e^{-gamma_i x}
        x = np.asarray(x, dtype=float)
        logits = [math.log(w * g) - g * x for w, g in zip(self.weights, self.gammas)]
        top = logits[0]
        for a in logits[1:]:
            top = np.maximum(top, a)
        total = np.zeros_like(x)
        weighted = np.zeros_like(x)
        for a, g in zip(logits, self.gammas):
            e = np.exp(a - top)
            total += e
            weighted += g * e
        return top + np.log(total), weighted / total

    monotone_newton = True

    def initial_root_guess(self, log_y):
        # every component alone gives a lower bound for the root
        g = np.asarray(self.gammas).reshape((-1,) + (1,) * np.ndim(log_y))
        w = np.asarray(self.weights).reshape(g.shape)
        return np.max((np.log(w * g) - log_y) / g, axis=0)

    def to_dict(self):
        return {"variant": "mixture", "weights": list(self.weights), "gammas": list(self.gammas)}


@dataclass(frozen=True)
class CustomUtility(Utility):
    """Utility given by user-supplied analytic derivatives ``[U, U', U'', U''']``."""

    derivatives: tuple[Callable[[FloatArray], FloatArray], ...]
    name: str = "custom"
    params: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.derivatives) < 2:
            raise CapabilityError("a custom utility needs at least U and U'")

    @property
    def max_order(self):  # type: ignore[override]
        return len(self.derivatives) - 1

    def derivative(self, x, order=0):
        _check_order(self, order)
        x = np.asarray(x, dtype=float)
        return np.asarray(self.derivatives[order](x), dtype=float) * np.ones_like(x)

    def to_dict(self):
        return {"variant": self.name, **self.params}


def quadratic_utility(scale: float = 1.0) -> CustomUtility:
    """U(x) = -scale x^2; violates Inada and monotonicity (negative control)."""
    return CustomUtility(
        derivatives=(
            lambda x: -scale * x**2,
            lambda x: -2.0 * scale * x,
            lambda x: -2.0 * scale * np.ones_like(x),
            lambda x: np.zeros_like(x),
        ),
        name="quadratic",
        params={"scale": scale},
    )


# Alias: every Utility instance doubles as a utility specification.
UtilitySpec = Utility


def utility_from_dict(doc: dict) -> Utility:
    """Build a utility from its key-value document (raises ``KeyError``/``DomainError``)."""
    variant = doc["variant"]
    if variant == "exponential":
        return Exponential(float(doc["gamma"]))
    if variant == "mixture":
        return ExponentialMixture(tuple(doc["weights"]), tuple(doc["gammas"]))
    if variant == "quadratic":
        return quadratic_utility(float(doc.get("scale", 1.0)))
    raise DomainError(f"unknown utility variant {variant!r}")


def _check_order(u: Utility, order: int) -> None:
    if not isinstance(order, (int, np.integer)) or order < 0:
        raise CapabilityError(f"derivative order must be a non-negative integer, got {order!r}")
    if order > u.max_order:
        raise CapabilityError(f"{type(u).__name__} provides derivatives up to order {u.max_order}")


def evaluate(u: Utility, x: float, order: int = 0) -> float:
    """The ``order``-th derivative of ``u`` at the finite point ``x``."""
    if not math.isfinite(x):
        raise DomainError(f"x must be finite, got {x}")
    return float(u.derivative(x, order))


# --------------------------------------------------------------------------
# convex conjugate
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ConjugateView:
    y: float
    u_tilde: float
    x_star: float
    d1: float
    d2: float
    d3: float


def marginal_inverse(u: Utility, y: ArrayLike) -> FloatArray:
    """Solve ``U'(x) = y`` elementwise (vectorised safeguarded Newton on ``log U'``)."""
    y = np.asarray(y, dtype=float)
    if np.any(~(y > 0)) or np.any(~np.isfinite(y)):
        raise DomainError("conjugate requires finite y > 0")
    log_y = np.log(y)
    x = np.array(u.initial_root_guess(log_y), dtype=float, copy=True)
    if u.monotone_newton:
        for _ in range(100):
            lm, ra = u.log_marginal_and_ra(x)
            g = lm - log_y
            if np.all(np.abs(g) <= ROOT_TOL):
                return x
            x_new = x + g / ra
            if np.array_equal(x_new, x):
                return x
            x = x_new
        raise RegularityError("Newton iteration for U'(x) = y did not converge")
    g = u.log_marginal(x) - log_y
    if np.all(np.abs(g) <= ROOT_TOL):
        return x

    # bracket: g decreasing in x
    lo = x.copy()
    hi = x.copy()
    step = np.ones_like(x)
    need = g < 0  # root lies to the left
    while np.any(need):
        lo = np.where(need, lo - step, lo)
        step = np.where(need, 2 * step, step)
        if np.any(np.abs(lo) > _MAX_BRACKET):
            raise RegularityError("no root of U'(x) = y to the left (Inada condition violated?)")
        need = u.log_marginal(lo) - log_y < 0
    step = np.ones_like(x)
    need = g > 0
    while np.any(need):
        hi = np.where(need, hi + step, hi)
        step = np.where(need, 2 * step, step)
        if np.any(np.abs(hi) > _MAX_BRACKET):
            raise RegularityError("no root of U'(x) = y to the right (Inada condition violated?)")
        need = u.log_marginal(hi) - log_y > 0

    for _ in range(200):
        g = u.log_marginal(x) - log_y
        done = np.abs(g) <= ROOT_TOL
        if np.all(done):
            return x
        lo = np.where(g > 0, x, lo)
        hi = np.where(g < 0, x, hi)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = x + g / u.risk_aversion(x)
        ok = np.isfinite(newton) & (newton > lo) & (newton < hi)
        x_new = np.where(ok, newton, 0.5 * (lo + hi))
        if np.all((x_new == x) | done):
            return x
        x = np.where(done, x, x_new)
    raise RegularityError("root finding for U'(x) = y did not converge")


def conjugate_array(u: Utility, y: ArrayLike, order: int = 3) -> tuple[FloatArray, ...]:
    """Vectorised conjugate: ``(x_star, Ũ, Ũ', Ũ'', Ũ''')`` truncated at ``order``."""
    y = np.asarray(y, dtype=float)
    x = marginal_inverse(u, y)
    out = [x, u.derivative(x, 0) - x * y]
    if order >= 1:
        out.append(-x)
    if order >= 2:
        u2 = u.derivative(x, 2)
        if np.any(u2 >= 0):
            raise ConcavityError("U'' >= 0 at a conjugate point")
        out.append(-1.0 / u2)
        if order >= 3:
            out.append(u.derivative(x, 3) / u2**3)
    return tuple(out)


def conjugate(u: Utility, y: float) -> ConjugateView:
    """Convex conjugate of ``u`` at ``y > 0`` with its first three derivatives.

    Uses ``Ũ'' = -1/U''(x*)`` and ``Ũ''' = U'''(x*)/U''(x*)^3``.
    """
    if not (y > 0) or not math.isfinite(y):
        raise DomainError(f"conjugate requires finite y > 0, got {y}")
    x, ut, d1, d2, d3 = conjugate_array(u, np.array([y]), order=min(3, u.max_order))
    return ConjugateView(float(y), float(ut[0]), float(x[0]), float(d1[0]), float(d2[0]), float(d3[0]))


# --------------------------------------------------------------------------
# regularity diagnostics
# --------------------------------------------------------------------------


def regularity_coefficients(u: Utility, x: float) -> tuple[float, float, float, float]:
    """``(R1, R2, B1, B2)`` at ``x``.

    R1 = -U''/U', R2 = -U'''/U''; B1 = 1/R1 and B2 = R2/R1**2 are the
    magnitudes of y Ũ''(y) and y² Ũ'''(y) at y = U'(x).
    """
    u1, u2, u3 = (float(u.derivative(x, k)) for k in (1, 2, 3))
    if u2 >= 0:
        raise ConcavityError(f"U''({x}) = {u2} is not negative")
    r1 = -u2 / u1
    r2 = -u3 / u2
    return r1, r2, 1.0 / r1, r2 / r1**2


@dataclass
class ProbeGrid:
    x_max: float = 40.0
    n: int = 801
    tail_points: int = 40

    def __post_init__(self):
        if self.x_max < 20:
            raise DomainError("probe grid must span at least [-20, 20]")

    @property
    def points(self) -> FloatArray:
        return np.linspace(-self.x_max, self.x_max, self.n)

    @property
    def tail(self) -> FloatArray:
        return np.geomspace(1.0, self.x_max, self.tail_points)


@dataclass
class RegularityReport:
    inada_pass: bool
    inada_witness: dict
    elasticity_pass: bool
    elasticity_limsup: float
    elasticity_liminf: float
    rav1_pass: bool
    rav1_bounds: tuple[float, float] | None
    r1_pass: bool
    r1_witness: dict
    r2_pass: bool | None
    r2_witness: dict
    b1_range: tuple[float, float] | None
    b2_range: tuple[float, float] | None
    notes: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        rec = {
            "inada_pass": self.inada_pass,
            "elasticity_pass": self.elasticity_pass,
            "elasticity_limsup": self.elasticity_limsup,
            "elasticity_liminf": self.elasticity_liminf,
            "rav1_pass": self.rav1_pass,
            "rav1_c1": None if self.rav1_bounds is None else self.rav1_bounds[0],
            "rav1_c2": None if self.rav1_bounds is None else self.rav1_bounds[1],
            "r1_pass": self.r1_pass,
            "r2_pass": self.r2_pass,
            "b1_min": None if self.b1_range is None else self.b1_range[0],
            "b1_max": None if self.b1_range is None else self.b1_range[1],
            "b2_min": None if self.b2_range is None else self.b2_range[0],
            "b2_max": None if self.b2_range is None else self.b2_range[1],
            "notes": list(self.notes),
        }
        for prefix, wit in (("inada", self.inada_witness), ("r1", self.r1_witness), ("r2", self.r2_witness)):
            for k, v in wit.items():
                rec[f"{prefix}_{k}"] = v
        return rec

    @property
    def failures(self) -> list[str]:
        names = []
        for name in ("inada", "elasticity", "rav1", "r1"):
            if not getattr(self, f"{name}_pass"):
                names.append(name)
        if self.r2_pass is False:
            names.append("r2")
        return names

    @property
    def gate_failures(self) -> list[str]:
        """Conditions that block downstream pipelines: Inada, the risk-aversion
        bounds, and the pair (r1, r2) of which one suffices.  Elasticity is
        reported only."""
        names = [n for n in ("inada", "rav1") if not getattr(self, f"{n}_pass")]
        if not self.r1_pass and not self.r2_pass:
            names.append("r1_or_r2")
        return names


def _finite_range(v: FloatArray) -> tuple[float, float] | None:
    v = v[np.isfinite(v)]
    return (float(v.min()), float(v.max())) if v.size else None


def check_regularity(
    u: Utility,
    probes: ProbeGrid | None = None,
    market=None,
    *,
    eps: float = 1e-6,
    n_paths: int = 4096,
    seed: int = 0,
    lipschitz_cap: float = 1e6,
) -> RegularityReport:
    """Finite-grid diagnostics of the structural conditions on ``u``.

    Limits are probed on finite grids, so every verdict is a report rather
    than a proof.  ``market`` (a market spec) enables the bounded-density
    check, which compares the sample maximum of Z_T at ``n_paths`` and
    ``16 * n_paths`` paths.
    """
    probes = probes or ProbeGrid()
    x = probes.points
    notes = ["liminf Z_T(y)/y > 0 is not numerically verifiable",
             "asymptotic elasticity is reported but gates nothing"]

    with np.errstate(all="ignore"):
        u1 = u.derivative(x, 1)
        u2 = u.derivative(x, 2)
        u3 = u.derivative(x, 3) if u.max_order >= 3 else np.full_like(x, np.nan)

    # Inada
    right, left = float(u1[-1]), float(u1[0])
    monotone = bool(np.all(u1 > 0))
    concave = bool(np.all(u2 < 0))
    inada_pass = monotone and concave and right < eps and left > 1.0 / eps
    inada_witness = {"u1_right": right, "u1_left": left, "monotone": monotone, "concave": concave}

    # asymptotic elasticity on geometric tails
    tail = probes.tail
    q = max(1, tail.size // 4)
    with np.errstate(all="ignore"):
        el_pos = tail * u.derivative(tail, 1) / u.derivative(tail, 0)
        el_neg = -tail * u.derivative(-tail, 1) / u.derivative(-tail, 0)
    limsup = float(np.nanmax(el_pos[-q:])) if np.any(np.isfinite(el_pos[-q:])) else math.nan
    liminf = float(np.nanmin(el_neg[-q:])) if np.any(np.isfinite(el_neg[-q:])) else math.nan
    elasticity_pass = bool(limsup < 1 and liminf > 1)

    # relative risk aversion bounds
    with np.errstate(all="ignore"):
        r1 = -u2 / u1
        r2 = -u3 / u2
    rav1_pass = bool(monotone and concave and np.all(np.isfinite(r1)) and r1.min() > 0)
    rav1_bounds = (float(r1.min()), float(r1.max())) if rav1_pass else None

    # r1): R1 bounded away from 0 and infinity, R2 bounded and Lipschitz
    r1_witness: dict = {}
    if u.max_order < 3:
        r1_pass = False
        r1_witness["reason"] = "third derivative unavailable"
    else:
        finite = bool(np.all(np.isfinite(r2)))
        half = np.abs(x) <= probes.x_max / 2
        sup_full = float(np.max(np.abs(r2))) if finite else math.inf
        sup_half = float(np.max(np.abs(r2[half]))) if finite else math.inf
        lip = float(np.max(np.abs(np.diff(r2)) / np.diff(x))) if finite else math.inf
        # growth towards the tails is the finite-grid signature of unboundedness
        bounded = finite and sup_full <= 10 * max(sup_half, 1.0)
        r1_pass = bool(rav1_pass and bounded and lip <= lipschitz_cap)
        r1_witness.update({"r2_sup": sup_full, "r2_sup_half": sup_half, "r2_lipschitz": lip})

    with np.errstate(all="ignore"):
        b1 = 1.0 / r1
        b2 = r2 / r1**2

    # r2): bounded density of the martingale measure
    r2_pass: bool | None = None
    r2_witness: dict = {}
    if market is not None:
        from .market import TimeGrid, simulate_paths, lognormal_density_quantile

        grid = TimeGrid(market.T, 1)
        small = simulate_paths(market, grid, n_paths, seed, "P")
        large = simulate_paths(market, grid, 16 * n_paths, seed + 1, "P")
        m_small = float(np.exp(small.log_z[:, -1].max()))
        m_large = float(np.exp(large.log_z[:, -1].max()))
        grows = m_large > m_small * (1 + 1e-9)
        q_theory = lognormal_density_quantile(market, 1.0 - 1.0 / (16 * n_paths))
        four = u.max_order >= 4
        r2_pass = bool(four and not grows)
        r2_witness = {"max_z_small": m_small, "max_z_large": m_large,
                      "lognormal_quantile": q_theory, "fourth_derivative": four}
    else:
        notes.append("r2 not evaluated: no market supplied")

    return RegularityReport(
        inada_pass=inada_pass,
        inada_witness=inada_witness,
        elasticity_pass=elasticity_pass,
        elasticity_limsup=limsup,
        elasticity_liminf=liminf,
        rav1_pass=rav1_pass,
        rav1_bounds=rav1_bounds,
        r1_pass=r1_pass,
        r1_witness=r1_witness,
        r2_pass=r2_pass,
        r2_witness=r2_witness,
        b1_range=_finite_range(b1),
        b2_range=_finite_range(b2),
        notes=notes,
    )


def mixture_bounds(u: Utility) -> tuple[float, float]:
    """Exact risk-aversion bounds (min, max gamma) for the exponential families."""
    if isinstance(u, Exponential):
        return u.gamma, u.gamma
    if isinstance(u, ExponentialMixture):
        return min(u.gammas), max(u.gammas)
    raise CapabilityError("closed-form risk-aversion bounds only for exponential families")

