"""Market models, path simulation and the structure-condition decomposition.

All models have one risky asset driven by a Brownian motion ``W``

    dS = sigma S (theta dt + dW),

so that ``S = M + ∫ lambda d<M>`` with ``dM = sigma S dW``,
``lambda = theta / (sigma S)`` and ``lambda^2 d<M> = theta^2 dt``.  The basis
risk model adds a non-traded factor ``Y`` with its own Brownian ``W_perp``.

Densities are always stored as ``log Z_t = log dQ/dP |F_t`` with
``Q`` the minimal martingale measure, whatever measure the paths were drawn
under.  Under a ``"Q"`` bundle ``E[1/Z_T] = 1``; under ``"P"`` ``E[Z_T] = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy.stats import norm

from .errors import CapabilityError, ModelError, WeightError
from .rng import BLOCK_SIZE, gaussian_increments

FloatArray = NDArray[np.float64]


class MarketSpec:
    sigma: float
    s0: float
    T: float

    complete = True
    constant_theta = False

    def theta(self, t, s, y=None):
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError

    def _validate(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ModelError(f"sigma must be positive, got {self.sigma}")
        if not self.s0 > 0:
            raise ModelError("s0 must be positive")
        if not self.T > 0:
            raise ModelError("horizon T must be positive")


@dataclass(frozen=True)
class BlackScholes(MarketSpec):
    mu: float
    sigma: float
    s0: float = 1.0
    T: float = 1.0

    constant_theta = True

    def __post_init__(self):
        self._validate()
        if not math.isfinite(self.mu / self.sigma):
            raise ModelError("Sharpe ratio must be finite")

    @classmethod
    def from_sharpe(cls, theta: float, sigma: float = 0.2, s0: float = 1.0, T: float = 1.0):
        return cls(mu=theta * sigma, sigma=sigma, s0=s0, T=T)

    @property
    def sharpe(self) -> float:
        return self.mu / self.sigma

    def theta(self, t, s, y=None):
        return np.full(np.shape(s), self.sharpe) if np.ndim(s) else self.sharpe

    def to_dict(self):
        return {"variant": "black_scholes", "mu": self.mu, "sigma": self.sigma, "s0": self.s0, "T": self.T}


@dataclass(frozen=True)
class MarkovSharpe(MarketSpec):
    """Sharpe ratio depending on (t, S); default ``theta0 + theta1 tanh(log S)``."""

    theta0: float
    theta1: float
    sigma: float
    s0: float = 1.0
    T: float = 1.0
    theta_fn: Callable | None = field(default=None, compare=False)

    def __post_init__(self):
        self._validate()

    def theta(self, t, s, y=None):
        if self.theta_fn is not None:
            return self.theta_fn(t, s)
        return self.theta0 + self.theta1 * np.tanh(np.log(s))

    def to_dict(self):
        return {"variant": "markov_sharpe", "theta0": self.theta0, "theta1": self.theta1,
                "sigma": self.sigma, "s0": self.s0, "T": self.T}


@dataclass(frozen=True)
class BasisRisk(MarketSpec):
    """Incomplete market with a non-traded factor ``Y``.

    dS = sigma S (theta(Y) dt + dW),
    dY = b(Y) dt + a(Y) (rho dW + sqrt(1 - rho^2) dW_perp),

    with ``theta(y) = theta0 + theta1 tanh(y)``, ``b(y) = -kappa y`` and
    ``a(y) = eta``.
    """

    theta0: float = 0.5
    theta1: float = 0.1
    kappa: float = 1.0
    eta: float = 0.5
    rho: float = 0.9
    y0: float = 0.0
    sigma: float = 0.2
    s0: float = 1.0
    T: float = 1.0

    complete = False

    def __post_init__(self):
        self._validate()
        if not abs(self.rho) < 1:
            raise ModelError("basis risk requires |rho| < 1")
        if not self.eta > 0:
            raise ModelError("factor volatility must be positive")

    def theta(self, t, s, y=None):
        return self.theta_of(y)

    def theta_of(self, y):
        return self.theta0 + self.theta1 * np.tanh(y)

    def theta_prime(self, y):
        return self.theta1 / np.cosh(y) ** 2

    def drift(self, y):
        return -self.kappa * np.asarray(y, dtype=float)

    def vol(self, y):
        return np.full_like(np.asarray(y, dtype=float), self.eta)

    @property
    def rho_perp(self) -> float:
        return math.sqrt(1.0 - self.rho**2)

    def to_dict(self):
        return {"variant": "basis_risk", "theta0": self.theta0, "theta1": self.theta1,
                "kappa": self.kappa, "eta": self.eta, "rho": self.rho, "y0": self.y0,
                "sigma": self.sigma, "s0": self.s0, "T": self.T}


def market_from_dict(doc: dict) -> MarketSpec:
    doc = dict(doc)
    variant = doc.pop("variant")
    if variant == "black_scholes":
        if "theta" in doc:
            theta = doc.pop("theta")
            return BlackScholes.from_sharpe(theta, **doc)
        return BlackScholes(**doc)
    if variant == "markov_sharpe":
        return MarkovSharpe(**doc)
    if variant == "basis_risk":
        return BasisRisk(**doc)
    raise ModelError(f"unknown market variant {variant!r}")


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not (self.T > 0) or int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ModelError("time grid needs T > 0 and a positive integer number of steps")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def times(self) -> FloatArray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t

    def index(self, t: float) -> int:
        """Index of grid time ``t``; raises if ``t`` is not on the grid."""
        k = int(round(t / self.dt))
        if not (0 <= k <= self.n_steps) or abs(k * self.dt - t) > 1e-9 * max(1.0, self.T):
            raise ModelError(f"time {t} is not a grid time")
        return k


def _freeze(a):
    if a is not None:
        a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PathBundle:
    model: MarketSpec
    grid: TimeGrid
    measure: str
    seed: int
    S: FloatArray           # (n_paths, n_steps + 1)
    log_z: FloatArray       # (n_paths, n_steps + 1)
    dW: FloatArray          # (n_paths, n_steps), increments of the driving BM under ``measure``
    Y: FloatArray | None = None
    dW_perp: FloatArray | None = None

    def __post_init__(self):
        for a in (self.S, self.log_z, self.dW, self.Y, self.dW_perp):
            _freeze(a)

    @property
    def n_paths(self) -> int:
        return self.S.shape[0]

    @property
    def times(self) -> FloatArray:
        return self.grid.times

    @property
    def Z(self) -> FloatArray:
        return np.exp(self.log_z)

    def coarsen(self, factor: int) -> "PathBundle":
        """Same paths observed on every ``factor``-th grid point (increments summed)."""
        if self.grid.n_steps % factor:
            raise ModelError("coarsening factor must divide the number of steps")
        n = self.grid.n_steps // factor

        def agg(d):
            return None if d is None else d.reshape(d.shape[0], n, factor).sum(axis=2)

        sl = slice(None, None, factor)
        return PathBundle(self.model, TimeGrid(self.grid.T, n), self.measure, self.seed,
                          self.S[:, sl].copy(), self.log_z[:, sl].copy(), agg(self.dW),
                          None if self.Y is None else self.Y[:, sl].copy(), agg(self.dW_perp))


def _accumulate(increments: FloatArray, start) -> FloatArray:
    out = np.empty((increments.shape[0], increments.shape[1] + 1))
    out[:, 0] = start
    np.cumsum(increments, axis=1, out=out[:, 1:])
    out[:, 1:] += start
    return out


def simulate_paths(model: MarketSpec, grid: TimeGrid, n_paths: int, seed: int,
                   measure: str = "P", *, threads: int = 1, scheme: str | None = None,
                   block_size: int = BLOCK_SIZE) -> PathBundle:
    """Simulate ``n_paths`` paths of the model on ``grid``.

    Black-Scholes paths use exact lognormal stepping (``scheme="euler"``
    switches to Euler on the price level, for convergence studies); the
    Markov models use Euler-Maruyama on ``log S`` and ``Y``.
    """
    if n_paths < 1:
        raise ModelError("n_paths must be >= 1")
    if measure not in ("P", "Q"):
        raise ModelError("measure must be 'P' or 'Q'")
    model._validate()
    dt, n = grid.dt, grid.n_steps
    n_streams = 2 if isinstance(model, BasisRisk) else 1
    inc = gaussian_increments(seed, n_paths, n, dt, n_streams, threads, block_size)
    dW = inc[0]
    dW_perp = inc[1] if n_streams == 2 else None
    sig = model.sigma
    under_p = measure == "P"

    if isinstance(model, BlackScholes):
        th = model.sharpe
        if scheme == "euler":
            S = np.empty((n_paths, n + 1))
            S[:, 0] = model.s0
            for k in range(n):
                S[:, k + 1] = S[:, k] * (1 + sig * ((th if under_p else 0.0) * dt + dW[:, k]))
        else:
            drift = (sig * th if under_p else 0.0) - 0.5 * sig**2
            S = np.exp(_accumulate(drift * dt + sig * dW, math.log(model.s0)))
        theta = np.full((n_paths, n), th)
        return PathBundle(model, grid, measure, seed, S, _log_density(theta, dW, dt, under_p), dW)

    times = grid.times
    log_s = np.empty((n_paths, n + 1))
    log_s[:, 0] = math.log(model.s0)
    theta = np.empty((n_paths, n))
    Y = None
    if isinstance(model, BasisRisk):
        Y = np.empty((n_paths, n + 1))
        Y[:, 0] = model.y0
        rp = model.rho_perp
    for k in range(n):
        s_k = np.exp(log_s[:, k])
        th = model.theta(times[k], s_k, None if Y is None else Y[:, k])
        theta[:, k] = th
        mkt = th if under_p else 0.0
        log_s[:, k + 1] = log_s[:, k] + (sig * mkt - 0.5 * sig**2) * dt + sig * dW[:, k]
        if Y is not None:
            y = Y[:, k]
            b = model.drift(y) - (0.0 if under_p else model.rho * model.vol(y) * th)
            Y[:, k + 1] = y + b * dt + model.vol(y) * (model.rho * dW[:, k] + rp * dW_perp[:, k])
    return PathBundle(model, grid, measure, seed, np.exp(log_s),
                      _log_density(theta, dW, dt, under_p), dW, Y, dW_perp)


def _log_density(theta, dW, dt, under_p):
    # log dQ/dP = -∫theta dW - ½∫theta² dt, with dW = dW^Q - theta dt under Q
    if under_p:
        inc = -theta * dW - 0.5 * theta**2 * dt
    else:
        inc = -theta * dW + 0.5 * theta**2 * dt
    return _accumulate(inc, 0.0)


def sharpe_on_paths(model: MarketSpec, paths: PathBundle) -> FloatArray:
    """theta at the left end of each step, shape ``(n_paths, n_steps)``."""
    t = paths.times[:-1]
    if isinstance(model, BasisRisk):
        return model.theta_of(paths.Y[:, :-1])
    if isinstance(model, BlackScholes):
        return np.full(paths.dW.shape, model.sharpe)
    return model.theta(t[None, :], paths.S[:, :-1])


def state_price_density(model: MarketSpec, paths: PathBundle) -> FloatArray:
    """``log Z_t = -∫theta dW - ½∫theta² ds`` accumulated on the grid.

    For a Q-bundle the same density dQ/dP is returned, written in terms of
    the Q-Brownian increments.
    """
    theta = sharpe_on_paths(model, paths)
    return _log_density(theta, paths.dW, paths.grid.dt, paths.measure == "P")


@dataclass(frozen=True)
class StructureDecomposition:
    dM: FloatArray          # realised martingale increments
    dM_euler: FloatArray    # leading part sigma S dW
    lam: FloatArray         # lambda = theta / (sigma S)
    d_qv: FloatArray        # d<M> = sigma² S² dt
    theta: FloatArray

    @property
    def drift(self) -> FloatArray:
        return self.lam * self.d_qv

    @property
    def sharpe_clock(self) -> FloatArray:
        """lambda² d<M>, which equals theta² dt."""
        return self.lam**2 * self.d_qv


def structure_decomposition(model: MarketSpec, paths: PathBundle) -> StructureDecomposition:
    """Split each price increment into ``dM + lambda d<M>``.

    ``dM`` is defined as the realised increment minus the drift so the
    identity holds exactly; ``dM_euler = sigma S dW`` is its leading term.
    """
    if paths.measure != "P":
        raise ModelError("structure decomposition expects P-paths")
    s = paths.S[:, :-1]
    theta = sharpe_on_paths(model, paths)
    d_qv = (model.sigma * s) ** 2 * paths.grid.dt
    lam = theta / (model.sigma * s)
    dS = np.diff(paths.S, axis=1)
    return StructureDecomposition(dS - lam * d_qv, model.sigma * s * paths.dW, lam, d_qv, theta)


def lognormal_density_quantile(model: MarketSpec, p: float) -> float:
    """p-quantile of Z_T for constant-Sharpe models."""
    if not isinstance(model, BlackScholes):
        raise CapabilityError("closed-form density quantile needs constant Sharpe ratio")
    th, T = model.sharpe, model.T
    return float(math.exp(abs(th) * math.sqrt(T) * norm.ppf(p) - 0.5 * th**2 * T))


# --------------------------------------------------------------------------
# empirical martingale test
# --------------------------------------------------------------------------


@dataclass
class MartingaleReport:
    pairs: list[tuple[int, int]]
    stats: FloatArray
    stderrs: FloatArray
    n_se: float = 3.0

    @property
    def passed_each(self) -> NDArray[np.bool_]:
        return np.abs(self.stats) <= self.n_se * self.stderrs

    @property
    def passed(self) -> bool:
        return bool(np.all(self.passed_each))

    @property
    def worst_z(self) -> float:
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.abs(self.stats) / self.stderrs
        z = np.where(self.stderrs > 0, z, np.where(self.stats == 0, 0.0, np.inf))
        return float(z.max()) if z.size else 0.0


def default_checkpoints(n_times: int, k: int = 5) -> list[int]:
    if n_times <= k:
        return list(range(n_times))
    return sorted(set(np.linspace(0, n_times - 1, k).round().astype(int).tolist()))


def empirical_martingale_test(values: FloatArray, weights: FloatArray | None = None,
                              checkpoints: list[int] | None = None, n_se: float = 3.0) -> MartingaleReport:
    """Increment statistics ``E[w (V_t - V_t')]`` for checkpoint pairs ``t' < t``.

    ``values`` has shape ``(n_paths, n_times)``; ``weights`` (one per path,
    e.g. a terminal density for a change of measure) must be positive.
    """
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("values must be finite")
    n_paths, n_times = values.shape
    w = np.ones(n_paths) if weights is None else np.asarray(weights, dtype=float)
    if np.any(~(w > 0)):
        raise WeightError("weights must be strictly positive")
    idx = checkpoints if checkpoints is not None else default_checkpoints(n_times)
    pairs, stats, ses = [], [], []
    for a_i, a in enumerate(idx):
        for b in idx[a_i + 1:]:
            inc = w * (values[:, b] - values[:, a])
            pairs.append((a, b))
            stats.append(inc.mean())
            ses.append(inc.std(ddof=1) / math.sqrt(n_paths) if n_paths > 1 else math.inf)
    return MartingaleReport(pairs, np.array(stats), np.array(ses), n_se)
