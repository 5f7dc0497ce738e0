"""Stochastic exponentials, the budget constant and the adjoint processes.

For a utility U with I = (U')^-1 the optimal terminal wealth is
x(T, y) = I(c Gamma(T, y)), where c = p(0, y) is fixed by the budget
x0 = E[I(c Gamma) Gamma0].  Two exponentials enter:

    Gamma0 = exp(-int theta dB - 1/2 int theta^2 ds),    theta = b0 / sigma0
    Gamma  = exp(-int (Phi + theta) dB + 1/2 int (Phi^2 - theta^2) ds)

in a market without jumps, and in a market driven by one Poisson process
(kappa = b0 / (lambda gamma0))

    Gamma0 = exp(int [ln(1 - kappa) + kappa] lambda ds + int ln(1 - kappa) dNtilde)
    Gamma  = exp(int [ln(1 - kappa) - ln(1 + Psi)] dNtilde
                 + lambda int {[ln(1 - kappa) + kappa] - [ln(1 + Psi) - Psi]} ds).

Exponents are accumulated with left-point sums on the path grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .donsker import DENSITY_FLOOR, cond_density, density_triple
from .errors import BracketFailure, DensityFloor, InvalidRegime
from .market import MarketSpec, PathBundle
from .portfolio import VOL_FLOOR
from .quadrature import DEFAULT_QUAD

C_LOW = 1e-12
C_HIGH = 1e12
BROWNIAN = "brownian"
POISSON = "poisson"


@dataclass(frozen=True)
class UtilitySpec:
    """Log utility or power utility U(x) = x^rho / rho with rho < 1, rho != 0."""

    kind: str = "log"
    rho: float | None = None

    def __post_init__(self):
        if self.kind == "log":
            return
        if self.kind != "power":
            raise ValueError(f"unknown utility kind {self.kind!r}")
        if self.rho is None or not (self.rho < 1 and self.rho != 0):
            raise ValueError("power utility needs rho < 1 and rho != 0")

    @classmethod
    def log(cls):
        return cls("log")

    @classmethod
    def power(cls, rho):
        return cls("power", float(rho))

    def utility(self, x):
        x = np.asarray(x, dtype=float)
        return np.log(x) if self.kind == "log" else x**self.rho / self.rho

    def marginal(self, x):
        x = np.asarray(x, dtype=float)
        return 1.0 / x if self.kind == "log" else x ** (self.rho - 1.0)

    def inverse_marginal(self, z):
        z = np.asarray(z, dtype=float)
        return 1.0 / z if self.kind == "log" else z ** (1.0 / (self.rho - 1.0))


@dataclass(frozen=True)
class ExponentialPair:
    gamma0_T: np.ndarray
    gamma_T: np.ndarray

    def __post_init__(self):
        if not (np.all(self.gamma0_T > 0) and np.all(self.gamma_T > 0)):
            raise ValueError("stochastic exponentials must be strictly positive")


def market_regime(market: MarketSpec, insider=None) -> str:
    """Brownian variant without jumps, Poisson variant for a one-mark pure jump market."""
    jumps = market.has_jumps and insider is not None and insider.has_jumps
    if not jumps:
        return BROWNIAN
    if not market.has_diffusion and insider.n_marks == 1:
        return POISSON
    raise InvalidRegime(
        "the exponentials are available for Brownian markets and one-mark pure jump markets only"
    )


def _theta(market, t, y):
    s0 = market.sigma0_at(t, y)
    if np.any(np.abs(s0) < VOL_FLOOR):
        raise InvalidRegime("sigma0 must stay away from zero in the Brownian variant")
    return market.b0_at(t, y) / s0


def _kappa(market, insider, t, y):
    lam = insider.rates[0]
    g = market.gamma0_at(t, y, 1)[..., 0]
    if np.any(g == 0):
        raise InvalidRegime("gamma0 must be nonzero in the Poisson variant")
    kappa = market.b0_at(t, y) / (lam * g)
    if np.any(kappa >= 1.0):
        raise InvalidRegime(f"b0/(lambda gamma0) = {np.max(kappa):.6g} must be < 1")
    return kappa


def log_gamma0_trajectory(path: PathBundle, market: MarketSpec, y) -> np.ndarray:
    """ln Gamma0(t_k, y) on the grid up to T; shape (paths, steps to T + 1)."""
    ins = path.insider
    regime = market_regime(market, ins)
    kT = path.grid_index(market.T)
    n = path.n_paths
    y = np.broadcast_to(np.asarray(y, dtype=float), (n,))
    dt = path.dt
    out = np.zeros((n, kT + 1))
    for k in range(kT):
        t = float(path.times[k])
        if regime == BROWNIAN:
            th = _theta(market, t, y)
            incr = -th * path.dB[:, k] - 0.5 * th * th * dt
        else:
            lam = ins.rates[0]
            kap = _kappa(market, ins, t, y)
            l1k = np.log1p(-kap)
            dn_tilde = path.counts[:, k, 0] - lam * dt
            incr = (l1k + kap) * lam * dt + l1k * dn_tilde
        out[:, k + 1] = out[:, k] + incr
    return out


def gamma0_path(path: PathBundle, market: MarketSpec, y) -> np.ndarray:
    """Gamma0(T, y) per path."""
    return np.exp(log_gamma0_trajectory(path, market, y)[:, -1])


def _ratio_source(insider, quad):
    def ratios(t, y, state):
        m, phi, psi, _ = density_triple(insider, t, y, state.y_t, quad)
        if np.any(~(m > DENSITY_FLOOR)):
            raise DensityFloor(f"conditional density below floor at t={t}")
        return phi, psi

    return ratios


def _as_field(value):
    if value is None or callable(value):
        return value
    return lambda t, y, state, _v=float(value): np.full(np.shape(y), _v)


def log_gamma_path(
    path: PathBundle,
    insider,
    market: MarketSpec,
    y,
    *,
    method: str = "grid",
    phi=None,
    psi=None,
    quad=DEFAULT_QUAD,
) -> np.ndarray:
    """ln Gamma(T, y) per path.

    ``method="grid"`` accumulates the exponent with left-point sums and the
    ratios Phi (or Psi) at the grid times; ``phi``/``psi`` override the
    ratios with a constant or a callable (t, y, state).  ``method="density"``
    uses Gamma0 / Gamma = M(T, y) / M(0, y) with M evaluated exactly; it needs
    a Brownian market and an insider without jumps.
    """
    regime = market_regime(market, insider)
    kT = path.grid_index(market.T)
    n = path.n_paths
    y = np.broadcast_to(np.asarray(y, dtype=float), (n,))
    if method == "density":
        if regime != BROWNIAN or insider.has_jumps:
            raise ValueError("the density route needs a Brownian market and a continuous insider")
        log_g0 = log_gamma0_trajectory(path, market, y)[:, -1]
        m_T = np.asarray(cond_density(insider, market.T, y, path.Y[:, kT], quad))
        m_0 = np.asarray(cond_density(insider, 0.0, y, np.zeros(n), quad))
        if np.any(~(m_T > DENSITY_FLOOR)):
            raise DensityFloor("conditional density at T below floor")
        return log_g0 - np.log(m_T) + np.log(m_0)
    if method != "grid":
        raise ValueError(f"unknown method {method!r}")
    phi_f = _as_field(phi)
    psi_f = _as_field(psi)
    ratios = _ratio_source(insider, quad)
    dt = path.dt
    out = np.zeros(n)
    for k in range(kT):
        t = float(path.times[k])
        state = path.state(k)
        if regime == BROWNIAN:
            ph = phi_f(t, y, state) if phi_f is not None else ratios(t, y, state)[0]
            th = _theta(market, t, y)
            out += -(ph + th) * path.dB[:, k] + 0.5 * (ph * ph - th * th) * dt
        else:
            ps = psi_f(t, y, state) if psi_f is not None else ratios(t, y, state)[1][..., 0]
            lam = insider.rates[0]
            kap = _kappa(market, insider, t, y)
            l1k = np.log1p(-kap)
            l1p = np.log1p(ps)
            dn_tilde = path.counts[:, k, 0] - lam * dt
            out += (l1k - l1p) * dn_tilde + lam * ((l1k + kap) - (l1p - ps)) * dt
    return out


def gamma_path(path, insider, market, y, **kw) -> np.ndarray:
    """Gamma(T, y) per path; keywords as in ``log_gamma_path``."""
    return np.exp(log_gamma_path(path, insider, market, y, **kw))


def exponential_pair(path, insider, market, y, **kw) -> ExponentialPair:
    return ExponentialPair(gamma0_path(path, market, y), gamma_path(path, insider, market, y, **kw))


# -- the budget constant -----------------------------------------------------------


@dataclass(frozen=True)
class BudgetSolution:
    c: float
    budget: float  # Monte Carlo E[I(c Gamma) Gamma0] at c
    se: float
    iterations: int
    pair: ExponentialPair

    def feasible(self, x0):
        return abs(self.budget - x0) < max(1e-8 * x0, 0.5 * self.se)


def budget_map(c, utility: UtilitySpec, pair: ExponentialPair):
    """Sample values of I(c Gamma) Gamma0, one per path."""
    return utility.inverse_marginal(c * pair.gamma_T) * pair.gamma0_T


def solve_c_on_pair(pair: ExponentialPair, utility: UtilitySpec, x0: float) -> BudgetSolution:
    """Bisection in log c on [C_LOW, C_HIGH] with the sample fixed (common random numbers).

    The sample budget is strictly decreasing in c, so the bisection runs to
    the resolution of double precision.
    """
    def mean_budget(c):
        return float(np.mean(budget_map(c, utility, pair)))

    lo, hi = math.log(C_LOW), math.log(C_HIGH)
    b_lo, b_hi = mean_budget(C_LOW), mean_budget(C_HIGH)
    if not (b_lo > x0 > b_hi):
        raise BracketFailure(
            f"x0={x0} is not bracketed: E[I(c Gamma) Gamma0] = {b_lo:.6g} at c={C_LOW}, "
            f"{b_hi:.6g} at c={C_HIGH}"
        )
    it = 0
    while it < 400:
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if mean_budget(math.exp(mid)) > x0:
            lo = mid
        else:
            hi = mid
        it += 1
    # keep the endpoint whose budget is closer to x0
    c_lo, c_hi = math.exp(lo), math.exp(hi)
    c = c_lo if abs(mean_budget(c_lo) - x0) <= abs(mean_budget(c_hi) - x0) else c_hi
    sample = budget_map(c, utility, pair)
    se = float(np.std(sample, ddof=1) / math.sqrt(sample.size)) if sample.size > 1 else math.inf
    return BudgetSolution(c, float(np.mean(sample)), se, it, pair)


def solve_c(
    insider,
    market: MarketSpec,
    utility: UtilitySpec,
    y,
    n_paths: int,
    seed: int,
    *,
    steps: int | None = None,
    paths: PathBundle | None = None,
    **gamma_kw,
) -> BudgetSolution:
    """c = p(0, y) with x0 = E[I(c Gamma(T, y)) Gamma0(T, y)] on a seeded path set."""
    from .market import DEFAULT_STEPS, simulate_paths

    if paths is None:
        paths = simulate_paths(insider, market, n_paths, seed, steps=steps or DEFAULT_STEPS)
    pair = exponential_pair(paths, insider, market, y, **gamma_kw)
    return solve_c_on_pair(pair, utility, market.x0)


# -- adjoint processes ---------------------------------------------------------------


@dataclass(frozen=True)
class AdjointTrajectory:
    times: np.ndarray
    p: np.ndarray  # (paths, grid points up to T)
    q: np.ndarray
    r: np.ndarray  # (paths, grid points, marks)
    terminal_ratio: np.ndarray | None = None  # p(T) / (U'(x(T)) M(T) / M(0))


def adjoint_processes(
    path: PathBundle,
    market: MarketSpec,
    y,
    c: float,
    *,
    wealth_T=None,
    utility: UtilitySpec | None = None,
    quad=DEFAULT_QUAD,
) -> AdjointTrajectory:
    """p(t, y) = c Gamma0(t, y) with q, r from the linear relations.

    With ``wealth_T`` and ``utility`` given, the terminal condition
    p(T) = U'(x(T)) M(T, y) is reported as a ratio, M normalised by M(0, y).
    """
    ins = path.insider
    regime = market_regime(market, ins)
    n = path.n_paths
    y = np.broadcast_to(np.asarray(y, dtype=float), (n,))
    p = c * np.exp(log_gamma0_trajectory(path, market, y))
    kT = p.shape[1] - 1
    times = path.times[: kT + 1]
    q = np.zeros_like(p)
    r = np.zeros(p.shape + (ins.n_marks,))
    for k in range(kT + 1):
        t = float(times[k])
        if regime == BROWNIAN:
            q[:, k] = -_theta(market, t, y) * p[:, k]
        else:
            r[:, k, 0] = -_kappa(market, ins, t, y) * p[:, k]
    ratio = None
    if wealth_T is not None and utility is not None:
        m_T = np.asarray(cond_density(ins, market.T, y, path.Y[:, kT], quad))
        m_0 = np.asarray(cond_density(ins, 0.0, y, np.zeros(n), quad))
        ratio = p[:, -1] / (utility.marginal(wealth_T) * m_T / m_0)
    return AdjointTrajectory(times, p, q, r, ratio)
