"""Optimal insider portfolios and the maximum-principle stationarity check.

For log utility with jumps the optimal fraction pi solves, at each (t, y),

    f(pi) = b0 - pi sigma0^2 + sigma0 Phi
            + sum_k nu_k gamma_k (Psi_k - pi gamma_k) / (1 + pi gamma_k) = 0

with Phi, Psi_k the derivative ratios of the conditional density.  f is the
pi-derivative of the concave per-(t, y) objective

    pi b0 - pi^2 sigma0^2 / 2 + sigma0 Phi pi
          + sum_k nu_k [(1 + Psi_k) ln(1 + pi gamma_k) - pi gamma_k]

so its root on the admissible interval {1 + pi gamma_k > floor} is the argmax.
The root finder is vectorised over a batch of independent problems.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .donsker import DENSITY_FLOOR, InsiderSpec, density_triple
from .errors import (
    DegenerateMarket,
    DegenerateVolatility,
    DensityFloor,
    InvalidRegime,
    NoRootInBracket,
)
from .market import ADMISSIBILITY_FLOOR, MarketSpec
from .quadrature import DEFAULT_QUAD

FOC_TOL = 1e-10
VOL_FLOOR = 1e-12
MAX_PROBES = 80
MAX_ITER = 200
CONVERGED = "converged"
NO_SOLUTION = "no_solution"


@dataclass
class PolicyResult:
    pi: float
    foc_residual: float
    admissibility_margin: float
    hamiltonian_grad: float | None = None
    status: str = CONVERGED
    endpoint_values: tuple | None = None


@dataclass
class AdjointState:
    p: float
    q: float
    r: dict = field(default_factory=dict)


# -- the first-order condition ------------------------------------------------


def foc_value(pi, b0, sigma0, gamma, nu, phi, psi):
    """f(pi); ``gamma``, ``nu``, ``psi`` carry the marks on their last axis."""
    pi = np.asarray(pi, dtype=float)
    out = b0 - pi * sigma0**2 + sigma0 * phi
    if np.shape(gamma)[-1]:
        pg = pi[..., None] * gamma
        out = out + np.sum(nu * gamma * (psi - pg) / (1.0 + pg), axis=-1)
    return out


def foc_slope(pi, b0, sigma0, gamma, nu, phi, psi):
    pi = np.asarray(pi, dtype=float)
    out = -(sigma0**2) * np.ones_like(pi)
    if np.shape(gamma)[-1]:
        pg = pi[..., None] * gamma
        out = out - np.sum(nu * gamma**2 * (1.0 + psi) / (1.0 + pg) ** 2, axis=-1)
    return out


def objective(pi, b0, sigma0, gamma, nu, phi, psi):
    """The per-(t, y) log-utility integrand, divided by the conditional density."""
    pi = np.asarray(pi, dtype=float)
    out = pi * b0 - 0.5 * (pi * sigma0) ** 2 + sigma0 * phi * pi
    if np.shape(gamma)[-1]:
        pg = pi[..., None] * gamma
        out = out + np.sum(nu * ((1.0 + psi) * np.log1p(pg) - pg), axis=-1)
    return out


def objective_curvature(pi, b0, sigma0, gamma, nu, phi, psi):
    return foc_slope(pi, b0, sigma0, gamma, nu, phi, psi)


def admissible_interval(gamma, nu, floor=ADMISSIBILITY_FLOOR):
    """Open interval of pi with 1 + pi gamma_k > floor for every charged mark."""
    gamma = np.asarray(gamma, dtype=float)
    live = (np.asarray(nu) > 0) & (gamma != 0)
    with np.errstate(divide="ignore"):
        bound = np.where(live, (floor - 1.0) / np.where(live, gamma, 1.0), np.nan)
    lo = np.max(np.where(live & (gamma > 0), bound, -np.inf), axis=-1)
    hi = np.min(np.where(live & (gamma < 0), bound, np.inf), axis=-1)
    return lo, hi


def _margin(pi, gamma, nu):
    if not np.shape(gamma)[-1]:
        return np.ones(np.shape(pi))
    m = 1.0 + np.asarray(pi)[..., None] * gamma
    m = np.where(np.asarray(nu) > 0, m, np.inf)
    out = np.min(m, axis=-1)
    return np.where(np.isinf(out), 1.0, out)


def foc_root(b0, sigma0, gamma, nu, phi, psi, *, tol=FOC_TOL, floor=ADMISSIBILITY_FLOOR):
    """Vectorised root of f on the admissible interval.

    Scalars broadcast against batch arrays; mark arrays have the marks on the
    last axis.  Returns (pi, residual, found, f_lo, f_hi) where ``found`` is
    False wherever no sign change exists inside the interval; ``f_lo`` and
    ``f_hi`` are the last probed endpoint values.
    """
    gamma = np.asarray(gamma, dtype=float)
    nu = np.asarray(nu, dtype=float)
    psi = np.asarray(psi, dtype=float)
    batch = np.broadcast_shapes(
        np.shape(b0), np.shape(sigma0), np.shape(phi), gamma.shape[:-1], psi.shape[:-1], nu.shape[:-1]
    )
    K = gamma.shape[-1]
    b0 = np.broadcast_to(np.asarray(b0, dtype=float), batch).ravel()
    sigma0 = np.broadcast_to(np.asarray(sigma0, dtype=float), batch).ravel()
    phi = np.broadcast_to(np.asarray(phi, dtype=float), batch).ravel()
    gamma = np.broadcast_to(gamma, batch + (K,)).reshape(-1, K)
    nu = np.broadcast_to(nu, batch + (K,)).reshape(-1, K)
    psi = np.broadcast_to(psi, batch + (K,)).reshape(-1, K)
    n = b0.size
    args = (b0, sigma0, gamma, nu, phi, psi)

    def f(x):
        with np.errstate(divide="ignore", invalid="ignore"):
            return foc_value(x, *args)

    lo_bound, hi_bound = admissible_interval(gamma, nu, floor)
    f0 = f(np.zeros(n))
    up = f0 > 0
    # walk from pi = 0 towards the side where f changes sign: geometric steps
    # on an unbounded side, halving the distance to the bound otherwise
    a = np.zeros(n)
    b = np.zeros(n)
    fa = f0.copy()
    fb = f0.copy()
    bound = np.where(up, hi_bound, lo_bound)
    open_side = ~np.isfinite(bound)
    bound = np.where(open_side, 0.0, bound)
    found = f0 == 0
    active = ~found
    step = np.ones(n)
    for k in range(MAX_PROBES):
        if not active.any():
            break
        finite_probe = bound * (1.0 - 0.5 ** (k + 1))
        inf_probe = np.where(up, 1.0, -1.0) * step
        probe = np.where(open_side, inf_probe, finite_probe)
        fp = f(probe)
        hit = active & np.isfinite(fp) & (fp <= 0) & up
        hit |= active & np.isfinite(fp) & (fp >= 0) & ~up
        # remember the last point on the starting side
        same = active & ~hit
        a = np.where(same & up, probe, a)
        fa = np.where(same & up, fp, fa)
        b = np.where(same & ~up, probe, b)
        fb = np.where(same & ~up, fp, fb)
        b = np.where(hit & up, probe, b)
        fb = np.where(hit & up, fp, fb)
        a = np.where(hit & ~up, probe, a)
        fa = np.where(hit & ~up, fp, fa)
        found |= hit
        active &= ~hit
        step *= 2.0
        # the bound is reached in floating point: stop probing that side
        if np.any(active & ~open_side):
            stuck = active & ~open_side & (_margin(probe, gamma, nu) <= 2 * floor)
            active &= ~stuck
    exact = f0 == 0
    bracketed = found & ~exact
    x = np.where(exact, 0.0, 0.5 * (a + b))
    # a carries f > 0 and b carries f < 0; keep them ordered as an interval
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    f_lo_is_pos = a <= b
    done = ~bracketed
    fx = f(x)
    for _ in range(MAX_ITER):
        if done.all():
            break
        slope = foc_slope(x, *args)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = x - fx / slope
        pos = fx > 0
        # f decreases through the root: f > 0 means the root lies to the right
        # when the positive endpoint is the left one
        move_right = pos == f_lo_is_pos
        lo = np.where(~done & move_right, x, lo)
        hi = np.where(~done & ~move_right, x, hi)
        ok = np.isfinite(newton) & (newton > lo) & (newton < hi)
        x_new = np.where(ok, newton, 0.5 * (lo + hi))
        x = np.where(done, x, x_new)
        fx = f(x)
        width = hi - lo
        done |= (np.abs(fx) < tol) & ((width <= 1e-14 * np.maximum(1.0, np.abs(x))) | (np.abs(fx) < 0.01 * tol))
        done |= width <= 4e-16 * np.maximum(1.0, np.abs(x))
    pi = np.where(found, x, np.nan)
    resid = np.where(found, np.abs(f(np.where(found, x, 0.0))), np.nan)
    f_lo = np.where(up, f0, fb)
    f_hi = np.where(up, fa, f0)
    out = (pi, resid, found, f_lo, f_hi)
    return tuple(o.reshape(batch) for o in out)


def _scan_grid(lo, hi, n=2000, span=1e6):
    """Points that are geometrically dense near 0 and near each finite bound."""
    offs = np.geomspace(1e-9, span, n)
    pts = [np.zeros(1), offs, -offs]
    if np.isfinite(lo):
        pts.append(lo + offs)
    if np.isfinite(hi):
        pts.append(hi - offs)
    grid = np.unique(np.concatenate(pts))
    return grid[(grid > lo) & (grid < hi)]


def _maybe_multiple_roots(b0, sigma0, gamma, nu, phi, psi, lo, hi):
    """Roots of every sign change on a dense scan (for non-monotone f)."""
    grid = _scan_grid(lo, hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = foc_value(grid, b0, sigma0, gamma, nu, phi, psi)
    roots = []
    for j in np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0):
        a, b = grid[j], grid[j + 1]
        fa = vals[j]
        for _ in range(200):
            m = 0.5 * (a + b)
            fm = foc_value(m, b0, sigma0, gamma, nu, phi, psi)
            if np.sign(fm) == np.sign(fa):
                a, fa = m, fm
            else:
                b = m
        roots.append(0.5 * (a + b))
    return roots


def _mark_arrays(gamma_by_mark, nu, psi_by_mark):
    if isinstance(nu, dict):
        marks = list(nu.keys())
        nu_arr = np.array([nu[z] for z in marks], dtype=float)
        gam = np.array([gamma_by_mark[z] for z in marks], dtype=float)
        psi = np.array([psi_by_mark.get(z, 0.0) for z in marks], dtype=float) if isinstance(
            psi_by_mark, dict
        ) else np.broadcast_to(np.asarray(psi_by_mark, dtype=float), nu_arr.shape)
        return gam, nu_arr, psi
    nu_arr = np.atleast_1d(np.asarray(nu, dtype=float))
    gam = np.broadcast_to(np.atleast_1d(np.asarray(gamma_by_mark, dtype=float)), nu_arr.shape)
    psi = np.broadcast_to(np.atleast_1d(np.asarray(psi_by_mark, dtype=float)), nu_arr.shape)
    return np.array(gam), nu_arr, np.array(psi)


def _stationarity_grad(b0, sigma0, gamma, nu):
    """dH/dpi at x = 1, p = 1 with the adjoint relations of the market's regime."""
    adj = relation_adjoint(1.0, b0, sigma0, gamma, nu)
    if adj is None:
        return None
    return float(b0 * adj.p + sigma0 * adj.q + sum(g * adj.r.get(k, 0.0) * v for k, (g, v) in enumerate(zip(gamma, nu))))


def relation_adjoint(p, b0, sigma0, gamma, nu) -> AdjointState | None:
    """(p, q, r) tied by the linear relations that make dH/dpi vanish.

    With a Brownian component q = -(b0/sigma0) p and r = 0; in a pure jump
    market r = -b0 p / sum_k nu_k gamma_k for every mark (the Poisson relation
    r = -(b0/(lambda gamma0)) p when there is one mark).  ``r`` is keyed by mark
    position.
    """
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    if abs(sigma0) >= VOL_FLOOR:
        return AdjointState(p=p, q=-(b0 / sigma0) * p, r={k: 0.0 for k in range(gamma.size)})
    weight = float(np.sum(nu * gamma))
    if weight == 0.0:
        return None
    return AdjointState(p=p, q=0.0, r={k: -(b0 / weight) * p for k in range(gamma.size)})


def _result(pi, resid, found, f_lo, f_hi, b0, sigma0, gamma, nu, phi, psi, strict, tol):
    if np.any(1.0 + psi < 0):
        # f may be non-monotone: collect every root and keep the best objective
        lo, hi = admissible_interval(gamma, nu)
        roots = _maybe_multiple_roots(b0, sigma0, gamma, nu, phi, psi, float(lo), float(hi))
        if roots:
            vals = [objective(r, b0, sigma0, gamma, nu, phi, psi) for r in roots]
            pi = roots[int(np.argmax(vals))]
            resid = abs(foc_value(pi, b0, sigma0, gamma, nu, phi, psi))
            found = True
    if not found:
        if strict:
            raise NoRootInBracket(
                f"first-order condition has no root on the admissible interval "
                f"(f at probed ends: {f_lo:.6g}, {f_hi:.6g})"
            )
        return PolicyResult(
            math.nan, math.nan, math.nan, None, NO_SOLUTION, (float(f_lo), float(f_hi))
        )
    return PolicyResult(
        float(pi),
        float(resid),
        float(_margin(pi, gamma, nu)),
        _stationarity_grad(b0, sigma0, gamma, nu),
        CONVERGED,
    )


# -- public solvers -------------------------------------------------------------


def log_pi_brownian(b0, sigma0, phi) -> PolicyResult:
    """Log-optimal fraction b0/sigma0^2 + phi/sigma0 in a market without jumps."""
    if abs(sigma0) < VOL_FLOOR:
        raise DegenerateVolatility(f"|sigma0| = {abs(sigma0):.3g} is below {VOL_FLOOR}")
    pi = b0 / sigma0**2 + phi / sigma0
    resid = abs(b0 - pi * sigma0**2 + sigma0 * phi)
    return PolicyResult(pi, resid, 1.0, _stationarity_grad(b0, sigma0, [], []))


def solve_foc_levy(
    b0, sigma0, gamma0_by_mark, nu, phi, psi_by_mark, *, strict=False, tol=FOC_TOL
) -> PolicyResult:
    """Root of the log-utility first-order condition for a discrete mark measure.

    ``nu`` is a mapping mark -> intensity (then ``gamma0_by_mark`` and
    ``psi_by_mark`` are mappings too) or an array aligned with the others.
    """
    gamma, nu_arr, psi = _mark_arrays(gamma0_by_mark, nu, psi_by_mark)
    if abs(sigma0) < VOL_FLOOR and not np.any((gamma != 0) & (nu_arr > 0)):
        raise DegenerateMarket("market has neither diffusion nor jump exposure")
    out = foc_root(b0, sigma0, gamma, nu_arr, phi, psi, tol=tol)
    return _result(*(float(o) for o in out), b0, sigma0, gamma, nu_arr, phi, psi, strict, tol)


def solve_foc_bp(b0, sigma0, gamma0, lam, phi, psi, *, strict=False, tol=FOC_TOL) -> PolicyResult:
    """The first-order condition with a single unit jump of intensity ``lam``."""
    if abs(sigma0) < VOL_FLOOR and gamma0 == 0:
        raise DegenerateMarket("sigma0 = 0 and gamma0 = 0")
    return solve_foc_levy(b0, sigma0, [gamma0], [lam], phi, [psi], strict=strict, tol=tol)


def poisson_regime_ratio(b0, gamma0, lam):
    if gamma0 == 0:
        raise DegenerateMarket("pure jump market needs gamma0 != 0")
    kappa = b0 / (lam * gamma0)
    if kappa >= 1.0:
        raise InvalidRegime(f"b0/(lambda gamma0) = {kappa:.6g} must be < 1")
    return kappa


def solve_foc_poisson_pure(b0, gamma0, lam, psi, *, strict=False, tol=FOC_TOL) -> PolicyResult:
    """Log-optimal fraction in a market driven by a single Poisson process."""
    poisson_regime_ratio(b0, gamma0, lam)
    return solve_foc_levy(b0, 0.0, [gamma0], [lam], 0.0, [psi], strict=strict, tol=tol)


# -- Hamiltonian ------------------------------------------------------------------


def _jump_sum(pi_x, adjoint, gamma, nu):
    total = 0.0
    for k, (g, v) in enumerate(zip(gamma, nu)):
        total += g * adjoint.r.get(k, 0.0) * v
    return pi_x * total


def hamiltonian(t, x, y, pi, adjoint: AdjointState, market: MarketSpec, density=None, *, insider=None, f=0.0):
    """H = M f + pi x [b0 p + sigma0 q + sum_k gamma_k r_k nu_k].

    ``adjoint.r`` is keyed by mark position in ``insider.marks``; ``density``
    supplies M (a DensityState or a number) and is only read when f != 0.
    """
    b0 = float(market.b0_at(t, y))
    s0 = float(market.sigma0_at(t, y))
    h = pi * x * (b0 * adjoint.p + s0 * adjoint.q)
    if insider is not None and insider.has_jumps:
        gamma = market.gamma0_at(t, y, insider.n_marks)
        h += _jump_sum(pi * x, adjoint, gamma, insider.rates)
    if f:
        m = density.m if hasattr(density, "m") else float(density)
        h += m * f
    return h


def hamiltonian_grad_pi(t, x, y, pi, adjoint: AdjointState, market: MarketSpec, density=None, *, insider=None, f_grad=0.0):
    """dH/dpi; with f independent of pi it does not depend on pi."""
    b0 = float(market.b0_at(t, y))
    s0 = float(market.sigma0_at(t, y))
    g = x * (b0 * adjoint.p + s0 * adjoint.q)
    if insider is not None and insider.has_jumps:
        gamma = market.gamma0_at(t, y, insider.n_marks)
        g += _jump_sum(x, adjoint, gamma, insider.rates)
    if f_grad:
        m = density.m if hasattr(density, "m") else float(density)
        g += m * f_grad
    return g


# -- policies along simulated paths -------------------------------------------------
#
# A policy is a callable policy(t, y, state) -> pi per path, where ``state`` is
# a market.StepState.  It may read B, Y and the compensated counts up to t.


class ConstantPolicy:
    def __init__(self, pi):
        self.pi = float(pi)

    def __call__(self, t, y, state):
        return np.full(np.shape(y), self.pi)


class FunctionPolicy:
    """Wrap a deterministic field (t, y) -> pi."""

    def __init__(self, fn):
        self.fn = fn

    def __call__(self, t, y, state):
        return np.broadcast_to(np.asarray(self.fn(t, y), dtype=float), np.shape(y))


class MertonPolicy:
    """Log-optimal fraction without inside information (Phi = Psi = 0)."""

    def __init__(self, market: MarketSpec, insider: InsiderSpec | None = None):
        self.market = market
        self.insider = insider

    def __call__(self, t, y, state):
        y = np.asarray(y, dtype=float)
        b0 = self.market.b0_at(t, y)
        s0 = self.market.sigma0_at(t, y)
        jumps = self.insider is not None and self.insider.has_jumps and self.market.has_jumps
        if not jumps:
            if np.any(np.abs(s0) < VOL_FLOOR):
                raise DegenerateVolatility("Merton fraction needs sigma0 != 0")
            return np.broadcast_to(b0 / s0**2, y.shape)
        gamma = self.market.gamma0_at(t, y, self.insider.n_marks)
        zeros = np.zeros(y.shape)
        pi, _, found, _, _ = foc_root(b0, s0, gamma, self.insider.rates, zeros, np.zeros_like(gamma))
        if not np.all(found):
            raise NoRootInBracket(f"no admissible Merton fraction at t={t}")
        return pi


class LogInsiderPolicy:
    """Log-optimal insider fraction pi(t, y) read off the conditional density.

    Without market jumps this is b0/sigma0^2 + Phi/sigma0; otherwise the
    first-order condition is solved per path with Phi and Psi_k from the
    density of the insider variable.
    """

    def __init__(self, insider: InsiderSpec, market: MarketSpec, quad=DEFAULT_QUAD):
        self.insider = insider
        self.market = market
        self.quad = quad

    def ratios(self, t, y, y_t):
        m, phi, psi, _ = density_triple(self.insider, t, y, y_t, self.quad)
        if np.any(~(m > DENSITY_FLOOR)):
            raise DensityFloor(f"conditional density below floor at t={t}")
        return phi, psi

    def __call__(self, t, y, state):
        y = np.asarray(y, dtype=float)
        phi, psi = self.ratios(t, y, state.y_t)
        b0 = self.market.b0_at(t, y)
        s0 = self.market.sigma0_at(t, y)
        jumps = self.insider.has_jumps and self.market.has_jumps
        if not jumps:
            if np.any(np.abs(s0) < VOL_FLOOR):
                raise DegenerateVolatility("insider fraction needs sigma0 != 0 without jumps")
            return b0 / s0**2 + phi / s0
        gamma = self.market.gamma0_at(t, y, self.insider.n_marks)
        pi, _, found, _, _ = foc_root(b0, s0, gamma, self.insider.rates, phi, psi)
        # 1 + Psi >= 0 in exact arithmetic; quadrature noise can break it, and
        # then f need not be monotone
        odd = np.flatnonzero(np.any(1.0 + np.asarray(psi) < 0, axis=-1).ravel())
        if odd.size:
            pi, found = np.array(pi, dtype=float), np.array(found)
            flat = np.broadcast_arrays(b0, s0, phi, pi)
            g_rows = np.broadcast_to(gamma, np.shape(pi) + (gamma.shape[-1],)).reshape(-1, gamma.shape[-1])
            p_rows = np.broadcast_to(psi, g_rows.shape).reshape(-1, gamma.shape[-1])
            for j in odd:
                res = solve_foc_levy(
                    float(np.ravel(flat[0])[j]), float(np.ravel(flat[1])[j]), g_rows[j],
                    self.insider.rates, float(np.ravel(flat[2])[j]), p_rows[j],
                )
                pi.flat[j] = res.pi
                found.flat[j] = res.status == CONVERGED
        if not np.all(found):
            bad = int(np.flatnonzero(~np.atleast_1d(found))[0])
            raise NoRootInBracket(f"no admissible insider fraction at t={t} (path {bad})")
        return pi


def gaussian_insider_fraction(b0, sigma0, y, b_s, s, T0):
    """b0/sigma0^2 + (y - B(s)) / (sigma0 (T0 - s)) for Y = B(T0)."""
    return b0 / sigma0**2 + (y - b_s) / (sigma0 * (T0 - s))


__all__ = [
    "AdjointState",
    "ConstantPolicy",
    "FunctionPolicy",
    "LogInsiderPolicy",
    "MertonPolicy",
    "PolicyResult",
    "admissible_interval",
    "foc_root",
    "foc_slope",
    "foc_value",
    "gaussian_insider_fraction",
    "hamiltonian",
    "hamiltonian_grad_pi",
    "log_pi_brownian",
    "objective",
    "relation_adjoint",
    "solve_foc_bp",
    "solve_foc_levy",
    "solve_foc_poisson_pure",
]
