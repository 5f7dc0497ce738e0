"""Scenario simulation and wealth under y-parametrised policies.

The insider's anticipating wealth equation is never discretised as a
forward integral.  Each scenario is generated in full on [0, T0] first, Y is
read off the finished path, and the wealth is evaluated from the explicit
exponential solution with the policy's parameter set to y = Y.  For every
fixed y the policy is an ordinary adapted process, so left-point sums are
the Ito sums of the parametrised equation.

Paths are drawn one at a time from a substream keyed by (seed, path index),
so a path does not depend on how many other paths are drawn or how the work
is chunked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterator

import numpy as np

from .donsker import InsiderSpec
from .errors import AdmissibilityViolation, GridMismatch

DEFAULT_STEPS = 2048
ADMISSIBILITY_FLOOR = 1e-9
GRID_TOL = 1e-9


def _field(value, n_marks=None):
    """Wrap a constant or callable coefficient as a vectorised callable."""
    if callable(value):
        return value
    arr = np.asarray(value, dtype=float)
    if n_marks is not None and arr.ndim == 0:
        arr = np.full(n_marks, float(arr))

    def const(t, y, _arr=arr):
        y = np.asarray(y, dtype=float)
        return np.broadcast_to(_arr, y.shape + _arr.shape)

    const.constant = arr
    return const


@dataclass(frozen=True, eq=False)
class MarketSpec:
    """Risky asset dS = S [b0 dt + sigma0 dB + int gamma0 Ntilde(dt, dz)], riskless S0 = 1.

    Coefficients are constants or vectorised callables of (t, y);
    ``gamma0`` gives one value per mark of the insider's jump measure.
    """

    b0: float | Callable = 0.0
    sigma0: float | Callable = 1.0
    gamma0: float | Callable | tuple = 0.0
    x0: float = 1.0
    T: float = 0.5

    def __post_init__(self):
        if not self.x0 > 0:
            raise ValueError("initial wealth x0 must be positive")
        if not self.T > 0:
            raise ValueError("trading horizon T must be positive")

    def check_horizon(self, insider: InsiderSpec):
        if not self.T < insider.horizon_T0:
            raise ValueError(f"trading horizon T={self.T} must be < T0={insider.horizon_T0}")

    def b0_at(self, t, y):
        return _field(self.b0)(t, y)

    def sigma0_at(self, t, y):
        return _field(self.sigma0)(t, y)

    def gamma0_at(self, t, y, n_marks):
        out = np.asarray(_field(self.gamma0, n_marks)(t, y), dtype=float)
        y = np.asarray(y, dtype=float)
        if out.shape != y.shape + (n_marks,):
            out = np.broadcast_to(out, y.shape + (n_marks,))
        return out

    @property
    def has_jumps(self) -> bool:
        if callable(self.gamma0):
            return True
        return bool(np.any(np.asarray(self.gamma0, dtype=float) != 0))

    @property
    def has_diffusion(self) -> bool:
        if callable(self.sigma0):
            return True
        return float(self.sigma0) != 0.0


@dataclass(frozen=True)
class StepState:
    """What an adapted policy may read at grid time t_k."""

    k: int
    t: float
    b: np.ndarray  # B(t_k), one per path
    y_t: np.ndarray  # Y(t_k)
    n_tilde: np.ndarray  # compensated counts per mark, shape (paths, marks)


@dataclass(frozen=True, eq=False)
class PathBundle:
    """A batch of simulated scenarios on the uniform grid 0 = t_0 < ... < t_N = T0.

    Jumps are kept both as event lists (``jump_path``, ``jump_time``,
    ``jump_mark``; flat arrays with the local path index) and as per-step
    counts per mark.
    """

    insider: InsiderSpec
    times: np.ndarray
    dB: np.ndarray
    counts: np.ndarray
    jump_path: np.ndarray
    jump_time: np.ndarray
    jump_mark: np.ndarray
    path_index: np.ndarray

    def __post_init__(self):
        n, steps = self.dB.shape
        B = np.zeros((n, steps + 1))
        np.cumsum(self.dB, axis=1, out=B[:, 1:])
        ins = self.insider
        dt = self.dt
        beta_steps = ins.beta_at(self.times[:-1])
        dY = self.dB * beta_steps
        cum_counts = np.zeros((n, steps + 1, ins.n_marks))
        if ins.has_jumps:
            np.cumsum(self.counts, axis=1, out=cum_counts[:, 1:, :])
            jump_psi = ins.psi[ins.cell_index(self.jump_time), self.jump_mark]
            step = self.step_of(self.jump_time)
            np.add.at(dY, (self.jump_path, step), jump_psi)
            comp = np.array(
                [ins.compensator(a, b) for a, b in zip(self.times[:-1], self.times[1:])]
            )
            dY -= comp
        Y = np.zeros((n, steps + 1))
        np.cumsum(dY, axis=1, out=Y[:, 1:])
        n_tilde = cum_counts - self.times[None, :, None] * ins.rates[None, None, :]
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "n_tilde", n_tilde)
        object.__setattr__(self, "_dt", dt)

    @property
    def n_paths(self) -> int:
        return self.dB.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dB.shape[1]

    @property
    def dt(self) -> float:
        return self.insider.horizon_T0 / self.dB.shape[1]

    @property
    def realized_Y(self) -> np.ndarray:
        return self.Y[:, -1]

    def __len__(self):
        return self.n_paths

    def step_of(self, t):
        k = np.floor(np.asarray(t) / self.dt).astype(int)
        return np.clip(k, 0, self.n_steps - 1)

    def grid_index(self, t) -> int:
        k = t / self.dt
        if abs(k - round(k)) > GRID_TOL * max(1.0, abs(k)):
            raise GridMismatch(f"t={t} is not a grid point of step {self.dt}")
        return int(round(k))

    def state(self, k: int) -> StepState:
        return StepState(k, float(self.times[k]), self.B[:, k], self.Y[:, k], self.n_tilde[:, k, :])

    def __getitem__(self, i) -> PathBundle:
        idx = np.arange(self.n_paths)[i]
        idx = np.atleast_1d(idx)
        keep = np.isin(self.jump_path, idx)
        remap = np.full(self.n_paths, -1)
        remap[idx] = np.arange(idx.size)
        return PathBundle(
            self.insider,
            self.times,
            self.dB[idx],
            self.counts[idx],
            remap[self.jump_path[keep]],
            self.jump_time[keep],
            self.jump_mark[keep],
            self.path_index[idx],
        )

    def coarsen(self, factor: int) -> PathBundle:
        """The same scenarios seen on a grid ``factor`` times coarser."""
        if self.n_steps % factor:
            raise GridMismatch(f"{self.n_steps} steps cannot be coarsened by {factor}")
        n, steps = self.dB.shape
        dB = self.dB.reshape(n, steps // factor, factor).sum(axis=2)
        counts = self.counts.reshape(n, steps // factor, factor, -1).sum(axis=2)
        return replace(self, times=self.times[::factor], dB=dB, counts=counts)


def path_generator(seed: int, path_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(path_index)])))


def simulate_paths(
    insider: InsiderSpec,
    market: MarketSpec,
    n_paths: int,
    seed: int,
    *,
    steps: int = DEFAULT_STEPS,
    first_path: int = 0,
) -> PathBundle:
    """Simulate paths ``first_path .. first_path + n_paths - 1`` of the scenario stream."""
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    market.check_horizon(insider)
    T0 = insider.horizon_T0
    dt = T0 / steps
    kT = market.T / dt
    if abs(kT - round(kT)) > GRID_TOL * max(1.0, kT):
        raise GridMismatch(f"T={market.T} is not a multiple of the step {dt}")
    if market.has_jumps and not insider.has_jumps:
        raise ValueError("a jump market needs the jump measure on the insider spec")
    n_marks = insider.n_marks
    sqrt_dt = math.sqrt(dt)
    dB = np.empty((n_paths, steps))
    counts = np.zeros((n_paths, steps, n_marks), dtype=np.int32)
    jp, jt, jm = [], [], []
    for local in range(n_paths):
        rng = path_generator(seed, first_path + local)
        dB[local] = rng.standard_normal(steps) * sqrt_dt
        for m in range(n_marks):
            n_jumps = rng.poisson(insider.rates[m] * T0)
            if n_jumps == 0:
                continue
            times = np.sort(rng.uniform(0.0, T0, n_jumps))
            step = np.minimum((times / dt).astype(int), steps - 1)
            np.add.at(counts[local, :, m], step, 1)
            jp.append(np.full(n_jumps, local))
            jt.append(times)
            jm.append(np.full(n_jumps, m))
    cat = lambda parts, dtype: np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype)
    return PathBundle(
        insider,
        np.linspace(0.0, T0, steps + 1),
        dB,
        counts,
        cat(jp, int),
        cat(jt, float),
        cat(jm, int),
        np.arange(first_path, first_path + n_paths),
    )


def iter_path_chunks(
    insider, market, n_paths, seed, *, steps=DEFAULT_STEPS, chunk=2048
) -> Iterator[PathBundle]:
    for start in range(0, n_paths, chunk):
        yield simulate_paths(
            insider, market, min(chunk, n_paths - start), seed, steps=steps, first_path=start
        )


@dataclass(frozen=True)
class Wealth:
    times: np.ndarray
    log_x: np.ndarray  # (paths, steps up to T + 1)
    x0: float = 1.0

    @property
    def x(self):
        # x0 times the growth factor, so a flat trajectory stays exactly x0
        return self.x0 * np.exp(self.log_x - math.log(self.x0))

    @property
    def terminal(self):
        return self.x[:, -1]

    @property
    def log_terminal(self):
        return self.log_x[:, -1]


def _admissibility(one_plus, path, t, marks):
    bad = one_plus <= ADMISSIBILITY_FLOOR
    if np.any(bad):
        p, m = np.argwhere(bad)[0]
        raise AdmissibilityViolation(
            f"1 + pi*gamma0 = {one_plus[p, m]:.3g} at t={t:.6g}, mark {marks[m]}, "
            f"path {path.path_index[p]}",
            t=t,
            mark=float(marks[m]),
            path_index=int(path.path_index[p]),
        )


def wealth_exact(path: PathBundle, market: MarketSpec, policy, y) -> Wealth:
    """x(t, y) on [0, T] from the explicit exponential solution.

    ``policy(t, y, state)`` returns the fraction in the risky asset for every
    path; ``y`` is a scalar or one value per path.
    """
    ins = path.insider
    kT = path.grid_index(market.T)
    n = path.n_paths
    y = np.broadcast_to(np.asarray(y, dtype=float), (n,))
    log_x = np.zeros((n, kT + 1))
    log_x[:, 0] = math.log(market.x0)
    dt = path.dt
    jumpy = market.has_jumps and ins.has_jumps
    for k in range(kT):
        t = float(path.times[k])
        pi = np.broadcast_to(np.asarray(policy(t, y, path.state(k)), dtype=float), (n,))
        b0 = market.b0_at(t, y)
        s0 = market.sigma0_at(t, y)
        incr = (pi * b0 - 0.5 * (pi * s0) ** 2) * dt + pi * s0 * path.dB[:, k]
        if jumpy:
            g0 = market.gamma0_at(t, y, ins.n_marks)
            pg = pi[:, None] * g0
            _admissibility(1.0 + pg, path, t, ins.marks)
            incr = incr - (pg @ ins.rates) * dt
            c = path.counts[:, k, :]
            if c.any():
                incr = incr + (c * np.log1p(pg)).sum(axis=1)
        log_x[:, k + 1] = log_x[:, k] + incr
    return Wealth(path.times[: kT + 1], log_x, market.x0)


def insider_wealth(path: PathBundle, market: MarketSpec, policy) -> Wealth:
    """X(t) = x(t, y) at y = Y, the realised insider variable of each path."""
    return wealth_exact(path, market, policy, path.realized_Y)


def wealth_euler(path: PathBundle, market: MarketSpec, policy, y) -> Wealth:
    """Euler-Maruyama of dx = pi x [b0 dt + sigma0 dB + gamma0 dNtilde]; reference scheme."""
    ins = path.insider
    kT = path.grid_index(market.T)
    n = path.n_paths
    y = np.broadcast_to(np.asarray(y, dtype=float), (n,))
    x = np.empty((n, kT + 1))
    x[:, 0] = market.x0
    dt = path.dt
    for k in range(kT):
        t = float(path.times[k])
        pi = np.broadcast_to(np.asarray(policy(t, y, path.state(k)), dtype=float), (n,))
        ret = market.b0_at(t, y) * dt + market.sigma0_at(t, y) * path.dB[:, k]
        if market.has_jumps and ins.has_jumps:
            g0 = market.gamma0_at(t, y, ins.n_marks)
            ret = ret + (g0 * (path.counts[:, k, :] - ins.rates * dt)).sum(axis=1)
        x[:, k + 1] = x[:, k] * (1.0 + pi * ret)
    with np.errstate(divide="ignore", invalid="ignore"):
        return Wealth(path.times[: kT + 1], np.log(x), market.x0)
