"""Quadrature for Gaussian-damped oscillatory integrands.

Every conditional-density formula in this package has the shape

    I = integral over the real line of g(x) * exp(-sigma_sq * x**2 / 2) dx

with ``g`` complex, bounded and smooth.  The integral is truncated to
[-R, R], where R is chosen so that the Gaussian envelope times the sampled
bound on |g| falls below ``truncation_eps``, and then evaluated by a
trapezoid rule on a dyadic sequence of uniform grids with one Richardson
step (Simpson).  ``g`` may return a batch: an array whose first axis runs
over the nodes and whose remaining axes index independent integrands that
share the same damping.  All of them are refined together until every
entry has converged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import InvalidDamping, QuadratureDivergence

N_PROBES = 64
MIN_PANELS = 32


@dataclass(frozen=True)
class QuadratureConfig:
    rel_tol: float = 1e-8
    abs_tol: float = 1e-12
    max_panels: int = 2**20
    truncation_eps: float = 1e-16

    def __post_init__(self):
        for name in ("rel_tol", "abs_tol", "truncation_eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")
        n = int(self.max_panels)
        if n < MIN_PANELS or n & (n - 1):
            raise ValueError("max_panels must be a power of two >= %d" % MIN_PANELS)


DEFAULT_QUAD = QuadratureConfig()


class QuadResult(NamedTuple):
    value: complex | np.ndarray
    panels_used: int
    residual_estimate: float


def truncation_radius(g: Callable, sigma_sq: float, cfg: QuadratureConfig) -> float:
    """Half-width R beyond which the damped integrand is below ``truncation_eps``.

    |g| is bounded by its largest magnitude over ``N_PROBES`` points spread
    across the Gaussian envelope's own effective support.
    """
    r0 = math.sqrt(2.0 * math.log(1.0 / cfg.truncation_eps) / sigma_sq)
    probes = np.linspace(-r0, r0, N_PROBES)
    with np.errstate(over="ignore", invalid="ignore"):
        env = float(np.max(np.abs(g(probes))))
    if not math.isfinite(env):
        raise QuadratureDivergence("integrand is not finite on the probe set")
    if env <= 10.0 * cfg.truncation_eps:
        return r0
    return math.sqrt(2.0 * math.log(env / cfg.truncation_eps) / sigma_sq)


def damped_oscillatory_integral(
    g: Callable[[np.ndarray], np.ndarray],
    sigma_sq: float,
    cfg: QuadratureConfig = DEFAULT_QUAD,
    *,
    min_panels: int = MIN_PANELS,
    trace: list | None = None,
) -> QuadResult:
    """Integrate ``g(x) * exp(-sigma_sq x^2 / 2)`` over the real line.

    Returns the (complex) value, the number of panels of the final grid and
    the last level-to-level change.  When ``trace`` is a list, the change at
    each refinement level is appended to it.
    """
    if not (sigma_sq > 0 and math.isfinite(sigma_sq)):
        raise InvalidDamping(f"damping variance must be positive, got {sigma_sq!r}")
    radius = truncation_radius(g, sigma_sq, cfg)

    def f(x):
        vals = np.asarray(g(x), dtype=complex)
        damp = np.exp(-0.5 * sigma_sq * x * x)
        return vals * damp.reshape((-1,) + (1,) * (vals.ndim - 1))

    def folded_sum(vals):
        # pair x with -x before summing so conjugate-symmetric terms cancel exactly
        k = vals.shape[0]
        half = k // 2
        total = (vals[:half] + vals[::-1][:half]).sum(axis=0)
        if k % 2:
            total = total + vals[half]
        return total

    n = max(int(min_panels), 2)
    # nodes radius*(2j/n - 1) are exactly symmetric for power-of-two n
    x = radius * (2.0 * np.arange(n + 1) / n - 1.0)
    fx = f(x)
    h = 2.0 * radius / n
    trap = h * (folded_sum(fx) - 0.5 * (fx[0] + fx[-1]))
    simpson_prev = None
    while True:
        if 2 * n > cfg.max_panels:
            raise QuadratureDivergence(
                f"no convergence within {cfg.max_panels} panels (R={radius:.4g})"
            )
        x_new = radius * (2.0 * (2 * np.arange(n) + 1) / (2 * n) - 1.0)
        n *= 2
        h *= 0.5
        trap_fine = 0.5 * trap + h * folded_sum(f(x_new))
        simpson = (4.0 * trap_fine - trap) / 3.0
        trap = trap_fine
        if simpson_prev is None:
            simpson_prev = simpson
            continue
        change = np.abs(simpson - simpson_prev)
        residual = float(np.max(change))
        if trace is not None:
            trace.append(residual)
        target = np.maximum(cfg.rel_tol * np.abs(simpson), cfg.abs_tol)
        if np.all(change <= target):
            value = simpson.item() if np.ndim(simpson) == 0 else simpson
            return QuadResult(value, n, residual)
        simpson_prev = simpson
