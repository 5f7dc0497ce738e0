"""Conditional densities of the insider variable and their derivative ratios.

The insider variable is a first-order chaos

    Y = Y(T0),  Y(t) = int_0^t beta(s) dB(s) + int_0^t int psi(s, z) Ntilde(ds, dz)

with ``beta`` and ``psi`` piecewise constant on a uniform grid of cells over
[0, T0] and a discrete mark measure {(z_k, nu_k)}.  For such Y the time-t
conditional density M(t, y) and the conditional Malliavin derivatives are
Fourier integrals

    M(t, y)          = int F(t, x) dx
    E[D_t ...]       = int F(t, x) i x beta(t) dx
    E[D_{t,z} ...]   = int F(t, x) (exp(i x psi(t, z)) - 1) dx

    F(t, x) = (2 pi)^-1 exp(i x (Y(t) - y) + J(t, x) - x^2 v(t) / 2)

where v(t) = int_t^T0 beta^2 ds and
J(t, x) = int_t^T0 sum_k nu_k (exp(i x psi) - 1 - i x psi) ds.  With
piecewise-constant coefficients both time integrals are exact sums over cells.
The path enters only through Y(t), so every evaluator takes ``y_t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateVariance, DensityFloor, HorizonViolation, QuadratureDivergence
from .quadrature import DEFAULT_QUAD, QuadratureConfig, damped_oscillatory_integral

GAUSSIAN = "gaussian"
BROWNIAN_POISSON = "brownian_poisson"
GENERAL = "general"
KINDS = (GAUSSIAN, BROWNIAN_POISSON, GENERAL)

VARIANCE_FLOOR = 1e-10
DENSITY_FLOOR = 1e-12
IMAG_TOL = 1e-6
BATCH_CHUNK = 4096


def _as_cells(values, name):
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"{name} must be a scalar or a non-empty 1-d sequence")
    return arr


@dataclass(frozen=True, eq=False)
class InsiderSpec:
    """First-order chaos insider variable on [0, horizon_T0].

    ``beta`` holds one value per cell, ``psi`` has shape (cells, marks) and
    shares the cell grid of ``beta`` (a single cell means constant in time).
    """

    kind: str
    beta: np.ndarray
    horizon_T0: float
    marks: np.ndarray = field(default_factory=lambda: np.zeros(0))
    rates: np.ndarray = field(default_factory=lambda: np.zeros(0))
    psi: np.ndarray = field(default_factory=lambda: np.zeros((1, 0)))

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown insider kind {self.kind!r}")
        if not (self.horizon_T0 > 0 and math.isfinite(self.horizon_T0)):
            raise ValueError("horizon_T0 must be strictly positive")
        beta = _as_cells(self.beta, "beta")
        marks = np.atleast_1d(np.asarray(self.marks, dtype=float))
        rates = np.atleast_1d(np.asarray(self.rates, dtype=float))
        psi = np.asarray(self.psi, dtype=float)
        if psi.ndim == 1:
            psi = psi.reshape(1, -1)
        if marks.shape != rates.shape:
            raise ValueError("marks and rates must have the same length")
        if psi.shape[1] != marks.size:
            raise ValueError("psi needs one column per mark")
        if psi.shape[0] not in (1, beta.size):
            if beta.size == 1:
                beta = np.full(psi.shape[0], beta[0])
            else:
                raise ValueError("psi and beta must share the cell grid")
        if psi.shape[0] == 1 and beta.size > 1:
            psi = np.repeat(psi, beta.size, axis=0)
        if np.any(rates < 0):
            raise ValueError("mark intensities must be non-negative")
        if marks.size and not np.any(rates > 0):
            raise ValueError("at least one mark intensity must be positive")
        if self.kind == BROWNIAN_POISSON:
            if not (beta.size == 1 and beta[0] != 0):
                raise ValueError("Brownian-Poisson insider needs a constant beta != 0")
            if not (marks.size == 1 and marks[0] == 1.0 and rates[0] > 0):
                raise ValueError("Brownian-Poisson insider needs one unit mark with rate > 0")
        if self.kind == GAUSSIAN and marks.size:
            raise ValueError("Gaussian insider carries no jump measure")
        for arr in (beta, marks, rates, psi):
            arr.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "psi", psi)
        # the remaining variance must stay positive on [0, T0): the last cell carries mass
        if not beta[-1] ** 2 > 0:
            raise ValueError("int_t^T0 beta^2 ds must be positive for every t < T0")

    # -- constructors ---------------------------------------------------
    @classmethod
    def gaussian(cls, beta=1.0, T0=1.0):
        return cls(GAUSSIAN, beta, float(T0))

    @classmethod
    def brownian_poisson(cls, beta=1.0, lam=1.0, T0=1.0):
        return cls(BROWNIAN_POISSON, float(beta), float(T0), [1.0], [float(lam)], [[1.0]])

    @classmethod
    def general(cls, beta, marks, rates, psi, T0=1.0):
        marks = np.atleast_1d(np.asarray(marks, dtype=float))
        psi = np.asarray(psi, dtype=float)
        if psi.ndim == 0:
            psi = np.full((1, marks.size), float(psi))
        return cls(GENERAL, beta, float(T0), marks, rates, psi)

    # -- cell geometry --------------------------------------------------
    @property
    def n_cells(self) -> int:
        return self.beta.size

    @property
    def cell_width(self) -> float:
        return self.horizon_T0 / self.n_cells

    @property
    def n_marks(self) -> int:
        return self.marks.size

    @property
    def has_jumps(self) -> bool:
        return self.n_marks > 0

    def cell_index(self, t):
        idx = np.floor(np.asarray(t, dtype=float) / self.cell_width).astype(int)
        return np.clip(idx, 0, self.n_cells - 1)

    def beta_at(self, t):
        return self.beta[self.cell_index(t)]

    def psi_at(self, t):
        """psi(t, z_k) for every mark; shape (..., marks)."""
        return self.psi[self.cell_index(t)]

    def overlap(self, t, t_end=None):
        """Length of each cell inside [t, t_end]."""
        t_end = self.horizon_T0 if t_end is None else t_end
        edges = np.arange(self.n_cells + 1) * self.cell_width
        edges[-1] = self.horizon_T0
        lo = np.clip(edges[:-1], t, t_end)
        hi = np.clip(edges[1:], t, t_end)
        return hi - lo

    def remaining_variance(self, t) -> float:
        return float(np.dot(self.overlap(t), self.beta**2))

    def compensator(self, t_start, t_end) -> float:
        """int_{t_start}^{t_end} sum_k psi(s, z_k) nu_k ds."""
        if not self.has_jumps:
            return 0.0
        return float(self.overlap(t_start, t_end) @ (self.psi @ self.rates))

    def variance_Y(self) -> float:
        var = self.remaining_variance(0.0)
        if self.has_jumps:
            var += float(self.overlap(0.0) @ (self.psi**2 @ self.rates))
        return var

    def jump_exponent(self, x, t):
        """J(t, x) = int_t^T0 sum_k nu_k (e^{i x psi} - 1 - i x psi) ds, shape (len(x),)."""
        x = np.asarray(x, dtype=float)
        if not self.has_jumps:
            return np.zeros(x.shape, dtype=complex)
        lengths = self.overlap(t)
        live = lengths > 0
        ixpsi = 1j * x[:, None, None] * self.psi[live][None, :, :]
        kernel = np.expm1(ixpsi) - ixpsi
        return np.einsum("xck,c,k->x", kernel, lengths[live], self.rates)


def default_y_grid(spec: InsiderSpec, n_points: int = 401, n_sd: float = 8.0) -> np.ndarray:
    sd = math.sqrt(spec.variance_Y())
    return np.linspace(-n_sd * sd, n_sd * sd, n_points)


@dataclass
class DensityState:
    """(M, Phi, Psi) at one (t, y); ratios are None when M is below the floor."""

    t: float
    y: float
    m: float
    phi: float | None
    psi_ratio: dict = field(default_factory=dict)
    imag_residual: float = 0.0


def _check_time(spec, t, variance_floor):
    if not (0.0 <= t < spec.horizon_T0):
        raise HorizonViolation(f"t={t} outside [0, T0={spec.horizon_T0})")
    v = spec.remaining_variance(t)
    if v <= variance_floor:
        raise DegenerateVariance(
            f"remaining variance {v:.3g} at t={t} is below the floor {variance_floor:.3g}"
        )
    return v


# -- Gaussian closed forms --------------------------------------------------


def gaussian_cond_density(spec: InsiderSpec, t, y, y_t, *, variance_floor=VARIANCE_FLOOR):
    if spec.kind != GAUSSIAN:
        raise ValueError("gaussian_cond_density needs a Gaussian insider")
    v = _check_time(spec, t, variance_floor)
    d = np.asarray(y_t, dtype=float) - np.asarray(y, dtype=float)
    out = np.exp(-0.5 * d * d / v) / math.sqrt(2.0 * math.pi * v)
    return out.item() if out.ndim == 0 else out


def gaussian_phi(spec: InsiderSpec, t, y, y_t, *, variance_floor=VARIANCE_FLOOR):
    """Phi(t, y) = (y - Y(t)) beta(t) / int_t^T0 beta^2 ds."""
    if spec.kind != GAUSSIAN:
        raise ValueError("gaussian_phi needs a Gaussian insider")
    v = _check_time(spec, t, variance_floor)
    out = (np.asarray(y, dtype=float) - np.asarray(y_t, dtype=float)) * spec.beta_at(t) / v
    return out.item() if np.ndim(out) == 0 else out


# -- Fourier-inversion evaluators -------------------------------------------


def density_integrand(spec: InsiderSpec, t, y, y_t):
    """The undamped part of F(t, x) as a function of x (batched over y - y_t).

    The Gaussian factor exp(-x^2 v / 2) is left to the quadrature engine.
    """
    u = np.asarray(y_t, dtype=float) - np.asarray(y, dtype=float)

    def g(x):
        x = np.asarray(x, dtype=float)
        base = np.exp(spec.jump_exponent(x, t)) / (2.0 * math.pi)
        phase = np.exp(1j * np.multiply.outer(x, u))
        return base.reshape((-1,) + (1,) * u.ndim) * phase

    return g


def _factors(spec, t, x):
    """Multipliers for [density, Brownian numerator, jump numerators...]."""
    cols = [np.ones_like(x, dtype=complex), 1j * x * spec.beta_at(t)]
    if spec.has_jumps:
        cols.extend(np.expm1(1j * x[:, None] * spec.psi_at(t)[None, :]).T)
    return np.stack(cols, axis=-1)


def conditional_integrals(
    spec: InsiderSpec,
    t: float,
    y,
    y_t,
    quad: QuadratureConfig = DEFAULT_QUAD,
    *,
    variance_floor=VARIANCE_FLOOR,
    with_ratios: bool = True,
):
    """Quadrature of the density and derivative integrands, batched.

    Returns (values, imag) where ``values[..., 0]`` is M, ``values[..., 1]``
    the Brownian numerator and ``values[..., 2 + k]`` the jump numerator for
    mark k (real parts), and ``imag`` the imaginary residual of M.
    """
    v = _check_time(spec, t, variance_floor)
    u = np.asarray(y_t, dtype=float) - np.asarray(y, dtype=float)
    shape = u.shape
    flat = u.reshape(-1)
    n_out = (2 + spec.n_marks) if with_ratios else 1
    values = np.empty((flat.size, n_out))
    imag = np.empty(flat.size)
    for start in range(0, flat.size, BATCH_CHUNK):
        chunk = flat[start : start + BATCH_CHUNK]

        def g(x, chunk=chunk):
            x = np.asarray(x, dtype=float)
            base = np.exp(spec.jump_exponent(x, t)) / (2.0 * math.pi)
            phase = np.exp(1j * np.multiply.outer(x, chunk)) * base[:, None]
            if not with_ratios:
                return phase[..., None]
            return phase[..., None] * _factors(spec, t, x)[:, None, :]

        res = damped_oscillatory_integral(g, v, quad, min_panels=64)
        values[start : start + chunk.size] = res.value.real
        imag[start : start + chunk.size] = res.value[..., 0].imag
    return values.reshape(shape + (n_out,)), imag.reshape(shape)


def _check_imag(m, imag):
    ratio = np.abs(imag) / np.maximum(np.abs(m), DENSITY_FLOOR)
    if np.any(ratio >= IMAG_TOL):
        raise QuadratureDivergence(f"imaginary residual ratio {np.max(ratio):.3g} too large")


def _ratio(num, m, on_floor):
    low = m <= DENSITY_FLOOR
    if np.any(low):
        if on_floor == "raise":
            raise DensityFloor(f"conditional density {np.min(m):.3g} below floor")
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.where(low, np.nan, num / np.where(low, 1.0, m))
        return out
    return num / m


def _scalar(a):
    a = np.asarray(a)
    return a.item() if a.ndim == 0 else a


def _require(spec, kind):
    if spec.kind != kind:
        raise ValueError(f"operation needs a {kind} insider, got {spec.kind}")


def _bp_y_t(spec, state):
    b_t, n_tilde_t = state
    return spec.beta[0] * np.asarray(b_t, dtype=float) + np.asarray(n_tilde_t, dtype=float)


def general_cond_density(spec, t, y, y_t, quad=DEFAULT_QUAD, *, variance_floor=VARIANCE_FLOOR):
    """M(t, y) by Fourier inversion.

    ``y_t`` is Y(t) = int_0^t beta dB + int_0^t psi dNtilde; a pair of the two
    accumulated phases is accepted as well.
    """
    if isinstance(y_t, tuple):
        y_t = np.asarray(y_t[0], dtype=float) + np.asarray(y_t[1], dtype=float)
    vals, imag = conditional_integrals(
        spec, t, y, y_t, quad, variance_floor=variance_floor, with_ratios=False
    )
    _check_imag(vals[..., 0], imag)
    return _scalar(vals[..., 0])


def general_phi(spec, t, y, y_t, quad=DEFAULT_QUAD, *, on_floor="raise", variance_floor=VARIANCE_FLOOR):
    if isinstance(y_t, tuple):
        y_t = np.asarray(y_t[0], dtype=float) + np.asarray(y_t[1], dtype=float)
    vals, imag = conditional_integrals(spec, t, y, y_t, quad, variance_floor=variance_floor)
    _check_imag(vals[..., 0], imag)
    return _scalar(_ratio(vals[..., 1], vals[..., 0], on_floor))


def general_psi(
    spec, t, y, y_t, zeta=None, quad=DEFAULT_QUAD, *, on_floor="raise", variance_floor=VARIANCE_FLOOR
):
    """Psi(t, y, zeta); with ``zeta=None`` the last axis runs over all marks."""
    if not spec.has_jumps:
        raise ValueError("insider has no jump component")
    if isinstance(y_t, tuple):
        y_t = np.asarray(y_t[0], dtype=float) + np.asarray(y_t[1], dtype=float)
    vals, imag = conditional_integrals(spec, t, y, y_t, quad, variance_floor=variance_floor)
    _check_imag(vals[..., 0], imag)
    ratios = _ratio(vals[..., 2:], vals[..., :1], on_floor)
    if zeta is None:
        return _scalar(ratios)
    hits = np.flatnonzero(spec.marks == zeta)
    if hits.size == 0:
        raise ValueError(f"mark {zeta} is not in the jump measure")
    return _scalar(ratios[..., hits[0]])


def bp_cond_density(spec, t, y, state, quad=DEFAULT_QUAD, *, variance_floor=VARIANCE_FLOOR):
    """M(t, y) for Y = beta B + Ntilde; ``state`` is (B(t), Ntilde(t))."""
    _require(spec, BROWNIAN_POISSON)
    return general_cond_density(spec, t, y, _bp_y_t(spec, state), quad, variance_floor=variance_floor)


def bp_phi(spec, t, y, state, quad=DEFAULT_QUAD, *, on_floor="raise", variance_floor=VARIANCE_FLOOR):
    _require(spec, BROWNIAN_POISSON)
    return general_phi(
        spec, t, y, _bp_y_t(spec, state), quad, on_floor=on_floor, variance_floor=variance_floor
    )


def bp_psi(spec, t, y, state, quad=DEFAULT_QUAD, *, on_floor="raise", variance_floor=VARIANCE_FLOOR):
    _require(spec, BROWNIAN_POISSON)
    return general_psi(
        spec, t, y, _bp_y_t(spec, state), 1.0, quad, on_floor=on_floor, variance_floor=variance_floor
    )


# -- kind-agnostic entry points -----------------------------------------------


def density_triple(
    spec: InsiderSpec,
    t: float,
    y,
    y_t,
    quad: QuadratureConfig = DEFAULT_QUAD,
    *,
    variance_floor=VARIANCE_FLOOR,
):
    """(M, Phi, Psi[..., marks], imag) for any kind, batched over y and y_t.

    Ratios are NaN where M is at or below the density floor.
    """
    if spec.kind == GAUSSIAN:
        m = np.asarray(gaussian_cond_density(spec, t, y, y_t, variance_floor=variance_floor))
        phi = np.asarray(gaussian_phi(spec, t, y, y_t, variance_floor=variance_floor))
        phi = np.where(m > DENSITY_FLOOR, phi, np.nan)
        return m, phi, np.zeros(m.shape + (0,)), np.zeros(m.shape)
    vals, imag = conditional_integrals(spec, t, y, y_t, quad, variance_floor=variance_floor)
    m = vals[..., 0]
    _check_imag(m, imag)
    phi = _ratio(vals[..., 1], m, "nan")
    psi = _ratio(vals[..., 2:], m[..., None], "nan")
    return m, phi, psi, imag


def cond_density(spec, t, y, y_t, quad=DEFAULT_QUAD, *, variance_floor=VARIANCE_FLOOR):
    """M(t, y) for any kind (closed form when Gaussian)."""
    if spec.kind == GAUSSIAN:
        return gaussian_cond_density(spec, t, y, y_t, variance_floor=variance_floor)
    return general_cond_density(spec, t, y, y_t, quad, variance_floor=variance_floor)


def conditional_state(spec, t, y, y_t, quad=DEFAULT_QUAD, *, variance_floor=VARIANCE_FLOOR) -> DensityState:
    m, phi, psi, imag = density_triple(spec, float(t), float(y), float(y_t), quad, variance_floor=variance_floor)
    m = float(m)
    available = m > DENSITY_FLOOR
    return DensityState(
        t=float(t),
        y=float(y),
        m=m,
        phi=float(phi) if available else None,
        psi_ratio={float(z): float(p) for z, p in zip(spec.marks, psi)} if available else {},
        imag_residual=float(imag),
    )
