"""Conditional densities of an insider variable, optimal insider portfolios
and Monte Carlo checks of the resulting utility advantage."""

from .adjoint import UtilitySpec, gamma0_path, gamma_path, solve_c, adjoint_processes
from .donsker import InsiderSpec, DensityState
from .market import MarketSpec, PathBundle, simulate_paths, wealth_exact, insider_wealth
from .portfolio import (
    log_pi_brownian,
    solve_foc_bp,
    solve_foc_levy,
    solve_foc_poisson_pure,
    hamiltonian,
    hamiltonian_grad_pi,
)
from .quadrature import QuadratureConfig, damped_oscillatory_integral

__version__ = "0.1.0"
