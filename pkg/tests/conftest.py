import math

import numpy as np
import pytest
from hypothesis import settings
from scipy.stats import norm, poisson

settings.register_profile("pkg", max_examples=40, deadline=None)
settings.load_profile("pkg")

ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    def record(number, title, passed, detail):
        ACCEPTANCE_LINES.append((number, "PASS" if passed else "FAIL", title, detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, title, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}: {detail}")


def poisson_mixture_density(y, beta_sq_T, marks, rates, T, n_max=60):
    """Exact density of beta B(T) + sum_k z_k (N_k(T) - nu_k T) by summing over counts."""
    y = np.asarray(y, dtype=float)
    sd = math.sqrt(beta_sq_T)
    drift = -sum(z * r * T for z, r in zip(marks, rates))
    out = np.zeros_like(y)
    grids = np.meshgrid(*[np.arange(n_max) for _ in marks], indexing="ij")
    weight = np.ones(grids[0].shape) if marks else np.ones(())
    shift = np.zeros(weight.shape) + drift
    for g, z, r in zip(grids, marks, rates):
        weight = weight * poisson.pmf(g, r * T)
        shift = shift + z * g
    for w, s in zip(np.ravel(weight), np.ravel(shift)):
        out += w * norm.pdf(y, loc=s, scale=sd)
    return out
