"""Experiment runners behind the CLI subcommands.

Each runner takes an ``ExperimentConfig``, writes its CSV/JSON files into
``cfg.out`` and returns the summary it wrote.  Output depends only on the
configuration (and its seed), never on wall-clock or chunking.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .. import adjoint, market, portfolio
from ..donsker import density_triple, default_y_grid
from ..errors import InsiderControlError
from .config import ExperimentConfig

PATH_CHUNK = 1024


# -- emission --------------------------------------------------------------


def fmt(value):
    if isinstance(value, str):
        return value
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value)).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "%.17g" % float(value)


def write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [json_safe(v) for v in obj]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(json_safe(obj), indent=2, sort_keys=True, allow_nan=False)
    path.write_text(text + "\n")


def _with_context(exc: InsiderControlError, context: str):
    exc.args = (f"{context}: {exc.args[0] if exc.args else ''}",) + exc.args[1:]
    return exc


def _mark_labels(insider):
    return ["psi_%s" % fmt(z) for z in insider.marks]


# -- density -----------------------------------------------------------------


def run_density(cfg: ExperimentConfig):
    sec = cfg.section("density")
    ins = cfg.insider
    ys = np.asarray(sec["y"], dtype=float) if sec["y"] else default_y_grid(ins, cfg.y_points, cfg.y_sd)
    header = ["t", "y", "m", "phi"] + _mark_labels(ins) + ["imag_residual"]
    rows = []
    mass = {}
    for t in sec["times"]:
        try:
            m, phi, psi, imag = density_triple(
                ins, float(t), ys, np.full(ys.shape, float(sec["y_t"])), cfg.quad,
                variance_floor=cfg.variance_floor,
            )
        except InsiderControlError as exc:
            raise _with_context(exc, f"density at t={t}")
        for j, y in enumerate(ys):
            rows.append([float(t), y, m[j], phi[j], *psi[j], imag[j]])
        if ys.size > 1:
            mass[fmt(float(t))] = float(np.sum(m) * (ys[1] - ys[0]))
    write_csv(cfg.out / "density.csv", header, rows)
    summary = {"rows": len(rows), "riemann_mass_by_t": mass}
    write_json(cfg.out / "density_summary.json", summary)
    return summary


# -- policy ------------------------------------------------------------------


def _policy_at(cfg, t, y, y_t):
    ins, mk = cfg.insider, cfg.market
    m, phi, psi, _ = density_triple(ins, t, y, y_t, cfg.quad, variance_floor=cfg.variance_floor)
    m, phi = float(m), float(phi)
    if not math.isfinite(phi):
        return m, phi, psi, None
    b0 = float(mk.b0_at(t, y))
    s0 = float(mk.sigma0_at(t, y))
    if ins.has_jumps and mk.has_jumps:
        gamma = mk.gamma0_at(t, y, ins.n_marks)
        res = portfolio.solve_foc_levy(b0, s0, gamma, ins.rates, phi, psi)
    else:
        res = portfolio.log_pi_brownian(b0, s0, phi)
    return m, phi, psi, res


def run_policy(cfg: ExperimentConfig):
    sec = cfg.section("policy")
    ins = cfg.insider
    header = ["t", "y", "y_t", "m", "phi"] + _mark_labels(ins) + [
        "pi", "foc_residual", "admissibility_margin", "status",
    ]
    rows = []
    for t in sec["times"]:
        for y_t in sec["y_t"]:
            for y in sec["y"]:
                try:
                    m, phi, psi, res = _policy_at(cfg, float(t), float(y), float(y_t))
                except InsiderControlError as exc:
                    raise _with_context(exc, f"policy at t={t}, y={y}, y_t={y_t}")
                if res is None:
                    tail = [math.nan, math.nan, math.nan, "density_floor"]
                else:
                    tail = [res.pi, res.foc_residual, res.admissibility_margin, res.status]
                rows.append([float(t), float(y), float(y_t), m, phi, *np.ravel(psi), *tail])
    write_csv(cfg.out / "policy.csv", header, rows)
    summary = {"rows": len(rows)}
    write_json(cfg.out / "policy_summary.json", summary)
    return summary


# -- foc -----------------------------------------------------------------------


def run_foc(cfg: ExperimentConfig):
    sec = cfg.section("foc")
    ins, mk = cfg.insider, cfg.market
    t, y = 0.0, 0.0
    b0 = float(mk.b0_at(t, y))
    s0 = float(mk.sigma0_at(t, y))
    header = ["phi", "psi", "pi", "foc_residual", "admissibility_margin", "hamiltonian_grad", "status"]
    rows = []
    for phi in sec["phi"]:
        for psi in sec["psi"]:
            if ins.has_jumps and mk.has_jumps:
                gamma = mk.gamma0_at(t, y, ins.n_marks)
                res = portfolio.solve_foc_levy(
                    b0, s0, gamma, ins.rates, float(phi), np.full(ins.n_marks, float(psi))
                )
            else:
                res = portfolio.log_pi_brownian(b0, s0, float(phi))
            grad = math.nan if res.hamiltonian_grad is None else res.hamiltonian_grad
            rows.append(
                [float(phi), float(psi), res.pi, res.foc_residual, res.admissibility_margin, grad, res.status]
            )
    write_csv(cfg.out / "foc.csv", header, rows)
    summary = {"rows": len(rows), "b0": b0, "sigma0": s0}
    write_json(cfg.out / "foc_summary.json", summary)
    return summary


# -- simulate ----------------------------------------------------------------------


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    se = float(np.std(x, ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.nan
    return float(np.mean(x)), se


def simulate_arms(cfg: ExperimentConfig, n_paths=None):
    """Per-path (index, Y, X insider, X Merton) for the configured experiment."""
    ins, mk = cfg.insider, cfg.market
    n_paths = cfg.n_paths if n_paths is None else n_paths
    merton = portfolio.MertonPolicy(mk, ins)
    choice = cfg.section("simulate")["policy"]
    if choice == "insider":
        insider_policy = portfolio.LogInsiderPolicy(ins, mk, cfg.quad)
    elif choice == "merton":
        insider_policy = merton
    else:
        raise ValueError(f"simulate.policy must be insider or merton, got {choice!r}")
    cols = [[], [], [], []]
    for bundle in market.iter_path_chunks(ins, mk, n_paths, cfg.seed, steps=cfg.steps, chunk=PATH_CHUNK):
        x_ins = market.insider_wealth(bundle, mk, insider_policy).terminal
        x_mer = market.insider_wealth(bundle, mk, merton).terminal
        for c, v in zip(cols, (bundle.path_index, bundle.realized_Y, x_ins, x_mer)):
            c.append(v)
    return [np.concatenate(c) for c in cols]


def run_simulate(cfg: ExperimentConfig):
    idx, Y, x_ins, x_mer = simulate_arms(cfg)
    u_ins = cfg.utility.utility(x_ins)
    u_mer = cfg.utility.utility(x_mer)
    write_csv(
        cfg.out / "simulate.csv",
        ["path", "realized_Y", "x_insider", "x_merton", "u_insider", "u_merton"],
        zip(idx, Y, x_ins, x_mer, u_ins, u_mer),
    )
    m_i, se_i = _mean_se(u_ins)
    m_m, se_m = _mean_se(u_mer)
    adv, se_adv = _mean_se(u_ins - u_mer)
    summary = {
        "n_paths": int(idx.size),
        "seed": cfg.seed,
        "steps": cfg.steps,
        "utility": cfg.utility.kind,
        "insider_policy": cfg.section("simulate")["policy"],
        "mean_utility_insider": m_i,
        "se_utility_insider": se_i,
        "mean_utility_merton": m_m,
        "se_utility_merton": se_m,
        "advantage": adv,
        "advantage_se": se_adv,
    }
    write_json(cfg.out / "simulate_summary.json", summary)
    return summary


# -- solve-c -------------------------------------------------------------------------


def run_solve_c(cfg: ExperimentConfig):
    sec = cfg.section("solve_c")
    ins, mk = cfg.insider, cfg.market
    paths = market.simulate_paths(ins, mk, cfg.n_paths, cfg.seed, steps=cfg.steps)
    kw = {"phi": 0.0, "psi": 0.0} if sec["phi_zero"] else {"quad": cfg.quad}
    rows = []
    table = []
    for y in sec["y"]:
        try:
            sol = adjoint.solve_c(ins, mk, cfg.utility, float(y), cfg.n_paths, cfg.seed, paths=paths, **kw)
        except InsiderControlError as exc:
            raise _with_context(exc, f"solve-c at y={y}")
        rows.append([float(y), sol.c, sol.budget, sol.se, sol.iterations, sol.feasible(mk.x0)])
        table.append({"y": float(y), "c": sol.c, "budget": sol.budget, "se": sol.se})
    write_csv(cfg.out / "solve_c.csv", ["y", "c", "budget", "budget_se", "iterations", "feasible"], rows)
    summary = {"x0": mk.x0, "utility": cfg.utility.kind, "n_paths": cfg.n_paths, "c_by_y": table}
    write_json(cfg.out / "solve_c_summary.json", summary)
    return summary
