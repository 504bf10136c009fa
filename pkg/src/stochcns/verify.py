"""Property battery behind ``stochcns verify``.

Each check measures one number and compares it with a tolerance
(``value <= tol * tol_scale``).  The sizes are chosen so the whole battery
finishes in well under a minute; the acceptance tests run the same
properties at full statistical size.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .functionals import (c_n, energy_balance_residual, jungel_gap, phi_tilde, phi_tilde_branches,
                          quantum_identity_residual)
from .montecarlo import bdg_ratio, brownian_paths, holder_exponent, ito_product_check
from .scheme import integrate, transport_step
from .spectral import SpectralField, get_grid
from .state import RegularizationParams, initial_fields, prepare_initial


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool
    seconds: float = 0.0
    note: str = ""


def smooth_positive(grid, rng, floor=0.1, contrast=10.0, n_modes=3):
    """``floor exp(s)`` with ``s`` a random trigonometric polynomial scaled into ``[0, ln contrast]``.

    Keeping ``log rho`` band-limited keeps sqrt(rho) and log(rho) resolved, which
    sharp minima of a plain trigonometric density would not be.
    """
    k = grid.kinf
    c = np.zeros(grid.coeff_shape, dtype=complex)
    mask = (k > 0) & (k <= n_modes)
    c[mask] = (rng.standard_normal(mask.sum()) + 1j * rng.standard_normal(mask.sum())) / (1 + grid.k2[mask])
    s = grid.inverse(c)
    s = s - s.min()
    return floor * np.exp(s / max(s.max(), 1e-300) * np.log(contrast) * rng.uniform(0.3, 1.0))


def check_spectral():
    g = get_grid(2, 16)
    x = g.points()
    f = np.sin(2 * np.pi * x[0]) * np.cos(4 * np.pi * x[1]) + 0.3
    c = g.forward(f)
    pars = abs(g.inner(c, c) - g.mean(f * f))
    dx = g.inverse(g.grad(c))[0]
    exact = 2 * np.pi * np.cos(2 * np.pi * x[0]) * np.cos(4 * np.pi * x[1])
    return max(pars, float(np.max(np.abs(dx - exact))) / (2 * np.pi))


def check_heat_kernel():
    g = get_grid(1, 32)
    rng = np.random.default_rng(1)
    rho = SpectralField.from_values(g, smooth_positive(g, rng, n_modes=8))
    u = SpectralField(g, np.zeros((1,) + g.coeff_shape, dtype=complex), 1)
    eps, t = 0.01, 0.3
    out = transport_step(rho, u, eps, t)
    exact = rho.coeffs * np.exp(-eps * 4 * np.pi ** 2 * g.k2 * t)
    return float(np.max(np.abs(out.coeffs - exact)) / np.max(np.abs(exact)))


def check_jungel(count=20):
    rng = np.random.default_rng(2)
    worst = -np.inf
    for i in range(count):
        g = get_grid(1 + i % 2, 32)
        gap, lhs = jungel_gap(smooth_positive(g, rng), g)
        worst = max(worst, -gap / lhs)
    return max(worst, 0.0)


def check_quantum():
    g = get_grid(1, 64)
    rng = np.random.default_rng(3)
    return float(quantum_identity_residual(SpectralField.from_values(g, smooth_positive(g, rng))))


def check_phi_continuity():
    worst = 0.0
    for n in (1.0, 5.0, 100.0):
        for y in (n, c_n(n)):
            br = phi_tilde_branches(np.array([y]), n)
            a, b = ("low", "mid") if y == n else ("mid", "top")
            worst = max(worst, abs(br[a][0][0] - br[b][0][0]) / max(1.0, abs(br[a][0][0])))
    return worst


def check_phi_limit():
    v = phi_tilde(np.array([10.0]), 1e3)[0][0]
    exact = 11.0 * np.log(11.0)
    return abs(v - exact) / exact


def check_mass():
    g = get_grid(1, 32)
    p = RegularizationParams(a=0.5, gamma=2.0, eps=1e-3, r2=0.1, m=4, h=1e-3, dt=1e-3)
    rho, u = initial_fields(g, "single_mode", amplitude=0.3, velocity=0.4)
    tr = integrate(prepare_initial(rho, u, p, g), p, None, [0], 0.05, record_every=5)
    mass = tr.columns["mass"][:, 0]
    return float(np.max(np.abs(mass - mass[0])) / mass[0])


def check_energy_order():
    g = get_grid(1, 32)
    res = []
    for dt in (1e-3, 5e-4):
        p = RegularizationParams(a=0.5, gamma=2.0, eps=1e-3, kappa=1e-5, r2=0.1, m=4, h=dt, dt=dt)
        rho, u = initial_fields(g, "single_mode", amplitude=0.2, velocity=0.3)
        tr = integrate(prepare_initial(rho, u, p, g), p, None, [0], 0.05, record_every=10, mode="coupled",
                       track=("energy",))
        cum = energy_balance_residual(tr)[1]
        res.append(abs(cum[-1, 0]))
    return abs(res[0] / res[1] - 2.0)


def check_ito():
    W = brownian_paths(200, 256, 1.0, seed=4, dims=2)
    return ito_product_check(W[..., 0], W[..., 1])["max_abs"]


def check_bdg():
    W = brownian_paths(20000, 128, 1.0, seed=5)[..., 0]
    r = bdg_ratio(W, np.full(W.shape[0], 1.0), 1.0, n_boot=200, seed=6)
    # distance of the interval from the bracket (1, 4]
    lo, hi = r["ci"]
    return max(1.0 - lo, hi - 4.0, 0.0)


def check_holder():
    W = brownian_paths(2000, 256, 1.0, seed=7)[..., 0]
    return abs(holder_exponent(W, np.linspace(0, 1, 257))["exponent"] - 0.5)


CHECKS = {
    "spectral": (check_spectral, 1e-12),
    "heat_kernel": (check_heat_kernel, 1e-10),
    "mass": (check_mass, 1e-10),
    "jungel": (check_jungel, 1e-8),
    "quantum": (check_quantum, 1e-8),
    "phi_continuity": (check_phi_continuity, 1e-12),
    "phi_limit": (check_phi_limit, 1e-3),
    "energy_order": (check_energy_order, 0.3),
    "ito": (check_ito, 1e-10),
    "bdg": (check_bdg, 1e-12),
    "holder": (check_holder, 0.05),
}


def run_checks(only=(), tol_scale: float = 1.0):
    out = []
    names = list(only) or list(CHECKS)
    for name in names:
        fn, tol = CHECKS[name]
        t0 = time.perf_counter()
        v = float(fn())
        tol_eff = tol * tol_scale
        out.append(CheckResult(name, v, tol_eff, bool(np.isfinite(v) and v <= tol_eff),
                               time.perf_counter() - t0))
    return out


def format_table(results) -> str:
    lines = [f"{'check':<16} {'value':>12} {'tol':>12}  result"]
    for r in results:
        lines.append(f"{r.name:<16} {r.value:>12.4g} {r.tol:>12.4g}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
