"""Energy, Bresch-Desjardins entropy and Mellet-Vasseur functionals, their balances,
the cut-off families, the Juengel inequality and weak-form residuals.

Two weightings of the potential parts exist.  ``printed`` uses ``(a/gamma) rho^gamma``
and ``(kappa/2)|grad sqrt(rho)|^2``; ``balanced`` uses ``a/(gamma-1) rho^gamma`` and
``kappa |grad sqrt(rho)|^2``, the weights whose time derivative cancels the
pressure and quantum work exactly.  Balance residuals always use ``balanced``.

All balance bookkeeping assumes the velocity truncation is inactive
(chi = 1) except for the energy, which carries chi exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, PositivityError
from .noise import NoiseModel, evaluate_noise
from .spectral import SpectralField, TorusGrid
from .state import FluidState, RegularizationParams, gram_solve

# ---------------------------------------------------------------- cut-offs


def bump_step(s):
    """Decreasing C^1 (C-infinity away from s=0) bridge from 1 to 0 on [0, 1]."""
    return kernels.bump_step(s)


def phi_K(rho, K: float):
    """Density cut-off: 1 below K, 0 above 2K, bump bridge between. Returns (value, derivative)."""
    rho = np.asarray(rho, dtype=np.float64)
    if K <= 0:
        raise ConfigurationError("K must be positive")
    if not np.isfinite(K):
        return np.ones_like(rho), np.zeros_like(rho)
    v, dv = kernels.bump_step((rho - K) / K)
    return v, dv / K


def phi_tilde(y, n: float):
    """Truncated ``(1+y)ln(1+y)``: value, first and second derivative."""
    if n < 1:
        raise ConfigurationError("truncation index n must be >= 1")
    return kernels.phi_tilde(y, n)


def phi_tilde_branches(y, n: float):
    """The three branch formulas evaluated everywhere (for continuity checks)."""
    y = np.asarray(y, dtype=np.float64)
    L = np.log1p(n)
    ly = np.log1p(y)
    low = (1.0 + y) * ly
    mid = 2.0 * (1.0 + L) * y - (1.0 + y) * ly + 2.0 * (L - n)
    top = np.e * (1.0 + n) * (1.0 + n) - 2.0 * n - 2.0
    return {
        "low": (low, 1.0 + ly, 1.0 / (1.0 + y)),
        "mid": (mid, 1.0 + 2.0 * L - ly, -1.0 / (1.0 + y)),
        "top": (np.full_like(y, top), np.zeros_like(y), np.zeros_like(y)),
    }


def c_n(n: float) -> float:
    """Upper branch point ``e(1+n)^2 - 1``."""
    return np.e * (1.0 + n) ** 2 - 1.0


def varphi_n(u_vals, n: float, axis: int = 0):
    """``phi_n(u) = phi_tilde_n(|u|^2)`` with gradient ``2 phi' u`` and Hessian ``2(2 phi'' u u^T + phi' I)``.

    ``axis`` is the component axis of ``u_vals``.  The gradient has the same
    shape; the Hessian gets a second component axis right after ``axis``.
    """
    u = np.moveaxis(np.asarray(u_vals, dtype=np.float64), axis, 0)
    y = np.sum(u * u, axis=0)
    val, d1, d2 = phi_tilde(y, n)
    grad = 2.0 * d1 * u
    dim = u.shape[0]
    eye = np.eye(dim).reshape((dim, dim) + (1,) * y.ndim)
    hess = 2.0 * (2.0 * d2 * u[:, None] * u[None, :] + d1 * eye)
    grad = np.moveaxis(grad, 0, axis)
    hess = np.moveaxis(np.moveaxis(hess, 0, axis), 1, axis + 1 if axis >= 0 else axis)
    return val, grad, hess


# ---------------------------------------------------------------- pointwise helpers


def _e(a, d, n=1):
    """Insert ``n`` component axes in front of the ``d`` grid axes."""
    for _ in range(n):
        a = np.expand_dims(a, -(d + 1))
    return a


class _Fields:
    """Lazily evaluated collocation quantities of one (batched) state."""

    def __init__(self, grid: TorusGrid, rho_hat, u_hat, rho_vals=None, u_vals=None, floor=0.0):
        self.g = grid
        self.d = grid.d
        self.rho_hat = rho_hat
        self.u_hat = u_hat
        self._rho = rho_vals
        self._u = u_vals
        self.floor = floor
        self._cache = {}

    def _c(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def rho(self):
        if self._rho is None:
            self._rho = self.g.inverse(self.rho_hat)
        return self._rho

    @property
    def u(self):
        if self._u is None:
            self._u = self.g.inverse(self.u_hat)
        return self._u

    @property
    def rho_safe(self):
        """Density clamped from below so non-smooth functions stay finite on rejected paths."""
        return self._c("rho_safe", lambda: np.maximum(self.rho, max(self.floor, 1e-300)))

    @property
    def grad_rho(self):
        return self._c("grad_rho", lambda: self.g.inverse(self.g.grad(self.rho_hat)))

    @property
    def lap_rho(self):
        return self._c("lap_rho", lambda: self.g.inverse(self.g.lap(self.rho_hat)))

    @property
    def grad_u(self):
        """``[..., i, j, x] = d_j u_i``."""
        return self._c("grad_u", lambda: self.g.inverse(self.g.grad(self.u_hat)))

    @property
    def div_u(self):
        return self._c("div_u", lambda: np.trace(self.grad_u, axis1=-(self.d + 2), axis2=-(self.d + 1)))

    @property
    def deform(self):
        gu = self.grad_u
        return self._c("deform", lambda: 0.5 * (gu + np.swapaxes(gu, -(self.d + 1), -(self.d + 2))))

    @property
    def lap_u(self):
        return self._c("lap_u", lambda: self.g.inverse(self.g.lap(self.u_hat)))

    @property
    def u2(self):
        return self._c("u2", lambda: np.sum(self.u ** 2, axis=-(self.d + 1)))

    @property
    def sqrt_rho(self):
        return self._c("sqrt_rho", lambda: np.sqrt(self.rho_safe))

    @property
    def sqrt_rho_hat(self):
        return self._c("sqrt_rho_hat", lambda: self.g.forward(self.sqrt_rho))

    @property
    def lap_sqrt_rho(self):
        return self._c("lap_sqrt_rho", lambda: self.g.inverse(self.g.lap(self.sqrt_rho_hat)))

    @property
    def grad_sqrt_rho(self):
        return self._c("grad_sqrt_rho", lambda: self.g.inverse(self.g.grad(self.sqrt_rho_hat)))

    @property
    def log_rho_hat(self):
        return self._c("log_rho_hat", lambda: self.g.forward(np.log(self.rho_safe)))

    @property
    def grad_log_rho(self):
        return self._c("grad_log_rho", lambda: self.grad_rho / _e(self.rho_safe, self.d))

    @property
    def hess_log_rho(self):
        return self._c("hess_log_rho", lambda: self.g.inverse(self.g.grad(self.g.grad(self.log_rho_hat))))

    def mean(self, a, rank=0):
        return self.g.mean(a, rank)


def _sum_sq(a, d, rank):
    return np.sum(a * a, axis=tuple(range(-(d + rank), -d))) if rank else a * a


# ---------------------------------------------------------------- energy


@dataclass
class EnergyReport:
    kinetic: np.ndarray
    pressure_int: np.ndarray
    eta_part: np.ndarray
    quantum_part: np.ndarray
    delta_part: np.ndarray
    convention: str = "printed"

    @property
    def total(self):
        return self.kinetic + self.pressure_int + self.eta_part + self.quantum_part + self.delta_part

    def as_dict(self):
        return {"energy": self.total, "kinetic": self.kinetic, "pressure_int": self.pressure_int,
                "eta_part": self.eta_part, "quantum_part": self.quantum_part, "delta_part": self.delta_part}


def _check_positive(rho_vals, what):
    if np.min(rho_vals) <= 0.0:
        raise PositivityError(f"{what} needs a positive density; min rho = {float(np.min(rho_vals)):.3e}")


def _energy_parts(F: _Fields, q_hat, params: RegularizationParams, convention: str):
    g, d = F.g, F.d
    if convention not in ("printed", "balanced"):
        raise ConfigurationError(f"unknown energy convention {convention!r}")
    if params.eta > 0 or params.kappa > 0:
        _check_positive(F.rho, "energy with eta or kappa")
    kinetic = 0.5 * g.inner(q_hat, F.u_hat, 1)
    pw = params.a / params.gamma if convention == "printed" else params.a / (params.gamma - 1.0)
    rho_pos = np.maximum(F.rho, 0.0)
    pressure = pw * F.mean(rho_pos ** params.gamma)
    zero = np.zeros_like(kinetic)
    eta_part = params.eta / 10.0 * F.mean(F.rho_safe ** -10.0) if params.eta > 0 else zero
    if params.kappa > 0:
        kw = params.kappa / 2.0 if convention == "printed" else params.kappa
        quantum = kw * F.mean(_sum_sq(F.grad_sqrt_rho, d, 1))
    else:
        quantum = zero
    if params.delta > 0:
        c = g.grad(g.lap(F.rho_hat, 4))
        delta_part = params.delta / 2.0 * g.inner(c, c, 1)
    else:
        delta_part = zero
    return EnergyReport(kinetic, pressure, eta_part, quantum, delta_part, convention)


def energy(state: FluidState, params: RegularizationParams, convention: str = "printed") -> EnergyReport:
    """Kinetic, pressure, eta, quantum and delta parts of E for a (batched) state."""
    F = _Fields(state.grid, state.rho_hat, state.u_hat, state.rho_values, state.u_values)
    return _energy_parts(F, state.q_hat, params, convention)


# ---------------------------------------------------------------- B-D entropy


@dataclass
class BDReport:
    modified_kinetic: np.ndarray
    pressure_int: np.ndarray
    eta_part: np.ndarray
    quantum_part: np.ndarray
    delta_part: np.ndarray
    log_minus: np.ndarray
    include_log_minus: bool = False
    dissipation: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)

    @property
    def total(self):
        t = self.modified_kinetic + self.pressure_int + self.eta_part + self.quantum_part + self.delta_part
        return t + self.log_minus if self.include_log_minus else t


def _bd_parts(F: _Fields, q_hat, params, convention, include_log_minus):
    g, d = F.g, F.d
    _check_positive(F.rho, "B-D entropy")
    E = _energy_parts(F, q_hat, params, convention)
    J = F.mean(np.sum(F.u * F.grad_rho, axis=-(d + 1)))
    L = 0.5 * F.mean(np.sum(F.grad_rho ** 2, axis=-(d + 1)) / F.rho)
    gm = params.gamma
    pressure = params.a / (gm - 1.0) * F.mean(F.rho ** gm - F.rho)
    log_minus = params.r2 * F.mean(-np.log(np.minimum(F.rho, 1.0)))
    return BDReport(E.kinetic + J + L, pressure, E.eta_part, E.quantum_part, E.delta_part,
                    log_minus, include_log_minus)


def bd_entropy(state: FluidState, params: RegularizationParams, convention: str = "printed",
               include_log_minus: bool = False) -> BDReport:
    """``1/2 int rho|u + grad log rho|^2`` plus the potential parts (and optionally ``r2 int log_- rho``)."""
    F = _Fields(state.grid, state.rho_hat, state.u_hat, state.rho_values, state.u_values)
    return _bd_parts(F, state.q_hat, params, convention, include_log_minus)


# ---------------------------------------------------------------- Mellet-Vasseur


def mv_functional(state: FluidState, n: float | None = None, K: float = np.inf, exact: bool = False):
    """``int rho phi_tilde_n(|v|^2)`` with ``v = phi_K(rho) u``; ``exact`` uses ``(1+y)ln(1+y)``."""
    g, d = state.grid, state.grid.d
    rho = state.rho_values
    if np.min(rho) < 0:
        raise PositivityError("MV functional needs a non-negative density")
    pk, _ = phi_K(rho, K)
    v = state.u_values * _e(pk, d)
    y = np.sum(v * v, axis=-(d + 1))
    if exact:
        val = (1.0 + y) * np.log1p(y)
    else:
        if n is None:
            raise ConfigurationError("n is required unless exact=True")
        val, _, _ = phi_tilde(y, n)
    return g.mean(rho * val)


# ---------------------------------------------------------------- identities


def quantum_forms(grid: TorusGrid, rho_hat, rho_vals=None, dealiased: bool = True):
    """``2 rho grad(Lap sqrt rho / sqrt rho)`` and ``div(rho Hess log rho)`` as coefficient arrays."""
    F = _Fields(grid, rho_hat, None, rho_vals)
    _check_positive(F.rho, "quantum term")
    d = grid.d
    bohm = grid.inverse(grid.lap(F.sqrt_rho_hat)) / F.sqrt_rho
    f1 = grid.forward(2.0 * _e(F.rho, d) * grid.inverse(grid.grad(grid.forward(bohm))))
    f2 = grid.div(grid.forward(_e(F.rho, d, 2) * F.hess_log_rho))
    if dealiased:
        f1, f2 = grid.dealias(f1), grid.dealias(f2)
    return f1, f2


def quantum_identity_residual(rho: SpectralField):
    """``|2 rho grad(Lap sqrt rho/sqrt rho) - div(rho Hess log rho)|_2 / |rho|_2``."""
    g = rho.grid
    f1, f2 = quantum_forms(g, rho.coeffs, rho.values)
    diff = f1 - f2
    return np.sqrt(g.inner(diff, diff, 1)) / np.sqrt(g.inner(rho.coeffs, rho.coeffs, 0))


def jungel_gap(f, grid: TorusGrid | None = None):
    """``int f|Hess log f|^2 - (1/7) int |Hess sqrt f|^2 - (1/8) int |grad f^(1/4)|^4``.

    Returns ``(gap, lhs)``.
    """
    if isinstance(f, SpectralField):
        grid, vals = f.grid, f.values
    else:
        if grid is None:
            raise ConfigurationError("grid required for raw values")
        vals = np.asarray(f, dtype=np.float64)
    if np.min(vals) <= 0:
        raise PositivityError("Juengel inequality needs a strictly positive function")
    d = grid.d

    def hess(v):
        c = grid.forward(v)
        return grid.inverse(grid.grad(grid.grad(c)))

    lhs = grid.mean(vals * _sum_sq(hess(np.log(vals)), d, 2))
    h_sqrt = grid.mean(_sum_sq(hess(np.sqrt(vals)), d, 2))
    g4 = grid.inverse(grid.grad(grid.forward(vals ** 0.25)))
    quart = grid.mean(np.sum(g4 ** 2, axis=-(d + 1)) ** 2)
    return lhs - h_sqrt / 7.0 - quart / 8.0, lhs


# ---------------------------------------------------------------- balance rates


def energy_dissipation(F: _Fields, params: RegularizationParams, chi) -> dict:
    """Rates of the energy balance's dissipation integrals (balanced weights)."""
    d = F.d
    p = params
    chi = np.asarray(chi, dtype=np.float64)
    zero = np.zeros(F.rho.shape[: F.rho.ndim - d])
    out = {}
    out["viscous"] = chi * F.mean(F.rho * _sum_sq(F.deform, d, 2))
    out["eps_bilap"] = chi * p.eps * F.mean(_sum_sq(F.lap_u, d, 1)) if p.eps > 0 else zero
    out["rayleigh"] = chi * p.r0 * F.mean(F.u2 ** 2) if p.r0 > 0 else zero
    out["drag_cubic"] = chi * p.r1 * F.mean(F.rho * F.u2 ** 2) if p.r1 > 0 else zero
    out["drag_linear"] = chi * p.r2 * F.mean(F.u2) if p.r2 > 0 else zero
    if p.eps > 0:
        gr2 = np.sum(F.grad_rho ** 2, axis=-(d + 1))
        out["eps_pressure"] = p.eps * p.a * p.gamma * F.mean(F.rho_safe ** (p.gamma - 2.0) * gr2)
        out["eps_eta"] = 11.0 * p.eps * p.eta * F.mean(F.rho_safe ** -12.0 * gr2) if p.eta > 0 else zero
        if p.delta > 0:
            c = F.g.lap(F.rho_hat, 5)
            out["eps_delta"] = p.eps * p.delta * F.g.inner(c, c, 0)
        else:
            out["eps_delta"] = zero
        out["eps_quantum"] = (p.eps * p.kappa / 2.0 * F.mean(F.rho * _sum_sq(F.hess_log_rho, d, 2))
                              if p.kappa > 0 else zero)
        cross = F.mean(np.einsum("...jx,...ijx,...ix->...x", _flat(F.grad_rho, d), _flat(F.grad_u, d, 2),
                                 _flat(F.u, d)))
        out["chi_defect"] = -(1.0 - chi) * p.eps * cross
    else:
        for k in ("eps_pressure", "eps_eta", "eps_delta", "eps_quantum", "chi_defect"):
            out[k] = zero
    return out


def _flat(a, d, rank=1):
    """Collapse the grid axes into one so einsum signatures stay dimension-free."""
    return a.reshape(a.shape[: a.ndim - d] + (-1,))


def bd_rates(F: _Fields, params: RegularizationParams) -> tuple[dict, dict]:
    """Dissipation integrals and deterministic source terms I4..I10 of the B-D balance."""
    d = F.d
    p = params
    _check_positive(F.rho, "B-D balance")
    zero = np.zeros(F.rho.shape[: F.rho.ndim - d])
    rho = F.rho
    diss = energy_dissipation(F, p, 1.0)
    diss.pop("viscous")
    diss.pop("chi_defect")
    gu = F.grad_u
    A = 0.5 * (gu - np.swapaxes(gu, -(d + 1), -(d + 2)))
    diss["antisym"] = F.mean(rho * _sum_sq(A, d, 2))
    gl = F.grad_log_rho
    gl2 = np.sum(gl ** 2, axis=-(d + 1))
    diss["pressure_bd"] = p.a * p.gamma * F.mean(rho ** p.gamma * gl2)
    gr2 = np.sum(F.grad_rho ** 2, axis=-(d + 1))
    diss["eta_bd"] = 11.0 * p.eta * F.mean(rho ** -12.0 * gr2) if p.eta > 0 else zero
    hl2 = _sum_sq(F.hess_log_rho, d, 2) if p.kappa > 0 else None
    diss["quantum_bd"] = p.kappa / 2.0 * F.mean(rho * hl2) if p.kappa > 0 else zero
    if p.delta > 0:
        c = F.g.lap(F.rho_hat, 5)
        diss["delta_bd"] = p.delta * F.g.inner(c, c, 0)
    else:
        diss["delta_bd"] = zero

    src = {}
    if p.eps > 0:
        lap = F.lap_rho
        grad_lap = F.g.inverse(F.g.grad(F.g.lap(F.rho_hat)))
        src["I4"] = p.eps * F.mean(np.sum(F.grad_rho * grad_lap, axis=-(d + 1)) / rho - 0.5 * gr2 * lap / rho ** 2)
        cross = np.einsum("...jx,...ijx->...ix", _flat(F.grad_rho, d), _flat(gu, d, 2)).reshape(F.u.shape)
        src["I5"] = -p.eps * F.mean(np.sum(cross * gl, axis=-(d + 1)))
        div_rho_u = F.g.inverse(F.g.div(F.g.forward(_e(rho, d) * F.u)))
        src["I6"] = -p.eps * F.mean(div_rho_u * lap / rho)
        grad_lap_log = F.g.inverse(F.g.grad(F.g.lap(F.log_rho_hat)))
        src["I7"] = -p.eps * F.mean(np.sum(F.lap_u * grad_lap_log, axis=-(d + 1)))
    else:
        for k in ("I4", "I5", "I6", "I7"):
            src[k] = zero
    ugl = np.sum(F.u * gl, axis=-(d + 1))
    src["I8"] = -p.r0 * F.mean(F.u2 * ugl) if p.r0 > 0 else zero
    src["I9"] = -p.r1 * F.mean(rho * F.u2 * ugl) if p.r1 > 0 else zero
    src["I10"] = -p.r2 * F.mean(ugl) if p.r2 > 0 else zero
    return diss, src


@dataclass
class CutStressPair:
    S: np.ndarray
    R: np.ndarray
    R_terms: dict


def cut_stress(F: _Fields, params: RegularizationParams, K: float) -> CutStressPair:
    """``S = rho phi_K (Du + kappa (Lap sqrt rho / sqrt rho) I)`` and the remainder ``R``."""
    d, p, g = F.d, params, F.g
    rho = F.rho
    pk, dpk = phi_K(rho, K)
    pk1, dpk1 = _e(pk, d), _e(dpk, d)
    rho1 = _e(rho, d)
    eye = np.eye(d).reshape((d, d) + (1,) * d)
    S = F.deform.copy()
    if p.kappa > 0:
        S = S + p.kappa * _e(F.lap_sqrt_rho / F.sqrt_rho, d, 2) * eye
    S = _e(rho * pk, d, 2) * S
    grad_phi = dpk1 * F.grad_rho
    u = F.u
    u2 = _e(F.u2, d)
    zero = np.zeros_like(u)
    R = {}
    R["compress"] = _e(rho ** 2, d) * dpk1 * u * _e(F.div_u, d)
    R["pressure"] = pk1 * g.inverse(g.grad(g.forward(p.a * rho ** p.gamma)))
    R["visc_cut"] = rho1 * np.einsum("...ijx,...jx->...ix", _flat(F.deform, d, 2), _flat(grad_phi, d)).reshape(u.shape)
    R["rayleigh"] = p.r0 * u2 * u * pk1 if p.r0 > 0 else zero
    R["drag_cubic"] = p.r1 * rho1 * u2 * u * pk1 if p.r1 > 0 else zero
    R["drag_linear"] = p.r2 * u * pk1 if p.r2 > 0 else zero
    R["eta_pressure"] = (-1.1 * p.eta * pk1 * g.inverse(g.grad(g.forward(rho ** -10.0)))
                         if p.eta > 0 else zero)
    R["delta_pressure"] = (-p.delta * rho1 * pk1 * g.inverse(g.grad(g.lap(F.rho_hat, 9)))
                           if p.delta > 0 else zero)
    if p.kappa > 0:
        sl = _e(F.sqrt_rho * F.lap_sqrt_rho, d)
        R["quantum_cut"] = p.kappa * sl * grad_phi
        R["quantum_grad"] = 2.0 * p.kappa * pk1 * F.grad_sqrt_rho * _e(F.lap_sqrt_rho, d)
    else:
        R["quantum_cut"] = zero
        R["quantum_grad"] = zero
    if p.eps > 0:
        cross = np.einsum("...jx,...ijx->...ix", _flat(F.grad_rho, d), _flat(F.grad_u, d, 2)).reshape(u.shape)
        R["eps_cross"] = p.eps * pk1 * cross
        R["eps_bilap"] = p.eps * pk1 * g.inverse(g.lap(F.u_hat, 2))
        R["eps_cut"] = -p.eps * rho1 * u * dpk1 * _e(F.lap_rho, d)
    else:
        R["eps_cross"] = R["eps_bilap"] = R["eps_cut"] = zero
    total = sum(R.values())
    return CutStressPair(S, total, R)


def mv_rate(F: _Fields, params: RegularizationParams, K: float, n: float):
    """Deterministic rate ``int grad phi_n . (div S - R) + eps int Lap rho (phi_n - v . grad phi_n)``."""
    d, g = F.d, F.g
    pk, _ = phi_K(F.rho, K)
    v = F.u * _e(pk, d)
    val, grad, _ = varphi_n(v, n, axis=-(d + 1))
    csp = cut_stress(F, params, K)
    divS = g.inverse(g.div(g.forward(csp.S)))
    rate = F.mean(np.sum(grad * (divS - csp.R), axis=-(d + 1)))
    if params.eps > 0:
        rate = rate + params.eps * F.mean(F.lap_rho * (val - np.sum(v * grad, axis=-(d + 1))))
    return rate


# ---------------------------------------------------------------- tracking


@dataclass
class SubstepContext:
    """Everything one substep used, handed to trackers and monitors."""

    grid: TorusGrid
    rho_hat: np.ndarray
    rho_vals: np.ndarray
    u_hat: np.ndarray
    u_vals: np.ndarray
    q_hat: np.ndarray
    chi: np.ndarray
    dt: float
    dB: np.ndarray | None
    drift_hat: np.ndarray
    noise_hat: np.ndarray | None
    rho_hat_new: np.ndarray
    q_hat_new: np.ndarray
    t: float


BALANCES = ("energy", "bd", "mv")


class BalanceTracker:
    """Discrete bookkeeping of the energy, B-D and MV balances.

    For each accepted window it accumulates ``dt * rate`` and the realized
    stochastic increments evaluated at each substep's own data, so that
    ``value(end) - value(start) - sum(increments)`` is the balance residual.
    """

    def __init__(self, grid: TorusGrid, params: RegularizationParams, noise: NoiseModel | None,
                 which=BALANCES, K: float | None = None, n: float | None = None):
        for w in which:
            if w not in BALANCES:
                raise ConfigurationError(f"unknown balance {w!r}")
        self.grid = grid
        self.params = params
        self.noise = noise if (noise is not None and noise.K_modes > 0) else None
        self.which = tuple(which)
        self.K = params.K if K is None else K
        self.n = params.n_mv if n is None else n

    def values(self, rho_hat, q_hat, u_hat):
        F = _Fields(self.grid, rho_hat, u_hat, floor=0.0)
        out = {}
        if "energy" in self.which:
            out["energy"] = _energy_parts(F, q_hat, self.params, "balanced").total
        if "bd" in self.which:
            out["bd"] = _bd_parts(F, q_hat, self.params, "balanced", False).total
        if "mv" in self.which:
            pk, _ = phi_K(F.rho, self.K)
            v = F.u * _e(pk, F.d)
            val, _, _ = phi_tilde(np.sum(v * v, axis=-(F.d + 1)), self.n)
            out["mv"] = F.mean(F.rho * val)
        return out

    def increments(self, ctx: SubstepContext) -> dict:
        """Per-substep contributions, keyed ``<balance>:<term>``; sign convention ``value change = sum``."""
        g, d, p = self.grid, self.grid.d, self.params
        F = _Fields(g, ctx.rho_hat, ctx.u_hat, ctx.rho_vals, ctx.u_vals)
        dt = ctx.dt
        out = {}
        kicks = None
        if self.noise is not None and ctx.dB is not None:
            G = evaluate_noise(self.noise, F.rho, F.u)
            chi = np.asarray(ctx.chi, dtype=float)
            gk = g.project(g.forward(G * chi.reshape(chi.shape + (1,) * (d + 2))), p.m)
            rho_k = np.expand_dims(F.rho, -(d + 1))
            wk, _, _ = gram_solve(g, rho_k, gk, p.m, p.gram_tol)
            kicks = (gk, wk)
        if "energy" in self.which:
            diss = energy_dissipation(F, p, ctx.chi)
            for k, v in diss.items():
                out[f"energy:D_{k}"] = -dt * v
            if kicks is not None:
                gk, wk = kicks
                out["energy:ito"] = dt * 0.5 * np.sum(g.inner(gk, wk, 1), axis=-1)
                uk = np.expand_dims(ctx.u_hat, -(d + 2))
                out["energy:martingale"] = np.sum(g.inner(uk, gk, 1) * ctx.dB, axis=-1)
        if "bd" in self.which:
            diss, src = bd_rates(F, p)
            for k, v in diss.items():
                out[f"bd:D_{k}"] = -dt * v
            for k, v in src.items():
                out[f"bd:{k}"] = dt * v
            if kicks is not None:
                gk, wk = kicks
                uk = np.expand_dims(ctx.u_hat, -(d + 2))
                out["bd:I1"] = np.sum(g.inner(uk, gk, 1) * ctx.dB, axis=-1)
                out["bd:I2"] = dt * 0.5 * np.sum(g.inner(gk, wk, 1), axis=-1)
                grho = np.expand_dims(g.grad(ctx.rho_hat), -(d + 2))
                out["bd:I3"] = np.sum(g.inner(wk, grho, 1) * ctx.dB, axis=-1)
            else:
                zero = np.zeros(F.rho.shape[: F.rho.ndim - d])
                out["bd:I1"] = out["bd:I2"] = out["bd:I3"] = zero
        if "mv" in self.which:
            out["mv:rate"] = dt * mv_rate(F, p, self.K, self.n)
            if kicks is not None:
                gk, wk = kicks
                pk, _ = phi_K(F.rho, self.K)
                v = F.u * _e(pk, d)
                _, grad, hess = varphi_n(v, self.n, axis=-(d + 1))
                wv = g.inverse(wk)  # (*b, K, d, *x)
                w_pk = wv * _e(pk, d, 2)
                rho_k = _e(F.rho, d, 2)
                mart = g.mean(np.sum(rho_k * np.expand_dims(grad, -(d + 2)) * w_pk, axis=-(d + 1)))
                out["mv:martingale"] = np.sum(mart * ctx.dB, axis=-1)
                hw = np.einsum("...ijx,...kjx->...kix", _flat(hess, d, 2), _flat(w_pk, d, 1)).reshape(w_pk.shape)
                ito = 0.5 * g.mean(np.sum(rho_k * w_pk * hw, axis=-(d + 1)))
                out["mv:ito"] = dt * np.sum(ito, axis=-1)
        return out


def split_ledger(ledger: dict, balance: str) -> dict:
    prefix = balance + ":"
    return {k[len(prefix):]: v for k, v in ledger.items() if k.startswith(prefix)}


def _residual_from(trace, balance):
    cols = trace.columns
    key = f"{balance}_value"
    if key not in cols:
        raise ConfigurationError(f"trace has no {balance} bookkeeping; run with track=('{balance}',)")
    value = cols[key]
    inc_keys = [k for k in cols if k.startswith(f"{balance}:")]
    total_inc = sum(cols[k] for k in inc_keys) if inc_keys else np.zeros_like(value)
    cum = (value - value[0]) - total_inc
    per_step = np.diff(cum, axis=0, prepend=cum[:1])
    return per_step, cum, {k.split(":", 1)[1]: cols[k] for k in inc_keys}


def energy_balance_residual(trace):
    """Per-record and cumulative residual of the discrete energy balance.

    ``E(t) - E(0) + int D dt - int (Ito correction) dt - martingale`` using the
    stepper's own increments.  Returns ``(per_record, cumulative, terms)``.
    """
    return _residual_from(trace, "energy")


def bd_balance_residual(trace):
    """Residual of the B-D balance with the cumulative I1..I10 and dissipation terms."""
    return _residual_from(trace, "bd")


def mv_balance_residual(trace):
    """Residual of the Ito evolution of ``int rho phi_n(v)``."""
    return _residual_from(trace, "mv")


# ---------------------------------------------------------------- weak form


@dataclass
class SpaceTimeTest:
    """Test function ``theta(t) psi(x)``; ``psi`` coefficients (scalar for mass, vector for momentum)."""

    psi_hat: np.ndarray
    theta: object = None

    def th(self, t):
        return 1.0 if self.theta is None else float(self.theta(t))


def bump_in_time(T: float):
    """Smooth temporal profile equal to 1 at t=0 and vanishing with all derivatives at t=T."""
    def theta(t):
        s = t / T
        if s >= 1.0:
            return 0.0
        return float(np.exp(1.0 - 1.0 / (1.0 - s * s)))
    return theta


class WeakFormMonitor:
    """Accumulates the discrete distributional identities of continuity and momentum.

    Mass:      theta(T)<rho_T,psi> - theta(0)<rho_0,psi> - sum (theta_{n+1}-theta_n)<rho_{n+1},psi>
               - sum dt theta_n [<rho_n chi u_n, grad psi> + eps <rho_n, Lap psi>]
    Momentum:  same structure with q, the drift, and the noise increments.
    The time derivative of theta enters as its discrete difference, so a
    state at rest gives zero up to rounding.
    """

    def __init__(self, grid: TorusGrid, params: RegularizationParams, mass_tests=(), momentum_tests=()):
        self.grid = grid
        self.params = params
        self.mass_tests = list(mass_tests)
        self.momentum_tests = list(momentum_tests)
        self.mass = None
        self.mom = None
        self._started = False

    def start(self, rho_hat, q_hat, t0):
        g = self.grid
        self.mass = [-t.th(t0) * g.inner(rho_hat, t.psi_hat, 0) for t in self.mass_tests]
        self.mom = [-t.th(t0) * g.inner(q_hat, t.psi_hat, 1) for t in self.momentum_tests]
        self._started = True

    def substep(self, ctx: SubstepContext):
        g, d, p = self.grid, self.grid.d, self.params
        if not self._started:
            self.start(ctx.rho_hat, ctx.q_hat, ctx.t)
        t0, t1 = ctx.t, ctx.t + ctx.dt
        chi = np.asarray(ctx.chi, dtype=float)
        flux = g.forward(_e(ctx.rho_vals, d) * ctx.u_vals * chi.reshape(chi.shape + (1,) * (d + 1)))
        for i, tst in enumerate(self.mass_tests):
            th0, th1 = tst.th(t0), tst.th(t1)
            gpsi = g.grad(tst.psi_hat)
            lpsi = g.lap(tst.psi_hat)
            self.mass[i] = (self.mass[i] - (th1 - th0) * g.inner(ctx.rho_hat_new, tst.psi_hat, 0)
                            - ctx.dt * th0 * (g.inner(flux, gpsi, 1) + p.eps * g.inner(ctx.rho_hat, lpsi, 0)))
        for i, tst in enumerate(self.momentum_tests):
            th0, th1 = tst.th(t0), tst.th(t1)
            acc = ctx.dt * g.inner(ctx.drift_hat, tst.psi_hat, 1)
            if ctx.noise_hat is not None:
                acc = acc + g.inner(ctx.noise_hat, tst.psi_hat, 1)
            self.mom[i] = self.mom[i] - (th1 - th0) * g.inner(ctx.q_hat_new, tst.psi_hat, 1) - th0 * acc
        self._last = (ctx.rho_hat_new, ctx.q_hat_new, t1)

    def finish(self):
        g = self.grid
        rho_hat, q_hat, t = self._last
        mass = [m + tst.th(t) * g.inner(rho_hat, tst.psi_hat, 0) for m, tst in zip(self.mass, self.mass_tests)]
        mom = [m + tst.th(t) * g.inner(q_hat, tst.psi_hat, 1) for m, tst in zip(self.mom, self.momentum_tests)]
        return mass, mom


def weak_form_residual(monitor: WeakFormMonitor) -> dict:
    """Max absolute mass and momentum residuals over the registered test functions."""
    if not monitor._started:
        return {"mass": 0.0, "momentum": 0.0, "mass_all": [], "momentum_all": []}
    mass, mom = monitor.finish()
    mass_abs = [float(np.max(np.abs(m))) for m in mass]
    mom_abs = [float(np.max(np.abs(m))) for m in mom]
    return {"mass": max(mass_abs, default=0.0), "momentum": max(mom_abs, default=0.0),
            "mass_all": mass_abs, "momentum_all": mom_abs}
