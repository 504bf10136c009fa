"""Time stepping: frozen-velocity transport, Euler-Maruyama momentum substeps,
the velocity truncation chi_R, stability control and whole-path integration.

A window of length ``h`` freezes ``u`` at its start, truncates it with
``chi_R``, advances the density and the momentum through ``h/dt`` substeps
and recovers the velocity from the momentum at the window end.  With
``mode="coupled"`` the window is a single substep, i.e. a plain coupled
Euler-Maruyama step.  Every path of a batch is independent: per-path
refinement levels, per-path rejection and per-path Gram solves.
"""
from __future__ import annotations

import csv
import io
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, SolverError
from .functionals import (BalanceTracker, SubstepContext, _Fields, _bd_parts, _energy_parts,
                          energy_dissipation, phi_K, phi_tilde)
from .noise import NoiseModel, combined_noise, sample_increment
from .spectral import SpectralField, TorusGrid
from .state import FluidState, RegularizationParams, gram_solve, write_checkpoint

TWO_PI = 2.0 * np.pi

DRIFT_TERMS = ("convection", "pressure", "viscous", "eta_pressure", "rayleigh", "drag_cubic",
               "drag_linear", "eps_cross", "eps_bilap", "delta_pressure", "quantum")

OK, R_EXIT, POSITIVITY, SOLVER = 0, 1, 2, 3
REASONS = {OK: "", R_EXIT: "r_exit", POSITIVITY: "positivity", SOLVER: "solver"}


def _bc(a, n):
    """Append ``n`` singleton axes to a per-path array."""
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape + (1,) * n)


# ---------------------------------------------------------------- truncation


def u_norm(grid: TorusGrid, u_hat):
    """``||u||_{H_m}``: the l2 norm of the coefficients (the L2 norm of u)."""
    return np.sqrt(grid.inner(u_hat, u_hat, 1))


def chi_R(u, R: float, grid: TorusGrid | None = None):
    """Velocity truncation factor: 1 for ``||u|| <= R``, 0 for ``||u|| >= R+1``, smooth bump between."""
    if R <= 0:
        raise ConfigurationError("R must be positive")
    if isinstance(u, SpectralField):
        nrm = u_norm(u.grid, u.coeffs)
    elif grid is not None:
        nrm = u_norm(grid, u)
    else:
        nrm = np.asarray(u, dtype=np.float64)  # already a norm
    val, _ = kernels.bump_step(np.asarray(nrm) - R)
    return val if val.ndim else float(val)


def _chi(grid, u_hat, params: RegularizationParams):
    if params.chi_mode == "off":
        return np.ones(u_hat.shape[: u_hat.ndim - grid.d - 1])
    return np.asarray(chi_R(u_hat, params.R, grid))


# ---------------------------------------------------------------- transport


def _transport(grid: TorusGrid, rho_hat, rho_vals, w_vals, eps: float, dt: float):
    """``rho <- exp(eps Lap dt) (rho - dt dealias(div(rho w)))`` for the frozen velocity ``w``."""
    flux = grid.forward(np.expand_dims(rho_vals, -(grid.d + 1)) * w_vals)
    adv = grid.dealias(grid.div(flux))
    out = rho_hat - dt * adv
    if eps > 0:
        out = out * np.exp(eps * grid.lap_symbol * dt)
    return out


def transport_step(rho: SpectralField, u_frozen: SpectralField, eps: float, dt: float) -> SpectralField:
    """One transport substep with exact heat-semigroup treatment of ``eps Lap rho``.

    ``u_frozen`` is the already truncated velocity.  Mass is conserved
    exactly because the advection symbol vanishes at k = 0.
    """
    if rho.grid != u_frozen.grid:
        raise ConfigurationError("rho and u live on different grids")
    if dt < 0 or eps < 0:
        raise ConfigurationError("dt and eps must be non-negative")
    g = rho.grid
    return SpectralField(g, _transport(g, rho.coeffs, rho.values, u_frozen.values, eps, dt), 0)


# ---------------------------------------------------------------- drift


@dataclass
class DriftBreakdown:
    """Per-term drift coefficients in H_m, each ``(*batch, d, *coeff_shape)``."""

    grid: TorusGrid
    terms: dict
    quantum_mismatch: np.ndarray | None = None

    @property
    def total(self):
        out = np.zeros_like(next(iter(self.terms.values())))
        for name in DRIFT_TERMS:
            out = out + self.terms[name]
        return out

    def field(self, name) -> SpectralField:
        return SpectralField(self.grid, self.terms[name], 1)


def _drift_terms(grid: TorusGrid, m: int, params: RegularizationParams, rho_hat, rho_vals, u_hat, u_vals,
                 chi, quantum_check: bool = False):
    """Evaluate every drift term pseudo-spectrally and project it to H_m."""
    g, d, p = grid, grid.d, params
    P = lambda c: g.project(c, m)
    F = lambda v: g.forward(v)
    rho_e = np.expand_dims(rho_vals, -(d + 1))
    zero = np.zeros_like(u_hat)
    t = {}

    flux = np.expand_dims(rho_e, -(d + 1)) * np.expand_dims(u_vals, -(d + 1)) * np.expand_dims(u_vals, -(d + 2))
    t["convection"] = -P(g.div(F(flux)))
    t["pressure"] = -P(g.grad(F(p.a * rho_vals ** p.gamma))) if p.a > 0 else zero
    D = g.inverse(g.deformation(u_hat))
    t["viscous"] = P(g.div(F(np.expand_dims(rho_e, -(d + 1)) * D)))
    t["eta_pressure"] = 1.1 * p.eta * P(g.grad(F(rho_vals ** -10.0))) if p.eta > 0 else zero
    u2 = np.expand_dims(np.sum(u_vals * u_vals, axis=-(d + 1)), -(d + 1))
    t["rayleigh"] = -p.r0 * P(F(u2 * u_vals)) if p.r0 > 0 else zero
    t["drag_cubic"] = -p.r1 * P(F(rho_e * u2 * u_vals)) if p.r1 > 0 else zero
    t["drag_linear"] = -p.r2 * u_hat if p.r2 > 0 else zero
    if p.eps > 0:
        grad_rho = g.inverse(g.grad(rho_hat))
        grad_u = g.inverse(g.grad(u_hat))
        cross = np.sum(grad_u * np.expand_dims(grad_rho, -(d + 2)), axis=-(d + 1))
        t["eps_cross"] = -p.eps * P(F(cross))
        t["eps_bilap"] = -p.eps * g.lap(u_hat, 2)
    else:
        t["eps_cross"] = t["eps_bilap"] = zero
    if p.delta > 0:
        t["delta_pressure"] = p.delta * P(F(rho_e * g.inverse(g.grad(g.lap(rho_hat, 9)))))
    else:
        t["delta_pressure"] = zero
    mismatch = None
    if p.kappa > 0:
        sq = np.sqrt(rho_vals)
        bohm = g.inverse(g.lap(F(sq))) / sq
        t["quantum"] = p.kappa * P(F(rho_e * g.inverse(g.grad(F(bohm)))))
        if quantum_check:
            hess = g.inverse(g.grad(g.grad(F(np.log(rho_vals)))))
            alt = 0.5 * p.kappa * P(g.div(F(np.expand_dims(rho_e, -(d + 1)) * hess)))
            diff = t["quantum"] - alt
            mismatch = np.sqrt(g.inner(diff, diff, 1))
    else:
        t["quantum"] = zero
        if quantum_check:
            mismatch = np.zeros(u_hat.shape[: u_hat.ndim - d - 1])
    c = _bc(chi, d + 1)
    for k in DRIFT_TERMS:
        t[k] = c * t[k]
    return t, mismatch


def momentum_drift(state: FluidState, params: RegularizationParams, chi=None,
                   quantum_check: bool = True) -> DriftBreakdown:
    """All momentum drift terms for ``state``, multiplied by ``chi_R(u)``.

    ``chi`` overrides the truncation factor (scalar or per path).  The
    quantum term is also evaluated in divergence form and the L2 norm of the
    difference is stored in ``quantum_mismatch``.
    """
    g = state.grid
    if chi is None:
        chi = _chi(g, state.u_hat, params)
    terms, mm = _drift_terms(g, state.m, params, state.rho_hat, state.rho_values, state.u_hat,
                             state.u_values, chi, quantum_check)
    return DriftBreakdown(g, terms, mm)


# ---------------------------------------------------------------- stability


def stability_dt(state: FluidState, params: RegularizationParams, include_viscous: bool = False):
    """Explicit-term step guard ``c_stab / (sum of symbol bounds)``; ``inf`` when no term is active.

    ``include_viscous`` adds ``(2 pi m)^2 max rho / min rho`` for the
    explicit viscous term, which the plain guard leaves out.  The integrator
    turns it on by default: without it the viscous term alone is unstable
    at m = 8 once dt exceeds about 3e-4.
    """
    g, p = state.grid, params
    rho = state.rho_values
    axes = tuple(range(-g.d, 0))
    rmax = np.max(rho, axis=axes)
    rmin = np.min(rho, axis=axes)
    uinf = np.max(np.abs(state.u_values), axis=tuple(range(-(g.d + 1), 0)))
    km = TWO_PI * p.m
    rate = (p.eps * km ** 4 + p.delta * rmax * km ** 20 + p.kappa * km ** 4 / rmin
            + p.a * p.gamma * np.maximum(rmax, 0.0) ** (p.gamma - 1.0) * km ** 2
            + uinf * km + p.r0 * uinf ** 2 + p.r1 * rmax * uinf ** 2 + p.r2)
    if include_viscous:
        rate = rate + km ** 2 * rmax / rmin
    with np.errstate(divide="ignore"):
        out = np.where(rate > 0, p.c_stab / np.where(rate > 0, rate, 1.0), np.inf)
    return out if out.ndim else float(out)


def _frozen_rate(state: FluidState, params: RegularizationParams):
    """Symbol bound of the drift terms that act on the frozen velocity (viscous, eps-bilaplacian, convection, drag)."""
    g, p = state.grid, params
    rho = state.rho_values
    axes = tuple(range(-g.d, 0))
    rmax, rmin = np.max(rho, axis=axes), np.min(rho, axis=axes)
    uinf = np.max(np.abs(state.u_values), axis=tuple(range(-(g.d + 1), 0)))
    km = TWO_PI * p.m
    return (km ** 2 * rmax / rmin + p.eps * km ** 4 + uinf * km + p.r0 * uinf ** 2 + p.r1 * rmax * uinf ** 2
            + p.r2)


def refinement_level(dt: float, dt_max) -> np.ndarray:
    """Smallest ``L >= 0`` with ``dt / 2^L <= dt_max``."""
    dt_max = np.asarray(dt_max, dtype=np.float64)
    with np.errstate(divide="ignore"):
        ratio = np.where(np.isfinite(dt_max), dt / dt_max, 0.0)
    lev = np.where(ratio > 1.0, np.ceil(np.log2(np.maximum(ratio, 1.0)) - 1e-12), 0.0)
    return lev.astype(np.int64)


# ---------------------------------------------------------------- single substeps


@dataclass
class StepOutcome:
    state: FluidState
    accepted: np.ndarray | bool
    dt_used: np.ndarray | float
    reason: np.ndarray | str
    level: np.ndarray | int = 0

    @property
    def reason_names(self):
        r = np.asarray(self.reason)
        if r.dtype.kind in "iu":
            return np.vectorize(REASONS.get)(r)
        return r


def momentum_step(state: FluidState, params: RegularizationParams, noise: NoiseModel | None,
                  increment, dt: float, chi=None) -> StepOutcome:
    """One Euler-Maruyama momentum substep with the density held fixed.

    ``q_new = q + dt * drift(rho, u) + sum_k Pi_m[chi G_k(rho, u)] dB_k``
    followed by the Gram solve for the new velocity.  ``increment`` has shape
    ``(*batch, K)`` or is None for no noise.
    """
    g, p = state.grid, params
    if chi is None:
        chi = _chi(g, state.u_hat, p)
    terms, _ = _drift_terms(g, state.m, p, state.rho_hat, state.rho_values, state.u_hat,
                            state.u_values, chi, False)
    q_new = state.q_hat + dt * sum(terms[k] for k in DRIFT_TERMS)
    if noise is not None and noise.K_modes > 0 and increment is not None:
        nz = combined_noise(noise, state.rho_values, state.u_values, np.asarray(increment))
        q_new = q_new + _bc(chi, g.d + 1) * g.project(g.forward(nz), state.m)
    batch = state.batch_shape
    try:
        u_new, _, _ = gram_solve(g, state.rho_values, q_new, state.m, p.gram_tol, x0=state.u_hat)
        reason = np.zeros(batch, dtype=np.int64)
    except SolverError:
        u_new, reason = _solve_each(g, state.rho_values, q_new, state.m, p.gram_tol, state.u_hat)
    unorm = u_norm(g, u_new)
    reason = np.where((reason == OK) & (unorm > p.R + 1.0), R_EXIT, reason)
    new = FluidState(g, state.m, state.rho_hat, q_new, u_new, state.t + dt)
    acc = reason == OK
    if not batch:
        return StepOutcome(new, bool(acc), dt, REASONS[int(reason)])
    return StepOutcome(new, acc, np.full(batch, dt), reason)


def _solve_each(grid, rho_vals, q_hat, m, tol, x0):
    """Path-by-path Gram solves; failures are flagged instead of raised."""
    batch = q_hat.shape[: q_hat.ndim - grid.d - 1]
    out = np.array(x0, copy=True)
    reason = np.zeros(batch, dtype=np.int64)
    for idx in np.ndindex(*batch):
        try:
            out[idx], _, _ = gram_solve(grid, rho_vals[idx], q_hat[idx], m, tol, x0=x0[idx])
        except SolverError:
            reason[idx] = SOLVER
    return out, reason


# ---------------------------------------------------------------- windows


class _Stepper:
    """Window integration for a batch of paths with shared parameters."""

    def __init__(self, grid: TorusGrid, params: RegularizationParams, noise: NoiseModel | None,
                 mode: str = "frozen", tracker: BalanceTracker | None = None, monitors=(),
                 include_viscous: bool = True, adaptive: bool = True):
        if mode not in ("frozen", "coupled"):
            raise ConfigurationError(f"mode must be frozen or coupled, got {mode!r}")
        grid.check_cutoff(params.m)
        self.g = grid
        self.p = params
        self.m = int(params.m)
        self.noise = noise if (noise is not None and noise.K_modes > 0) else None
        self.mode = mode
        self.h = params.dt if mode == "coupled" else params.h
        n_sub = self.h / params.dt
        if abs(n_sub - round(n_sub)) > 1e-9 * max(1.0, n_sub):
            raise ConfigurationError(f"dt={params.dt} must divide h={params.h}")
        self.n_sub = int(round(n_sub))
        self.tracker = tracker
        self.monitors = list(monitors)
        self.include_viscous = include_viscous
        self.adaptive = adaptive

    def window(self, rho_hat, q_hat, u_hat, paths, w: int, level: int):
        """Advance a group of paths through window ``w`` at refinement ``level``.

        Returns new arrays, reason codes, tracker increments and substep contexts.
        """
        g, p, d, m = self.g, self.p, self.g.d, self.m
        batch = rho_hat.shape[: rho_hat.ndim - d]
        u_vals = g.inverse(u_hat)
        chi = _chi(g, u_hat, p)
        w_vals = _bc(chi, d + 1) * u_vals
        n_fine = 2 ** level
        dt = p.dt / n_fine
        reason = np.zeros(batch, dtype=np.int64)
        incs = {}
        ctxs = []
        rho = rho_hat
        q = q_hat
        rho_vals = g.inverse(rho)
        for j in range(self.n_sub):
            step = w * self.n_sub + j
            dB_all = (sample_increment(self.noise, paths, step, p.dt, level) if self.noise is not None else None)
            for i in range(n_fine):
                dB = None if dB_all is None else (dB_all if level == 0 else dB_all[..., i, :])
                terms, _ = _drift_terms(g, m, p, rho, rho_vals, u_hat, u_vals, chi)
                drift = sum(terms[k] for k in DRIFT_TERMS)
                q_new = q + dt * drift
                noise_hat = None
                if dB is not None:
                    nz = combined_noise(self.noise, rho_vals, u_vals, dB)
                    noise_hat = _bc(chi, d + 1) * g.project(g.forward(nz), m)
                    q_new = q_new + noise_hat
                rho_new = _transport(g, rho, rho_vals, w_vals, p.eps, dt)
                rho_new_vals = g.inverse(rho_new)
                ctx = SubstepContext(g, rho, rho_vals, u_hat, u_vals, q, chi, dt, dB, drift, noise_hat,
                                     rho_new, q_new, (w * self.n_sub + j + i / n_fine) * p.dt)
                if self.tracker is not None:
                    for k, v in self.tracker.increments(ctx).items():
                        incs[k] = incs.get(k, 0.0) + v
                if self.monitors:
                    ctxs.append(ctx)
                bad = np.min(rho_new_vals, axis=tuple(range(-d, 0))) < p.rho_floor
                bad |= ~np.all(np.isfinite(rho_new_vals), axis=tuple(range(-d, 0)))
                reason = np.where(bad, POSITIVITY, reason)
                if bad.any():
                    # keep the arithmetic finite on rejected paths; they are retried anyway
                    fix = _bc(bad, d)
                    rho_new_vals = np.where(fix, np.maximum(rho_vals, p.rho_floor), rho_new_vals)
                    rho_new = np.where(fix, rho, rho_new)
                rho, rho_vals, q = rho_new, rho_new_vals, q_new
        ok = reason == OK
        u_new = np.array(u_hat, copy=True)
        if ok.any():
            idx = np.nonzero(ok)
            try:
                sol, _, _ = gram_solve(g, rho_vals[idx], q[idx], m, p.gram_tol, x0=u_hat[idx])
            except SolverError:
                sol, r2 = _solve_each(g, rho_vals[idx], q[idx], m, p.gram_tol, u_hat[idx])
                sub = reason[idx]
                reason[idx] = np.where(r2 != OK, r2, sub)
            u_new[idx] = sol
        return rho, q, u_new, reason, incs, ctxs

    def base_levels(self, rho_hat, u_hat):
        if not self.adaptive:
            return np.zeros(rho_hat.shape[: rho_hat.ndim - self.g.d], dtype=np.int64)
        st = FluidState(self.g, self.m, rho_hat, u_hat, u_hat)
        return refinement_level(self.p.dt, stability_dt(st, self.p, self.include_viscous))

    def advance(self, rho_hat, q_hat, u_hat, paths, w: int):
        """Window ``w`` for every path, with reject-and-halve retries grouped by level."""
        p = self.p
        P = rho_hat.shape[0]
        level = self.base_levels(rho_hat, u_hat)
        start = level.copy()
        reason = np.full(P, -1, dtype=np.int64)
        out_rho = np.array(rho_hat, copy=True)
        out_q = np.array(q_hat, copy=True)
        out_u = np.array(u_hat, copy=True)
        incs = {}
        ctx_by_path = {}
        pending = np.arange(P)
        while pending.size:
            next_pending = []
            for L in np.unique(level[pending]):
                grp = pending[level[pending] == L]
                r, q, u, rs, inc, ctxs = self.window(rho_hat[grp], q_hat[grp], u_hat[grp], paths[grp], w, int(L))
                for n, pi in enumerate(grp):
                    if rs[n] == POSITIVITY and level[pi] - start[pi] < p.max_retries:
                        level[pi] += 1
                        next_pending.append(pi)
                        continue
                    reason[pi] = rs[n]
                    if rs[n] == OK:
                        out_rho[pi], out_q[pi], out_u[pi] = r[n], q[n], u[n]
                        for k, v in inc.items():
                            incs.setdefault(k, np.zeros(P))[pi] = v[n]
                        if ctxs:
                            ctx_by_path[pi] = [_select_ctx(c, n) for c in ctxs]
            pending = np.array(sorted(next_pending), dtype=np.int64)
        return out_rho, out_q, out_u, reason, level, incs, ctx_by_path


def _select_ctx(ctx: SubstepContext, n: int) -> SubstepContext:
    pick = lambda a: None if a is None else a[n]
    return SubstepContext(ctx.grid, ctx.rho_hat[n], ctx.rho_vals[n], ctx.u_hat[n], ctx.u_vals[n], ctx.q_hat[n],
                          np.asarray(ctx.chi)[n], ctx.dt, pick(ctx.dB), ctx.drift_hat[n], pick(ctx.noise_hat),
                          ctx.rho_hat_new[n], ctx.q_hat_new[n], ctx.t)


def window_step(state: FluidState, params: RegularizationParams, noise: NoiseModel | None, path_id=0,
                window_index: int = 0, mode: str = "frozen", include_viscous: bool = True) -> StepOutcome:
    """Advance one window ``[n h, (n+1) h]`` (one coupled step when ``mode="coupled"``).

    On positivity rejection the substep is halved and the window retried,
    up to ``params.max_retries`` times.
    """
    single = state.batch_shape == ()
    st = state.broadcast(1) if single else state
    if len(st.batch_shape) != 1:
        raise ConfigurationError("window_step takes an unbatched state or a 1-d batch")
    paths = np.broadcast_to(np.asarray(path_id, dtype=np.uint64), st.batch_shape).copy()
    stepper = _Stepper(state.grid, params, noise, mode, include_viscous=include_viscous)
    rho, q, u, reason, level, _, _ = stepper.advance(st.rho_hat, st.q_hat, st.u_hat, paths, window_index)
    acc = reason == OK
    unorm = u_norm(state.grid, u)
    reason = np.where(acc & (unorm > params.R + 1.0), R_EXIT, reason)
    keep = _bc(reason == POSITIVITY, state.grid.d)
    keep_v = _bc(reason == POSITIVITY, state.grid.d + 1)
    rho = np.where(keep, st.rho_hat, rho)
    q = np.where(keep_v, st.q_hat, q)
    u = np.where(keep_v, st.u_hat, u)
    t_new = (window_index + 1) * stepper.h
    new = FluidState(state.grid, state.m, rho, q, u, t_new, bool(np.all(reason == OK)))
    dt_used = params.dt / 2.0 ** level
    if single:
        return StepOutcome(new.select(0), bool(reason[0] == OK), float(dt_used[0]), REASONS[int(reason[0])],
                           int(level[0]))
    return StepOutcome(new, reason == OK, dt_used, reason, level)


# ---------------------------------------------------------------- diagnostics


def diagnostics(grid: TorusGrid, params: RegularizationParams, rho_hat, q_hat, u_hat, K=None, n=None) -> dict:
    """Scalar diagnostics of a batch of states (one value per path)."""
    d = grid.d
    F = _Fields(grid, rho_hat, u_hat, floor=params.rho_floor)
    rho = F.rho
    axes = tuple(range(-d, 0))
    out = {}
    out["mass"] = np.real(rho_hat[(...,) + (0,) * d])
    out["min_rho"] = np.min(rho, axis=axes)
    out["max_rho"] = np.max(rho, axis=axes)
    out["vacuum_fraction"] = np.mean(rho < params.rho_floor, axis=axes)
    out["u_norm"] = u_norm(grid, u_hat)
    out["chi"] = _chi(grid, u_hat, params)
    out["divu_sup"] = np.max(np.abs(F.div_u), axis=axes)
    positive = bool(np.all(out["min_rho"] > 0))
    if positive:
        E = _energy_parts(F, q_hat, params, "printed")
        out["energy"] = E.total
        out["kinetic"] = E.kinetic
        out["bd_entropy"] = _bd_parts(F, q_hat, params, "printed", False).total
    else:
        nan = np.full(out["mass"].shape, np.nan)
        out["energy"] = out["kinetic"] = out["bd_entropy"] = nan
    K = params.K if K is None else K
    n = params.n_mv if n is None else n
    pk, _ = phi_K(np.maximum(rho, 0.0), K)
    v = F.u * np.expand_dims(pk, -(d + 1))
    val, _, _ = phi_tilde(np.sum(v * v, axis=-(d + 1)), n)
    out["mv"] = grid.mean(np.maximum(rho, 0.0) * val)
    if positive:
        for k, v in energy_dissipation(F, params, out["chi"]).items():
            out[f"rate_{k}"] = v
    return out


@dataclass
class DiagnosticTrace:
    """Time series recorded by :func:`integrate`.

    ``columns`` maps names to arrays of shape ``(n_records, n_paths)``.
    Cumulative balance increments are stored under ``<balance>:<term>`` and
    the tracked balance values under ``<balance>_value``.
    """

    times: np.ndarray
    columns: dict
    status: np.ndarray
    exit_time: np.ndarray
    tau_R: np.ndarray
    path_ids: np.ndarray
    final: FluidState | None = None
    levels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return int(self.status.shape[0])

    @property
    def failed(self) -> np.ndarray:
        return (self.status == POSITIVITY) | (self.status == SOLVER)

    @property
    def status_names(self):
        return [REASONS[int(s)] or "ok" for s in self.status]

    def path(self, i: int) -> "DiagnosticTrace":
        cols = {k: v[:, i:i + 1] for k, v in self.columns.items()}
        fin = self.final.select(slice(i, i + 1)) if self.final is not None else None
        return DiagnosticTrace(self.times, cols, self.status[i:i + 1], self.exit_time[i:i + 1],
                               self.tau_R[i:i + 1], self.path_ids[i:i + 1], fin,
                               None if self.levels is None else self.levels[:, i:i + 1], dict(self.meta))

    def column(self, name, i: int = 0):
        return self.columns[name][:, i]

    def residual(self, balance: str):
        """Cumulative balance residual ``(value - value_0) - sum of increments`` per record and path."""
        key = f"{balance}_value"
        if key not in self.columns:
            raise ConfigurationError(f"balance {balance!r} was not tracked")
        val = self.columns[key]
        inc = [v for k, v in self.columns.items() if k.startswith(balance + ":")]
        total = sum(inc) if inc else np.zeros_like(val)
        return (val - val[0]) - total

    def to_csv(self, path_or_buf, i: int = 0):
        """Write path ``i`` as a comma-separated table with a header row (floats as ``.17g``)."""
        names = list(self.columns)
        own = isinstance(path_or_buf, (str, os.PathLike))
        fh = open(path_or_buf, "w", newline="") if own else path_or_buf
        try:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t"] + names)
            for r in range(self.times.size):
                w.writerow([format(float(self.times[r]), ".17g")]
                           + [format(float(self.columns[k][r, i]), ".17g") for k in names])
        finally:
            if own:
                fh.close()

    def csv_text(self, i: int = 0) -> str:
        buf = io.StringIO()
        self.to_csv(buf, i)
        return buf.getvalue()


def integrate(initial: FluidState, params: RegularizationParams, noise: NoiseModel | None, path_ids, T: float,
              record_every: int = 1, mode: str = "frozen", track=(), monitors=(),
              include_viscous: bool = True, adaptive: bool = True, K=None, n=None,
              on_window=None) -> DiagnosticTrace:
    """Integrate a batch of independent paths to time ``T``.

    ``initial`` is an unbatched state (replicated per path) or a 1-d batch.
    Paths that exit the R-ball stop there (their exit time is recorded);
    paths that cannot be advanced within the retry cap stop with a failure
    status.  ``track`` names the balances to book-keep; ``monitors`` are
    weak-form monitors (single path only).
    """
    g = initial.grid
    path_ids = np.atleast_1d(np.asarray(path_ids, dtype=np.uint64))
    P = path_ids.size
    st = initial.broadcast(P) if initial.batch_shape == () else initial
    if st.batch_shape != (P,):
        raise ConfigurationError(f"initial batch {st.batch_shape} does not match {P} path ids")
    if monitors and P != 1:
        raise ConfigurationError("weak-form monitors follow a single path")
    if record_every < 1:
        raise ConfigurationError("record_every must be >= 1")
    tracker = BalanceTracker(g, params, noise, tuple(track), K, n) if track else None
    stepper = _Stepper(g, params, noise, mode, tracker, monitors, include_viscous, adaptive)
    h = stepper.h
    if mode == "frozen":
        lam = float(np.max(_frozen_rate(st, params)))
        if h * lam > 2.0:
            # substep refinement cannot help here: the frozen velocity makes every
            # u-dependent drift term an explicit step of length h
            warnings.warn(f"frozen mode: h={h:g} exceeds the explicit bound 2/{lam:.4g} of the "
                          f"velocity-dependent terms; expect instability", RuntimeWarning, stacklevel=2)
    nw = T / h
    if T < 0 or abs(nw - round(nw)) > 1e-9 * max(1.0, nw):
        raise ConfigurationError(f"T={T} must be a non-negative multiple of the window length {h}")
    nw = int(round(nw))

    rho, q, u = st.rho_hat.copy(), st.q_hat.copy(), st.u_hat.copy()
    status = np.zeros(P, dtype=np.int64)
    exit_time = np.full(P, np.nan)
    tau_R = np.full(P, np.nan)
    cum = {}
    times, rows, lev_rows = [], [], []
    last_level = np.zeros(P, dtype=np.int64)

    def record(t):
        diag = diagnostics(g, params, rho, q, u, K, n)
        if tracker is not None:
            for b, v in tracker.values(rho, q, u).items():
                diag[f"{b}_value"] = v
            for k, v in cum.items():
                diag[k] = v.copy()
        times.append(t)
        rows.append(diag)
        lev_rows.append(last_level.copy())

    if tracker is not None:
        # every increment key is known up front so columns stay rectangular
        z = {k: np.zeros(P) for k in _tracker_keys(tracker, g, params, rho, q, u, noise)}
        cum.update(z)
    for mon in monitors:
        mon.start(rho[0], q[0], 0.0)
    tau_R = np.where(u_norm(g, u) > params.R, 0.0, tau_R)
    record(0.0)
    for w in range(nw):
        act = np.nonzero(status == OK)[0]
        if act.size == 0:
            break
        r_, q_, u_, reason, level, incs, ctxs = stepper.advance(rho[act], q[act], u[act], path_ids[act], w)
        ok = reason == OK
        ia = act[ok]
        rho[ia], q[ia], u[ia] = r_[ok], q_[ok], u_[ok]
        last_level[act] = level
        for k, v in incs.items():
            cum.setdefault(k, np.zeros(P))[act] += np.where(ok, v, 0.0)
        for mon in monitors:
            for c in ctxs.get(0, []):
                mon.substep(c)
        t_end = (w + 1) * h
        status[act[~ok]] = reason[~ok]
        exit_time[act[~ok]] = w * h
        nrm = u_norm(g, u[act])
        tau_R[act] = np.where(np.isnan(tau_R[act]) & (nrm > params.R) & ok, t_end, tau_R[act])
        rexit = ok & (nrm > params.R + 1.0)
        status[act[rexit]] = R_EXIT
        exit_time[act[rexit]] = t_end
        if on_window is not None:
            on_window(w, t_end)
        if (w + 1) % record_every == 0 or w == nw - 1:
            record(t_end)

    cols = {k: np.stack([r[k] for r in rows]) for k in rows[0]}
    final = FluidState(g, initial.m, rho, q, u, nw * h if np.all(status == OK) else np.nan,
                       bool(np.all(status == OK)))
    return DiagnosticTrace(np.array(times), cols, status, exit_time, tau_R, path_ids, final,
                           np.stack(lev_rows), {"mode": mode, "h": h, "n_windows": nw})


def _tracker_keys(tracker, g, params, rho, q, u, noise):
    d = g.d
    u_vals = g.inverse(u[:1])
    rho_vals = g.inverse(rho[:1])
    K = noise.K_modes if (noise is not None and noise.K_modes > 0) else 0
    dB = np.zeros((1, K)) if K else None
    nh = np.zeros_like(u[:1]) if K else None
    ctx = SubstepContext(g, rho[:1], rho_vals, u[:1], u_vals, q[:1], np.ones(1), 0.0, dB, np.zeros_like(u[:1]),
                         nh, rho[:1], q[:1], 0.0)
    return list(tracker.increments(ctx))


def run_path(initial: FluidState, params: RegularizationParams, noise: NoiseModel | None, path_id: int, T: float,
             record_every: int = 1, mode: str = "frozen", track=(), monitors=(), checkpoint=None,
             include_viscous: bool = True) -> DiagnosticTrace:
    """One trajectory; writes a checkpoint of the final state when ``checkpoint`` is a path."""
    tr = integrate(initial, params, noise, [path_id], T, record_every, mode, track, monitors, include_viscous)
    if checkpoint is not None and tr.status[0] == OK:
        fin = tr.final.select(0)
        write_checkpoint(checkpoint, FluidState(fin.grid, fin.m, fin.rho_hat, fin.q_hat, fin.u_hat, T), params)
    tr.meta["failure"] = REASONS[int(tr.status[0])]
    return tr
