"""Fluid state, scheme constants, velocity recovery through M[rho] and checkpoints.

The density is stored by its full grid spectrum; momentum and velocity
live in the Galerkin space H_m.  ``M[rho] z = Pi_m(rho z)`` is applied with
one grid product and one projection, and inverted by preconditioned
conjugate gradients.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigurationError, SingularOperatorError, SolverError
from .spectral import SpectralField, TorusGrid, get_grid


@dataclass(frozen=True)
class RegularizationParams:
    """Every constant of the regularized Galerkin scheme."""

    a: float = 1.0
    gamma: float = 2.0
    eps: float = 0.0
    kappa: float = 0.0
    delta: float = 0.0
    eta: float = 0.0
    r0: float = 0.0
    r1: float = 0.0
    r2: float = 0.0
    m: int = 8
    R: float = 1.0e6
    n_mv: float = 1.0e3
    K: float = math.inf
    h: float = 1.0e-3
    dt: float = 1.0e-3
    rho_floor: float = 1.0e-8
    c_stab: float = 0.5
    gram_tol: float = 1.0e-10
    chi_mode: str = "printed"
    max_retries: int = 8

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("a", "gamma", "eps", "kappa", "delta", "eta", "r0", "r1", "r2"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigurationError(f"params.{name} must be finite and >= 0, got {v!r}")
        if self.gamma <= 1.0:
            raise ConfigurationError(f"params.gamma must be > 1, got {self.gamma}")
        if int(self.m) != self.m or self.m < 1:
            raise ConfigurationError(f"params.m must be a positive integer, got {self.m!r}")
        for name in ("R", "n_mv", "K", "h", "dt", "rho_floor", "c_stab", "gram_tol"):
            v = getattr(self, name)
            if not (isinstance(v, (int, float)) and v > 0 and not math.isnan(v)):
                raise ConfigurationError(f"params.{name} must be > 0, got {v!r}")
        if not math.isfinite(self.dt) or not math.isfinite(self.h):
            raise ConfigurationError("params.dt and params.h must be finite")
        if self.dt > self.h * (1 + 1e-12):
            raise ConfigurationError(f"params.dt={self.dt} exceeds window length h={self.h}")
        if self.chi_mode not in ("printed", "uniform", "off"):
            raise ConfigurationError(f"params.chi_mode must be printed, uniform or off, got {self.chi_mode!r}")
        if int(self.max_retries) != self.max_retries or self.max_retries < 0:
            raise ConfigurationError("params.max_retries must be a non-negative integer")

    def replace(self, **changes) -> "RegularizationParams":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON encoding, used in checkpoint headers."""
        d = {k: (repr(float(v)) if isinstance(v, float) else v) for k, v in self.to_dict().items()}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).digest()


@dataclass(frozen=True, eq=False)
class FluidState:
    """Snapshot of (rho, q, u, t), optionally batched over leading axes.

    ``rho_hat`` has shape ``(*batch, *coeff_shape)``; ``q_hat`` and ``u_hat``
    have shape ``(*batch, d, *coeff_shape)`` and lie in H_m.
    """

    grid: TorusGrid
    m: int
    rho_hat: np.ndarray
    q_hat: np.ndarray
    u_hat: np.ndarray
    t: float = 0.0
    valid: bool = True

    @property
    def rho(self) -> SpectralField:
        return SpectralField(self.grid, self.rho_hat, 0)

    @property
    def q(self) -> SpectralField:
        return SpectralField(self.grid, self.q_hat, 1)

    @property
    def u(self) -> SpectralField:
        return SpectralField(self.grid, self.u_hat, 1)

    @cached_property
    def rho_values(self) -> np.ndarray:
        return self.grid.inverse(self.rho_hat)

    @cached_property
    def u_values(self) -> np.ndarray:
        return self.grid.inverse(self.u_hat)

    @property
    def batch_shape(self):
        return self.rho_hat.shape[: self.rho_hat.ndim - self.grid.d]

    def mass(self):
        return np.real(self.rho_hat[(...,) + (0,) * self.grid.d])

    def select(self, idx) -> "FluidState":
        return FluidState(self.grid, self.m, self.rho_hat[idx], self.q_hat[idx], self.u_hat[idx], self.t, self.valid)

    def broadcast(self, n: int) -> "FluidState":
        """Replicate an unbatched state into a batch of ``n`` copies."""
        rep = lambda a: np.repeat(a[None], n, axis=0)
        return FluidState(self.grid, self.m, rep(self.rho_hat), rep(self.q_hat), rep(self.u_hat), self.t, self.valid)


def _expand(rho_vals, d):
    return np.expand_dims(rho_vals, -(d + 1))


def gram_apply(grid: TorusGrid, rho_vals, z_hat, m: int):
    """``M[rho] z = Pi_m(rho z)`` for velocity-like coefficients ``z_hat``."""
    return grid.project(grid.forward(_expand(rho_vals, grid.d) * grid.inverse(z_hat)), m)


def gram_solve(grid: TorusGrid, rho_vals, q_hat, m: int, tol: float = 1e-10, maxiter: int | None = None,
               x0=None):
    """Solve ``Pi_m(rho u) = q`` for ``u`` in H_m with preconditioned CG.

    Each (batch, component) system is iterated independently and frozen as
    soon as its own residual reaches ``tol``, so results do not depend on
    what else is in the batch.  Returns ``(u_hat, iterations, residual)``.
    """
    d = grid.d
    if np.min(rho_vals) <= 0.0 or not np.all(np.isfinite(rho_vals)):
        raise SingularOperatorError(
            f"M[rho] is singular: min rho = {float(np.min(rho_vals)):.3e} is not positive"
        )
    if maxiter is None:
        maxiter = 10 * (2 * m + 1) ** d
    mask = grid.band_mask(m)
    q_hat = q_hat * mask
    rho_e = _expand(rho_vals, d)
    inv_rho = 1.0 / rho_e

    def A(z):
        return grid.project(grid.forward(rho_e * grid.inverse(z)), m)

    def P(r):
        return grid.project(grid.forward(inv_rho * grid.inverse(r)), m)

    def dot(a, b):
        return _expand_d(grid.inner(a, b, 0), d)

    def resnorm(r):
        return np.max(np.abs(r), axis=tuple(range(-d, 0)))

    x = P(q_hat) if x0 is None else x0 * mask
    r = q_hat - A(x)
    res = resnorm(r)
    it = 0
    for _ in range(4):
        active = res > tol
        if not active.any():
            return x, it, float(np.max(res, initial=0.0))
        z = P(r)
        p = z
        rz = dot(r, z)
        while it < maxiter:
            it += 1
            Ap = A(p)
            pAp = dot(p, Ap)
            alpha = np.where(_expand_d(active, d), rz / np.where(pAp > 0, pAp, 1.0), 0.0)
            x = x + alpha * p
            r = r - alpha * Ap
            active = active & (resnorm(r) > tol)
            if not active.any():
                break
            z = P(r)
            rz_new = dot(r, z)
            beta = np.where(_expand_d(active, d), rz_new / np.where(rz != 0, rz, 1.0), 0.0)
            p = z + beta * p
            rz = rz_new
        # the recursive residual drifts; restart from the true one
        r = q_hat - A(x)
        res = resnorm(r)
        if it >= maxiter:
            break
    if (res > tol).any():
        raise SolverError(
            f"Gram solve did not converge in {it} iterations; residual {float(res.max()):.3e}",
            residual=float(res.max()), iterations=it,
        )
    return x, it, float(np.max(res, initial=0.0))


def _expand_d(a, d):
    return a.reshape(a.shape + (1,) * d)


def velocity_from_momentum(rho: SpectralField, q: SpectralField, m: int, tol: float = 1e-10) -> SpectralField:
    """Apply ``M[rho]^{-1}``: the velocity in H_m whose mass-weighted moments match ``q``."""
    if rho.grid != q.grid:
        raise ConfigurationError("rho and q live on different grids")
    rho.grid.check_cutoff(m)
    u_hat, _, _ = gram_solve(rho.grid, rho.values, q.coeffs, m, tol)
    return SpectralField(rho.grid, u_hat, 1)


def momentum_from_velocity(rho: SpectralField, u: SpectralField, m: int) -> SpectralField:
    """``M[rho] u = Pi_m(rho u)`` with the product evaluated on the grid."""
    if rho.grid != u.grid:
        raise ConfigurationError("rho and u live on different grids")
    rho.grid.check_cutoff(m)
    return SpectralField(rho.grid, gram_apply(rho.grid, rho.values, u.coeffs, m), 1)


def positivity_report(rho, threshold: float = 1e-8) -> dict:
    """Exact minimum over collocation points and the fraction of points below ``threshold``."""
    vals = rho.values if isinstance(rho, SpectralField) else np.asarray(rho)
    grid_axes = tuple(range(-rho.grid.d, 0)) if isinstance(rho, SpectralField) else None
    return {
        "min_value": np.min(vals, axis=grid_axes),
        "vacuum_fraction": np.mean(vals < threshold, axis=grid_axes),
    }


def maximum_principle_bounds(rho0, times, divu_sup) -> dict:
    """Two-sided bounds ``inf rho0 e^{-int |div u|_inf}`` and ``sup rho0 e^{+int |div u|_inf}``.

    ``times`` and ``divu_sup`` sample the history of ``|div u(t)|_inf``; the
    time integral is the cumulative trapezoid rule.
    """
    vals = rho0.values if isinstance(rho0, SpectralField) else np.asarray(rho0)
    times = np.asarray(times, dtype=np.float64)
    g = np.abs(np.asarray(divu_sup, dtype=np.float64))
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (g[1:] + g[:-1]) * np.diff(times))])
    return {
        "times": times,
        "lower": float(np.min(vals)) * np.exp(-integral),
        "upper": float(np.max(vals)) * np.exp(integral),
    }


def make_state(grid: TorusGrid, m: int, rho_hat, q_hat, t: float = 0.0, tol: float = 1e-10) -> FluidState:
    """Assemble a state from density and momentum coefficients, recovering ``u``."""
    u_hat, _, _ = gram_solve(grid, grid.inverse(rho_hat), q_hat, m, tol)
    return FluidState(grid, m, rho_hat, grid.project(q_hat, m), u_hat, t)


def prepare_initial(rho_raw, u_raw, params: RegularizationParams, grid: TorusGrid | None = None,
                    mass_bounds: tuple[float, float] | None = None) -> FluidState:
    """Project raw data to H_m, clip the density at ``rho_floor`` keeping total mass, build q.

    ``rho_raw`` and ``u_raw`` are SpectralFields or collocation arrays
    (then ``grid`` is required).
    """
    if isinstance(rho_raw, SpectralField):
        grid = rho_raw.grid
        rho_vals = rho_raw.values
    else:
        if grid is None:
            raise ConfigurationError("grid is required when raw arrays are given")
        rho_vals = np.asarray(rho_raw, dtype=np.float64)
    u_vals = u_raw.values if isinstance(u_raw, SpectralField) else np.asarray(u_raw, dtype=np.float64)
    m = int(params.m)
    grid.check_cutoff(m)
    if rho_vals.shape[rho_vals.ndim - grid.d:] != grid.shape:
        raise ConfigurationError(f"density shape {rho_vals.shape} does not match grid {grid.shape}")
    if u_vals.shape[u_vals.ndim - grid.d - 1:] != (grid.d,) + grid.shape:
        raise ConfigurationError(f"velocity shape {u_vals.shape} does not match grid")

    rho_hat = grid.project(grid.forward(rho_vals), m)
    mass = np.real(rho_hat[(...,) + (0,) * grid.d])
    if np.any(~np.isfinite(mass)) or np.any(mass <= 0):
        raise ConfigurationError(f"total mass must be positive and finite, got {mass}")
    if mass_bounds is not None:
        lo, hi = mass_bounds
        if np.any(mass < lo) or np.any(mass > hi):
            raise ConfigurationError(f"total mass {mass} outside configured bounds [{lo}, {hi}]")
    vals = grid.inverse(rho_hat)
    if np.min(vals) < params.rho_floor:
        clipped = np.maximum(vals, params.rho_floor)
        scale = mass / grid.mean(clipped)
        clipped = clipped * _expand_d(np.asarray(scale), grid.d)
        rho_hat = grid.forward(clipped)
        vals = grid.inverse(rho_hat)
    u_hat = grid.project(grid.forward(u_vals), m)
    q_hat = gram_apply(grid, vals, u_hat, m)
    return FluidState(grid, m, rho_hat, q_hat, u_hat, 0.0)


def initial_fields(grid: TorusGrid, preset: str = "constant", rho_mean: float = 1.0,
                   amplitude: float = 0.0, mode: int = 1, velocity: float = 0.0,
                   n_modes: int = 3, seed: int = 0):
    """Raw collocation values for the built-in presets.

    ``constant``: uniform density, uniform velocity ``velocity`` along e_1.
    ``single_mode``: ``rho_mean (1 + amplitude sin(2 pi mode x_1))`` with
    ``u_1 = velocity sin(2 pi mode x_1)``.
    ``random_smooth``: a random trigonometric polynomial of sup-degree
    ``n_modes`` for the density (shifted to keep it positive) and each velocity
    component, scaled by ``amplitude`` and ``velocity``.
    """
    x = grid.points()
    d = grid.d
    u = np.zeros((d,) + grid.shape)
    if preset == "constant":
        rho = np.full(grid.shape, float(rho_mean))
        u[0] = velocity
    elif preset == "single_mode":
        s = np.sin(2 * np.pi * mode * x[0])
        rho = rho_mean * (1.0 + amplitude * s)
        u[0] = velocity * s
    elif preset == "random_smooth":
        rng = np.random.default_rng(seed)
        base = _random_trig(grid, n_modes, rng)
        rho = rho_mean * (1.0 + amplitude * base / max(np.max(np.abs(base)), 1e-300))
        for c in range(d):
            b = _random_trig(grid, n_modes, rng)
            u[c] = velocity * b / max(np.max(np.abs(b)), 1e-300)
    else:
        raise ConfigurationError(f"unknown initial preset {preset!r}")
    return rho, u


def _random_trig(grid, n_modes, rng):
    coef = np.zeros(grid.coeff_shape, dtype=complex)
    mask = (grid.kinf <= n_modes) & (grid.kinf > 0)
    cnt = int(mask.sum())
    coef[mask] = (rng.standard_normal(cnt) + 1j * rng.standard_normal(cnt)) / (1.0 + grid.k2[mask])
    return grid.inverse(coef)


CHECKPOINT_MAGIC = b"STOCHCNS"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<8sIIIId32s")


def write_checkpoint(path, state: FluidState, params: RegularizationParams):
    """Write an unbatched state.

    Layout (little endian): 8-byte magic ``STOCHCNS``; uint32 version, d, N,
    m; float64 t; 32-byte SHA-256 of the parameters; then the density
    coefficients and the ``d`` momentum components, each as complex128 in
    C order over the rfft coefficient shape ``(N,)*(d-1) + (N//2+1,)``.
    """
    if state.batch_shape != ():
        raise ConfigurationError("checkpoints hold a single path; select one first")
    g = state.grid
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, g.d, g.N, state.m, float(state.t), params.digest())
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(state.rho_hat, dtype="<c16").tobytes())
        fh.write(np.ascontiguousarray(state.q_hat, dtype="<c16").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise ConfigurationError(f"{path}: truncated checkpoint header")
    magic, version, d, N, m, t, digest = _HEADER.unpack(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file")
    return {"version": version, "d": d, "N": N, "m": m, "t": t, "params_hash": digest.hex(),
            "header_bytes": _HEADER.size}


def read_checkpoint(path, tol: float = 1e-10) -> tuple[FluidState, dict]:
    meta = read_checkpoint_header(path)
    if meta["version"] != CHECKPOINT_VERSION:
        raise ConfigurationError(f"unsupported checkpoint version {meta['version']}")
    grid = get_grid(meta["d"], meta["N"])
    n = int(np.prod(grid.coeff_shape))
    data = np.fromfile(path, dtype="<c16", offset=_HEADER.size)
    if data.size != n * (1 + grid.d):
        raise ConfigurationError(f"{path}: payload size {data.size} does not match header")
    rho_hat = data[:n].reshape(grid.coeff_shape).astype(complex)
    q_hat = data[n:].reshape((grid.d,) + grid.coeff_shape).astype(complex)
    return make_state(grid, meta["m"], rho_hat, q_hat, meta["t"], tol), meta
