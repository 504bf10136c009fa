"""Truncated cylindrical Wiener process and the multiplicative coefficient families.

Mode ``k`` (1-based) carries a spatial shape from H_m (constant, cosine or
sine of a wave vector, all with sup norm 1), a direction e_c and a bound
f_k.  The built-in families are

* ``constant``:            F_k = f_k shape_k e_c
* ``density-saturating``:  F_k = (f_k/2) shape_k rho/(1+rho) e_c
* ``velocity-saturating``: F_k = (f_k/2) shape_k tanh(u_c) e_c

The factor 1/2 on the saturating families makes
|F_k| + |d_rho F_k| + |d_u F_k| <= f_k hold for the sum, not just each part.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError
from .spectral import TorusGrid, wave_vectors

FAMILIES = ("constant", "density-saturating", "velocity-saturating", "table")


@dataclass(frozen=True)
class ModeShape:
    k: tuple
    kind: str  # "const", "cos" or "sin"
    component: int

    def values(self, grid: TorusGrid):
        if self.kind == "const":
            return np.ones(grid.shape)
        x = grid.points()
        phase = 2 * np.pi * sum(kk * x[i] for i, kk in enumerate(self.k))
        return np.cos(phase) if self.kind == "cos" else np.sin(phase)

    @property
    def norm2(self) -> float:
        """``integral of shape^2`` over the unit torus."""
        return 1.0 if self.kind == "const" else 0.5


def enumerate_shapes(d: int, m: int, count: int):
    """First ``count`` shapes: wave vectors by sup norm, cos before sin, components cycled."""
    out = []
    for wv in wave_vectors(d, m):
        kinds = ("const",) if wv.sup == 0 else ("cos", "sin")
        for kind in kinds:
            for c in range(d):
                out.append(ModeShape(wv.k, kind, c))
                if len(out) == count:
                    return out
    if len(out) < count:
        raise ConfigurationError(f"only {len(out)} noise shapes fit in H_m with m={m}, asked for {count}")
    return out


@dataclass(frozen=True, eq=False)
class NoiseModel:
    grid: TorusGrid
    m: int
    f: np.ndarray
    shapes: tuple
    family: str = "constant"
    seed_root: int = 0
    budget: float = np.inf
    tail_bound: float = 0.0
    scale: np.ndarray | None = None
    amplitudes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"noise.family must be one of {FAMILIES}, got {self.family!r}")
        f = np.asarray(self.f, dtype=np.float64)
        if f.ndim != 1 or f.size != len(self.shapes):
            raise ConfigurationError("noise bound sequence and shapes differ in length")
        if np.any(f < 0) or not np.all(np.isfinite(f)):
            raise ConfigurationError("noise bounds f_k must be finite and >= 0")
        if float(np.sum(f ** 2)) > self.budget * (1 + 1e-12):
            raise ConfigurationError(
                f"sum of f_k^2 = {float(np.sum(f ** 2)):.6g} exceeds budget {self.budget}"
            )
        if not (0 <= int(self.seed_root) < 2 ** 64):
            raise ConfigurationError("noise.seed_root must fit in 64 bits")
        for s in self.shapes:
            if max((abs(k) for k in s.k), default=0) > self.m:
                raise ConfigurationError(f"noise shape {s} lies outside H_m")
        object.__setattr__(self, "f", f)
        g = self.grid
        amp = np.zeros((len(self.shapes), g.d) + g.shape)
        for i, s in enumerate(self.shapes):
            amp[i, s.component] = self.family_scale[i] * f[i] * s.values(g)
        object.__setattr__(self, "amplitudes", amp)

    @property
    def K_modes(self) -> int:
        return len(self.shapes)

    @property
    def family_scale(self) -> np.ndarray:
        if self.scale is not None:
            return np.asarray(self.scale, dtype=np.float64)
        s = 1.0 if self.family in ("constant", "table") else 0.5
        return np.full(len(self.shapes), s)

    @property
    def components(self) -> np.ndarray:
        return np.array([s.component for s in self.shapes], dtype=np.int64)

    def with_seed(self, seed_root: int) -> "NoiseModel":
        return NoiseModel(self.grid, self.m, self.f, self.shapes, self.family, seed_root,
                          self.budget, self.tail_bound, self.scale)

    def replace(self, **kw) -> "NoiseModel":
        args = dict(grid=self.grid, m=self.m, f=self.f, shapes=self.shapes, family=self.family,
                    seed_root=self.seed_root, budget=self.budget, tail_bound=self.tail_bound,
                    scale=self.scale)
        args.update(kw)
        return NoiseModel(**args)


def make_noise(grid: TorusGrid, m: int, K_modes: int = 4, f1: float = 1.0, decay: float = 1.0,
               family: str = "constant", seed_root: int = 0, budget: float = np.inf,
               scale=None) -> NoiseModel:
    """Noise with ``f_k = f1 k^{-decay}``; the infinite tail of the sequence is recorded."""
    if K_modes < 0:
        raise ConfigurationError("noise.K_modes must be >= 0")
    if decay <= 0.5 and K_modes > 0:
        raise ConfigurationError(f"noise.decay must exceed 1/2 for a square-summable sequence, got {decay}")
    k = np.arange(1, K_modes + 1, dtype=np.float64)
    f = f1 * k ** (-decay)
    return NoiseModel(grid, m, f, tuple(enumerate_shapes(grid.d, m, K_modes)), family, int(seed_root),
                      budget, tail_bound=_tail(f1, decay, K_modes), scale=scale)


def _tail(f1, decay, K):
    """``sum_{k>K} f1^2 k^{-2 decay}`` by Euler-Maclaurin on the remaining terms."""
    p = 2.0 * decay
    if f1 == 0:
        return 0.0
    head = sum((K + j) ** -p for j in range(1, 101))
    a = K + 100.5
    return float(f1 ** 2 * (head + a ** (1 - p) / (p - 1)))


def noise_from_table(grid: TorusGrid, m: int, rows, seed_root: int = 0, budget: float = np.inf,
                     family: str = "table") -> NoiseModel:
    """Custom constant-in-state noise from rows ``{k: [...], kind, component, f}``."""
    shapes, f = [], []
    for r in rows:
        k = tuple(int(x) for x in r.get("k", [0] * grid.d))
        if len(k) != grid.d:
            raise ConfigurationError(f"noise table row {r} has wrong dimension")
        kind = r.get("kind", "const" if not any(k) else "cos")
        if kind not in ("const", "cos", "sin"):
            raise ConfigurationError(f"noise table kind must be const, cos or sin, got {kind!r}")
        shapes.append(ModeShape(k, kind, int(r.get("component", 0))))
        f.append(float(r["f"]))
    return NoiseModel(grid, m, np.array(f), tuple(shapes), family, int(seed_root), budget, 0.0)


def sample_increment(model: NoiseModel, path_id, step: int, dt: float, level: int = 0):
    """Brownian increments ``Delta B_k`` for base step ``step``.

    With ``level = 0`` the result has shape ``(*path_shape, K)``.  For
    ``level > 0`` the base increment is refined by Brownian bridges into
    ``2**level`` sub-increments of length ``dt / 2**level`` that sum to it
    exactly; the shape is then ``(*path_shape, 2**level, K)``.  Every value
    is a pure function of ``(seed_root, path, step, level, index, k)``.
    """
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    path = np.asarray(path_id, dtype=np.uint64)
    K = model.K_modes
    modes = np.arange(K, dtype=np.uint64)
    seed = model.seed_root
    z = kernels.normals(seed, path[..., None], step, 0, 0, modes)
    inc = np.sqrt(dt) * z
    if level == 0:
        return inc
    inc = inc[..., None, :]
    for lev in range(1, level + 1):
        n_prev = inc.shape[-2]
        h_prev = dt / n_prev
        idx = np.arange(n_prev, dtype=np.uint64)
        zz = kernels.normals(seed, path[..., None, None], step, lev, idx[:, None], modes)
        half = 0.5 * inc
        dev = 0.5 * np.sqrt(h_prev) * zz
        inc = np.stack([half + dev, half - dev], axis=-2).reshape(inc.shape[:-2] + (2 * n_prev, K))
    return inc


def _state_factor(model: NoiseModel, rho_vals, u_vals):
    """Pointwise factor multiplying the amplitude of each direction, shape ``(*batch, d, *grid)``."""
    d = model.grid.d
    if model.family in ("constant", "table"):
        return None
    if model.family == "density-saturating":
        r = np.maximum(rho_vals, 0.0)
        return np.expand_dims(r / (1.0 + r), -(d + 1))
    return np.tanh(u_vals)


def coefficients(model: NoiseModel, rho_vals, u_vals):
    """Per-mode coefficient fields ``F_k``, shape ``(*batch, K, d, *grid)``."""
    d = model.grid.d
    amp = model.amplitudes
    fac = _state_factor(model, rho_vals, u_vals)
    batch = rho_vals.shape[: rho_vals.ndim - d]
    if fac is None:
        return np.broadcast_to(amp, batch + amp.shape)
    return amp * np.expand_dims(fac, -(d + 2))


def evaluate_noise(model: NoiseModel, rho_vals, u_vals):
    """``G_k = rho F_k`` on the grid, shape ``(*batch, K, d, *grid)``; zero wherever rho = 0."""
    d = model.grid.d
    F = coefficients(model, rho_vals, u_vals)
    return F * _mode_bcast(np.maximum(rho_vals, 0.0), d)


def combined_noise(model: NoiseModel, rho_vals, u_vals, dB):
    """``sum_k G_k dB_k`` on the grid without forming every mode separately."""
    d = model.grid.d
    lin = np.tensordot(dB, model.amplitudes, axes=([-1], [0]))
    fac = _state_factor(model, rho_vals, u_vals)
    if fac is not None:
        lin = lin * fac
    r = np.maximum(rho_vals, 0.0)
    return lin * np.expand_dims(r, -(d + 1))


def noise_energy_density(model: NoiseModel, rho_vals, u_vals):
    """``(1/2) rho sum_k |F_k|^2`` pointwise."""
    d = model.grid.d
    F = coefficients(model, rho_vals, u_vals)
    s = np.sum(F * F, axis=(-(d + 2), -(d + 1)))
    return 0.5 * np.maximum(rho_vals, 0.0) * s


def lipschitz_certificate(model: NoiseModel, states, h: float = 1e-6) -> dict:
    """Finite-difference scan of ``|F_k|``, ``|d_rho F_k|`` and ``|d_u F_k|`` against ``f_k``.

    ``states`` is an iterable of ``(rho_vals, u_vals)`` collocation arrays.
    The sup norms are taken over the grid and the sampled states; the
    velocity derivative is the operator norm over unit directions, which for
    these diagonal families is the largest entry.
    """
    K, d = model.K_modes, model.grid.d
    sup_F = np.zeros(K)
    sup_drho = np.zeros(K)
    sup_du = np.zeros(K)
    pointwise_ok = True
    for rho_vals, u_vals in states:
        rho_vals = np.asarray(rho_vals, dtype=float)
        u_vals = np.asarray(u_vals, dtype=float)
        F = coefficients(model, rho_vals, u_vals)
        sup_F = np.maximum(sup_F, _sup(F, d))
        lo = np.maximum(rho_vals - h, 0.0)
        dr = (coefficients(model, rho_vals + h, u_vals) - coefficients(model, lo, u_vals)) \
            / _mode_bcast(rho_vals + h - lo, d)
        sup_drho = np.maximum(sup_drho, _sup(dr, d))
        du_max = np.zeros(K)
        for c in range(d):
            e = np.zeros((d,) + (1,) * d)
            e[c] = h
            dF = (coefficients(model, rho_vals, u_vals + e) - coefficients(model, rho_vals, u_vals - e)) / (2 * h)
            du_max = np.maximum(du_max, _sup(dF, d))
        sup_du = np.maximum(sup_du, du_max)
        G = evaluate_noise(model, rho_vals, u_vals)
        gnorm = np.sqrt(np.sum(G * G, axis=-(d + 1)))
        rho_e = np.expand_dims(rho_vals, -(d + 1))
        bound = np.abs(rho_vals) + np.sqrt(np.sum((rho_e * u_vals) ** 2, axis=-(d + 1)))
        f_e = model.f.reshape((K,) + (1,) * d)
        pointwise_ok &= bool(np.all(gnorm <= f_e * np.expand_dims(bound, -(d + 1)) * (1 + 1e-12) + 1e-300))
    f_safe = np.where(model.f > 0, model.f, np.inf)
    ratio_F = sup_F / f_safe
    ratio_rho = sup_drho / f_safe
    ratio_u = sup_du / f_safe
    ratio_sum = (sup_F + sup_drho + sup_du) / f_safe
    return {
        "sup_F": sup_F, "sup_drho": sup_drho, "sup_du": sup_du,
        "ratio_F": ratio_F, "ratio_rho": ratio_rho, "ratio_u": ratio_u, "ratio_sum": ratio_sum,
        "max_ratio": float(np.max(ratio_sum, initial=0.0)),
        "pointwise_certificate": pointwise_ok,
        "passed": bool(np.all(ratio_sum <= 1.0 + 1e-6)) and pointwise_ok,
    }


def _mode_bcast(a, d):
    """Insert mode and component axes in front of the grid axes of a scalar field."""
    return np.expand_dims(a, (a.ndim - d, a.ndim - d + 1))


def _sup(a, d):
    """Max of ``|a|`` over everything except the mode axis (axis ``-(d+2)``)."""
    a = np.abs(np.moveaxis(a, -(d + 2), 0))
    return a.reshape(a.shape[0], -1).max(axis=1)


def export_increments(model: NoiseModel, path_id: int, n_steps: int, dt: float):
    """Tabular realization ``(step, t, dB_1..dB_K)`` for cross-implementation replay."""
    rows = np.empty((n_steps, 2 + model.K_modes))
    for n in range(n_steps):
        rows[n, 0] = n
        rows[n, 1] = n * dt
        rows[n, 2:] = sample_increment(model, path_id, n, dt)
    return rows
