"""Ensembles, moment estimates and Monte Carlo checks of stochastic calculus identities.

Paths are the unit of work.  An ensemble is cut into fixed-size blocks of
consecutive path ids; blocks may run on several threads but each block is a
pure function of ``(config, seed_root, block)`` and blocks are reduced in
order, so every statistic is independent of the worker count.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError
from .noise import NoiseModel, sample_increment
from .scheme import OK, DiagnosticTrace, integrate, momentum_step
from .state import FluidState, RegularizationParams

MOMENT_FUNCTIONALS = ("energy", "bd_entropy", "mv", "kinetic")


@dataclass(frozen=True)
class EnsembleConfig:
    n_paths: int = 64
    seed_root: int = 0
    orders: tuple = (2.5, 3.0, 4.0)
    T: float = 0.1
    record_every: int = 1
    workers: int = 1
    block_size: int = 64
    mode: str = "frozen"
    track: tuple = ()
    n_boot: int = 1000
    boot_seed: int = 12345
    first_path: int = 0

    def __post_init__(self):
        if self.n_paths < 1:
            raise ConfigurationError("ensemble.n_paths must be >= 1")
        if self.workers < 1:
            raise ConfigurationError("ensemble.workers must be >= 1")
        if self.block_size < 1:
            raise ConfigurationError("ensemble.block_size must be >= 1")
        for r in self.orders:
            if not r > 2:
                raise ConfigurationError(f"moment orders must exceed 2, got {r}")


# ---------------------------------------------------------------- bootstrap


def bootstrap_ci(samples, stat=np.mean, n_resamples: int = 1000, level: float = 0.95, seed: int = 0,
                 axis: int = 0):
    """Percentile bootstrap interval of ``stat`` along ``axis``; returns ``(estimate, low, high)``."""
    x = np.asarray(samples, dtype=np.float64)
    x = np.moveaxis(x, axis, 0)
    n = x.shape[0]
    est = stat(x, axis=0)
    if n < 2:
        return est, est, est
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_resamples, n))
    reps = np.stack([stat(x[i], axis=0) for i in idx])
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(reps, [a, 1.0 - a], axis=0)
    return est, lo, hi


def mean_se(x, axis=0):
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[axis]
    return np.mean(x, axis=axis), np.std(x, axis=axis, ddof=1) / math.sqrt(n) if n > 1 else np.inf


# ---------------------------------------------------------------- ensembles


@dataclass
class MomentReport:
    """``E[sup_t X(t)^r]`` per functional and order, with bootstrap intervals and the constants ``C_hat``."""

    n_paths: int
    n_failed: int
    unreliable: bool
    moments: dict
    c_hat: dict
    initial_moments: dict
    cadence: float
    status_counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, dict):
                return {str(k): clean(x) for k, x in v.items()}
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            if isinstance(v, np.ndarray):
                return v.tolist()
            return v
        return clean({"n_paths": self.n_paths, "n_failed": self.n_failed, "unreliable": self.unreliable,
                      "cadence": self.cadence, "moments": self.moments, "c_hat": self.c_hat,
                      "initial_moments": self.initial_moments, "status_counts": self.status_counts})


def _blocks(cfg: EnsembleConfig):
    ids = np.arange(cfg.first_path, cfg.first_path + cfg.n_paths, dtype=np.uint64)
    return [ids[i:i + cfg.block_size] for i in range(0, ids.size, cfg.block_size)]


def _merge(traces) -> DiagnosticTrace:
    first = traces[0]
    cols = {k: np.concatenate([t.columns[k] for t in traces], axis=1) for k in first.columns}
    cat = lambda name: np.concatenate([getattr(t, name) for t in traces])
    fin = None
    if all(t.final is not None for t in traces):
        f0 = first.final
        fin = FluidState(f0.grid, f0.m, np.concatenate([t.final.rho_hat for t in traces]),
                         np.concatenate([t.final.q_hat for t in traces]),
                         np.concatenate([t.final.u_hat for t in traces]), f0.t)
    lev = np.concatenate([t.levels for t in traces], axis=1) if first.levels is not None else None
    return DiagnosticTrace(first.times, cols, cat("status"), cat("exit_time"), cat("tau_R"), cat("path_ids"),
                           fin, lev, dict(first.meta))


def simulate_ensemble(initial: FluidState, params: RegularizationParams, noise: NoiseModel | None,
                      cfg: EnsembleConfig, **kw) -> DiagnosticTrace:
    """Run every path of the ensemble and merge the traces in path order."""
    if noise is not None:
        noise = noise.with_seed(cfg.seed_root)
    blocks = _blocks(cfg)

    def job(ids):
        return integrate(initial, params, noise, ids, cfg.T, cfg.record_every, cfg.mode, cfg.track, **kw)

    if cfg.workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
            traces = list(ex.map(job, blocks))
    else:
        traces = [job(b) for b in blocks]
    return _merge(traces)


def moment_report(trace: DiagnosticTrace, orders=(2.5, 3.0, 4.0), functionals=MOMENT_FUNCTIONALS,
                  n_boot: int = 1000, boot_seed: int = 0) -> MomentReport:
    """Moment estimates from a merged trace; failed paths are excluded and counted."""
    good = ~trace.failed
    n_failed = int(np.sum(~good))
    moments, c_hat, init = {}, {}, {}
    for name in functionals:
        if name not in trace.columns:
            continue
        X = trace.columns[name][:, good]
        sup = np.nanmax(np.abs(X), axis=0) if X.size else np.zeros(0)
        x0 = np.abs(X[0]) if X.size else np.zeros(0)
        moments[name], c_hat[name], init[name] = {}, {}, {}
        for r in orders:
            if sup.size == 0:
                continue
            s = sup ** r
            est, lo, hi = bootstrap_ci(s, n_resamples=n_boot, seed=boot_seed)
            m0 = float(np.mean(x0 ** r))

            def ratio(v, axis=0, m0=m0, x0r=x0 ** r):
                return np.mean(v, axis=axis) / (m0 + 1.0)

            c, clo, chi = bootstrap_ci(s, stat=ratio, n_resamples=n_boot, seed=boot_seed)
            moments[name][r] = {"estimate": float(est), "ci": [float(lo), float(hi)]}
            c_hat[name][r] = {"estimate": float(c), "ci": [float(clo), float(chi)]}
            init[name][r] = m0
    counts = {}
    for s in trace.status_names:
        counts[s] = counts.get(s, 0) + 1
    cad = float(trace.times[1] - trace.times[0]) if trace.times.size > 1 else 0.0
    return MomentReport(trace.n_paths, n_failed, n_failed > 0.1 * trace.n_paths, moments, c_hat, init, cad, counts)


def run_ensemble(initial: FluidState, params: RegularizationParams, noise: NoiseModel | None,
                 cfg: EnsembleConfig, archive_dir=None, **kw):
    """Ensemble run returning ``(MomentReport, merged trace)``.

    With ``archive_dir`` each path's table is written to
    ``archive_dir/paths/path_<id>.csv``.
    """
    trace = simulate_ensemble(initial, params, noise, cfg, **kw)
    report = moment_report(trace, cfg.orders, n_boot=cfg.n_boot, boot_seed=cfg.boot_seed)
    if archive_dir is not None:
        d = os.path.join(archive_dir, "paths")
        os.makedirs(d, exist_ok=True)
        for i, pid in enumerate(trace.path_ids):
            trace.to_csv(os.path.join(d, f"path_{int(pid):06d}.csv"), i)
    return report, trace


def cadence_sensitivity(trace: DiagnosticTrace, name: str = "energy", r: float = 3.0) -> dict:
    """``E[sup X^r]`` from every record versus every second record."""
    X = np.abs(trace.columns[name][:, ~trace.failed])
    full = float(np.mean(np.max(X, axis=0) ** r))
    coarse = float(np.mean(np.max(X[::2], axis=0) ** r))
    return {"full": full, "half_cadence": coarse, "relative_change": abs(full - coarse) / max(abs(full), 1e-300)}


# ---------------------------------------------------------------- Brownian motion


def brownian_increments(n_paths: int, n_steps: int, T: float, seed: int = 0, dims: int = 1, first_path: int = 0):
    """Counter-based increments ``(n_paths, n_steps, dims)`` of standard Brownian motion on ``[0, T]``."""
    dt = T / n_steps
    paths = np.arange(first_path, first_path + n_paths, dtype=np.uint64)
    steps = np.arange(n_steps, dtype=np.uint64)
    modes = np.arange(dims, dtype=np.uint64)
    z = kernels.normals(seed, paths[:, None, None], steps[None, :, None], 0, 0, modes[None, None, :])
    return math.sqrt(dt) * z


def brownian_paths(n_paths: int, n_steps: int, T: float, seed: int = 0, dims: int = 1, first_path: int = 0):
    """Paths ``(n_paths, n_steps + 1, dims)`` starting at zero."""
    inc = brownian_increments(n_paths, n_steps, T, seed, dims, first_path)
    out = np.zeros((n_paths, n_steps + 1, dims))
    np.cumsum(inc, axis=1, out=out[:, 1:])
    return out


def stochastic_integral(H, dW):
    """Ito sums ``M_n = sum_{j<n} H_j dW_j`` for integrands ``(n_paths, n_steps)``, starting at zero."""
    H = np.asarray(H, dtype=np.float64)
    dW = np.asarray(dW, dtype=np.float64)
    return np.concatenate([np.zeros(dW.shape[:-1] + (1,)), np.cumsum(H * dW, axis=-1)], axis=-1)


# ---------------------------------------------------------------- BDG


def bdg_constants(m_order: float) -> dict:
    """Bracket constants for ``E[(M*)^{2m}] / E[<M>^m]``.

    ``upper`` is the Doob-Ito constant ``(2m/(2m-1))^{2m} (m(2m-1))^m`` (4 at
    m = 1); ``lower`` is 1 at m = 1 (from ``E[(M*)^2] >= E[M_T^2]``) and not
    available otherwise.  ``printed_upper`` is ``(2m/(2m-1))^{m(2m-2)}``.
    """
    m = float(m_order)
    if m < 1:
        raise ConfigurationError("BDG brackets are provided for m >= 1")
    p = 2 * m
    upper = (p / (p - 1)) ** p * (m * (p - 1)) ** m
    lower = 1.0 if m == 1 else None
    printed = (p / (p - 1)) ** (p * (p - 2) / 2)
    return {"lower": lower, "upper": upper, "printed_upper": printed}


def bdg_ratio(M, qv, m_order: float = 1.0, n_boot: int = 1000, seed: int = 0, level: float = 0.95) -> dict:
    """Empirical ``E[(M*_T)^{2m}] / E[<M>_T^m]`` with a bootstrap interval and the bracket verdict.

    ``M`` holds discretized martingale paths ``(n_paths, n_times)`` and ``qv``
    the terminal quadratic variation per path.  The lower bracket check is
    strict, as for Brownian motion where the ratio exceeds 1.
    """
    M = np.asarray(M, dtype=np.float64)
    qv = np.broadcast_to(np.asarray(qv, dtype=np.float64), M.shape[:1])
    num = np.max(np.abs(M), axis=1) ** (2 * m_order)
    den = qv ** m_order
    const = bdg_constants(m_order)
    if float(np.mean(den)) == 0.0:
        return {"ratio": float("nan"), "ci": [float("nan")] * 2, "degenerate": True, "within": None, **const}
    x = np.stack([num, den], axis=1)
    ratio = lambda v, axis=0: np.mean(v[..., 0], axis=axis) / np.mean(v[..., 1], axis=axis)
    est, lo, hi = bootstrap_ci(x, stat=ratio, n_resamples=n_boot, seed=seed, level=level)
    ok_hi = lo <= const["upper"]
    ok_lo = True if const["lower"] is None else hi > const["lower"]
    return {"ratio": float(est), "ci": [float(lo), float(hi)], "degenerate": False,
            "within": bool(ok_hi and ok_lo), **const}


# ---------------------------------------------------------------- Holder regularity


def holder_exponent(paths, times, alpha: float = 2.0, lags=None, min_samples: int = 100) -> dict:
    """Scaling exponent of ``E|X_{t+l} - X_t|^alpha`` in the lag ``l``.

    The log-log regression slope ``s`` over dyadic lags gives
    ``exponent = s / alpha`` (1/2 for Brownian motion, 1 for Lipschitz
    paths) and the Kolmogorov-admissible Holder bound ``(s - 1)/alpha``.
    """
    X = np.asarray(paths, dtype=np.float64)
    if X.ndim == 1:
        X = X[None]
    X = X.reshape(X.shape[0], X.shape[1], -1)
    times = np.asarray(times, dtype=np.float64)
    n = times.size
    if lags is None:
        lags = [2 ** j for j in range(int(math.log2(max(n - 1, 1))) - 1)] or [1]
    dt = times[1] - times[0]
    rows = []
    for l in lags:
        if l >= n:
            continue
        diff = X[:, l:] - X[:, :-l]
        norm = np.sqrt(np.sum(diff * diff, axis=-1))
        rows.append((l * dt, float(np.mean(norm ** alpha)), norm.size))
    if len(rows) < 2:
        return {"exponent": float("nan"), "kolmogorov_beta": float("nan"), "flag": "too few lags"}
    lag = np.array([r[0] for r in rows])
    mom = np.array([r[1] for r in rows])
    flag = "" if min(r[2] for r in rows) >= min_samples else "few samples"
    if np.any(mom <= 0):
        return {"exponent": float("inf"), "kolmogorov_beta": float("inf"), "flag": "constant path",
                "lags": lag.tolist(), "moments": mom.tolist()}
    slope, icpt = np.polyfit(np.log(lag), np.log(mom), 1)
    return {"exponent": float(slope / alpha), "slope": float(slope), "kolmogorov_beta": float((slope - 1) / alpha),
            "lags": lag.tolist(), "moments": mom.tolist(), "flag": flag}


# ---------------------------------------------------------------- Ito product rule


def ito_product_check(X, Y, bracket="realized") -> dict:
    """Residual of ``XY = X0 Y0 + int X dY + int Y dX + <X,Y>`` on sampled paths.

    ``X`` and ``Y`` are ``(n_paths, n_times)``.  With ``bracket="realized"``
    the covariation is the sum of increment products, which makes the
    identity exact up to rounding; a number or array supplies the
    theoretical covariation instead, and the residual is then the
    discretization error of the bracket.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    dX = np.diff(X, axis=1)
    dY = np.diff(Y, axis=1)
    ixdy = np.sum(X[:, :-1] * dY, axis=1)
    iydx = np.sum(Y[:, :-1] * dX, axis=1)
    br = np.sum(dX * dY, axis=1) if isinstance(bracket, str) else np.broadcast_to(bracket, X.shape[:1])
    res = X[:, -1] * Y[:, -1] - X[:, 0] * Y[:, 0] - ixdy - iydx - br
    mean, se = mean_se(res) if res.size > 1 else (float(res[0]), np.inf)
    return {"residual": res, "mean": float(mean), "se": float(se),
            "within_3se": bool(abs(mean) <= 3 * se) if np.isfinite(se) else bool(abs(mean) < 1e-12),
            "max_abs": float(np.max(np.abs(res)))}


# ---------------------------------------------------------------- Euler-Maruyama order


def _fit_order(dts, errs):
    dts, errs = np.asarray(dts), np.asarray(errs)
    if np.any(errs <= 0):
        return float("inf")
    return float(np.polyfit(np.log(dts), np.log(errs), 1)[0])


def em_order_scalar(drift, diffusion, x0: float, T: float, levels=(4, 5, 6, 7), n_paths: int = 1000,
                    seed: int = 0, exact=None) -> dict:
    """Strong and weak EM orders for a scalar SDE with coupled Brownian increments.

    ``exact(W_T_path_increments_fine, T)`` may supply the true terminal value;
    otherwise the finest level is the reference.  Returns per-level errors
    and the fitted orders.
    """
    Lf = max(levels) + (0 if exact is not None else 2)
    nf = 2 ** Lf
    dWf = brownian_increments(n_paths, nf, T, seed)[..., 0]

    def em(L):
        n = 2 ** L
        dW = dWf.reshape(n_paths, n, nf // n).sum(axis=2)
        h = T / n
        x = np.full(n_paths, float(x0))
        for j in range(n):
            x = x + drift(x) * h + diffusion(x) * dW[:, j]
        return x

    ref = exact(dWf, T) if exact is not None else em(Lf)
    dts, strong, weak = [], [], []
    for L in levels:
        xL = em(L)
        dts.append(T / 2 ** L)
        strong.append(float(np.mean(np.abs(xL - ref))))
        weak.append(abs(float(np.mean(xL) - np.mean(ref))))
    return {"dts": dts, "strong_errors": strong, "weak_errors": weak,
            "strong_order": _fit_order(dts, strong), "weak_order": _fit_order(dts, weak)}


def em_order_momentum(state: FluidState, params: RegularizationParams, noise: NoiseModel, T: float,
                      n_base: int = 4, levels=(0, 1, 2, 3), ref_level: int | None = None, n_paths: int = 1000,
                      block_size: int = 250) -> dict:
    """Strong order of the frozen-density momentum substep with multiplicative noise.

    The base step is ``T / n_base``; level ``L`` uses ``2^L`` substeps per
    base step, all driven by the same Brownian tree (finer levels refine
    coarser increments by bridges), so the runs are coupled pathwise.  The
    error is the mean H_m distance of the terminal velocity to the finest
    (reference) level.
    """
    g = state.grid
    Lr = (max(levels) + 2) if ref_level is None else ref_level
    dt0 = T / n_base
    errs = np.zeros(len(levels))
    for b0 in range(0, n_paths, block_size):
        ids = np.arange(b0, min(n_paths, b0 + block_size), dtype=np.uint64)
        st = state.broadcast(ids.size)
        finals = {}
        for L in tuple(levels) + (Lr,):
            s = st
            h = dt0 / 2 ** L
            for n in range(n_base):
                fine = sample_increment(noise, ids, n, dt0, Lr)  # (P, 2^Lr, K)
                grp = fine.reshape(ids.size, 2 ** L, 2 ** (Lr - L), -1).sum(axis=2)
                for i in range(2 ** L):
                    s = momentum_step(s, params, noise, grp[:, i], h).state
            finals[L] = s.u_hat
        ref = finals[Lr]
        for j, L in enumerate(levels):
            diff = finals[L] - ref
            errs[j] += float(np.sum(np.sqrt(g.inner(diff, diff, 1))))
    errs /= n_paths
    dts = [dt0 / 2 ** L for L in levels]
    return {"dts": dts, "strong_errors": errs.tolist(), "strong_order": _fit_order(dts, errs)}


def em_order_estimate(problem: str = "multiplicative", **kw) -> dict:
    """Strong/weak order on a reduced test problem.

    ``additive``: ``dX = -X dt + dW`` (EM is exact in the diffusion, strong
    order about 1); ``multiplicative``: geometric Brownian motion
    ``dX = 0.5 X dt + X dW`` against its exact solution (strong 1/2, weak 1);
    ``deterministic``: ``dX = -X dt`` (order 1).
    """
    T = kw.pop("T", 1.0)
    if problem == "additive":
        return em_order_scalar(lambda x: -x, lambda x: np.ones_like(x), 1.0, T, **kw)
    if problem == "multiplicative":
        mu, sig = 0.5, 1.0

        def exact(dWf, T):
            return np.exp((mu - 0.5 * sig ** 2) * T + sig * dWf.sum(axis=1))
        return em_order_scalar(lambda x: mu * x, lambda x: sig * x, 1.0, T, exact=exact, **kw)
    if problem == "deterministic":
        return em_order_scalar(lambda x: -x, lambda x: np.zeros_like(x), 1.0, T,
                               exact=lambda dWf, T: np.full(dWf.shape[0], math.exp(-T)), **kw)
    raise ConfigurationError(f"unknown test problem {problem!r}")


# ---------------------------------------------------------------- linear noise oracle


def frozen_linear_noise(state: FluidState, params: RegularizationParams, noise: NoiseModel, T: float,
                        n_steps: int, n_paths: int, block_size: int = 2000) -> dict:
    """Kinetic energy growth with density frozen: Monte Carlo versus the Ito-correction closed form.

    Closed form ``1/2 int rho|u_0|^2 + 1/2 t sum_k f_k^2 |shape_k|^2`` (valid
    when the drift vanishes on the reachable states, e.g. rho = 1 and
    spatially constant noise shapes).
    """
    g = state.grid
    dt = T / n_steps
    samples = np.zeros((n_steps + 1, n_paths))
    for b0 in range(0, n_paths, block_size):
        ids = np.arange(b0, min(n_paths, b0 + block_size), dtype=np.uint64)
        s = state.broadcast(ids.size)
        samples[0, b0:b0 + ids.size] = 0.5 * g.inner(s.q_hat, s.u_hat, 1)
        for n in range(n_steps):
            dB = sample_increment(noise, ids, n, dt)
            s = momentum_step(s, params, noise, dB, dt).state
            samples[n + 1, b0:b0 + ids.size] = 0.5 * g.inner(s.q_hat, s.u_hat, 1)
    t = np.arange(n_steps + 1) * dt
    norm = np.array([sh.norm2 for sh in noise.shapes]) * noise.family_scale ** 2
    rho_mean = float(np.real(state.rho_hat[(0,) * g.d]))
    closed = 0.5 * g.inner(state.q_hat, state.u_hat, 1) + 0.5 * t * rho_mean * float(np.sum(noise.f ** 2 * norm))
    mean = samples.mean(axis=1)
    se = samples.std(axis=1, ddof=1) / math.sqrt(n_paths)
    diff = np.abs(mean - closed)
    live = se > 1e-12 * np.maximum(np.abs(closed), 1.0)
    z = np.where(live, diff / np.where(live, se, 1.0), np.where(diff <= 1e-12 * np.maximum(np.abs(closed), 1.0),
                                                                   0.0, np.inf))
    return {"t": t, "mean": mean, "se": se, "closed_form": closed, "max_z": float(z.max()),
            "within_3se": bool(np.all(z <= 3.0))}
