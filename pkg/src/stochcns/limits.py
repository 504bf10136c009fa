"""Parameter continuation through the four vanishing stages and empirical Cauchy checks.

Stage 1 sends eps to 0; stage 2 sends kappa to 0 with K = kappa^(-3/4);
stage 3 sends n up with delta = n^(-alpha), eta = n^(-beta) and r0 tied to
both; stage 4 sends r1 and r2 to 0.  Once a stage is done its parameters
sit at their limits (0, or infinity for n and K) for every later stage.

delta and eta are kept as natural logarithms: n^(-77) underflows to 0 in
double precision for moderate n, and the schedule records where that
happens rather than hiding it.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import ConfigurationError, StochCNSError
from .montecarlo import EnsembleConfig, moment_report, simulate_ensemble
from .noise import NoiseModel
from .state import FluidState, RegularizationParams

ALPHA_MIN = 76.0
BETA_MIN = 2400.0 / 947.0
STAGE_PARAMS = {1: ("eps",), 2: ("kappa", "K"), 3: ("n_mv", "delta", "eta", "r0"), 4: ("r1", "r2")}
STAGE_LIMITS = {"eps": 0.0, "kappa": 0.0, "K": math.inf, "n_mv": math.inf, "delta": 0.0, "eta": 0.0,
                "r0": 0.0, "r1": 0.0, "r2": 0.0}
DIAGNOSTICS = ("energy", "bd_entropy", "mv", "vacuum_fraction", "state_distance")


def r0_exponent(alpha: float, beta: float) -> float:
    """Default stage-3 exponent ``1 + (7/4)((13/10) alpha + (3/2) beta) + beta/2``."""
    return 1.0 + 1.75 * (1.3 * alpha + 1.5 * beta) + 0.5 * beta


@dataclass(frozen=True)
class RunTuple:
    stage: int
    index: int
    params: RegularizationParams
    log_params: dict = field(default_factory=dict)
    underflow: tuple = ()

    @property
    def label(self) -> str:
        return f"s{self.stage}_{self.index:03d}"


@dataclass(frozen=True)
class LimitSchedule:
    stages: tuple
    tuples: tuple
    mode: str = "illustrative"
    alpha: float | None = None
    beta: float | None = None

    def runs(self):
        return list(self.tuples)

    def to_dict(self) -> dict:
        out = {"mode": self.mode, "stages": list(self.stages), "alpha": self.alpha, "beta": self.beta, "runs": []}
        for t in self.tuples:
            p = t.params
            out["runs"].append({"label": t.label, "stage": t.stage, "index": t.index,
                                "params": {k: _plain(getattr(p, k)) for k in
                                           ("eps", "kappa", "K", "n_mv", "delta", "eta", "r0", "r1", "r2")},
                                "log_params": {k: float(v) for k, v in t.log_params.items()},
                                "underflow": list(t.underflow)})
        return out


def _plain(v):
    v = float(v)
    return "inf" if math.isinf(v) else v


def _strict(seq, name, increasing=False):
    seq = [float(x) for x in seq]
    if not seq:
        raise ConfigurationError(f"schedule sequence {name} is empty")
    for a, b in zip(seq, seq[1:]):
        if (b <= a) if increasing else (b >= a):
            raise ConfigurationError(f"schedule sequence {name} must be strictly {'increasing' if increasing else 'decreasing'}")
    return seq


def build_schedule(config: dict, base: RegularizationParams | None = None) -> LimitSchedule:
    """Explicit parameter tuples for every run of every stage.

    ``config`` keys: ``mode`` (``faithful`` or ``illustrative``), ``alpha``,
    ``beta``, optional ``r0_exponent`` override and ``stages``: a list of
    blocks ``{stage: 1, eps: [...]}``, ``{stage: 2, kappa: [...]}``,
    ``{stage: 3, n: [...]}``, ``{stage: 4, r1: [...], r2: [...]}``.
    Stages must appear in increasing order without gaps; a schedule may
    start at a later stage only if the parameters of every earlier stage are
    already at their limits in ``base``.
    """
    base = base or RegularizationParams()
    mode = config.get("mode", "illustrative")
    if mode not in ("faithful", "illustrative"):
        raise ConfigurationError(f"schedule.mode must be faithful or illustrative, got {mode!r}")
    blocks = list(config.get("stages", []))
    if not blocks:
        raise ConfigurationError("schedule.stages is empty")
    nums = [int(b.get("stage", 0)) for b in blocks]
    for a, b in zip(nums, nums[1:]):
        if b != a + 1:
            raise ConfigurationError(f"stages must be consecutive and increasing, got {nums}")
    if nums[0] not in STAGE_PARAMS or nums[-1] not in STAGE_PARAMS:
        raise ConfigurationError(f"stage numbers must lie in 1..4, got {nums}")
    for s in range(1, nums[0]):
        for name in STAGE_PARAMS[s]:
            if name in ("K", "n_mv"):
                continue
            if getattr(base, name) != 0.0:
                raise ConfigurationError(
                    f"schedule starts at stage {nums[0]} but {name}={getattr(base, name)} "
                    f"has not been sent to its limit by stage {s}")

    alpha = config.get("alpha")
    beta = config.get("beta")
    if 3 in nums:
        if alpha is None or beta is None:
            raise ConfigurationError("stage 3 needs alpha and beta")
        alpha, beta = float(alpha), float(beta)
        if mode == "faithful":
            if not alpha > ALPHA_MIN:
                raise ConfigurationError(f"alpha must exceed {ALPHA_MIN} (strict), got {alpha}")
            if not beta > BETA_MIN:
                raise ConfigurationError(f"beta must exceed 2400/947 = {BETA_MIN:.6f} (strict), got {beta}")
        elif alpha <= 0 or beta <= 0:
            raise ConfigurationError("alpha and beta must be positive")
    e0 = config.get("r0_exponent")

    cur = base
    tuples = []
    for blk in blocks:
        s = int(blk["stage"])
        if s == 1:
            seq = _strict(blk["eps"], "eps")
            for i, e in enumerate(seq):
                tuples.append(RunTuple(1, i, cur.replace(eps=e)))
        elif s == 2:
            seq = _strict(blk["kappa"], "kappa")
            for i, k in enumerate(seq):
                if k <= 0:
                    raise ConfigurationError("stage-2 kappa values must be positive")
                tuples.append(RunTuple(2, i, cur.replace(kappa=k, K=k ** -0.75),
                                       {"log_K": -0.75 * math.log(k)}))
        elif s == 3:
            seq = _strict(blk["n"], "n", increasing=True)
            ex = r0_exponent(alpha, beta) if e0 is None else float(e0)
            for i, n in enumerate(seq):
                if n < 1:
                    raise ConfigurationError("stage-3 n values must be >= 1")
                ln = math.log(n)
                logs = {"log_delta": -alpha * ln, "log_eta": -beta * ln, "log_r0": -ex * ln}
                vals = {k[4:]: math.exp(v) for k, v in logs.items()}
                under = tuple(k for k, v in vals.items() if v == 0.0 or v < np.finfo(float).tiny)
                tuples.append(RunTuple(3, i, cur.replace(n_mv=float(n), **vals), logs, under))
        elif s == 4:
            r1 = blk.get("r1")
            r2 = blk.get("r2")
            if r1 is None and r2 is None:
                raise ConfigurationError("stage 4 needs r1 and/or r2 sequences")
            n_runs = len(r1 if r1 is not None else r2)
            r1 = _strict(r1, "r1") if r1 is not None else [cur.r1] * n_runs
            r2 = _strict(r2, "r2") if r2 is not None else [cur.r2] * n_runs
            if len(r1) != len(r2):
                raise ConfigurationError("stage-4 r1 and r2 sequences differ in length")
            for i, (a, b) in enumerate(zip(r1, r2)):
                tuples.append(RunTuple(4, i, cur.replace(r1=a, r2=b)))
        cur = cur.replace(**{k: STAGE_LIMITS[k] for k in STAGE_PARAMS[s]})
    return LimitSchedule(tuple(nums), tuple(tuples), mode, alpha, beta)


# ---------------------------------------------------------------- sweep


class SweepInterrupted(StochCNSError):
    """Raised when ``stop_after`` cuts a sweep short; finished tuples stay on disk."""


@dataclass
class ConvergenceReport:
    """Per-stage diagnostic tables, successive differences and Cauchy verdicts."""

    mode: str
    stages: dict
    labels: list

    def verdicts(self) -> dict:
        return {s: {k: v["verdict"] for k, v in blk["cauchy"].items()} for s, blk in self.stages.items()}

    def to_dict(self) -> dict:
        return _clean({"mode": self.mode, "runs": self.labels, "stages": self.stages})


def _clean(v):
    if isinstance(v, dict):
        return {str(k): _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else str(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def _summarize(trace):
    good = ~trace.failed
    fin = trace.final
    g = fin.grid
    out = {"n_failed": int(np.sum(~good))}
    for k in ("energy", "bd_entropy", "mv", "vacuum_fraction"):
        col = trace.columns[k][-1]
        out[k] = float(np.nanmean(col[good])) if good.any() else float("nan")
    rho = g.inverse(fin.rho_hat)
    u = g.inverse(fin.u_hat)
    return out, rho, u


def _distance(g, a_rho, a_u, b_rho, b_u):
    dr = np.sqrt(g.mean((a_rho - b_rho) ** 2))
    du = np.sqrt(g.mean((a_u - b_u) ** 2, rank=1))
    return float(np.mean(dr + du))


def _cauchy(values, factor):
    vals = np.asarray(values, dtype=float)
    diffs = np.abs(np.diff(vals)) if vals.size > 1 else np.zeros(0)
    return _verdict(diffs, factor)


def _verdict(diffs, factor):
    diffs = np.asarray(diffs, dtype=float)
    if diffs.size < 2:
        return {"differences": diffs.tolist(), "ratios": [], "verdict": "insufficient"}
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = diffs[:-1] / diffs[1:]
    if np.all(diffs == 0):
        verdict = "constant"
    elif np.all(ratios >= factor):
        verdict = "cauchy"
    elif np.all(ratios >= 1.0):
        verdict = "decreasing"
    else:
        verdict = "not_cauchy"
    return {"differences": diffs.tolist(), "ratios": ratios.tolist(), "verdict": verdict}


def _save_run(path, summary, rho, u, status):
    np.savez(path, rho=rho, u=u, status=status, **{k: np.array(v) for k, v in summary.items()})


def _load_run(path):
    with np.load(path) as z:
        summary = {k: (int(z[k]) if k == "n_failed" else float(z[k])) for k in
                   ("n_failed", "energy", "bd_entropy", "mv", "vacuum_fraction")}
        return summary, z["rho"], z["u"]


def sweep(initial: FluidState, noise: NoiseModel | None, schedule: LimitSchedule, cfg: EnsembleConfig,
          out_dir=None, factor: float = 1.5, stop_after: int | None = None, **kw) -> ConvergenceReport:
    """Run every tuple with common random numbers and assemble the convergence report.

    With ``out_dir`` a manifest (``manifest.yaml``) and one ``<label>.npz``
    per finished tuple are kept there; a rerun skips finished tuples, so an
    interrupted sweep resumes to the identical report.  ``stop_after``
    interrupts after that many newly computed tuples (for testing resume).
    """
    g = initial.grid
    results = []
    manifest = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        manifest = {"mode": schedule.mode, "seed_root": int(cfg.seed_root), "n_paths": int(cfg.n_paths),
                    "T": float(cfg.T), "runs": []}
    computed = 0
    for t in schedule.tuples:
        path = os.path.join(out_dir, f"{t.label}.npz") if out_dir is not None else None
        if path is not None and os.path.exists(path):
            summary, rho, u = _load_run(path)
        else:
            if stop_after is not None and computed >= stop_after:
                _write_manifest(out_dir, manifest, schedule, results)
                raise SweepInterrupted(f"sweep stopped after {computed} new runs")
            tr = simulate_ensemble(initial, t.params, noise, cfg, **kw)
            summary, rho, u = _summarize(tr)
            computed += 1
            if path is not None:
                rep = moment_report(tr, cfg.orders, n_boot=cfg.n_boot, boot_seed=cfg.boot_seed)
                write_yaml(os.path.join(out_dir, f"{t.label}.report.yaml"), rep.to_dict())
                _save_run(path, summary, rho, u, tr.status)
        results.append((t, summary, rho, u))
    if out_dir is not None:
        _write_manifest(out_dir, manifest, schedule, results)
    stages = {}
    for s in schedule.stages:
        rows = [(t, sm, r, u) for (t, sm, r, u) in results if t.stage == s]
        table = {k: [sm[k] for _, sm, _, _ in rows] for k in ("energy", "bd_entropy", "mv", "vacuum_fraction")}
        table["n_failed"] = [sm["n_failed"] for _, sm, _, _ in rows]
        dist = [_distance(g, rows[i][2], rows[i][3], rows[i + 1][2], rows[i + 1][3]) for i in range(len(rows) - 1)]
        cauchy = {k: _cauchy(table[k], factor) for k in ("energy", "bd_entropy", "mv", "vacuum_fraction")}
        cauchy["state_distance"] = _verdict(dist, factor)
        stages[s] = {"labels": [t.label for t, *_ in rows], "table": table, "state_distance": dist,
                     "cauchy": cauchy, "underflow": {t.label: list(t.underflow) for t, *_ in rows if t.underflow}}
    return ConvergenceReport(schedule.mode, stages, [t.label for t, *_ in results])


def write_yaml(path, data):
    with open(path, "w") as fh:
        yaml.safe_dump(_clean(data), fh, sort_keys=False)


def _write_manifest(out_dir, manifest, schedule, results):
    done = {t.label for t, *_ in results}
    sched = schedule.to_dict()
    manifest = dict(manifest)
    manifest["runs"] = [{**r, "seed_root": manifest["seed_root"], "output": f"{r['label']}.npz",
                        "done": r["label"] in done} for r in sched["runs"]]
    write_yaml(os.path.join(out_dir, "manifest.yaml"), manifest)
