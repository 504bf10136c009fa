"""Command-line entry point: ``stochcns {simulate,ensemble,sweep,verify,inspect}``.

Exit codes: 0 success, 1 validation error, 2 runtime rejection, 3 verification
failure.  Errors are also printed to stderr as a one-line YAML mapping
``{error: <kind>, message: ...}`` and written to ``<out>/error.yaml``.
"""
from __future__ import annotations

import argparse
import os
import sys

import numpy as np
import yaml

from . import config as cfgmod
from .errors import ConfigurationError, StochCNSError
from .limits import build_schedule, sweep, write_yaml
from .montecarlo import run_ensemble
from .scheme import REASONS, run_path
from .state import read_checkpoint_header, write_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


def _out(cfg) -> str:
    d = cfg["out"]
    os.makedirs(d, exist_ok=True)
    return d


def _write_config(cfg, out):
    with open(os.path.join(out, "effective_config.yaml"), "w") as fh:
        fh.write(cfgmod.effective_config(cfg))


def _final_row(trace, i=0):
    return {k: float(v[-1, i]) for k, v in trace.columns.items()}


def cmd_simulate(cfg, threads=1) -> int:
    out = _out(cfg)
    _write_config(cfg, out)
    grid, params, noise, init, _ = cfgmod.build_all(cfg)
    r = cfg["run"]
    write_checkpoint(os.path.join(out, "checkpoint_initial.bin"), init, params)
    tr = run_path(init, params, noise, int(r["path_id"]), float(r["T"]), int(r["record_every"]), r["mode"],
                  tuple(r["track"]), checkpoint=os.path.join(out, "checkpoint_final.bin"),
                  include_viscous=bool(r["include_viscous"]))
    tr.to_csv(os.path.join(out, "trace.csv"))
    status = int(tr.status[0])
    summary = {"status": REASONS[status] or "ok", "path_id": int(r["path_id"]), "T": float(r["T"]),
               "exit_time": float(tr.exit_time[0]), "tau_R": float(tr.tau_R[0]),
               "max_refinement_level": int(np.max(tr.levels)) if tr.levels is not None else 0,
               "params_sha256": params.digest().hex(), "final": _final_row(tr)}
    write_yaml(os.path.join(out, "summary.yaml"), summary)
    print(f"simulate: status={summary['status']} records={tr.times.size} out={out}")
    if tr.failed[0]:
        _error(out, "runtime", f"path stopped: {summary['status']} at t={summary['exit_time']}")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_ensemble(cfg, threads=1) -> int:
    out = _out(cfg)
    _write_config(cfg, out)
    grid, params, noise, init, ens = cfgmod.build_all(cfg, workers=threads)
    archive = out if cfg["ensemble"]["archive"] else None
    report, tr = run_ensemble(init, params, noise, ens, archive_dir=archive,
                              include_viscous=bool(cfg["run"]["include_viscous"]))
    write_yaml(os.path.join(out, "report.yaml"), report.to_dict())
    print(f"ensemble: {report.n_paths} paths, {report.n_failed} failed, out={out}")
    if report.unreliable:
        _error(out, "runtime", f"{report.n_failed} of {report.n_paths} paths failed; estimates unreliable")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_sweep(cfg, threads=1) -> int:
    out = _out(cfg)
    _write_config(cfg, out)
    grid, params, noise, init, ens = cfgmod.build_all(cfg, workers=threads)
    s = cfg["schedule"]
    if not s["stages"]:
        raise ConfigurationError("schedule.stages is empty; nothing to sweep")
    sched = build_schedule(s, params)
    rep = sweep(init, noise, sched, ens, out_dir=os.path.join(out, "runs"), factor=float(s["factor"]),
                include_viscous=bool(cfg["run"]["include_viscous"]))
    write_yaml(os.path.join(out, "convergence.yaml"), rep.to_dict())
    for st, v in rep.verdicts().items():
        print(f"stage {st}: " + ", ".join(f"{k}={x}" for k, x in v.items()))
    return EXIT_OK


def cmd_verify(cfg, only=(), tol_scale=None) -> int:
    from .verify import CHECKS, format_table, run_checks
    only = list(only) or list(cfg["verify"]["only"])
    bad = [n for n in only if n not in CHECKS]
    if bad:
        raise ConfigurationError(f"unknown verify checks {bad}; available: {list(CHECKS)}")
    scale = float(cfg["verify"]["tol_scale"] if tol_scale is None else tol_scale)
    if scale < 0:
        raise ConfigurationError("--tol-scale must be >= 0")
    res = run_checks(only, scale)
    print(format_table(res))
    failed = [r.name for r in res if not r.passed]
    if failed:
        print("failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def cmd_inspect(path) -> int:
    meta = read_checkpoint_header(path)
    print(yaml.safe_dump(meta, sort_keys=False), end="")
    return EXIT_OK


def _error(out, kind, message):
    rec = {"error": kind, "message": str(message)}
    print(yaml.safe_dump(rec, default_flow_style=True).strip(), file=sys.stderr)
    if out is not None:
        try:
            os.makedirs(out, exist_ok=True)
            write_yaml(os.path.join(out, "error.yaml"), rec)
        except OSError:
            pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stochcns", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "ensemble", "sweep", "verify"):
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="YAML run configuration (an empty file means all defaults)")
        s.add_argument("--seed", type=int, help="override seed_root")
        s.add_argument("--out", help="output directory")
        s.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
        s.add_argument("--preset", help="built-in preset applied under the config")
        if name == "verify":
            s.add_argument("--only", action="append", default=[], help="run only these checks (repeat or comma-separate)")
            s.add_argument("--tol-scale", type=float, help="multiply every tolerance")
    s = sub.add_parser("inspect")
    s.add_argument("checkpoint", help="checkpoint file")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "inspect":
        try:
            return cmd_inspect(args.checkpoint)
        except (ConfigurationError, OSError) as exc:
            _error(None, "validation", exc)
            return EXIT_CONFIG
    out = None
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise ConfigurationError("--seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
        cfg = cfgmod.load_config(args.config, preset=args.preset, seed=args.seed, out=args.out)
        out = cfg["out"]
    except ConfigurationError as exc:
        _error(args.out, "validation", exc)
        return EXIT_CONFIG
    try:
        if args.command == "simulate":
            return cmd_simulate(cfg, args.threads)
        if args.command == "ensemble":
            return cmd_ensemble(cfg, args.threads)
        if args.command == "sweep":
            return cmd_sweep(cfg, args.threads)
        only = [x for o in args.only for x in o.split(",") if x]
        return cmd_verify(cfg, only, args.tol_scale)
    except ConfigurationError as exc:
        _error(out, "validation", exc)
        return EXIT_CONFIG
    except StochCNSError as exc:
        _error(out, "runtime", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
