import math
import os

import numpy as np
import pytest
import yaml

from stochcns.errors import ConfigurationError
from stochcns.limits import (ALPHA_MIN, BETA_MIN, SweepInterrupted, _verdict, build_schedule, r0_exponent,
                             sweep)
from stochcns.montecarlo import EnsembleConfig, moment_report, simulate_ensemble
from stochcns.noise import make_noise
from stochcns.spectral import get_grid
from stochcns.state import RegularizationParams, initial_fields, prepare_initial


def test_faithful_thresholds_are_strict():
    base = {"mode": "faithful", "stages": [{"stage": 3, "n": [2, 3]}]}
    with pytest.raises(ConfigurationError, match="alpha"):
        build_schedule({**base, "alpha": ALPHA_MIN, "beta": 3.0})
    with pytest.raises(ConfigurationError, match="beta"):
        build_schedule({**base, "alpha": 77, "beta": BETA_MIN})
    s = build_schedule({**base, "alpha": 77, "beta": 3.0})
    assert s.mode == "faithful"
    # illustrative mode accepts small exponents
    build_schedule({**base, "mode": "illustrative", "alpha": 1.0, "beta": 1.0})


def test_stage3_log_parameters():
    s = build_schedule({"mode": "faithful", "alpha": 77, "beta": 3.0, "stages": [{"stage": 3, "n": [2, 3, 4]}]})
    ex = r0_exponent(77, 3.0)
    assert ex == pytest.approx(1 + 1.75 * (1.3 * 77 + 4.5) + 1.5)
    for t, n in zip(s.tuples, (2, 3, 4)):
        assert t.log_params["log_delta"] == pytest.approx(-77 * math.log(n))
        assert t.log_params["log_eta"] == pytest.approx(-3 * math.log(n))
        assert t.log_params["log_r0"] == pytest.approx(-ex * math.log(n))
        assert t.params.n_mv == n
        assert t.params.delta == pytest.approx(n ** -77.0, rel=1e-12)


def test_stage3_underflow_flagged():
    s = build_schedule({"mode": "faithful", "alpha": 77, "beta": 3.0, "stages": [{"stage": 3, "n": [1e5]}]})
    t = s.tuples[0]
    assert "delta" in t.underflow and t.params.delta == 0.0
    assert t.log_params["log_delta"] == pytest.approx(-77 * math.log(1e5))


def test_r0_override():
    s = build_schedule({"alpha": 2, "beta": 1, "r0_exponent": 2.0, "stages": [{"stage": 3, "n": [10]}]})
    assert s.tuples[0].params.r0 == pytest.approx(1e-2)


def test_stage_order_and_limits():
    with pytest.raises(ConfigurationError, match="consecutive"):
        build_schedule({"stages": [{"stage": 1, "eps": [1e-2]}, {"stage": 3, "n": [2]}], "alpha": 1, "beta": 1})
    with pytest.raises(ConfigurationError, match="limit"):
        build_schedule({"stages": [{"stage": 2, "kappa": [1e-2]}]}, RegularizationParams(eps=1e-3))
    with pytest.raises(ConfigurationError, match="decreasing"):
        build_schedule({"stages": [{"stage": 1, "eps": [1e-3, 1e-2]}]})
    with pytest.raises(ConfigurationError, match="empty"):
        build_schedule({"stages": []})
    with pytest.raises(ConfigurationError, match="differ"):
        build_schedule({"stages": [{"stage": 4, "r1": [0.2, 0.1], "r2": [0.1]}]})
    s = build_schedule({"stages": [{"stage": 1, "eps": [1e-2, 1e-3]}, {"stage": 2, "kappa": [1e-2, 1e-3]}]},
                       RegularizationParams(eps=0.5))
    # stage 2 runs with stage 1 already at its limit
    assert [t.params.eps for t in s.tuples] == [1e-2, 1e-3, 0.0, 0.0]
    assert s.tuples[2].params.K == pytest.approx(1e-2 ** -0.75)
    assert [t.label for t in s.tuples] == ["s1_000", "s1_001", "s2_000", "s2_001"]


@pytest.mark.parametrize("diffs,verdict", [([0, 0, 0], "constant"), ([1.0, 0.5, 0.2], "cauchy"),
                                           ([1.0, 0.9, 0.8], "decreasing"), ([1.0, 2.0], "not_cauchy"),
                                           ([1.0], "insufficient")])
def test_verdicts(diffs, verdict):
    assert _verdict(diffs, 1.5)["verdict"] == verdict


def _setup():
    g = get_grid(1, 16)
    p = RegularizationParams(a=0.5, m=4, h=1e-3, dt=1e-3)
    nm = make_noise(g, 4, K_modes=2, f1=0.3)
    s = prepare_initial(*initial_fields(g, "single_mode", amplitude=0.2, velocity=0.3), p, g)
    return s, p, nm, EnsembleConfig(n_paths=3, T=0.005, n_boot=20, seed_root=2)


def test_identical_outputs_give_zero_differences():
    # a resting uniform state without noise does not feel the drag, so every tuple agrees
    s, p, nm, cfg = _setup()
    g = s.grid
    rest = prepare_initial(*initial_fields(g, "constant"), p, g)
    sched = build_schedule({"stages": [{"stage": 4, "r1": [0.3, 0.2, 0.1], "r2": [0.3, 0.2, 0.1]}]}, p)
    rep = sweep(rest, None, sched, cfg)
    st4 = rep.stages[4]
    assert st4["state_distance"] == [0.0, 0.0]
    assert set(rep.verdicts()[4].values()) == {"constant"}


def test_single_tuple_matches_ensemble_report(tmp_path):
    s, p, nm, cfg = _setup()
    sched = build_schedule({"stages": [{"stage": 4, "r2": [0.1]}]}, p)
    rep = sweep(s, nm, sched, cfg, out_dir=tmp_path)
    assert rep.verdicts()[4]["energy"] == "insufficient"
    tr = simulate_ensemble(s, sched.tuples[0].params, nm, cfg)
    ref = moment_report(tr, cfg.orders, n_boot=cfg.n_boot, boot_seed=cfg.boot_seed).to_dict()
    with open(tmp_path / "s4_000.report.yaml") as fh:
        assert yaml.safe_load(fh) == yaml.safe_load(yaml.safe_dump(ref))
    good = ~tr.failed
    assert rep.stages[4]["table"]["energy"][0] == pytest.approx(np.mean(tr.columns["energy"][-1, good]))


def test_resume_gives_identical_report(tmp_path):
    s, p, nm, cfg = _setup()
    sched = build_schedule({"stages": [{"stage": 4, "r1": [0.3, 0.2, 0.1], "r2": [0.3, 0.2, 0.1]}]}, p)
    full = sweep(s, nm, sched, cfg).to_dict()
    with pytest.raises(SweepInterrupted):
        sweep(s, nm, sched, cfg, out_dir=tmp_path, stop_after=2)
    man = yaml.safe_load((tmp_path / "manifest.yaml").read_text())
    assert [r["done"] for r in man["runs"]] == [True, True, False]
    mtime = os.path.getmtime(tmp_path / "s4_000.npz")
    resumed = sweep(s, nm, sched, cfg, out_dir=tmp_path).to_dict()
    assert resumed == full
    assert os.path.getmtime(tmp_path / "s4_000.npz") == mtime
    man = yaml.safe_load((tmp_path / "manifest.yaml").read_text())
    assert all(r["done"] for r in man["runs"])
