import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochcns.errors import ConfigurationError
from stochcns.noise import make_noise, sample_increment
from stochcns.scheme import (chi_R, integrate, momentum_drift, momentum_step, refinement_level, run_path,
                             stability_dt, transport_step, window_step)
from stochcns.spectral import SpectralField, get_grid
from stochcns.state import FluidState, RegularizationParams, initial_fields, prepare_initial, read_checkpoint


def _state(g, p, preset="single_mode", **kw):
    return prepare_initial(*initial_fields(g, preset, **kw), p, g)


@given(st.floats(0.0, 50.0))
def test_chi_R_bands(nrm):
    v = chi_R(nrm, 10.0)
    if nrm <= 10.0:
        assert v == 1.0
    elif nrm >= 11.0:
        assert v == 0.0
    else:
        assert 0.0 < v < 1.0


def test_chi_R_from_field():
    g = get_grid(1, 16)
    u = SpectralField.from_values(g, np.full((1, 16), 3.0), rank=1)
    assert chi_R(u, 2.0) == 0.0
    assert chi_R(u, 3.0) == 1.0
    with pytest.raises(ConfigurationError):
        chi_R(1.0, 0.0)


def test_stability_dt_infinite_without_active_terms():
    g = get_grid(1, 16)
    p = RegularizationParams(a=0.0, m=4)
    assert stability_dt(_state(g, p, "constant"), p) == np.inf
    assert np.isfinite(stability_dt(_state(g, p, "constant"), p, include_viscous=True))


def test_stability_dt_delta_scaling():
    g = get_grid(1, 32)
    s = _state(g, RegularizationParams(m=4), "constant")
    p1 = RegularizationParams(a=0.0, delta=1e-20, m=4)
    p2 = p1.replace(m=8)
    assert stability_dt(s, p1) / stability_dt(s, p2) == pytest.approx(2.0 ** 20, rel=1e-12)


@pytest.mark.parametrize("dt,dt_max,level", [(1e-3, 1e-3, 0), (1e-3, 2e-3, 0), (1e-3, 4.9e-4, 2),
                                             (1e-3, 5e-4, 1), (1e-3, np.inf, 0)])
def test_refinement_level(dt, dt_max, level):
    assert int(refinement_level(dt, dt_max)) == level


def test_transport_heat_kernel():
    g = get_grid(1, 32)
    x = g.points()[0]
    rho = SpectralField.from_values(g, 1 + 0.5 * np.cos(2 * np.pi * 3 * x))
    u = SpectralField(g, np.zeros((1,) + g.coeff_shape, dtype=complex), 1)
    out = transport_step(rho, u, 0.01, 0.2)
    ref = 1 + 0.5 * np.exp(-0.01 * (6 * np.pi) ** 2 * 0.2) * np.cos(6 * np.pi * x)
    np.testing.assert_allclose(out.values, ref, atol=1e-12)


def test_zero_force_momentum_step_is_identity():
    g = get_grid(2, 16)
    p = RegularizationParams(a=2.0, eps=0.0, m=4)
    s = _state(g, p, "constant", rho_mean=1.3)
    out = momentum_step(s, p, None, None, 1e-2)
    assert out.accepted and out.reason == ""
    np.testing.assert_allclose(out.state.q_hat, s.q_hat, atol=1e-14)


def test_constant_noise_momentum_step_is_exact_increment():
    g = get_grid(1, 16)
    p = RegularizationParams(a=1.0, m=4)
    s = _state(g, p, "constant", rho_mean=2.0)
    nm = make_noise(g, 4, K_modes=1, f1=0.5)
    out = momentum_step(s, p, nm, np.array([0.3]), 1e-2)
    # rho * f * dB in the constant mode of the first component
    assert out.state.q_hat[0, 0].real == pytest.approx(2.0 * 0.5 * 0.3, rel=1e-12)
    assert out.state.u_hat[0, 0].real == pytest.approx(0.5 * 0.3, rel=1e-10)


def test_drift_breakdown_of_constant_state_vanishes():
    g = get_grid(1, 16)
    p = RegularizationParams(a=1.0, eps=1e-3, m=4)
    s = _state(g, p, "constant", velocity=0.5)
    D = momentum_drift(s, p)
    assert np.max(np.abs(D.total)) < 1e-12


def test_r_exit():
    g = get_grid(1, 16)
    p = RegularizationParams(a=0.0, R=0.5, m=4, h=1e-3, dt=1e-3)
    s = _state(g, p, "constant", velocity=2.0)
    out = momentum_step(s, p, None, None, 1e-3, chi=1.0)
    assert out.reason == "r_exit"
    tr = integrate(s, p, None, [0], 0.01)
    assert tr.status_names == ["r_exit"]
    assert tr.exit_time[0] == pytest.approx(1e-3)


def test_frozen_mode_warns_when_window_too_long():
    g = get_grid(1, 64)
    p = RegularizationParams(a=0.5, m=8, h=1e-2, dt=1e-3)
    with pytest.warns(RuntimeWarning, match="frozen mode"):
        integrate(_state(g, p, amplitude=0.2), p, None, [0], 0.0)
    q = p.replace(m=2, h=1e-3)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        integrate(_state(get_grid(1, 16), q, amplitude=0.2), q, None, [0], 0.0)


def test_integrate_conserves_mass_and_is_batch_independent():
    g = get_grid(1, 32)
    p = RegularizationParams(a=0.5, eps=1e-3, r2=0.1, m=4, h=1e-3, dt=1e-3)
    nm = make_noise(g, 4, K_modes=2, f1=0.3, family="density-saturating", seed_root=4)
    s = _state(g, p, amplitude=0.2, velocity=0.3)
    batch = integrate(s, p, nm, [0, 1, 2], 0.02, record_every=5)
    alone = integrate(s, p, nm, [1], 0.02, record_every=5)
    # batched FFTs may round differently in the last bit
    for k in ("energy", "mass", "u_norm"):
        np.testing.assert_allclose(batch.columns[k][:, 1], alone.columns[k][:, 0], rtol=1e-13)
    mass = batch.columns["mass"]
    assert np.max(np.abs(mass - mass[0])) < 1e-12
    assert not np.allclose(batch.columns["energy"][-1, 0], batch.columns["energy"][-1, 2])
    with pytest.raises(ConfigurationError, match="multiple"):
        integrate(s, p, nm, [0], 0.0105)


def test_window_step_matches_integrate():
    g = get_grid(1, 16)
    p = RegularizationParams(a=0.5, eps=1e-3, m=4, h=1e-3, dt=5e-4)
    nm = make_noise(g, 4, K_modes=2, f1=0.3, seed_root=1)
    s = _state(g, p, amplitude=0.2, velocity=0.3)
    out = window_step(s, p, nm, path_id=5, window_index=0)
    tr = integrate(s, p, nm, [5], 1e-3)
    np.testing.assert_allclose(out.state.rho_hat, tr.final.rho_hat[0], atol=1e-15)
    np.testing.assert_allclose(out.state.q_hat, tr.final.q_hat[0], atol=1e-15)
    assert out.state.t == pytest.approx(1e-3)


def test_run_path_writes_checkpoint_and_csv(tmp_path):
    g = get_grid(1, 16)
    p = RegularizationParams(a=0.5, m=4, h=1e-3, dt=1e-3)
    s = _state(g, p, amplitude=0.2)
    tr = run_path(s, p, None, 0, 0.005, checkpoint=tmp_path / "c.bin")
    back, meta = read_checkpoint(tmp_path / "c.bin")
    assert meta["t"] == pytest.approx(0.005)
    np.testing.assert_array_equal(back.rho_hat, tr.final.rho_hat[0])
    text = tr.csv_text()
    head = text.splitlines()[0].split(",")
    assert head[0] == "t" and "energy" in head
    assert len(text.splitlines()) == tr.times.size + 1


def test_sample_increment_drives_the_scheme_deterministically():
    g = get_grid(1, 16)
    p = RegularizationParams(a=0.5, m=4)
    nm = make_noise(g, 4, K_modes=2, seed_root=3)
    s = _state(g, p, amplitude=0.1)
    dB = sample_increment(nm, 0, 0, 1e-3)
    a = momentum_step(s, p, nm, dB, 1e-3).state
    b = momentum_step(s, p, nm, dB, 1e-3).state
    assert isinstance(a, FluidState)
    np.testing.assert_array_equal(a.q_hat, b.q_hat)
