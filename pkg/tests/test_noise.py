import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochcns.errors import ConfigurationError
from stochcns.noise import (combined_noise, enumerate_shapes, evaluate_noise, export_increments,
                            lipschitz_certificate, make_noise, noise_energy_density, noise_from_table,
                            sample_increment)
from stochcns.spectral import get_grid

G1 = get_grid(1, 16)


def test_increment_refinement_sums_to_base():
    nm = make_noise(G1, 4, K_modes=3, seed_root=9)
    base = sample_increment(nm, np.arange(5), 7, 0.01)
    for level in (1, 2, 4):
        fine = sample_increment(nm, np.arange(5), 7, 0.01, level)
        assert fine.shape == (5, 2 ** level, 3)
        np.testing.assert_allclose(fine.sum(axis=-2), base, atol=1e-15)
        # coarser levels are sums of adjacent pairs of the finer one
        coarse = sample_increment(nm, np.arange(5), 7, 0.01, level - 1)
        if level > 1:
            np.testing.assert_allclose(fine.reshape(5, -1, 2, 3).sum(axis=2), coarse, atol=1e-15)


def test_refined_increment_variance():
    nm = make_noise(G1, 4, K_modes=1, seed_root=3)
    dt = 0.02
    fine = sample_increment(nm, np.arange(40_000), 0, dt, 3)[..., 0]
    v = fine.var(axis=0)
    np.testing.assert_allclose(v, dt / 8, rtol=0.05)
    # sub-increments of one step are uncorrelated
    c = np.corrcoef(fine[:, 0], fine[:, 5])[0, 1]
    assert abs(c) < 0.03


def test_increment_seed_determinism():
    a = make_noise(G1, 4, K_modes=2, seed_root=1)
    b = a.with_seed(1)
    np.testing.assert_array_equal(sample_increment(a, [3, 4], 2, 0.1), sample_increment(b, [3, 4], 2, 0.1))
    c = a.with_seed(2)
    assert not np.allclose(sample_increment(a, [3, 4], 2, 0.1), sample_increment(c, [3, 4], 2, 0.1))
    rows = export_increments(a, 3, 4, 0.1)
    np.testing.assert_array_equal(rows[2, 2:], sample_increment(a, 3, 2, 0.1))


def test_budget_and_square_summability():
    with pytest.raises(ConfigurationError, match="budget"):
        make_noise(G1, 4, K_modes=3, f1=1.0, budget=1.0)
    with pytest.raises(ConfigurationError, match="decay"):
        make_noise(G1, 4, K_modes=3, decay=0.5)
    with pytest.raises(ConfigurationError):
        make_noise(G1, 4, family="gaussian")
    with pytest.raises(ConfigurationError, match="shapes"):
        enumerate_shapes(1, 1, 4)


def test_tail_bound_matches_series():
    nm = make_noise(G1, 4, K_modes=3, f1=2.0, decay=1.0)
    exact = 4.0 * (np.pi ** 2 / 6 - 1 - 1 / 4 - 1 / 9)
    # the integral remainder overestimates slightly, so it is a bound
    assert exact <= nm.tail_bound <= exact * (1 + 1e-6)


def test_shapes_enumeration():
    sh = enumerate_shapes(2, 1, 6)
    assert [s.kind for s in sh[:2]] == ["const", "const"]
    assert [s.component for s in sh[:2]] == [0, 1]
    assert sh[2].kind == "cos" and sh[4].kind == "sin"


@pytest.mark.parametrize("family", ["constant", "density-saturating", "velocity-saturating"])
def test_families_satisfy_the_bound(family):
    g = get_grid(2, 8)
    nm = make_noise(g, 2, K_modes=5, f1=0.7, family=family)
    rng = np.random.default_rng(0)
    states = [(np.exp(rng.standard_normal(g.shape)), 3 * rng.standard_normal((2,) + g.shape)) for _ in range(4)]
    cert = lipschitz_certificate(nm, states)
    assert cert["passed"], cert["max_ratio"]
    assert cert["max_ratio"] <= 1.0 + 1e-6


def test_certificate_detects_oversized_scale():
    nm = make_noise(G1, 4, K_modes=2, family="density-saturating", scale=[1.5, 1.5])
    cert = lipschitz_certificate(nm, [(np.full(16, 1.0), np.zeros((1, 16)))])
    assert not cert["passed"]


def test_noise_vanishes_at_vacuum():
    nm = make_noise(G1, 4, K_modes=3)
    rho = np.ones(16)
    rho[2] = 0.0
    G = evaluate_noise(nm, rho, np.zeros((1, 16)))
    assert np.all(G[..., 2] == 0)


@given(st.integers(0, 1000))
def test_combined_noise_equals_mode_sum(seed):
    g = get_grid(1, 16)
    nm = make_noise(g, 4, K_modes=4, family="velocity-saturating")
    rng = np.random.default_rng(seed)
    rho = np.exp(rng.standard_normal((2,) + g.shape))
    u = rng.standard_normal((2, 1) + g.shape)
    dB = rng.standard_normal((2, 4))
    G = evaluate_noise(nm, rho, u)
    ref = np.einsum("bk,bkc...->bc...", dB, G)
    np.testing.assert_allclose(combined_noise(nm, rho, u, dB), ref, atol=1e-13)


def test_noise_energy_density_constant_family():
    nm = make_noise(G1, 4, K_modes=1, f1=0.6)
    e = noise_energy_density(nm, np.full(16, 2.0), np.zeros((1, 16)))
    np.testing.assert_allclose(e, 0.5 * 2.0 * 0.36)


def test_table_noise():
    nm = noise_from_table(G1, 4, [{"k": [0], "f": 0.3}, {"k": [2], "kind": "sin", "f": 0.1}], seed_root=5)
    assert nm.K_modes == 2
    np.testing.assert_allclose(nm.amplitudes[1, 0], 0.1 * np.sin(4 * np.pi * G1.points()[0]))
    with pytest.raises(ConfigurationError, match="H_m"):
        noise_from_table(G1, 1, [{"k": [2], "f": 0.1}])
