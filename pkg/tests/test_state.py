import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochcns.errors import ConfigurationError, SingularOperatorError
from stochcns.spectral import SpectralField, get_grid
from stochcns.state import (RegularizationParams, gram_apply, gram_solve, initial_fields,
                            maximum_principle_bounds, positivity_report, prepare_initial, read_checkpoint,
                            read_checkpoint_header, velocity_from_momentum, write_checkpoint)


def _positive(g, rng, m):
    c = np.zeros(g.coeff_shape, dtype=complex)
    mask = (g.kinf <= m) & (g.kinf > 0)
    c[mask] = 0.2 * (rng.standard_normal(mask.sum()) + 1j * rng.standard_normal(mask.sum())) / (1 + g.k2[mask])
    v = g.inverse(c)
    return 1.0 + 0.8 * v / np.max(np.abs(v))


@pytest.mark.parametrize("field,value", [("gamma", 1.0), ("eps", -1.0), ("m", 0), ("dt", 0.0),
                                         ("r2", float("inf")), ("chi_mode", "bogus")])
def test_params_validation(field, value):
    with pytest.raises(ConfigurationError, match=field):
        RegularizationParams(**{field: value})


def test_params_dt_above_window():
    with pytest.raises(ConfigurationError, match="exceeds"):
        RegularizationParams(h=1e-3, dt=2e-3)


def test_params_digest_changes_with_values():
    a = RegularizationParams()
    assert a.digest() == RegularizationParams().digest()
    assert a.digest() != a.replace(eps=1e-3).digest()
    assert len(a.digest()) == 32


def test_gram_solve_constant_density_is_division():
    g = get_grid(1, 16)
    rho = np.full(g.shape, 2.5)
    q = g.project(g.forward(np.sin(2 * np.pi * g.points())), 4)
    u, it, res = gram_solve(g, rho, q, 4)
    np.testing.assert_allclose(u, q / 2.5, atol=1e-12)


@given(st.integers(0, 2 ** 31))
def test_gram_solve_matches_dense_matrix(seed):
    g = get_grid(1, 16)
    m = 3
    rng = np.random.default_rng(seed)
    rho = _positive(g, rng, m)
    # assemble M[rho] column by column on the real basis of H_m
    idx = np.nonzero(g.band_mask(m))[0]
    basis = []
    for k in idx:
        for part in ((1.0, 1j) if 0 < k < g.N // 2 else (1.0,)):
            e = np.zeros((1,) + g.coeff_shape, dtype=complex)
            e[0, k] = part
            basis.append(e)
    cols = [gram_apply(g, rho, b, m) for b in basis]
    flat = lambda c: np.concatenate([c.real.ravel(), c.imag.ravel()])
    A = np.stack([flat(c) for c in cols], axis=1)
    z = rng.standard_normal(len(basis))
    q = sum(zi * b for zi, b in zip(z, basis))
    q = gram_apply(g, rho, q, m)
    u, _, _ = gram_solve(g, rho, q, m, tol=1e-13)
    ref = np.linalg.lstsq(A, flat(q), rcond=None)[0]
    np.testing.assert_allclose(flat(sum(r * b for r, b in zip(ref, basis))), flat(u), atol=1e-10)


def test_gram_solve_batched_matches_individual():
    g = get_grid(2, 8)
    rng = np.random.default_rng(1)
    rho = np.stack([_positive(g, rng, 2) for _ in range(3)])
    q = g.project(g.forward(rng.standard_normal((3, 2) + g.shape)), 2)
    u, _, _ = gram_solve(g, rho, q, 2)
    for i in range(3):
        ui, _, _ = gram_solve(g, rho[i], q[i], 2)
        np.testing.assert_allclose(u[i], ui, atol=1e-12)


def test_gram_solve_singular():
    g = get_grid(1, 16)
    rho = np.ones(g.shape)
    rho[3] = 0.0
    with pytest.raises(SingularOperatorError):
        gram_solve(g, rho, np.zeros((1,) + g.coeff_shape, dtype=complex), 4)


def test_velocity_momentum_round_trip():
    g = get_grid(1, 32)
    rng = np.random.default_rng(2)
    rho = SpectralField.from_values(g, _positive(g, rng, 4))
    u = SpectralField(g, g.project(g.forward(rng.standard_normal((1,) + g.shape)), 4), 1)
    from stochcns.state import momentum_from_velocity
    q = momentum_from_velocity(rho, u, 4)
    back = velocity_from_momentum(rho, q, 4)
    np.testing.assert_allclose(back.coeffs, u.coeffs, atol=1e-10)


@pytest.mark.parametrize("preset", ["constant", "single_mode", "random_smooth"])
def test_prepare_initial_keeps_mass(preset):
    g = get_grid(2, 16)
    p = RegularizationParams(m=4)
    rho, u = initial_fields(g, preset, rho_mean=1.3, amplitude=0.5, velocity=0.2)
    st_ = prepare_initial(rho, u, p, g)
    assert abs(st_.mass() - 1.3) < 1e-12
    assert np.min(st_.rho_values) >= p.rho_floor


def test_prepare_initial_clips_and_rescales():
    g = get_grid(1, 32)
    p = RegularizationParams(m=4, rho_floor=0.05)
    rho, u = initial_fields(g, "single_mode", amplitude=1.0)
    st_ = prepare_initial(rho, u, p, g)
    assert abs(st_.mass() - 1.0) < 1e-12
    assert np.min(st_.rho_values) > 0


def test_prepare_initial_rejects_bad_input():
    g = get_grid(1, 16)
    p = RegularizationParams(m=4)
    with pytest.raises(ConfigurationError, match="mass"):
        prepare_initial(np.zeros(16), np.zeros((1, 16)), p, g)
    with pytest.raises(ConfigurationError, match="shape"):
        prepare_initial(np.ones(8), np.zeros((1, 8)), p, g)
    with pytest.raises(ConfigurationError, match="preset"):
        initial_fields(g, "vortex")


def test_positivity_and_maximum_principle():
    g = get_grid(1, 8)
    rho = SpectralField.from_values(g, np.array([1.0, 0.5, 1e-9, 2.0, 1.0, 1.0, 1.0, 1.0]))
    rep = positivity_report(rho)
    assert rep["min_value"] == pytest.approx(1e-9)
    assert rep["vacuum_fraction"] == pytest.approx(1 / 8)
    b = maximum_principle_bounds(rho, [0.0, 1.0, 2.0], [1.0, 1.0, 1.0])
    np.testing.assert_allclose(b["upper"], 2.0 * np.exp([0.0, 1.0, 2.0]))
    np.testing.assert_allclose(b["lower"], 1e-9 * np.exp([0.0, -1.0, -2.0]))


def test_checkpoint_round_trip(tmp_path):
    g = get_grid(2, 8)
    p = RegularizationParams(m=2, eps=1e-3)
    rho, u = initial_fields(g, "random_smooth", amplitude=0.4, velocity=0.3, n_modes=2, seed=4)
    s = prepare_initial(rho, u, p, g)
    path = tmp_path / "c.bin"
    write_checkpoint(path, s, p)
    meta = read_checkpoint_header(path)
    assert (meta["d"], meta["N"], meta["m"]) == (2, 8, 2)
    assert meta["params_hash"] == p.digest().hex()
    back, _ = read_checkpoint(path)
    np.testing.assert_array_equal(back.rho_hat, s.rho_hat)
    np.testing.assert_array_equal(back.q_hat, s.q_hat)
    np.testing.assert_allclose(back.u_hat, s.u_hat, atol=1e-10)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"not a checkpoint at all, clearly not" * 3)
    with pytest.raises(ConfigurationError):
        read_checkpoint_header(path)
    g = get_grid(1, 8)
    p = RegularizationParams(m=2)
    s = prepare_initial(*initial_fields(g), p, g)
    with pytest.raises(ConfigurationError, match="single path"):
        write_checkpoint(tmp_path / "b.bin", s.broadcast(2), p)
