import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stochcns.errors import ConfigurationError
from stochcns.spectral import (SpectralField, TorusGrid, dealias, differentiate, get_grid, inner_product,
                               multiply, parseval_sum, project, transform, wave_vectors)

TWO_PI = 2 * np.pi


@pytest.mark.parametrize("d,N", [(1, 8), (2, 16), (3, 8)])
def test_round_trip(d, N):
    g = get_grid(d, N)
    rng = np.random.default_rng(d)
    f = rng.standard_normal((2,) + g.shape)
    back = transform(transform(f, g), g, "inverse")
    np.testing.assert_allclose(back, f, atol=1e-13)


@given(arrays(np.float64, (16,), elements=st.floats(-1e3, 1e3)))
def test_parseval_1d(v):
    g = get_grid(1, 16)
    f = SpectralField.from_values(g, v)
    assert abs(parseval_sum(f) - np.mean(v * v)) <= 1e-12 * max(1.0, np.mean(v * v))


def test_grid_rejects_bad_sizes():
    for d, N in [(4, 8), (1, 7), (1, 2)]:
        with pytest.raises(ConfigurationError):
            TorusGrid(d, N)


def test_check_cutoff():
    g = get_grid(1, 16)
    g.check_cutoff(5)
    with pytest.raises(ConfigurationError, match="too coarse"):
        g.check_cutoff(6)
    with pytest.raises(ConfigurationError):
        g.check_cutoff(-1)


def test_derivatives_of_trig_polynomial():
    g = get_grid(2, 16)
    x, y = g.points()
    f = SpectralField.from_values(g, np.sin(TWO_PI * x) * np.cos(TWO_PI * 2 * y))
    grad = differentiate(f, "gradient").values
    np.testing.assert_allclose(grad[0], TWO_PI * np.cos(TWO_PI * x) * np.cos(TWO_PI * 2 * y), atol=1e-12)
    np.testing.assert_allclose(grad[1], -2 * TWO_PI * np.sin(TWO_PI * x) * np.sin(TWO_PI * 2 * y), atol=1e-12)
    lap = differentiate(f, "laplacian").values
    np.testing.assert_allclose(lap, -5 * TWO_PI ** 2 * f.values, atol=1e-10)
    lap2 = differentiate(f, "laplacian_power", power=2).values
    np.testing.assert_allclose(lap2, 25 * TWO_PI ** 4 * f.values, rtol=1e-12, atol=1e-8)


def test_divergence_of_gradient_is_laplacian():
    g = get_grid(2, 16)
    rng = np.random.default_rng(0)
    f = project(SpectralField.from_values(g, rng.standard_normal(g.shape)), 5)
    a = differentiate(differentiate(f, "gradient"), "divergence").coeffs
    b = differentiate(f, "laplacian").coeffs
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_deformation_is_symmetric_part():
    g = get_grid(2, 16)
    x, y = g.points()
    u = SpectralField.from_values(g, np.stack([np.sin(TWO_PI * y), np.zeros(g.shape)]), rank=1)
    D = differentiate(u, "deformation").values
    np.testing.assert_allclose(D[0, 1], 0.5 * TWO_PI * np.cos(TWO_PI * y), atol=1e-12)
    np.testing.assert_allclose(D[0, 1], D[1, 0])
    assert np.max(np.abs(D[0, 0])) < 1e-12


def test_unknown_operator():
    g = get_grid(1, 8)
    f = SpectralField.from_values(g, np.ones(8))
    with pytest.raises(ConfigurationError):
        differentiate(f, "curl")
    with pytest.raises(ConfigurationError):
        differentiate(f, "divergence")


def test_project_and_dealias_masks():
    g = get_grid(1, 32)
    x = g.points()[0]
    f = SpectralField.from_values(g, np.cos(TWO_PI * 3 * x) + np.cos(TWO_PI * 11 * x))
    np.testing.assert_allclose(project(f, 4).values, np.cos(TWO_PI * 3 * x), atol=1e-13)
    # 11 > 32/3 is removed by the two-thirds rule, 3 is kept
    np.testing.assert_allclose(dealias(f).values, np.cos(TWO_PI * 3 * x), atol=1e-13)


def test_multiply_band_limited_product_is_exact():
    g = get_grid(1, 32)
    x = g.points()[0]
    a = SpectralField.from_values(g, np.cos(TWO_PI * 2 * x))
    b = SpectralField.from_values(g, np.sin(TWO_PI * 3 * x))
    p = multiply(a, b)
    np.testing.assert_allclose(p.values, np.cos(TWO_PI * 2 * x) * np.sin(TWO_PI * 3 * x), atol=1e-13)
    assert abs(inner_product(a, a) - 0.5) < 1e-14


def test_mismatched_fields():
    a = SpectralField.from_values(get_grid(1, 8), np.ones(8))
    b = SpectralField.from_values(get_grid(1, 16), np.ones(16))
    with pytest.raises(ConfigurationError):
        inner_product(a, b)
    with pytest.raises(ConfigurationError):
        transform(np.ones(8), get_grid(1, 16))


@pytest.mark.parametrize("d,m", [(1, 3), (2, 2), (3, 1)])
def test_wave_vectors_half_space(d, m):
    wv = wave_vectors(d, m)
    assert wv[0].k == (0,) * d
    # zero plus one of each +-k pair
    assert len(wv) == ((2 * m + 1) ** d + 1) // 2
    sups = [w.sup for w in wv]
    assert sups == sorted(sups)
    keys = {w.k for w in wv}
    for w in wv[1:]:
        assert tuple(-x for x in w.k) not in keys
