import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochcns import kernels

BACKENDS = ["python"]
try:
    kernels.get_backend("cython")
    BACKENDS.append("cython")
except ImportError:
    pass


def test_backend_names():
    assert kernels.BACKEND in ("python", "cython")
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


@pytest.mark.parametrize("backend", BACKENDS)
def test_normals_are_standard(backend):
    z = kernels.normals(7, np.arange(200_000, dtype=np.uint64), 3, 0, 0, 1, backend=backend)
    assert abs(z.mean()) < 5 / np.sqrt(z.size)
    assert abs(z.var() - 1.0) < 0.02
    # fourth moment of a standard normal is 3
    assert abs(np.mean(z ** 4) - 3.0) < 0.1


@pytest.mark.parametrize("backend", BACKENDS)
def test_normals_are_pure_functions_of_counters(backend):
    a = kernels.normals(1, np.arange(10), 5, 2, np.arange(4)[:, None], 0, backend=backend)
    b = kernels.normals(1, np.arange(10), 5, 2, np.arange(4)[:, None], 0, backend=backend)
    np.testing.assert_array_equal(a, b)
    c = kernels.normals(2, np.arange(10), 5, 2, np.arange(4)[:, None], 0, backend=backend)
    assert not np.any(a == c)
    # a single entry computed alone equals its value inside the batch
    one = kernels.normals(1, 3, 5, 2, 1, 0, backend=backend)
    assert one == a[1, 3]


def test_normals_uncorrelated_across_counters():
    z = kernels.normals(0, np.arange(50_000), 0, 0, 0, np.arange(2)[:, None])
    r = np.corrcoef(z)[0, 1]
    assert abs(r) < 4 / np.sqrt(z.shape[1])


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
def test_backends_agree():
    p = np.arange(1000, dtype=np.uint64)
    zp = kernels.normals(11, p, 4, 1, 2, 3, backend="python")
    zc = kernels.normals(11, p, 4, 1, 2, 3, backend="cython")
    np.testing.assert_allclose(zp, zc, rtol=0, atol=1e-14)
    s = np.linspace(-0.5, 1.5, 1001)
    for a, b in zip(kernels.bump_step(s, "python"), kernels.bump_step(s, "cython")):
        np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-15)
    y = np.linspace(0, 400, 2001)
    for a, b in zip(kernels.phi_tilde(y, 5.0, "python"), kernels.phi_tilde(y, 5.0, "cython")):
        np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-13)


@pytest.mark.parametrize("backend", BACKENDS)
def test_bump_step_values(backend):
    v, dv = kernels.bump_step(np.array([-1.0, 0.0, 0.5, 1.0, 2.0]), backend)
    np.testing.assert_allclose(v, [1.0, 1.0, np.exp(1 - 1 / 0.75), 0.0, 0.0], atol=1e-15)
    assert dv[0] == 0 and dv[-1] == 0
    assert dv[2] < 0


@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_bump_step_monotone_in_unit_interval(a, b):
    lo, hi = min(a, b), max(a, b)
    v = kernels.bump_step(np.array([lo, hi]))[0]
    assert 0.0 <= v[1] <= v[0] <= 1.0


def test_bump_step_derivative_matches_finite_difference():
    s = np.linspace(0.05, 0.95, 37)
    h = 1e-6
    v, dv = kernels.bump_step(s)
    fd = (kernels.bump_step(s + h)[0] - kernels.bump_step(s - h)[0]) / (2 * h)
    np.testing.assert_allclose(dv, fd, rtol=1e-5, atol=1e-8)


@given(st.floats(0.0, 1e4), st.floats(1.0, 50.0))
def test_phi_tilde_monotone_and_convex_below_n(y, n):
    v, d1, d2 = kernels.phi_tilde(np.array([y]), n)
    assert d1[0] >= 0
    if y < n:
        assert abs(v[0] - (1 + y) * np.log1p(y)) <= 1e-12 * max(1.0, v[0])
        assert d2[0] > 0


def test_environment_forces_fallback():
    env = dict(os.environ, STOCHCNS_BACKEND="python")
    r = subprocess.run([sys.executable, "-c", "import stochcns; print(stochcns.BACKEND)"], env=env,
                       capture_output=True, text=True, check=True)
    assert r.stdout.strip() == "python"
