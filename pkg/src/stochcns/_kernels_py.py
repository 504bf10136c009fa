"""Pure numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` operation for operation.  Integer hashing is
bit-identical between the two; transcendental functions may differ in the
last ulp because numpy and libm use different implementations.
"""
import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
WORD_MUL = np.uint64(0xD1B54A32D192ED03)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
TWO_M53 = 2.0 ** -53


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


def hash_words(seed, words):
    """Chain-hash a seed and a sequence of equally shaped uint64 arrays."""
    h = _mix(np.full(words[0].shape, seed, dtype=np.uint64) + GOLDEN)
    for w in words:
        h = _mix(h + GOLDEN + w * WORD_MUL)
    return h


def normals_flat(seed, path, step, level, index, mode):
    """Standard normals keyed by (seed, path, step, level, index, mode).

    All inputs are 1-d uint64 arrays of equal length.
    """
    zero = np.zeros_like(path)
    one = np.ones_like(path)
    ha = hash_words(seed, (path, step, level, index, mode, zero))
    hb = hash_words(seed, (path, step, level, index, mode, one))
    u1 = ((ha >> np.uint64(11)).astype(np.float64) + 1.0) * TWO_M53
    u2 = (hb >> np.uint64(11)).astype(np.float64) * TWO_M53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def bump_step_flat(s):
    """Decreasing bridge: 1 for s <= 0, exp(1 - 1/(1 - s^2)) on (0, 1), 0 for s >= 1.

    Returns the value and its derivative in s.
    """
    s = np.asarray(s, dtype=np.float64)
    val = np.where(s <= 0.0, 1.0, 0.0)
    der = np.zeros_like(s)
    inside = (s > 0.0) & (s < 1.0)
    si = s[inside]
    w = 1.0 - si * si
    e = np.exp(1.0 - 1.0 / w)
    val[inside] = e
    der[inside] = -2.0 * si / (w * w) * e
    return val, der


def phi_tilde_flat(y, n):
    """Mellet-Vasseur truncation (1+y)ln(1+y) and its first two derivatives."""
    y = np.asarray(y, dtype=np.float64)
    L = np.log1p(n)
    top = np.e * (1.0 + n) * (1.0 + n)
    cn = top - 1.0
    ly = np.log1p(y)
    lower = y < n
    upper = y > cn
    mid = ~(lower | upper)
    val = np.empty_like(y)
    d1 = np.empty_like(y)
    d2 = np.empty_like(y)
    val[lower] = (1.0 + y[lower]) * ly[lower]
    d1[lower] = 1.0 + ly[lower]
    d2[lower] = 1.0 / (1.0 + y[lower])
    ym = y[mid]
    val[mid] = 2.0 * (1.0 + L) * ym - (1.0 + ym) * ly[mid] + 2.0 * (L - n)
    d1[mid] = 1.0 + 2.0 * L - ly[mid]
    d2[mid] = -1.0 / (1.0 + ym)
    val[upper] = top - 2.0 * n - 2.0
    d1[upper] = 0.0
    d2[upper] = 0.0
    return val, d1, d2
