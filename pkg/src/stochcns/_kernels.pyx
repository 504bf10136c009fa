# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: counter-based normals and the branchy cut-off functions."""
import numpy as np
from libc.math cimport sqrt, log, log1p, cos, exp, M_PI, M_E
from libc.stdint cimport uint64_t

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef uint64_t WORD_MUL = 0xD1B54A32D192ED03ULL
cdef uint64_t MIX1 = 0xBF58476D1CE4E5B9ULL
cdef uint64_t MIX2 = 0x94D049BB133111EBULL
cdef double TWO_M53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _mix(uint64_t z) nogil:
    z = (z ^ (z >> 30)) * MIX1
    z = (z ^ (z >> 27)) * MIX2
    return z ^ (z >> 31)


cdef inline uint64_t _hash6(uint64_t seed, uint64_t a, uint64_t b, uint64_t c,
                            uint64_t d, uint64_t e, uint64_t f) nogil:
    cdef uint64_t h = _mix(seed + GOLDEN)
    h = _mix(h + GOLDEN + a * WORD_MUL)
    h = _mix(h + GOLDEN + b * WORD_MUL)
    h = _mix(h + GOLDEN + c * WORD_MUL)
    h = _mix(h + GOLDEN + d * WORD_MUL)
    h = _mix(h + GOLDEN + e * WORD_MUL)
    h = _mix(h + GOLDEN + f * WORD_MUL)
    return h


def hash_words(uint64_t seed, words):
    cdef uint64_t[::1] a = np.ascontiguousarray(words[0], dtype=np.uint64)
    cdef Py_ssize_t n = a.shape[0], i, j
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef uint64_t h
    cols = [np.ascontiguousarray(w, dtype=np.uint64) for w in words]
    cdef uint64_t[::1] w
    for i in range(n):
        o[i] = _mix(seed + GOLDEN)
    for j in range(len(cols)):
        w = cols[j]
        for i in range(n):
            o[i] = _mix(o[i] + GOLDEN + w[i] * WORD_MUL)
    return out


def normals_flat(uint64_t seed, const uint64_t[::1] path, const uint64_t[::1] step,
                 const uint64_t[::1] level, const uint64_t[::1] index,
                 const uint64_t[::1] mode):
    cdef Py_ssize_t n = path.shape[0], i
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef uint64_t ha, hb
    cdef double u1, u2
    with nogil:
        for i in range(n):
            ha = _hash6(seed, path[i], step[i], level[i], index[i], mode[i], 0)
            hb = _hash6(seed, path[i], step[i], level[i], index[i], mode[i], 1)
            u1 = (<double>(ha >> 11) + 1.0) * TWO_M53
            u2 = <double>(hb >> 11) * TWO_M53
            o[i] = sqrt(-2.0 * log(u1)) * cos(2.0 * M_PI * u2)
    return out


def bump_step_flat(s_in):
    cdef double[::1] s = np.ascontiguousarray(s_in, dtype=np.float64).ravel()
    cdef Py_ssize_t n = s.shape[0], i
    val = np.empty(n, dtype=np.float64)
    der = np.empty(n, dtype=np.float64)
    cdef double[::1] v = val
    cdef double[::1] dv = der
    cdef double x, w, e
    with nogil:
        for i in range(n):
            x = s[i]
            if x <= 0.0:
                v[i] = 1.0
                dv[i] = 0.0
            elif x >= 1.0:
                v[i] = 0.0
                dv[i] = 0.0
            else:
                w = 1.0 - x * x
                e = exp(1.0 - 1.0 / w)
                v[i] = e
                dv[i] = -2.0 * x / (w * w) * e
    return val, der


def phi_tilde_flat(y_in, double n):
    cdef double[::1] y = np.ascontiguousarray(y_in, dtype=np.float64).ravel()
    cdef Py_ssize_t size = y.shape[0], i
    val = np.empty(size, dtype=np.float64)
    d1 = np.empty(size, dtype=np.float64)
    d2 = np.empty(size, dtype=np.float64)
    cdef double[::1] v = val
    cdef double[::1] g = d1
    cdef double[::1] h = d2
    cdef double L = log1p(n)
    cdef double top = M_E * (1.0 + n) * (1.0 + n)
    cdef double cn = top - 1.0
    cdef double x, ly
    with nogil:
        for i in range(size):
            x = y[i]
            if x < n:
                ly = log1p(x)
                v[i] = (1.0 + x) * ly
                g[i] = 1.0 + ly
                h[i] = 1.0 / (1.0 + x)
            elif x <= cn:
                ly = log1p(x)
                v[i] = 2.0 * (1.0 + L) * x - (1.0 + x) * ly + 2.0 * (L - n)
                g[i] = 1.0 + 2.0 * L - ly
                h[i] = -1.0 / (1.0 + x)
            else:
                v[i] = top - 2.0 * n - 2.0
                g[i] = 0.0
                h[i] = 0.0
    return val, d1, d2
