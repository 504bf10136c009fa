"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
fallback.  Set ``STOCHCNS_BACKEND=python`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

_pure = _kernels_py
BACKEND = "python"
_impl = _pure

if os.environ.get("STOCHCNS_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _compiled

        _impl = _compiled
        BACKEND = "cython"
    except ImportError:
        pass


def get_backend(name=None):
    """Return the kernel module for ``name`` ("cython", "python" or None for the active one)."""
    if name is None:
        return _impl
    if name == "python":
        return _pure
    if name == "cython":
        from . import _kernels as compiled

        return compiled
    raise ValueError(f"unknown backend {name!r}")


def _u64(x):
    return np.asarray(x).astype(np.uint64)


def normals(seed, path, step, level, index, mode, backend=None):
    """Counter-based standard normals, broadcast over the five counters."""
    arrays = np.broadcast_arrays(_u64(path), _u64(step), _u64(level), _u64(index), _u64(mode))
    shape = arrays[0].shape
    flat = [np.ascontiguousarray(a.ravel()) for a in arrays]
    out = get_backend(backend).normals_flat(np.uint64(seed), *flat)
    return out.reshape(shape)


def bump_step(s, backend=None):
    s = np.asarray(s, dtype=np.float64)
    val, der = get_backend(backend).bump_step_flat(np.ascontiguousarray(s.ravel()))
    return val.reshape(s.shape), der.reshape(s.shape)


def phi_tilde(y, n, backend=None):
    y = np.asarray(y, dtype=np.float64)
    v, d1, d2 = get_backend(backend).phi_tilde_flat(np.ascontiguousarray(y.ravel()), float(n))
    return v.reshape(y.shape), d1.reshape(y.shape), d2.reshape(y.shape)
