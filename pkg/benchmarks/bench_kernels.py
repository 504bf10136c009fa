"""Compiled versus pure-numpy kernels: wall time per call and output agreement.

    python benchmarks/bench_kernels.py [--size N] [--repeat R]

Also times one window of the integrator with each backend, since the
kernels only matter through that loop.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from stochcns import kernels


def _time(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def kernel_table(size, repeat):
    try:
        kernels.get_backend("cython")
    except ImportError:
        print("compiled extension not built; only the numpy fallback is available")
        return
    rng = np.random.default_rng(0)
    path = np.arange(size, dtype=np.uint64)
    s = rng.uniform(-0.5, 1.5, size)
    y = rng.uniform(0, 50, size)
    cases = {
        "normals": lambda b: kernels.normals(7, path, 3, 0, 1, 0, backend=b),
        "bump_step": lambda b: kernels.bump_step(s, backend=b),
        "phi_tilde": lambda b: kernels.phi_tilde(y, 10.0, backend=b),
    }
    print(f"{'kernel':<12} {'python [ms]':>12} {'cython [ms]':>12} {'speedup':>8}  max|diff|")
    for name, fn in cases.items():
        tp = _time(lambda: fn("python"), repeat)
        tc = _time(lambda: fn("cython"), repeat)
        a, b = fn("python"), fn("cython")
        a = a if isinstance(a, tuple) else (a,)
        b = b if isinstance(b, tuple) else (b,)
        diff = max(float(np.max(np.abs(x - z))) for x, z in zip(a, b))
        print(f"{name:<12} {tp * 1e3:>12.3f} {tc * 1e3:>12.3f} {tp / tc:>8.1f}  {diff:.1e}")


SCRIPT = """
import time
from stochcns import get_grid, RegularizationParams, initial_fields, prepare_initial, make_noise, integrate
from stochcns.kernels import BACKEND
g = get_grid(1, 32)
p = RegularizationParams(a=0.5, gamma=2.0, eps=1e-3, r2=0.2, m=4, h=1e-3, dt=1e-3)
rho, u = initial_fields(g, "single_mode", amplitude=0.2, velocity=0.3)
st = prepare_initial(rho, u, p, g)
nz = make_noise(g, 4, K_modes=4, f1=0.5, family="velocity-saturating")
integrate(st, p, nz, range(64), 0.002)
t0 = time.perf_counter()
tr = integrate(st, p, nz, range(64), 0.02, record_every=20, track=("mv",))
print(BACKEND, time.perf_counter() - t0, repr(float(tr.columns["mv"][-1].sum())))
"""


def integrator_table():
    print("\nintegrator, 64 paths x 20 windows with MV tracking")
    for backend in ("cython", "python"):
        env = dict(os.environ, STOCHCNS_BACKEND=backend)
        out = subprocess.run([sys.executable, "-c", SCRIPT], env=env, capture_output=True, text=True, check=True)
        name, secs, mv = out.stdout.split()
        print(f"  {name:<7} {float(secs):8.3f} s   sum mv = {mv}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=1 << 18)
    ap.add_argument("--repeat", type=int, default=5)
    a = ap.parse_args()
    kernel_table(a.size, a.repeat)
    integrator_table()


if __name__ == "__main__":
    main()
