"""Torus geometry, real-to-complex transforms and spectral calculus.

Fields are numpy arrays with leading batch axes, then component axes
(none for scalars, one for vectors, two for tensors), then ``d`` spatial
axes.  Coefficients use the ``rfftn`` layout normalised so that the
coefficient of ``exp(2 pi i k.x)`` is ``mean(f * exp(-2 pi i k.x))``.
The unit period makes every wavenumber symbol ``2 pi k`` exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError

TWO_PI = 2.0 * np.pi


class WaveVector(NamedTuple):
    """Integer wave vector; entries satisfy ``|k_i| <= N/2``."""

    k: tuple

    @property
    def sup(self) -> int:
        return max(abs(int(x)) for x in self.k)


class TorusGrid:
    """Uniform collocation grid ``x_j = j/N`` on the unit torus of dimension ``d``."""

    def __init__(self, d: int, N: int):
        if d not in (1, 2, 3):
            raise ConfigurationError(f"dimension d must be 1, 2 or 3, got {d}")
        if N < 4 or N % 2:
            raise ConfigurationError(f"points per axis N must be even and >= 4, got {N}")
        self.d = int(d)
        self.N = int(N)
        self.shape = (self.N,) * self.d
        self.coeff_shape = (self.N,) * (self.d - 1) + (self.N // 2 + 1,)
        self.axes = tuple(range(-self.d, 0))
        self.size = self.N ** self.d

        ks = []
        for axis in range(self.d):
            if axis < self.d - 1:
                k1 = np.fft.fftfreq(self.N, 1.0 / self.N).round().astype(np.int64)
            else:
                k1 = np.arange(self.N // 2 + 1, dtype=np.int64)
            shape = [1] * self.d
            shape[axis] = k1.size
            ks.append(np.broadcast_to(k1.reshape(shape), self.coeff_shape))
        self.k = tuple(np.ascontiguousarray(k) for k in ks)
        self.k2 = sum(k * k for k in self.k)
        self.kinf = np.max(np.abs(np.stack(self.k)), axis=0)

        ik = []
        for k in self.k:
            sym = 1j * TWO_PI * k.astype(np.float64)
            sym = np.where(np.abs(k) == self.N // 2, 0.0, sym)
            ik.append(sym)
        self.ik = np.stack(ik)
        self.lap_symbol = -(TWO_PI ** 2) * self.k2.astype(np.float64)

        w = np.full(self.coeff_shape, 2.0)
        w[..., 0] = 1.0
        w[..., -1] = 1.0
        self.weights = w
        self.dealias_mask = 3 * self.kinf <= self.N

    def __repr__(self):
        return f"TorusGrid(d={self.d}, N={self.N})"

    def __eq__(self, other):
        return isinstance(other, TorusGrid) and (self.d, self.N) == (other.d, other.N)

    def __hash__(self):
        return hash((self.d, self.N))

    def points(self):
        """Collocation coordinates, shape ``(d, N, ..., N)``."""
        x = np.arange(self.N) / self.N
        return np.stack(np.meshgrid(*([x] * self.d), indexing="ij"))

    def check_cutoff(self, m: int):
        if m < 0:
            raise ConfigurationError(f"mode cutoff m must be >= 0, got {m}")
        if self.N < 3 * m + 1:
            raise ConfigurationError(
                f"grid N={self.N} too coarse for cutoff m={m}; need N >= 3m+1 = {3 * m + 1}"
            )

    @lru_cache(maxsize=16)
    def band_mask(self, m: int):
        return self.kinf <= m

    def forward(self, values):
        if self.d == 1:
            return np.fft.rfft(values, axis=-1, norm="forward")
        return np.fft.rfftn(values, axes=self.axes, norm="forward")

    def inverse(self, coeffs):
        if self.d == 1:
            return np.fft.irfft(coeffs, n=self.N, axis=-1, norm="forward")
        return np.fft.irfftn(coeffs, s=self.shape, axes=self.axes, norm="forward")

    def project(self, coeffs, m: int):
        return coeffs * self.band_mask(m)

    def dealias(self, coeffs):
        return coeffs * self.dealias_mask

    def grad(self, coeffs):
        """Gradient; the derivative index becomes the last component axis."""
        return np.expand_dims(coeffs, -(self.d + 1)) * self.ik

    def div(self, coeffs):
        """Contract the last component axis with the derivative index."""
        return np.sum(coeffs * self.ik, axis=-(self.d + 1))

    def lap(self, coeffs, power: int = 1):
        if power == 0:
            return coeffs
        return coeffs * self.lap_symbol ** power

    def deformation(self, coeffs):
        g = self.grad(coeffs)
        return 0.5 * (g + np.swapaxes(g, -(self.d + 1), -(self.d + 2)))

    def inner(self, a, b, rank: int = 0):
        """L2 inner product of coefficient arrays, summed over ``rank`` component axes."""
        prod = np.real(np.conj(a) * b) * self.weights
        return np.sum(prod, axis=tuple(range(-(self.d + rank), 0)))

    def mean(self, values, rank: int = 0):
        """Grid quadrature of the unit-torus integral, summed over component axes."""
        out = np.mean(values, axis=self.axes)
        if rank:
            out = out.sum(axis=tuple(range(-rank, 0)))
        return out


@lru_cache(maxsize=None)
def get_grid(d: int, N: int) -> TorusGrid:
    """Shared immutable grid for ``(d, N)``."""
    return TorusGrid(d, N)


@dataclass(frozen=True, eq=False)
class SpectralField:
    """A real field known by its coefficients, with collocation values on demand.

    ``rank`` is 0 for scalars, 1 for vectors and 2 for tensors.
    """

    grid: TorusGrid
    coeffs: np.ndarray
    rank: int = 0

    def __post_init__(self):
        tail = (self.grid.d,) * self.rank + self.grid.coeff_shape
        if self.coeffs.shape[self.coeffs.ndim - len(tail):] != tail:
            raise ConfigurationError(
                f"coefficient shape {self.coeffs.shape} does not end with {tail}"
            )

    @classmethod
    def from_values(cls, grid: TorusGrid, values, rank: int = 0) -> "SpectralField":
        values = np.asarray(values, dtype=np.float64)
        tail = (grid.d,) * rank + grid.shape
        if values.shape[values.ndim - len(tail):] != tail:
            raise ConfigurationError(f"value shape {values.shape} does not end with {tail}")
        return cls(grid, grid.forward(values), rank)

    @cached_property
    def values(self) -> np.ndarray:
        return self.grid.inverse(self.coeffs)

    @property
    def components(self) -> int:
        return self.grid.d ** self.rank

    @property
    def batch_shape(self):
        return self.coeffs.shape[: self.coeffs.ndim - self.rank - self.grid.d]

    def _new(self, coeffs, rank=None):
        return SpectralField(self.grid, coeffs, self.rank if rank is None else rank)

    def __add__(self, other):
        _check_pair(self, other)
        return self._new(self.coeffs + other.coeffs)

    def __sub__(self, other):
        _check_pair(self, other)
        return self._new(self.coeffs - other.coeffs)

    def __mul__(self, c):
        return self._new(self.coeffs * c)

    __rmul__ = __mul__


def _check_pair(f: SpectralField, g: SpectralField):
    if f.grid != g.grid:
        raise ConfigurationError(f"grid mismatch: {f.grid} vs {g.grid}")
    if f.rank != g.rank:
        raise ConfigurationError(f"component mismatch: rank {f.rank} vs rank {g.rank}")


def transform(data, grid: TorusGrid | None = None, direction: str = "forward"):
    """Forward (values to coefficients) or inverse transform.

    Accepts a raw array together with ``grid`` or a :class:`SpectralField`,
    in which case its coefficients (forward) or values (inverse) are returned.
    """
    if isinstance(data, SpectralField):
        if direction == "forward":
            return data.grid.forward(data.values)
        if direction == "inverse":
            return data.values
        raise ConfigurationError(f"unknown direction {direction!r}")
    if grid is None:
        raise ConfigurationError("a grid is required to transform a raw array")
    data = np.asarray(data)
    if direction == "forward":
        if data.shape[data.ndim - grid.d:] != grid.shape:
            raise ConfigurationError(f"array shape {data.shape} does not match grid {grid.shape}")
        return grid.forward(data)
    if direction == "inverse":
        if data.shape[data.ndim - grid.d:] != grid.coeff_shape:
            raise ConfigurationError(
                f"coefficient shape {data.shape} does not match {grid.coeff_shape}"
            )
        return grid.inverse(data)
    raise ConfigurationError(f"unknown direction {direction!r}")


def project(field: SpectralField, m: int) -> SpectralField:
    """Galerkin projection onto modes with ``max_i |k_i| <= m``."""
    field.grid.check_cutoff(m)
    return field._new(field.grid.project(field.coeffs, m))


def dealias(field: SpectralField) -> SpectralField:
    """Two-thirds rule: drop modes with ``max_i |k_i| > N/3``."""
    return field._new(field.grid.dealias(field.coeffs))


def differentiate(field: SpectralField, op: str, power: int = 1) -> SpectralField:
    """Apply ``gradient``, ``divergence``, ``laplacian``, ``laplacian_power`` or ``deformation``."""
    g = field.grid
    if op == "gradient":
        return field._new(g.grad(field.coeffs), field.rank + 1)
    if op == "divergence":
        if field.rank < 1:
            raise ConfigurationError("divergence needs a vector or tensor field")
        return field._new(g.div(field.coeffs), field.rank - 1)
    if op == "laplacian":
        return field._new(g.lap(field.coeffs))
    if op == "laplacian_power":
        if power < 0:
            raise ConfigurationError("laplacian power must be >= 0")
        return field._new(g.lap(field.coeffs, power))
    if op == "deformation":
        if field.rank != 1:
            raise ConfigurationError("deformation needs a vector field")
        return field._new(g.deformation(field.coeffs), 2)
    raise ConfigurationError(f"unknown differential operator {op!r}")


def inner_product(f: SpectralField, g: SpectralField):
    """``integral of f.g`` over the unit torus (exact for band-limited products)."""
    _check_pair(f, g)
    return f.grid.inner(f.coeffs, g.coeffs, f.rank)


def multiply(f: SpectralField, g: SpectralField, dealiased: bool = True) -> SpectralField:
    """Pointwise product of a scalar with any field, evaluated on the grid."""
    if f.grid != g.grid:
        raise ConfigurationError(f"grid mismatch: {f.grid} vs {g.grid}")
    if f.rank != 0:
        raise ConfigurationError("left factor of multiply must be scalar")
    fv = f.values
    for _ in range(g.rank):
        fv = np.expand_dims(fv, -(f.grid.d + 1))
    c = f.grid.forward(fv * g.values)
    if dealiased:
        c = f.grid.dealias(c)
    return g._new(c)


def parseval_sum(field: SpectralField):
    """Sum of squared coefficient magnitudes over the full (two-sided) spectrum."""
    return field.grid.inner(field.coeffs, field.coeffs, field.rank)


def wave_vectors(d: int, m: int):
    """Half-space wave vectors with ``|k|_inf <= m``, ordered by sup norm then lexicographically.

    Only one of each ``+-k`` pair is listed (first nonzero entry positive); zero comes first.
    """
    import itertools

    out = []
    for k in itertools.product(range(-m, m + 1), repeat=d):
        nz = [x for x in k if x != 0]
        if nz and nz[0] < 0:
            continue
        out.append(WaveVector(tuple(int(x) for x in k)))
    out.sort(key=lambda w: (w.sup, w.k))
    return out
