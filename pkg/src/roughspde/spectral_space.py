"""Truncated Hilbert space on the torus with a diagonal analytic semigroup.

Coefficients are real and expressed in the orthonormal trigonometric basis
(with respect to the normalised measure ``dx / 2 pi``)::

    e_0 = 1,   e_{2k-1} = sqrt(2) cos(k x),   e_{2k} = sqrt(2) sin(k x),

for ``k = 1 .. K_max``.  The generator is ``L = Laplacian - m`` so that the
eigenvalue attached to both trigonometric components of frequency ``k`` is
``-(k^2 + m)``.  Arrays of coefficients carry the mode index on the last
axis; every operation below broadcasts over leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np

from .errors import AliasingError, DomainError

__all__ = [
    "ModeBasis",
    "SpectralField",
    "TimeGrid",
    "apply_semigroup",
    "halpha_norm",
    "reduced_increment",
    "plain_increment",
    "grid_pairs",
    "holder_seminorm",
    "exp_weights",
]


def _phi1(z: np.ndarray) -> np.ndarray:
    """``(e^z - 1) / z`` with the removable singularity handled."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-5
    zs = z[small]
    out[small] = 1.0 + zs / 2.0 + zs * zs / 6.0
    zl = z[~small]
    out[~small] = np.expm1(zl) / zl
    return out


def _phi2(z: np.ndarray) -> np.ndarray:
    """``(e^z - 1 - z) / z^2``."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    small = np.abs(z) < 1e-3
    zs = z[small]
    out[small] = 0.5 + zs / 6.0 + zs * zs / 24.0 + zs**3 / 120.0
    zl = z[~small]
    out[~small] = (np.expm1(zl) - zl) / (zl * zl)
    return out


@dataclass(frozen=True)
class ModeBasis:
    """Real trigonometric basis truncated at frequency ``K_max``.

    Parameters
    ----------
    K_max : int
        Largest frequency kept.  ``K_max = 0`` gives the one-dimensional
        space spanned by the constant mode.
    mass : float
        Positive shift ``m`` in ``L = Laplacian - m``.
    padding : int
        Collocation oversampling factor.  The grid has
        ``padding * (2 K_max + 1)`` points.
    """

    K_max: int
    mass: float = 1.0
    padding: int = 2

    def __post_init__(self):
        if int(self.K_max) != self.K_max or self.K_max < 0:
            raise DomainError("K_max must be a non-negative integer")
        if not self.mass > 0:
            raise DomainError("mass must be positive")
        if self.padding < 1:
            raise DomainError("padding must be at least 1")

    @property
    def size(self) -> int:
        return 2 * self.K_max + 1

    @cached_property
    def frequencies(self) -> np.ndarray:
        k = np.zeros(self.size, dtype=int)
        k[1::2] = np.arange(1, self.K_max + 1)
        k[2::2] = np.arange(1, self.K_max + 1)
        return k

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        return -(self.frequencies.astype(float) ** 2 + self.mass)

    @property
    def n_colloc(self) -> int:
        return self.padding * self.size

    @cached_property
    def nodes(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n_colloc) / self.n_colloc

    # ------------------------------------------------------------------
    # operators
    def semigroup_factors(self, t: float) -> np.ndarray:
        if t < 0:
            raise DomainError(f"semigroup time must be non-negative, got {t}")
        return np.exp(self.eigenvalues * t)

    def apply_semigroup(self, coeffs: np.ndarray, t: float) -> np.ndarray:
        return np.asarray(coeffs) * self.semigroup_factors(t)

    def apply_generator(self, coeffs: np.ndarray) -> np.ndarray:
        return np.asarray(coeffs) * self.eigenvalues

    def power(self, coeffs: np.ndarray, alpha: float) -> np.ndarray:
        """Apply ``(-L)^alpha``."""
        return np.asarray(coeffs) * np.abs(self.eigenvalues) ** alpha

    def norm(self, coeffs: np.ndarray, alpha: float = 0.0) -> np.ndarray:
        w = np.abs(self.eigenvalues) ** (2.0 * alpha)
        c = np.asarray(coeffs, dtype=float)
        return np.sqrt(np.sum(w * c * c, axis=-1))

    def inner(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return np.sum(np.asarray(a) * np.asarray(b), axis=-1)

    # ------------------------------------------------------------------
    # collocation
    def to_collocation(self, coeffs: np.ndarray, n_points: int | None = None) -> np.ndarray:
        """Point values of the field on the uniform collocation grid."""
        N = self.n_colloc if n_points is None else int(n_points)
        if N < self.size:
            raise AliasingError(f"collocation grid of {N} points cannot carry {self.size} modes")
        c = np.asarray(coeffs, dtype=float)
        if c.shape[-1] != self.size:
            raise DomainError(f"expected {self.size} coefficients, got {c.shape[-1]}")
        K = self.K_max
        spec = np.zeros(c.shape[:-1] + (N // 2 + 1,), dtype=complex)
        spec[..., 0] = N * c[..., 0]
        if K:
            spec[..., 1 : K + 1] = (N / np.sqrt(2.0)) * (c[..., 1::2] - 1j * c[..., 2::2])
        return np.fft.irfft(spec, n=N, axis=-1)

    def from_collocation(self, values: np.ndarray) -> np.ndarray:
        """Least-squares projection of point values onto the kept modes."""
        v = np.asarray(values, dtype=float)
        N = v.shape[-1]
        if N < self.size:
            raise AliasingError(f"collocation grid of {N} points cannot carry {self.size} modes")
        K = self.K_max
        spec = np.fft.rfft(v, axis=-1)
        out = np.empty(v.shape[:-1] + (self.size,))
        out[..., 0] = spec[..., 0].real / N
        if K:
            sk = spec[..., 1 : K + 1]
            out[..., 1::2] = np.sqrt(2.0) * sk.real / N
            out[..., 2::2] = -np.sqrt(2.0) * sk.imag / N
        return out

    def from_function(self, fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Project a ``2 pi``-periodic function given on the grid points."""
        return self.from_collocation(fn(self.nodes))

    def multiply(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Pointwise product projected back onto the basis."""
        return self.from_collocation(self.to_collocation(a) * self.to_collocation(b))

    def mode(self, index: int) -> np.ndarray:
        e = np.zeros(self.size)
        e[index] = 1.0
        return e

    def cos_index(self, k: int) -> int:
        if not 1 <= k <= self.K_max:
            raise DomainError(f"frequency {k} outside 1..{self.K_max}")
        return 2 * k - 1

    def sin_index(self, k: int) -> int:
        return self.cos_index(k) + 1

    def field(self, coeffs) -> "SpectralField":
        return SpectralField(np.asarray(coeffs, dtype=float), self)


@dataclass(frozen=True)
class SpectralField:
    """An element of the truncated space: coefficients plus their basis."""

    coeffs: np.ndarray
    basis: ModeBasis

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (self.basis.size,):
            raise DomainError(f"field needs {self.basis.size} coefficients, got shape {c.shape}")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    def norm(self, alpha: float = 0.0) -> float:
        return float(self.basis.norm(self.coeffs, alpha))

    def semigroup(self, t: float) -> "SpectralField":
        return SpectralField(self.basis.apply_semigroup(self.coeffs, t), self.basis)

    def to_collocation(self) -> np.ndarray:
        return self.basis.to_collocation(self.coeffs)

    @classmethod
    def from_collocation(cls, values: np.ndarray, basis: ModeBasis) -> "SpectralField":
        return cls(basis.from_collocation(values), basis)

    def __add__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.coeffs + other.coeffs, self.basis)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.coeffs - other.coeffs, self.basis)

    def __mul__(self, c: float) -> "SpectralField":
        return SpectralField(self.coeffs * c, self.basis)

    __rmul__ = __mul__


def _coeffs(u) -> np.ndarray:
    return u.coeffs if isinstance(u, SpectralField) else np.asarray(u, dtype=float)


def apply_semigroup(u, t: float, basis: ModeBasis | None = None):
    """``S_t u``; returns the same kind of object it was given."""
    if isinstance(u, SpectralField):
        return u.semigroup(t)
    if basis is None:
        raise DomainError("a basis is required for raw coefficient arrays")
    return basis.apply_semigroup(u, t)


def halpha_norm(u, alpha: float, basis: ModeBasis | None = None):
    if isinstance(u, SpectralField):
        return u.norm(alpha)
    if basis is None:
        raise DomainError("a basis is required for raw coefficient arrays")
    return basis.norm(u, alpha)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform dyadic grid ``t_i = t_start + i 2^-level (t_end - t_start)``."""

    t_start: float
    t_end: float
    level: int

    def __post_init__(self):
        if not self.t_end > self.t_start:
            raise DomainError("grid needs t_end > t_start")
        if int(self.level) != self.level or self.level < 0:
            raise DomainError("grid level must be a non-negative integer")

    @property
    def n_intervals(self) -> int:
        return 2**self.level

    @property
    def dt(self) -> float:
        return (self.t_end - self.t_start) / self.n_intervals

    @property
    def length(self) -> float:
        return self.t_end - self.t_start

    @cached_property
    def points(self) -> np.ndarray:
        return self.t_start + self.dt * np.arange(self.n_intervals + 1)

    def refine(self, by: int = 1) -> "TimeGrid":
        return TimeGrid(self.t_start, self.t_end, self.level + by)

    def coarsen(self, level: int) -> "TimeGrid":
        if level > self.level:
            raise DomainError("cannot coarsen to a finer level")
        return TimeGrid(self.t_start, self.t_end, level)

    def index_of(self, t: float) -> int:
        x = (t - self.t_start) / self.dt
        i = int(round(x))
        if abs(x - i) > 1e-9 or not 0 <= i <= self.n_intervals:
            raise DomainError(f"time {t} is not a grid point")
        return i


def plain_increment(path: np.ndarray, t_idx, s_idx) -> np.ndarray:
    """``f_t - f_s`` for a path stored with time on axis 0."""
    return path[t_idx] - path[s_idx]


def reduced_increment(path: np.ndarray, grid: TimeGrid, basis: ModeBasis, t_idx, s_idx) -> np.ndarray:
    """``f_t - S_{t-s} f_s`` for index arrays ``t_idx >= s_idx``."""
    t_idx = np.asarray(t_idx)
    s_idx = np.asarray(s_idx)
    if np.any(t_idx < s_idx):
        raise DomainError("reduced increment needs s <= t")
    lag = (t_idx - s_idx) * grid.dt
    fac = np.exp(np.multiply.outer(lag, basis.eigenvalues))
    fs = path[s_idx]
    # broadcast the factor across any value axes between time and modes
    extra = fs.ndim - fac.ndim
    fac = fac.reshape(fac.shape[:-1] + (1,) * extra + fac.shape[-1:])
    return path[t_idx] - fac * fs


def reduced_second_increment(g: Callable, grid: TimeGrid, basis: ModeBasis, t_idx, u_idx, s_idx):
    """``g_{t,s} - g_{t,u} - S_{t-u} g_{u,s}`` for a two-parameter callable."""
    lag = (np.asarray(t_idx) - np.asarray(u_idx)) * grid.dt
    fac = np.exp(np.multiply.outer(lag, basis.eigenvalues))
    gus = g(u_idx, s_idx)
    extra = gus.ndim - fac.ndim
    fac = fac.reshape(fac.shape[:-1] + (1,) * extra + fac.shape[-1:])
    return g(t_idx, s_idx) - g(t_idx, u_idx) - fac * gus


_FULL_PAIR_LEVEL = 8


def grid_pairs(level: int, full_level: int = _FULL_PAIR_LEVEL) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs ``(t, s)`` with ``s < t`` used for Hölder suprema.

    All pairs are returned up to ``full_level``.  Above it only lags from a
    geometric set (powers of two and their 3/2 multiples) are kept, which
    is within a constant factor of the full supremum.
    """
    M = 2**level
    if level <= full_level:
        s, t = np.triu_indices(M + 1, k=1)
        return t, s
    lags = set()
    p = 1
    while p <= M:
        lags.add(p)
        if 3 * p // 2 <= M:
            lags.add(3 * p // 2)
        p *= 2
    ts, ss = [], []
    for lag in sorted(lags):
        s = np.arange(0, M + 1 - lag)
        ss.append(s)
        ts.append(s + lag)
    return np.concatenate(ts), np.concatenate(ss)


def holder_seminorm(
    g: Callable[[np.ndarray, np.ndarray], np.ndarray],
    grid: TimeGrid,
    gamma: float,
    alpha: float = 0.0,
    basis: ModeBasis | None = None,
    chunk: int = 65536,
) -> float:
    """``max ||g_{t,s}|| / |t-s|^gamma`` over grid pairs.

    ``g(t_idx, s_idx)`` must return the two-parameter quantity for arrays of
    indices, with pairs on axis 0.  With a basis the norm is the
    ``H_alpha`` norm over the last axis (all remaining axes are folded in);
    without one it is the Euclidean norm of everything past axis 0.
    """
    if grid.n_intervals < 1:
        raise DomainError("empty grid")
    if not 0 < gamma <= 1:
        raise DomainError("Hölder exponent must lie in (0, 1]")
    t_all, s_all = grid_pairs(grid.level)
    best = 0.0
    for lo in range(0, t_all.size, chunk):
        t_idx = t_all[lo : lo + chunk]
        s_idx = s_all[lo : lo + chunk]
        val = np.asarray(g(t_idx, s_idx), dtype=float)
        if basis is not None:
            w = np.abs(basis.eigenvalues) ** (2.0 * alpha)
            sq = (val * val * w).reshape(val.shape[0], -1).sum(axis=1)
        else:
            sq = (val * val).reshape(val.shape[0], -1).sum(axis=1)
        ratio = np.sqrt(sq) / ((t_idx - s_idx) * grid.dt) ** gamma
        if ratio.size:
            best = max(best, float(np.max(ratio)))
    return best


def exp_weights(basis: ModeBasis, h: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exponential trapezoid weights for one cell of length ``h``.

    Returns ``(decay, w_left, w_right)`` such that
    ``int_0^h S_{h-r} N_r dr ~ w_left N_0 + w_right N_h`` for ``N`` linear
    in ``r``.  For integrals ``int_0^h S_r N_r dr`` the roles of the two
    weights swap.
    """
    z = basis.eigenvalues * h
    p1 = _phi1(z)
    p2 = _phi2(z)
    return np.exp(z), h * (p1 - p2), h * p2
