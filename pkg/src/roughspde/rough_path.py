"""Rough drivers on dyadic grids.

A driver stores, for every consecutive grid cell ``[t_k, t_{k+1}]``, the
increment ``dX_k`` and the second-level sum ``A_k`` with the index
convention ``A^{ij} = int (X^i_r - X^i_s) dX^j_r``.  Second-level values on
arbitrary grid pairs are obtained by Chen composition from a cumulative
prefix, so Chen's relation

    XX_{t,s} = XX_{t,u} + XX_{u,s} + X_{u,s} (x) X_{t,u}

holds to rounding by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.ndimage import maximum_filter1d, minimum_filter1d

from .errors import DomainError
from .kernels import block_areas
from .spectral_space import TimeGrid, holder_seminorm

__all__ = [
    "FinePath",
    "RoughDriver",
    "GeometricDecomposition",
    "lift_canonical",
    "lift_brownian",
    "with_bracket",
    "bracket",
    "geometric_decompose",
    "translate",
    "roughness_modulus",
    "rough_metric",
    "chen_residual_max",
    "geometric_residual_max",
    "brownian_increments",
    "linear_weighted_area",
    "weighted_block_areas",
    "save_driver",
    "load_driver",
]

CONVENTIONS = ("geometric", "ito", "strat", "custom")
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class FinePath:
    """Sub-grid increments used by Young cross terms and reference solvers."""

    inc: np.ndarray
    depth: int

    def __post_init__(self):
        inc = np.ascontiguousarray(self.inc, dtype=float)
        if inc.ndim != 2 or inc.shape[0] != 2**self.depth:
            raise DomainError("fine increments must have shape (2**depth, d)")
        object.__setattr__(self, "inc", inc)

    def coarsen(self, depth: int) -> np.ndarray:
        if depth > self.depth:
            raise DomainError("requested depth exceeds the fine depth")
        r = 2 ** (self.depth - depth)
        return self.inc.reshape(-1, r, self.inc.shape[1]).sum(axis=1)


@dataclass(frozen=True, eq=False)
class RoughDriver:
    """Level-one increments and level-two sums of a ``d``-dimensional path."""

    grid: TimeGrid
    inc: np.ndarray
    area: np.ndarray
    gamma: float = 0.45
    convention: str = "custom"
    seed: int | None = None
    fine: FinePath | None = None

    def __post_init__(self):
        inc = np.ascontiguousarray(self.inc, dtype=float)
        area = np.ascontiguousarray(self.area, dtype=float)
        M = self.grid.n_intervals
        if inc.ndim != 2 or inc.shape[0] != M:
            raise DomainError(f"increments need shape ({M}, d), got {inc.shape}")
        d = inc.shape[1]
        if area.shape != (M, d, d):
            raise DomainError(f"areas need shape ({M}, {d}, {d}), got {area.shape}")
        if not 1.0 / 3.0 < self.gamma <= 1.0:
            raise DomainError("nominal Hölder exponent must lie in (1/3, 1]")
        if self.convention not in CONVENTIONS:
            raise DomainError(f"unknown convention {self.convention!r}")
        if self.fine is not None and self.fine.depth < self.grid.level:
            raise DomainError("fine path is coarser than the grid")
        object.__setattr__(self, "inc", inc)
        object.__setattr__(self, "area", area)

    @property
    def d(self) -> int:
        return self.inc.shape[1]

    @property
    def n_intervals(self) -> int:
        return self.grid.n_intervals

    @cached_property
    def path(self) -> np.ndarray:
        """``X_{t_k, t_0}`` for every grid point."""
        out = np.zeros((self.n_intervals + 1, self.d))
        np.cumsum(self.inc, axis=0, out=out[1:])
        return out

    @cached_property
    def cumulative_area(self) -> np.ndarray:
        """``XX_{t_k, t_0}`` built by Chen's relation cell by cell."""
        X = self.path
        out = np.zeros((self.n_intervals + 1, self.d, self.d))
        steps = self.area + X[:-1, :, None] * self.inc[:, None, :]
        np.cumsum(steps, axis=0, out=out[1:])
        return out

    @cached_property
    def weighted_inc(self) -> np.ndarray:
        """``rho_k = int (r - t_k) / h dX_r`` over each cell.

        Midpoint sums on the fine path, which are exact for its piecewise
        linear interpolation; ``dX / 2`` when no fine path is stored.
        """
        if self.fine is None:
            return 0.5 * self.inc
        r = 2 ** (self.fine.depth - self.grid.level)
        w = (np.arange(r) + 0.5) / r
        return np.einsum("ckd,k->cd", self.fine.inc.reshape(self.n_intervals, r, self.d), w)

    @cached_property
    def weighted_area(self) -> np.ndarray:
        """``omega_k = int (r - t_k) / h (X_r - X_{t_k}) (x) dX_r`` over each cell.

        Exact for the piecewise linear interpolation of the fine path;
        without one, the value ``2/3`` of the geometric part of the area
        that a linear path would give.
        """
        if self.fine is None:
            return linear_weighted_area(self.inc, self.area)
        r = 2 ** (self.fine.depth - self.grid.level)
        return weighted_block_areas(self.fine.inc, r)

    def increment(self, t_idx, s_idx) -> np.ndarray:
        X = self.path
        return X[t_idx] - X[s_idx]

    def area_between(self, t_idx, s_idx) -> np.ndarray:
        """``XX_{t,s}`` for grid indices, via Chen composition."""
        t_idx = np.asarray(t_idx)
        s_idx = np.asarray(s_idx)
        X = self.path
        A = self.cumulative_area
        Xs = X[s_idx]
        Xts = X[t_idx] - Xs
        return A[t_idx] - A[s_idx] - Xs[..., :, None] * Xts[..., None, :]

    def coarsen(self, level: int) -> "RoughDriver":
        """The same rough path seen on a coarser dyadic grid."""
        if level == self.grid.level:
            return self
        grid = self.grid.coarsen(level)
        r = 2 ** (self.grid.level - level)
        ends = np.arange(0, self.n_intervals + 1, r)
        inc = self.increment(ends[1:], ends[:-1])
        area = self.area_between(ends[1:], ends[:-1])
        return RoughDriver(grid, inc, area, self.gamma, self.convention, self.seed, self.fine)

    def holder_norms(self, gamma: float | None = None) -> tuple[float, float]:
        g = self.gamma if gamma is None else gamma
        a = holder_seminorm(self.increment, self.grid, g)
        b = holder_seminorm(self.area_between, self.grid, min(2 * g, 1.0))
        return a, b

    def with_areas(self, area: np.ndarray, convention: str | None = None) -> "RoughDriver":
        return replace(self, area=area, convention=convention or self.convention)

    def scaled(self, c: float) -> "RoughDriver":
        """Dilation ``(cX, c^2 XX)``."""
        fine = None if self.fine is None else FinePath(c * self.fine.inc, self.fine.depth)
        return replace(self, inc=c * self.inc, area=c * c * self.area, fine=fine)

    # serialization -----------------------------------------------------
    def to_record(self) -> dict:
        rec = {
            "schema": "roughspde.driver",
            "version": SCHEMA_VERSION,
            "grid": {"t_start": self.grid.t_start, "t_end": self.grid.t_end, "level": self.grid.level},
            "d": self.d,
            "gamma": self.gamma,
            "convention": self.convention,
            "seed": self.seed,
            "inc": self.inc.tolist(),
            "area": self.area.tolist(),
        }
        if self.fine is not None:
            rec["fine"] = {"depth": self.fine.depth, "inc": self.fine.inc.tolist()}
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "RoughDriver":
        if rec.get("schema") != "roughspde.driver":
            raise DomainError("record is not a serialized driver")
        if int(rec.get("version", -1)) > SCHEMA_VERSION:
            raise DomainError("driver record from a newer schema version")
        g = rec["grid"]
        grid = TimeGrid(float(g["t_start"]), float(g["t_end"]), int(g["level"]))
        fine = None
        if rec.get("fine") is not None:
            fine = FinePath(np.asarray(rec["fine"]["inc"], dtype=float), int(rec["fine"]["depth"]))
        d = int(rec["d"])
        inc = np.asarray(rec["inc"], dtype=float).reshape(grid.n_intervals, d)
        area = np.asarray(rec["area"], dtype=float).reshape(grid.n_intervals, d, d)
        return cls(grid, inc, area, float(rec["gamma"]), rec["convention"], rec.get("seed"), fine)


def save_driver(Z: RoughDriver, path) -> Path:
    """Write a driver as JSON (``.json``) or as a numpy archive (``.npz``)."""
    path = Path(path)
    if path.suffix == ".npz":
        extra = {}
        if Z.fine is not None:
            extra = {"fine_inc": Z.fine.inc, "fine_depth": np.array(Z.fine.depth)}
        meta = Z.to_record()
        for key in ("inc", "area", "fine"):
            meta.pop(key, None)
        np.savez(path, inc=Z.inc, area=Z.area, meta=np.array(json.dumps(meta)), **extra)
    else:
        # floats round-trip exactly through repr-based JSON encoding
        path.write_text(json.dumps(Z.to_record()))
    return path


def load_driver(path) -> RoughDriver:
    path = Path(path)
    if path.suffix == ".npz":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            meta["inc"] = data["inc"]
            meta["area"] = data["area"]
            if "fine_inc" in data:
                meta["fine"] = {"inc": data["fine_inc"], "depth": int(data["fine_depth"])}
        return RoughDriver.from_record(meta)
    return RoughDriver.from_record(json.loads(path.read_text()))


# ----------------------------------------------------------------------
# constructors


def linear_weighted_area(inc: np.ndarray, area: np.ndarray) -> np.ndarray:
    """``2/3`` of ``Antisym(XX) + dX (x) dX / 2`` cell by cell."""
    anti = 0.5 * (area - np.swapaxes(area, -1, -2))
    return (2.0 / 3.0) * (anti + 0.5 * inc[:, :, None] * inc[:, None, :])


def weighted_block_areas(fine_inc: np.ndarray, r: int) -> np.ndarray:
    """``int (s/h) X_{s,0} (x) dX_s`` over blocks of ``r`` linear fine steps."""
    Mf, d = fine_inc.shape
    D = fine_inc.reshape(Mf // r, r, d)
    P = np.cumsum(D, axis=1) - D
    k = np.arange(r, dtype=float)[None, :, None]
    left = (k * (P + 0.5 * D) + 0.5 * P + D / 3.0) / r
    return np.einsum("cki,ckj->cij", left, D)


def _sample_path(path, grid: TimeGrid, depth: int) -> np.ndarray:
    t = TimeGrid(grid.t_start, grid.t_end, depth).points
    if callable(path):
        vals = np.asarray(path(t), dtype=float)
    else:
        vals = np.asarray(path, dtype=float)
    if vals.ndim == 1:
        vals = vals[:, None]
    if vals.shape[0] != t.size:
        raise DomainError(f"path samples must have {t.size} rows for depth {depth}")
    return vals


def lift_canonical(path, grid: TimeGrid, quadrature_depth: int, gamma: float = 0.5) -> RoughDriver:
    """Canonical lift of a smooth path.

    ``path`` is either a callable ``t -> (len(t), d)`` or an array of samples
    on the dyadic sub-grid of depth ``quadrature_depth``.  The level-two
    sums are trapezoid sums on that sub-grid, which makes the lift exactly
    geometric: summation by parts gives ``2 Sym(A) = dX (x) dX``.
    """
    if quadrature_depth < grid.level:
        raise DomainError("quadrature depth must be at least the grid level")
    vals = _sample_path(path, grid, quadrature_depth)
    fine_inc = np.ascontiguousarray(np.diff(vals, axis=0))
    r = 2 ** (quadrature_depth - grid.level)
    inc, area = block_areas(fine_inc, r, 0.5)
    return RoughDriver(grid, inc, area, gamma, "geometric", None, FinePath(fine_inc, quadrature_depth))


def brownian_increments(seed, d: int, t_start: float, t_end: float, depth: int) -> np.ndarray:
    """Gaussian increments on the dyadic grid of given depth.

    The stream depends only on ``(seed, d, depth)`` so that drivers at
    different coarse levels share one underlying path.
    """
    rng = np.random.default_rng(seed)
    dt = (t_end - t_start) / 2**depth
    return rng.standard_normal((2**depth, d)) * np.sqrt(dt)


def lift_brownian(seed, d: int, grid: TimeGrid, convention: str = "strat", fine_depth: int | None = None,
                  gamma: float = 0.45) -> RoughDriver:
    """Brownian rough path from exact Gaussian increments on a fine grid.

    The Stratonovich sums are trapezoid sums over the fine sub-grid of each
    cell; the Itô lift is ``Strat - (t - s)/2 id``.  Its antisymmetric part
    equals the left-point Riemann sum, and its symmetric part is
    ``(dX (x) dX - (t - s) id) / 2``.
    """
    if convention not in ("ito", "strat"):
        raise DomainError("Brownian convention must be 'ito' or 'strat'")
    if fine_depth is None:
        fine_depth = grid.level + 4
    if fine_depth < grid.level + 4:
        raise DomainError("fine_depth must be at least grid level + 4")
    fine_inc = brownian_increments(seed, d, grid.t_start, grid.t_end, fine_depth)
    r = 2 ** (fine_depth - grid.level)
    inc, area = block_areas(fine_inc, r, 0.5)
    if convention == "ito":
        area = area - 0.5 * grid.dt * np.eye(d)[None]
    return RoughDriver(grid, inc, area, gamma, convention, None if seed is None else int(seed),
                       FinePath(fine_inc, fine_depth))


def with_bracket(Z: RoughDriver, f: np.ndarray, convention: str = "custom") -> RoughDriver:
    """Add ``delta f`` to the level-two sums: ``XX + delta f``.

    Chen's relation is preserved for any ``f`` on the grid.
    """
    f = np.asarray(f, dtype=float)
    if f.shape != (Z.n_intervals + 1, Z.d, Z.d):
        raise DomainError("f must be a grid path of d x d matrices")
    return replace(Z, area=Z.area + np.diff(f, axis=0), convention=convention)


# ----------------------------------------------------------------------
# analysis


def _sym(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def bracket(Z: RoughDriver, t_idx=None) -> np.ndarray:
    """``[X]_t = X_{t,0} (x) X_{t,0} - 2 Sym(XX_{t,0})`` at grid indices."""
    if t_idx is None:
        t_idx = np.arange(Z.n_intervals + 1)
    t_idx = np.asarray(t_idx)
    X = Z.path[t_idx]
    A = Z.cumulative_area[t_idx]
    return X[..., :, None] * X[..., None, :] - 2.0 * _sym(A)


@dataclass(frozen=True, eq=False)
class GeometricDecomposition:
    geometric_part: RoughDriver
    f: np.ndarray

    def reassemble(self) -> RoughDriver:
        return with_bracket(self.geometric_part, self.f, convention="custom")


def geometric_decompose(Z: RoughDriver) -> GeometricDecomposition:
    """Split ``XX = XX^g + delta f`` with ``f = -[X]/2`` and ``f_0 = 0``."""
    f = -0.5 * bracket(Z)
    g_area = Z.area - np.diff(f, axis=0)
    return GeometricDecomposition(replace(Z, area=g_area, convention="geometric"), f)


def _block_cross(a_inc: np.ndarray, b_inc: np.ndarray, r: int) -> np.ndarray:
    """Trapezoid sums ``int (a_r - a_s) (x) db_r`` over blocks of ``r`` cells."""
    Mf, d = a_inc.shape
    A = a_inc.reshape(Mf // r, r, d)
    B = b_inc.reshape(Mf // r, r, d)
    run = np.cumsum(A, axis=1) - A
    return np.einsum("cki,ckj->cij", run + 0.5 * A, B)


def translate(Z: RoughDriver, h) -> RoughDriver:
    """Cameron–Martin style translation ``T_h Z``.

    ``h`` is a callable of time or an array of samples on the fine grid (or
    on the coarse grid when the driver carries no fine path).  The added
    level-two terms are the trapezoid Young sums

        int dh (x) dX + int dX (x) dh + int dh (x) dh

    on the finest available sub-grid, which makes translation exactly
    invertible: ``T_{-h} T_h Z = Z`` up to rounding.
    """
    if Z.fine is not None:
        depth, fine_inc = Z.fine.depth, Z.fine.inc
    else:
        depth, fine_inc = Z.grid.level, Z.inc
    hv = _sample_path(h, Z.grid, depth)
    if hv.shape[1] != Z.d:
        raise DomainError("translation direction has the wrong dimension")
    dh = np.ascontiguousarray(np.diff(hv, axis=0))
    r = 2 ** (depth - Z.grid.level)
    inc_h = dh.reshape(-1, r, Z.d).sum(axis=1)
    extra = _block_cross(dh, fine_inc, r) + _block_cross(fine_inc, dh, r) + _block_cross(dh, dh, r)
    fine = None if Z.fine is None else FinePath(fine_inc + dh, depth)
    return replace(Z, inc=Z.inc + inc_h, area=Z.area + extra, fine=fine)


def chen_residual_max(Z: RoughDriver, max_triples: int = 200000, seed: int = 0) -> float:
    """Largest Chen defect over grid triples (all of them when affordable)."""
    M = Z.n_intervals
    n_all = (M + 1) * M * (M - 1) // 6
    if n_all <= max_triples:
        i, j, k = np.array([(a, b, c) for a in range(M + 1) for b in range(a + 1, M + 1)
                            for c in range(b + 1, M + 1)], dtype=int).T if M >= 2 else (np.zeros(0, int),) * 3
    else:
        rng = np.random.default_rng(seed)
        pts = np.sort(rng.integers(0, M + 1, size=(max_triples, 3)), axis=1)
        keep = (pts[:, 0] < pts[:, 1]) & (pts[:, 1] < pts[:, 2])
        i, j, k = pts[keep].T
    if i.size == 0:
        return 0.0
    s, u, t = i, j, k
    lhs = Z.area_between(t, s) - Z.area_between(t, u) - Z.area_between(u, s)
    rhs = Z.increment(u, s)[:, :, None] * Z.increment(t, u)[:, None, :]
    return float(np.max(np.abs(lhs - rhs)))


def geometric_residual_max(Z: RoughDriver) -> float:
    """``max |2 Sym(XX_{t,s}) - X_{t,s} (x) X_{t,s}|`` over consecutive cells."""
    return float(np.max(np.abs(2 * _sym(Z.area) - Z.inc[:, :, None] * Z.inc[:, None, :]))) if Z.n_intervals else 0.0


def rough_metric(Z1: RoughDriver, Z2: RoughDriver, gamma: float | None = None) -> float:
    """Inhomogeneous rough-path distance ``|X - Y|_gamma + |XX - YY|_{2 gamma}``."""
    if Z1.grid != Z2.grid or Z1.d != Z2.d:
        raise DomainError("drivers must share grid and dimension")
    g = Z1.gamma if gamma is None else gamma

    def d1(t, s):
        return Z1.increment(t, s) - Z2.increment(t, s)

    def d2(t, s):
        return Z1.area_between(t, s) - Z2.area_between(t, s)

    return holder_seminorm(d1, Z1.grid, g) + holder_seminorm(d2, Z1.grid, min(2 * g, 1.0))


def _directions(d: int, samples: int, seed: int) -> np.ndarray:
    if d == 1:
        return np.ones((1, 1))
    if d == 2:
        ang = np.pi * np.arange(samples) / samples
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((samples, d))
    return z / np.linalg.norm(z, axis=1, keepdims=True)


def roughness_modulus(Z: RoughDriver, theta: float, sphere_samples: int = 64, seed: int = 0) -> float:
    """Discrete Hölder-roughness modulus.

    Minimum over grid times ``s``, dyadic scales ``eps <= T/2`` and a mesh of
    unit directions ``z`` of ``max_{|t-s|<=eps} |<z, X_{t,s}>| / eps^theta``.
    The direction mesh is an angular grid on the half circle when ``d = 2``
    and seeded random directions when ``d >= 3``.
    """
    if not 0 < theta < 1:
        raise DomainError("theta must lie in (0, 1)")
    P = Z.path @ _directions(Z.d, sphere_samples, seed).T
    best = np.inf
    M = Z.n_intervals
    w = 1
    while w <= M // 2:
        size = 2 * w + 1
        hi = maximum_filter1d(P, size=size, axis=0, mode="nearest")
        lo = minimum_filter1d(P, size=size, axis=0, mode="nearest")
        osc = np.maximum(hi - P, P - lo)
        eps = w * Z.grid.dt
        best = min(best, float(np.min(osc)) / eps**theta)
        w *= 2
    return 0.0 if not np.isfinite(best) else best
