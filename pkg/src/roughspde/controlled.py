"""Controlled paths, sewing, and rough / Young integration.

Storage conventions
-------------------
A controlled path lives on a :class:`TimeGrid` with time on axis 0.
``values`` has shape ``(M+1, *vshape)`` and the Gubinelli derivative
``deriv`` has shape ``(M+1, d, *vshape)`` where axis 1 is the noise
direction.  An *integrand* against ``dX`` carries the contracted slot as
the first value axis, so ``vshape = (d, *rest)``; the germ on a cell is

    Xi = sum_j Y^j dX^j + sum_{ij} Y'^{i}[j] XX^{ij}.

In semigroup mode the last value axis holds spectral coefficients and the
semigroup acts on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NotControlledError
from .kernels import semigroup_scan
from .rough_path import RoughDriver, linear_weighted_area
from .spectral_space import ModeBasis, TimeGrid, holder_seminorm

__all__ = [
    "ControlledPath",
    "JointlyControlledPath",
    "forward_germ",
    "backward_germ",
    "sewing_recursion",
    "rough_convolution",
    "rough_convolution_path",
    "semigroup_convolution_path",
    "endpoint_germ_forward",
    "endpoint_germ_backward",
    "bracket_part",
    "backward_convolution_path",
    "rough_integral_flat",
    "rough_integral_flat_path",
    "sewing_local_errors",
    "young_integral",
    "young_integral_path",
    "controlled_distance",
    "pair_forward_backward",
    "NOT_CONTROLLED_CAP",
]

NOT_CONTROLLED_CAP = 1e6


def _semigroup_factor(basis: ModeBasis, lag, ndim: int) -> np.ndarray:
    """``exp(lambda * lag)`` shaped to broadcast against ``(len(lag), ..., n)``."""
    fac = np.exp(np.multiply.outer(np.asarray(lag, dtype=float), basis.eigenvalues))
    extra = ndim - fac.ndim
    return fac.reshape(fac.shape[:-1] + (1,) * extra + fac.shape[-1:])


@dataclass(frozen=True, eq=False)
class ControlledPath:
    """A path ``Y`` together with its Gubinelli derivative ``Y'``."""

    grid: TimeGrid
    values: np.ndarray
    deriv: np.ndarray
    direction: str = "forward"
    mode: str = "flat"
    basis: ModeBasis | None = None
    alpha: float = 0.0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        der = np.asarray(self.deriv, dtype=float)
        M = self.grid.n_intervals
        if vals.shape[0] != M + 1 or der.shape[0] != M + 1:
            raise DomainError("values and derivative need one entry per grid point")
        if der.shape[2:] != vals.shape[1:]:
            raise DomainError(f"derivative shape {der.shape} does not match values {vals.shape}")
        if self.direction not in ("forward", "backward"):
            raise DomainError("direction must be 'forward' or 'backward'")
        if self.mode not in ("flat", "semigroup"):
            raise DomainError("mode must be 'flat' or 'semigroup'")
        if self.mode == "semigroup":
            if self.basis is None:
                raise DomainError("semigroup mode needs a basis")
            if vals.shape[-1] != self.basis.size:
                raise DomainError("last value axis must hold the spectral coefficients")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "deriv", der)

    @property
    def d(self) -> int:
        return self.deriv.shape[1]

    @property
    def vshape(self) -> tuple:
        return self.values.shape[1:]

    def _shift(self, x: np.ndarray, lag) -> np.ndarray:
        if self.mode == "flat":
            return x
        return _semigroup_factor(self.basis, lag, x.ndim) * x

    def increment(self, t_idx, s_idx) -> np.ndarray:
        """``delta-hat Y`` (forward), ``delta-check Y`` (backward) or ``delta Y`` (flat)."""
        t_idx = np.asarray(t_idx)
        s_idx = np.asarray(s_idx)
        lag = (t_idx - s_idx) * self.grid.dt
        if self.direction == "forward":
            return self.values[t_idx] - self._shift(self.values[s_idx], lag)
        return self._shift(self.values[t_idx], lag) - self.values[s_idx]

    def remainder(self, Z: RoughDriver, t_idx, s_idx) -> np.ndarray:
        """``R^Y_{t,s}``, recomputed from ``(Y, Y', X)`` on demand."""
        t_idx = np.asarray(t_idx)
        s_idx = np.asarray(s_idx)
        if np.any(t_idx < s_idx):
            raise DomainError("remainder needs s <= t")
        dX = Z.increment(t_idx, s_idx)
        anchor = s_idx if self.direction == "forward" else t_idx
        lin = np.einsum("ki,ki...->k...", dX.reshape(-1, Z.d), self.deriv[anchor].reshape((-1,) + self.deriv.shape[1:]))
        lin = lin.reshape(np.shape(t_idx) + self.vshape)
        lag = (t_idx - s_idx) * self.grid.dt
        return self.increment(t_idx, s_idx) - self._shift(lin, lag)

    def _norm_basis(self):
        return self.basis if self.mode == "semigroup" else None

    def remainder_seminorm(self, Z: RoughDriver, gamma: float | None = None, alpha: float | None = None) -> float:
        g = Z.gamma if gamma is None else gamma
        a = self.alpha if alpha is None else alpha
        return holder_seminorm(lambda t, s: self.remainder(Z, t, s), self.grid, min(2 * g, 1.0), a, self._norm_basis())

    def deriv_path(self) -> "ControlledPath":
        """``Y'`` as a path with zero derivative (for seminorm bookkeeping)."""
        zero = np.zeros((self.deriv.shape[0], 1) + self.deriv.shape[1:])
        return ControlledPath(self.grid, self.deriv, zero, self.direction, self.mode, self.basis, self.alpha)

    def deriv_seminorm(self, gamma: float, alpha: float | None = None) -> float:
        a = self.alpha if alpha is None else alpha
        P = self.deriv_path()
        return holder_seminorm(P.increment, self.grid, gamma, a, self._norm_basis())

    def check_controlled(self, Z: RoughDriver, cap: float = NOT_CONTROLLED_CAP) -> float:
        if not np.all(np.isfinite(self.values)) or not np.all(np.isfinite(self.deriv)):
            raise NotControlledError("controlled path contains non-finite entries")
        r = self.remainder_seminorm(Z)
        if r > cap:
            raise NotControlledError(f"remainder seminorm {r:.3e} exceeds the sanity cap {cap:.1e}")
        return r

    def sup_norm(self, alpha: float | None = None, weight_eta: float = 0.0) -> float:
        a = self.alpha if alpha is None else alpha
        v = self.values.reshape(self.values.shape[0], -1, self.values.shape[-1])
        if self.mode == "semigroup":
            n = self.basis.norm(v, a)
        else:
            n = np.abs(v)
        n = np.sqrt(np.sum(n**2, axis=1)) if n.ndim > 1 else n
        if weight_eta:
            n = n * self.grid.points ** weight_eta
        return float(np.max(n))


# ----------------------------------------------------------------------
# germs


def forward_germ(Y: np.ndarray, Yp: np.ndarray, inc: np.ndarray, area: np.ndarray) -> np.ndarray:
    """``sum_j Y^j dX^j + sum_ij Y'^i[j] XX^ij`` cell by cell (left endpoint data)."""
    return np.einsum("kj...,kj->k...", Y, inc) + np.einsum("kij...,kij->k...", Yp, area)


def backward_germ(Y: np.ndarray, Yp: np.ndarray, inc: np.ndarray, area: np.ndarray) -> np.ndarray:
    """Right-endpoint germ ``Y^j dX^j - Y'^i[j] (dX^i dX^j - XX^ij)``."""
    co_area = inc[:, :, None] * inc[:, None, :] - area
    return np.einsum("kj...,kj->k...", Y, inc) - np.einsum("kij...,kij->k...", Yp, co_area)


def bracket_part(inc: np.ndarray, area: np.ndarray) -> np.ndarray:
    """Per-cell non-geometric part ``Sym(XX) - dX (x) dX / 2`` (zero for geometric drivers)."""
    return 0.5 * (area + np.swapaxes(area, -1, -2)) - 0.5 * inc[:, :, None] * inc[:, None, :]


def endpoint_germ_forward(decay, Yl, Yr, Ypl, inc, rho, area, Ypr=None, omega=None):
    """Cell approximation of ``int_0^h S_{h-r} Y_r dX_r``.

    ``S_{h-r}`` is interpolated linearly in ``r`` between ``S_h`` and the
    identity.  Against the noise-free part of ``Y`` (``S_h Y_l`` at the left
    end, ``Y_r - Y'_l dX`` at the right) this uses ``rho = int (r/h) dX_r``;
    against the first-order noise part ``Y'_l X_{r,0}`` it uses the
    weighted area ``omega = int (r/h) X_{r,0} (x) dX_r``.  When ``Ypr`` (the
    derivative at the right end) is given, the bracket part ``df`` of the
    area is integrated by the trapezoid rule ``(S_h Y'_l + Y'_r) df / 2``.
    Rows ``Y (W, d, ...)``, ``Y' (W, d, d, ...)`` indexed ``[i, j]``; ``decay``
    broadcasts against the trailing value axes.  ``omega`` defaults to the
    value of a linear path.
    """
    if omega is None:
        omega = linear_weighted_area(inc, area)
    corr = np.einsum("kij...,ki->kj...", Ypl, inc)
    far = np.einsum("kj...,kj->k...", Yr - corr, rho) + np.einsum("kij...,kij->k...", Ypl, omega)
    if Ypr is None:
        near = np.einsum("kj...,kj->k...", Yl, inc - rho) + np.einsum("kij...,kij->k...", Ypl, area - omega)
        return decay * near + far
    df = bracket_part(inc, area)
    near = (np.einsum("kj...,kj->k...", Yl, inc - rho)
            + np.einsum("kij...,kij->k...", Ypl, area - 0.5 * df - omega))
    far = far + 0.5 * np.einsum("kij...,kij->k...", Ypr, df)
    return decay * near + far


def endpoint_germ_backward(decay, Yl, Yr, Ypr, inc, rho, area, Ypl=None, omega=None):
    """Cell approximation of ``int_0^h S_r Y_r dX_r`` with derivative data at the right end.

    Mirror image of :func:`endpoint_germ_forward`: the noise-free value at
    the left end is ``Y_l + Y'_r dX`` and the noise part is
    ``-Y'_r X_{h,r}``, whose ``S_h``-weighted share is
    ``int (r/h) X_{h,r} (x) dX_r = dX (x) rho - omega``.  With ``Ypl`` the
    bracket part is split off and integrated by the trapezoid rule
    ``(S_h Y'_r + Y'_l) df / 2``.
    """
    if omega is None:
        omega = linear_weighted_area(inc, area)
    late = inc[:, :, None] * rho[:, None, :] - omega
    far = np.einsum("kj...,kj->k...", Yr, rho)
    near = np.einsum("kj...,kj->k...", Yl, inc - rho)
    if Ypl is None:
        far = far - np.einsum("kij...,kij->k...", Ypr, late)
        near = near + np.einsum("kij...,kij->k...", Ypr, area - omega)
        return decay * far + near
    df = bracket_part(inc, area)
    far = far - np.einsum("kij...,kij->k...", Ypr, late - 0.5 * df)
    near = (near + np.einsum("kij...,kij->k...", Ypr, area - df - omega)
            + 0.5 * np.einsum("kij...,kij->k...", Ypl, df))
    return decay * far + near


def _check_integrand(Y: ControlledPath, Z: RoughDriver):
    if Y.grid != Z.grid:
        raise DomainError("integrand and driver must share the grid")
    if Y.d != Z.d or Y.vshape[0] != Z.d:
        raise DomainError("integrand needs a leading slot of size d contracted against dX")


def _cell_data(Z: RoughDriver, s_idx: int, t_idx: int, step: int):
    u = np.arange(s_idx, t_idx, step)
    v = u + step
    if step == 1:
        return u, v, Z.inc[s_idx:t_idx], Z.area[s_idx:t_idx]
    return u, v, Z.increment(v, u), Z.area_between(v, u)


def sewing_recursion(Y: ControlledPath, Z: RoughDriver, s_idx: int, t_idx: int, depth: int | None = None) -> list:
    """Dyadic sewing ``I^0, I^1, ..., I^depth`` of the forward germ on ``[s, t]``.

    ``I^{n+1} = I^n - sum_{[u,v] in P_n} S_{t-v} delta-hat Xi_{v,m,u}`` with
    ``m`` the midpoint and ``Xi_{v,u} = S_{v-u}(Y_u X_{v,u} + Y'_u XX_{v,u})``.
    The partition depth is limited by the number of grid cells in ``[s, t]``.
    """
    _check_integrand(Y, Z)
    n_cells = t_idx - s_idx
    if n_cells < 1 or n_cells & (n_cells - 1):
        raise DomainError("sewing needs a power-of-two number of grid cells")
    max_depth = n_cells.bit_length() - 1
    depth = max_depth if depth is None else depth
    if depth > max_depth:
        raise DomainError("sewing depth exceeds the grid resolution")
    dt = Y.grid.dt
    fwd = Y.mode == "semigroup"

    def xi(u, v):
        g = forward_germ(Y.values[u], Y.deriv[u], Z.increment(v, u), Z.area_between(v, u))
        return Y._shift(g, (v - u) * dt) if fwd else g

    def to_t(x, v):
        return Y._shift(x, (t_idx - v) * dt) if fwd else x

    levels = [xi(np.array([s_idx]), np.array([t_idx]))[0]]
    for n in range(depth):
        step = n_cells >> n
        u = np.arange(s_idx, t_idx, step)
        v = u + step
        m = u + step // 2
        dxi = xi(u, v) - xi(m, v) - (Y._shift(xi(u, m), (v - m) * dt) if fwd else xi(u, m))
        levels.append(levels[-1] - to_t(dxi, v).sum(axis=0))
    return levels


def rough_convolution(Y: ControlledPath, Z: RoughDriver, s_idx: int = 0, t_idx: int | None = None,
                      method: str = "sum", check: bool = False) -> np.ndarray:
    """``int_s^t S_{t-r} Y_r dX_r`` for a forward integrand.

    ``method="sum"`` evaluates the compensated sum on the grid cells;
    ``method="sewing"`` runs the dyadic recursion to full depth.  Both give
    the same number up to rounding.
    """
    _check_integrand(Y, Z)
    if Y.direction != "forward":
        raise DomainError("rough_convolution needs a forward integrand")
    t_idx = Z.n_intervals if t_idx is None else t_idx
    if t_idx < s_idx:
        raise DomainError("integration limits need s <= t")
    if check:
        Y.check_controlled(Z)
    if t_idx == s_idx:
        return np.zeros(Y.vshape[1:])
    if method == "sewing":
        return sewing_recursion(Y, Z, s_idx, t_idx)[-1]
    if method != "sum":
        raise DomainError(f"unknown method {method!r}")
    g = forward_germ(Y.values[s_idx:t_idx], Y.deriv[s_idx:t_idx], Z.inc[s_idx:t_idx], Z.area[s_idx:t_idx])
    lag = (t_idx - np.arange(s_idx, t_idx)) * Y.grid.dt
    return Y._shift(g, lag).sum(axis=0)


def _scan(G: np.ndarray, basis: ModeBasis, h: float, init: np.ndarray | None, reverse: bool) -> np.ndarray:
    M = G.shape[0]
    lead = G.shape[1:-1]
    n = G.shape[-1]
    P = int(np.prod(lead, dtype=int)) * n
    decay = np.ascontiguousarray(np.tile(np.exp(basis.eigenvalues * h), P // n))
    G2 = np.ascontiguousarray(G.reshape(M, P))
    z = np.zeros(P) if init is None else np.ascontiguousarray(np.reshape(init, P), dtype=float)
    return semigroup_scan(G2, decay, z, reverse).reshape((M + 1,) + G.shape[1:])


def rough_convolution_path(Y: ControlledPath, Z: RoughDriver) -> np.ndarray:
    """``I_t = int_0^t S_{t-r} Y_r dX_r`` at every grid point (flat: plain sums)."""
    _check_integrand(Y, Z)
    g = forward_germ(Y.values[:-1], Y.deriv[:-1], Z.inc, Z.area)
    if Y.mode == "flat":
        out = np.zeros((Z.n_intervals + 1,) + g.shape[1:])
        np.cumsum(g, axis=0, out=out[1:])
        return out
    h = Y.grid.dt
    g = _semigroup_factor(Y.basis, np.full(g.shape[0], h), g.ndim) * g
    return _scan(g, Y.basis, h, None, reverse=False)


def semigroup_convolution_path(Y: ControlledPath, Z: RoughDriver) -> np.ndarray:
    """``int_0^t S_{t-r} Y_r dX_r`` at every grid point using the endpoint germ.

    Same limit as :func:`rough_convolution_path`; the cell rule interpolates
    the noise-free part of ``S_{t-r} Y_r`` across each cell, which removes
    the first-order commutator error between ``S`` and a time-varying
    integrand for smooth drivers.
    """
    _check_integrand(Y, Z)
    if Y.mode != "semigroup" or Y.direction != "forward":
        raise DomainError("needs a forward semigroup-controlled integrand")
    decay = np.exp(Y.basis.eigenvalues * Y.grid.dt)
    g = endpoint_germ_forward(decay, Y.values[:-1], Y.values[1:], Y.deriv[:-1], Z.inc, Z.weighted_inc, Z.area,
                              Y.deriv[1:], Z.weighted_area)
    return _scan(g, Y.basis, Y.grid.dt, None, reverse=False)


def backward_convolution_path(Y: ControlledPath, Z: RoughDriver) -> np.ndarray:
    """``I_t = int_t^T S_{r-t} Y_r dX_r`` for a backward integrand at every grid point."""
    _check_integrand(Y, Z)
    if Y.direction != "backward":
        raise DomainError("backward convolution needs a backward integrand")
    g = backward_germ(Y.values[1:], Y.deriv[1:], Z.inc, Z.area)
    if Y.mode == "flat":
        out = np.zeros((Z.n_intervals + 1,) + g.shape[1:])
        out[:-1] = np.cumsum(g[::-1], axis=0)[::-1]
        return out
    h = Y.grid.dt
    g = _semigroup_factor(Y.basis, np.full(g.shape[0], h), g.ndim) * g
    return _scan(g, Y.basis, h, None, reverse=True)


def rough_integral_flat(Y: ControlledPath, Z: RoughDriver, s_idx: int = 0, t_idx: int | None = None) -> np.ndarray:
    """Compensated Riemann sum ``sum (Y_u X_{v,u} + Y'_u XX_{v,u})`` over grid cells."""
    _check_integrand(Y, Z)
    t_idx = Z.n_intervals if t_idx is None else t_idx
    if t_idx < s_idx:
        raise DomainError("integration limits need s <= t")
    sl = slice(s_idx, t_idx)
    if Y.direction == "backward":
        g = backward_germ(Y.values[s_idx + 1 : t_idx + 1], Y.deriv[s_idx + 1 : t_idx + 1], Z.inc[sl], Z.area[sl])
    else:
        g = forward_germ(Y.values[sl], Y.deriv[sl], Z.inc[sl], Z.area[sl])
    return g.sum(axis=0)


def rough_integral_flat_path(Y: ControlledPath, Z: RoughDriver) -> np.ndarray:
    """``int_0^t Y dX`` at every grid point for a flat forward integrand."""
    flat = ControlledPath(Y.grid, Y.values, Y.deriv, "forward", "flat")
    return rough_convolution_path(flat, Z)


def sewing_local_errors(Y: ControlledPath, Z: RoughDriver, levels, window: tuple[int, int] | None = None) -> dict:
    """Mean local germ error on dyadic intervals, against the fully sewn integral.

    For each level ``n`` the window is split into ``2^n`` intervals
    ``[u, v]``; the reported error is the mean of
    ``|| I_{v,u} - Xi_{v,u} ||`` where ``I`` is the grid-resolution sewing.
    """
    s_idx, t_idx = (0, Z.n_intervals) if window is None else window
    n_cells = t_idx - s_idx
    out = {}
    for n in levels:
        step = n_cells >> n
        if step < 1 or step << n != n_cells:
            raise DomainError(f"level {n} is finer than the grid")
        us = np.arange(s_idx, t_idx, step)
        errs = []
        for u in us:
            v = u + step
            ref = rough_convolution(Y, Z, u, v, method="sum")
            g = forward_germ(Y.values[[u]], Y.deriv[[u]], Z.increment([v], [u]), Z.area_between([v], [u]))
            g = Y._shift(g, np.array([(v - u) * Y.grid.dt]))[0]
            e = ref - g
            errs.append(float(np.sqrt(np.sum(e * e))))
        out[n] = float(np.mean(errs))
    return out


# ----------------------------------------------------------------------
# Young integration


def young_integral_path(Y: np.ndarray, h: np.ndarray, rule: str = "left") -> np.ndarray:
    """Cumulative ``int_0^t Y dh`` on the grid.

    ``Y`` has shape ``(M+1, p, *rest)`` and ``h`` shape ``(M+1, p)``; the
    ``p`` axis is contracted.  ``rule`` is ``"left"`` or ``"trapezoid"``.
    """
    Y = np.asarray(Y, dtype=float)
    h = np.asarray(h, dtype=float)
    if h.ndim == 1:
        h = h[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if Y.shape[:2] != h.shape:
        raise DomainError("integrand and integrator shapes disagree")
    dh = np.diff(h, axis=0)
    if rule == "left":
        Yc = Y[:-1]
    elif rule == "trapezoid":
        Yc = 0.5 * (Y[:-1] + Y[1:])
    else:
        raise DomainError(f"unknown rule {rule!r}")
    inc = np.einsum("kp...,kp->k...", Yc, dh)
    out = np.zeros((Y.shape[0],) + inc.shape[1:])
    np.cumsum(inc, axis=0, out=out[1:])
    return out


def young_integral(Y, h, s_idx: int = 0, t_idx: int | None = None, rule: str = "left") -> np.ndarray:
    """``int_s^t Y dh`` by left-point (or trapezoid) Riemann sums on the grid."""
    P = young_integral_path(Y, h, rule)
    t_idx = P.shape[0] - 1 if t_idx is None else t_idx
    return P[t_idx] - P[s_idx]


# ----------------------------------------------------------------------
# distances and pairings


def controlled_distance(Y: ControlledPath, V: ControlledPath, Z1: RoughDriver, Z2: RoughDriver,
                        eps: float, gamma: float | None = None, eta: float = 0.0, beta: float = 0.0) -> tuple[float, float]:
    """Distances between paths controlled by two drivers.

    Returns ``(d_{X,X~,2 eps}, d_{2 eps, 2 gamma, eta})`` where the first is
    ``||Y' - V'||_eps + |R^Y - R^V|_{2 eps}`` and the second adds
    ``||Y' - V'||_inf`` and the time-weighted sup ``sup t^eta ||Y - V||``
    measured in ``H_{alpha + beta}``.
    """
    if Y.grid != V.grid or Y.grid != Z1.grid or Y.grid != Z2.grid:
        raise DomainError("paths and drivers must share the grid")
    if Y.vshape != V.vshape or Y.d != V.d:
        raise DomainError("paths have different shapes")
    basis = Y.basis if Y.mode == "semigroup" else None
    a = Y.alpha
    D = ControlledPath(Y.grid, Y.deriv - V.deriv, np.zeros((Y.deriv.shape[0], 1) + Y.deriv.shape[1:]),
                       Y.direction, Y.mode, Y.basis, a)
    d_der = holder_seminorm(D.increment, Y.grid, eps, a, basis)
    d_rem = holder_seminorm(lambda t, s: Y.remainder(Z1, t, s) - V.remainder(Z2, t, s), Y.grid,
                            min(2 * eps, 1.0), a, basis)
    d1 = d_der + d_rem

    def sup(arr, weight=0.0):
        v = arr.reshape(arr.shape[0], -1, arr.shape[-1])
        n = basis.norm(v, a + beta) if basis is not None else np.abs(v)
        n = np.sqrt(np.sum(n * n, axis=1))
        if weight:
            n = n * Y.grid.points**weight
        return float(np.max(n))

    d2 = sup(Y.deriv - V.deriv) + sup(Y.values - V.values, eta) + d1
    return d1, d2


def pair_forward_backward(V: ControlledPath, Zb: ControlledPath, gamma: float) -> ControlledPath:
    """Scalar path ``Y_t = <V_t, Z_t>`` with ``Y'_t = <V'_t, Z_t> + <V_t, Z'_t>``.

    ``V`` is forward controlled in ``H_alpha`` and ``Zb`` backward controlled
    in ``H_beta``; the pairing is defined when ``alpha + beta + 2 gamma >= 0``.
    """
    if V.direction != "forward" or Zb.direction != "backward":
        raise DomainError("pairing needs a forward and a backward path")
    if V.alpha + Zb.alpha + 2 * gamma < 0:
        raise DomainError("regularity indices violate alpha + beta + 2 gamma >= 0")
    if V.grid != Zb.grid or V.vshape != Zb.vshape:
        raise DomainError("paths must share grid and value shape")
    ax = tuple(range(1, V.values.ndim))
    vals = np.sum(V.values * Zb.values, axis=ax)
    axd = tuple(range(2, V.deriv.ndim))
    der = np.sum(V.deriv * Zb.values[:, None], axis=axd) + np.sum(V.values[:, None] * Zb.deriv, axis=axd)
    return ControlledPath(V.grid, vals, der, "forward", "flat")


# ----------------------------------------------------------------------
# jointly controlled paths


@dataclass(frozen=True, eq=False)
class JointlyControlledPath:
    """A ``d x d``-valued two-parameter path with its mixed derivatives.

    Dense storage: ``Y[u, s]`` has shape ``(M+1, M+1, d, d)``;
    ``Y1[u, s, i]`` and ``Y2[u, s, i]`` are the first-order derivatives in
    the first and second time variable; ``Y12[u, s, i, k]`` the mixed one
    (direction ``i`` from the first variable, ``k`` from the second).

    A bilinear pairing ``Y_{u,s} = B(V_u, W_s)`` of two flat controlled
    paths can additionally be kept in factored form, which the Fubini
    residuals exploit for ``O(M)`` evaluation.
    """

    grid: TimeGrid
    Y: np.ndarray | None = None
    Y1: np.ndarray | None = None
    Y2: np.ndarray | None = None
    Y12: np.ndarray | None = None
    factors: tuple | None = None

    @classmethod
    def from_bilinear(cls, B: np.ndarray, V: ControlledPath, W: ControlledPath, dense: bool = True) -> "JointlyControlledPath":
        """``Y_{u,s} = B(V_u, W_s)`` with ``B[a, b, p, q]`` contracting ``V^p W^q``."""
        B = np.asarray(B, dtype=float)
        if V.grid != W.grid:
            raise DomainError("pairing factors must share the grid")
        if V.values.ndim != 2 or W.values.ndim != 2:
            raise DomainError("bilinear factors must be vector-valued flat paths")
        d = V.d
        if B.shape != (d, d, V.vshape[0], W.vshape[0]):
            raise DomainError("bilinear tensor shape must be (d, d, dim V, dim W)")
        fac = (B, V, W)
        if not dense:
            return cls(V.grid, factors=fac)
        Vv, Vd, Wv, Wd = V.values, V.deriv, W.values, W.deriv
        Y = np.einsum("abpq,up,sq->usab", B, Vv, Wv)
        Y1 = np.einsum("abpq,uip,sq->usiab", B, Vd, Wv)
        Y2 = np.einsum("abpq,up,siq->usiab", B, Vv, Wd)
        Y12 = np.einsum("abpq,uip,skq->usikab", B, Vd, Wd)
        return cls(V.grid, Y, Y1, Y2, Y12, fac)

    @property
    def is_dense(self) -> bool:
        return self.Y is not None

    def cross_remainder(self, Z: RoughDriver, t, s, v, u) -> tuple[np.ndarray, np.ndarray]:
        """Both sides of the cross-remainder identity ``R(t, s, v, u)``.

        Left:  ``R1_{v,u}(t) - R1_{v,u}(s) - R21_{v,u}(s) X_{t,s}``.
        Right: ``R2_{t,s}(v) - R2_{t,s}(u) - R12_{t,s}(u) X_{v,u}``.
        """
        if not self.is_dense:
            raise DomainError("cross remainder needs dense storage")
        Y, Y1, Y2, Y12 = self.Y, self.Y1, self.Y2, self.Y12
        Xvu = Z.increment(v, u)
        Xts = Z.increment(t, s)

        def R1(b, a, r):  # Y_{b,r} - Y_{a,r} - Y1_{a,r} X_{b,a}
            return Y[b, r] - Y[a, r] - np.einsum("i,iab->ab", Z.increment(b, a), Y1[a, r])

        def R2(b, a, r):  # Y_{r,b} - Y_{r,a} - Y2_{r,a} X_{b,a}
            return Y[r, b] - Y[r, a] - np.einsum("i,iab->ab", Z.increment(b, a), Y2[r, a])

        def R21(b, a, r):  # Y2_{b,r} - Y2_{a,r} - Y12_{a,r} X_{b,a} (first-variable expansion of Y2)
            return Y2[b, r] - Y2[a, r] - np.einsum("i,ikab->kab", Z.increment(b, a), Y12[a, r])

        def R12(b, a, r):  # Y1_{r,b} - Y1_{r,a} - Y12_{r,a} X_{b,a} (second-variable expansion of Y1)
            return Y1[r, b] - Y1[r, a] - np.einsum("k,ikab->iab", Z.increment(b, a), Y12[r, a])

        left = R1(v, u, t) - R1(v, u, s) - np.einsum("k,kab->ab", Xts, R21(v, u, s))
        right = R2(t, s, v) - R2(t, s, u) - np.einsum("i,iab->ab", Xvu, R12(t, s, u))
        return left, right
