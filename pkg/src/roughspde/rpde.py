"""Mild RPDE solvers and the linearized (Jacobian / adjoint) machinery.

Forward scheme on a grid cell ``[t_k, t_{k+1}]`` of length ``h``:

    u_{k+1} = S_h u_k + w_l N(u_k) + w_r N(u_{k+1})
              + S_h [F_j(u_k) dX^j + DF_j(u_k) F_i(u_k) XX^{ij}]

with exponential trapezoid weights ``w_l, w_r``.  The implicit equation is
solved by Picard iteration of the whole window map (all cells at once),
halving the window whenever successive-iterate distances stop shrinking
by at least a factor two.

Backward equations (terminal data at ``T``) use the right-endpoint germ

    S_h [Y_{k+1} dX - Y'_{k+1} (dX (x) dX - XX)]

consistent with ``delta-check v_{t,s} = S_{t-s} v_t - v_s = S_{t-s} v'_t X_{t,s} + R``,
for which the Gubinelli derivative of a backward solution is ``-F(v)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .controlled import ControlledPath, _scan, bracket_part, endpoint_germ_backward, endpoint_germ_forward, young_integral_path
from . import kernels
from .errors import BlowUpError, DomainError
from .rough_path import RoughDriver
from .spectral_space import ModeBasis, exp_weights
from .vector_fields import VectorField

__all__ = [
    "RpdeProblem",
    "Solution",
    "MalliavinMatrix",
    "solve_forward",
    "solve_backward",
    "jacobian_apply",
    "jacobian_path",
    "adjoint_jacobian_apply",
    "adjoint_path",
    "duhamel_derivative",
    "malliavin_matrix",
    "malliavin_pairings",
    "ito_reference_solve",
    "ito_reference_batch",
    "smoothing_profile",
    "mild_residual",
]


@dataclass(frozen=True, eq=False)
class RpdeProblem:
    """``du = (L u + N(u)) dt + F(u) dX`` with ``u_0 = xi``."""

    basis: ModeBasis
    drift: VectorField | None
    diffusions: tuple
    driver: RoughDriver
    initial: np.ndarray

    def __post_init__(self):
        xi = np.asarray(self.initial, dtype=float)
        if xi.shape != (self.basis.size,):
            raise DomainError("initial condition must be a coefficient vector of the basis size")
        object.__setattr__(self, "initial", xi)
        object.__setattr__(self, "diffusions", tuple(self.diffusions))
        if len(self.diffusions) != self.driver.d:
            raise DomainError("number of diffusion fields must equal the driver dimension")
        for F in self.diffusions:
            if F.smoothing_loss != 0:
                raise DomainError("diffusion fields must not lose regularity")
        if self.drift is not None and not self.drift.smoothing_loss < 1.0 - self.driver.gamma:
            raise DomainError("drift loss must satisfy delta < 1 - gamma")

    @property
    def d(self) -> int:
        return self.driver.d

    @property
    def horizon(self) -> float:
        return self.driver.grid.length

    def with_driver(self, Z: RoughDriver) -> "RpdeProblem":
        return replace(self, driver=Z)

    def with_initial(self, xi) -> "RpdeProblem":
        return replace(self, initial=np.asarray(xi, dtype=float))

    def N(self, u):
        if self.drift is None:
            return np.zeros(np.shape(u))
        return self.drift.apply(u)

    def DN(self, u, v):
        if self.drift is None:
            return np.zeros(np.broadcast_shapes(np.shape(u), np.shape(v)))
        return self.drift.derivative(u, v)

    def DN_adj(self, u, w):
        if self.drift is None:
            return np.zeros(np.broadcast_shapes(np.shape(u), np.shape(w)))
        return self.drift.derivative_adjoint(u, w)

    def F(self, u):
        """``(..., d, n)``."""
        return np.stack([F.apply(u) for F in self.diffusions], axis=-2)

    def DFF(self, u, Fu=None):
        """``out[..., i, j, :] = DF_j(u) F_i(u)``."""
        Fu = self.F(u) if Fu is None else Fu
        d = self.d
        rows = []
        for i in range(d):
            rows.append(np.stack([self.diffusions[j].derivative(u, Fu[..., i, :]) for j in range(d)], axis=-2))
        return np.stack(rows, axis=-3)


@dataclass(frozen=True, eq=False)
class Solution(ControlledPath):
    """A solved path with its problem and solver diagnostics."""

    problem: RpdeProblem | None = None
    info: dict = field(default_factory=dict)


# ----------------------------------------------------------------------
# window Picard engine


def _picard(G_fn: Callable, start: np.ndarray, M: int, basis: ModeBasis, h: float,
            tol: float, max_iter: int, max_window: int | None, burn_in: int = 12) -> tuple[np.ndarray, dict]:
    """Solve ``U_{j+1} = decay U_j + G_fn(U, pos)[j]`` window by window.

    ``G_fn(U, pos)`` receives the window iterate ``U`` of shape
    ``(W+1, ..., n)`` starting at grid offset ``pos`` and returns the cell
    forcing ``(W, ..., n)`` (it may depend on both endpoints of each cell).
    Iteration starts from free propagation of the window's initial value.
    Successive sup-norm distances may grow during the first ``burn_in``
    sweeps (the Volterra series transient); afterwards a window whose
    distances fail to halve is split in two.
    """
    log_decay = basis.eigenvalues * h
    out = np.empty((M + 1,) + start.shape)
    out[0] = start
    pos = 0
    W = M if max_window is None else max(1, min(max_window, M))
    n_iter = 0
    widths = []
    halvings = 0
    while pos < M:
        W = min(W, M - pos)
        x0 = out[pos]
        steps = np.arange(W + 1).reshape((W + 1,) + (1,) * start.ndim)
        U = np.exp(steps * log_decay) * x0
        prev = None
        ok = False
        for it in range(max_iter):
            Un = _scan(G_fn(U, pos), basis, h, x0, reverse=False)
            n_iter += 1
            if not np.all(np.isfinite(Un)):
                break
            dist = float(np.max(np.abs(Un - U)))
            U = Un
            if dist <= tol * max(1.0, float(np.max(np.abs(U)))):
                ok = True
                break
            if it >= burn_in and prev is not None and dist >= 0.5 * prev:
                break
            prev = dist
        if ok:
            out[pos : pos + W + 1] = U
            pos += W
            widths.append(W)
        else:
            if W == 1:
                raise BlowUpError(f"Picard iteration does not contract on a single cell at grid index {pos}")
            W //= 2
            halvings += 1
    return out, {"iterations": n_iter, "windows": widths, "halvings": halvings}


def _cells(Z: RoughDriver, lo: int, hi: int, reverse: bool):
    inc, rho, area, om = Z.inc[lo:hi], Z.weighted_inc[lo:hi], Z.area[lo:hi], Z.weighted_area[lo:hi]
    if reverse:
        return inc[::-1], rho[::-1], area[::-1], om[::-1]
    return inc, rho, area, om


# ----------------------------------------------------------------------
# forward and backward nonlinear solves


def solve_forward(p: RpdeProblem, picard_tol: float = 1e-13, max_iter: int = 60, start_idx: int = 0,
                  end_idx: int | None = None, initial=None, max_window: int | None = None) -> Solution:
    """Mild solution on ``[t_start, t_end]`` of grid indices (default: the whole grid).

    Returns a semigroup-controlled :class:`Solution` with ``u' = F(u)``.
    Raises :class:`BlowUpError` if a single cell does not contract.
    """
    Z = p.driver
    end_idx = Z.n_intervals if end_idx is None else end_idx
    if not 0 <= start_idx <= end_idx <= Z.n_intervals:
        raise DomainError("invalid solve window")
    xi = p.initial if initial is None else np.asarray(initial, dtype=float)
    h = Z.grid.dt
    decay, wl, wr = exp_weights(p.basis, h)
    inc, rho, area, om = _cells(Z, start_idx, end_idx, False)

    def G(U, pos):
        sl = slice(pos, pos + U.shape[0] - 1)
        Fu = p.F(U)
        DFF = p.DFF(U, Fu)
        g = endpoint_germ_forward(decay, Fu[:-1], Fu[1:], DFF[:-1], inc[sl], rho[sl], area[sl], DFF[1:], om[sl])
        NU = p.N(U)
        return wl * NU[:-1] + wr * NU[1:] + g

    M = end_idx - start_idx
    vals, info = _picard(G, xi, M, p.basis, h, picard_tol, max_iter, max_window)
    full = np.full((Z.n_intervals + 1, p.basis.size), np.nan)
    full[start_idx : end_idx + 1] = vals
    info.update(start_idx=start_idx, end_idx=end_idx)
    if start_idx != 0 or end_idx != Z.n_intervals:
        # partial solves report NaN outside their window
        full_vals = full
    else:
        full_vals = vals
    deriv = p.F(np.nan_to_num(full_vals))
    deriv[~np.isfinite(full_vals[:, 0])] = np.nan
    return Solution(Z.grid, full_vals, deriv, "forward", "semigroup", p.basis, 0.0, p, info)


def solve_backward(p: RpdeProblem, terminal=None, picard_tol: float = 1e-13, max_iter: int = 60,
                   end_idx: int | None = None, max_window: int | None = None) -> Solution:
    """Mild solution of the backward equation ``v_t = S_{T-t} xi + int_t^T S_{r-t}(N dr + F dX)``.

    ``p.drift`` and ``p.diffusions`` play the roles of the backward data;
    ``terminal`` defaults to ``p.initial``.  The returned path is backward
    controlled with ``v' = -F(v)``.
    """
    Z = p.driver
    T = Z.n_intervals if end_idx is None else end_idx
    xi = p.initial if terminal is None else np.asarray(terminal, dtype=float)
    h = Z.grid.dt
    decay, wl, wr = exp_weights(p.basis, h)
    inc, rho, area, om = _cells(Z, 0, T, True)

    def G(U, pos):
        # U[j] is the value at grid index T - pos - j, the right end of cell j
        sl = slice(pos, pos + U.shape[0] - 1)
        Fu = p.F(U)
        DFF = -p.DFF(U, Fu)
        g = endpoint_germ_backward(decay, Fu[1:], Fu[:-1], DFF[:-1], inc[sl], rho[sl], area[sl], DFF[1:], om[sl])
        NU = p.N(U)
        return wl * NU[:-1] + wr * NU[1:] + g

    vals, info = _picard(G, xi, T, p.basis, h, picard_tol, max_iter, max_window)
    vals = vals[::-1]
    full = np.full((Z.n_intervals + 1, p.basis.size), np.nan)
    full[: T + 1] = vals
    deriv = -p.F(np.nan_to_num(full))
    deriv[~np.isfinite(full[:, 0])] = np.nan
    info.update(end_idx=T)
    return Solution(Z.grid, full, deriv, "backward", "semigroup", p.basis, 0.0, p, info)


# ----------------------------------------------------------------------
# linearized equations
#
# The linearized schemes are linear in the unknown, so each cell is solved
# exactly: the implicit drift term is moved to the left and the cell map
# becomes a matrix.  The chain of cell matrices is then propagated.

_CHUNK = 512


def _solution_values(sol: Solution) -> np.ndarray:
    if sol.problem is None:
        raise DomainError("linearized solves need a Solution carrying its problem")
    return sol.values


def _field_matrix(F: VectorField, u: np.ndarray) -> np.ndarray:
    """``(W, n, n)`` matrices of ``DF(u_k)``."""
    n = u.shape[-1]
    cols = F.derivative(u[:, None, :], np.eye(n)[None])
    return np.swapaxes(cols, 1, 2)


def _second_matrix(F: VectorField, u: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``(W, n, n)`` matrices of ``b -> D^2F(u_k)(a_k, b)``."""
    n = u.shape[-1]
    cols = F.second_derivative(u[:, None, :], a[:, None, :], np.eye(n)[None])
    return np.swapaxes(cols, 1, 2)


def _drift_matrix(p: RpdeProblem, u: np.ndarray) -> np.ndarray:
    if p.drift is None:
        return np.zeros(u.shape + u.shape[-1:])
    return _field_matrix(p.drift, u)


def _germ_operators(p: RpdeProblem, u: np.ndarray):
    """``DF_j(u)`` and the operators ``E^{ij} = D^2F_j(u)(F_i(u), .) + DF_j DF_i`` at points ``u``.

    Returns ``D (W, d, n, n)`` and ``E (W, d, d, n, n)`` indexed ``E[:, i, j]``.
    """
    d = p.d
    Fu = p.F(u)
    D = np.stack([_field_matrix(F, u) for F in p.diffusions], axis=1)
    E = np.empty(D.shape[:1] + (d, d) + D.shape[2:])
    for i in range(d):
        for j in range(d):
            E[:, i, j] = _second_matrix(p.diffusions[j], u, Fu[:, i]) + D[:, j] @ D[:, i]
    return D, E


def _forward_cells(p: RpdeProblem, u: np.ndarray, inc, rho, area, om, decay, wl, wr):
    """Cell matrices ``Phi_k`` with ``w_{k+1} = Phi_k w_k`` and the implicit left operator.

    Same cell rule as the nonlinear forward scheme applied to the integrand
    ``DF_j(u) w`` with derivative ``E^{ij} w``.
    """
    D, E = _germ_operators(p, u)
    Dl, Dr, El, Er = D[:-1], D[1:], E[:-1], E[1:]
    df = bracket_part(inc, area)
    DN = _drift_matrix(p, u)
    n = u.shape[-1]
    near = np.einsum("kjab,kj->kab", Dl, inc - rho) + np.einsum("kijab,kij->kab", El, area - 0.5 * df - om)
    corr = np.einsum("kijab,kij->kab", El, inc[:, :, None] * rho[:, None, :] - om)
    lhs = (np.eye(n) - wr[:, None] * DN[1:] - np.einsum("kjab,kj->kab", Dr, rho)
           - 0.5 * np.einsum("kijab,kij->kab", Er, df))
    rhs = np.diag(decay) + wl[:, None] * DN[:-1] + decay[:, None] * near - corr
    return np.linalg.solve(lhs, rhs), lhs


def _backward_cells(p: RpdeProblem, u: np.ndarray, inc, rho, area, om, decay, wl, wr):
    """Cell matrices ``Psi_k`` with ``K_k = Psi_k K_{k+1}`` for the adjoint equation.

    ``u`` holds the cell endpoints in grid order.  The integrand is
    ``DF_j(u)^T K`` with backward derivative ``(D^2F_j(F_i, .))^T - DF_j^T DF_i^T``;
    the same mirrored cell rule as the nonlinear backward scheme is then
    solved for the left value.
    """
    D, E = _germ_operators(p, u)
    Dt = np.swapaxes(D, -1, -2)
    Et = np.swapaxes(E, -1, -2)
    # E^T = (D^2F_j(F_i, .))^T + DF_i^T DF_j^T
    Yp = np.empty_like(Et)
    d = p.d
    for i in range(d):
        for j in range(d):
            Yp[:, i, j] = Et[:, i, j] - Dt[:, i] @ Dt[:, j] - Dt[:, j] @ Dt[:, i]
    Dl, Dr, Ypl, Ypr = Dt[:-1], Dt[1:], Yp[:-1], Yp[1:]
    df = bracket_part(inc, area)
    late = inc[:, :, None] * rho[:, None, :] - om
    far = np.einsum("kjab,kj->kab", Dr, rho) - np.einsum("kijab,kij->kab", Ypr, late - 0.5 * df)
    corr = np.einsum("kijab,kij->kab", Ypr, area - df - om)
    DNt = np.swapaxes(_drift_matrix(p, u), -1, -2)
    n = u.shape[-1]
    lhs = (np.eye(n) - wr[:, None] * DNt[:-1] - np.einsum("kjab,kj->kab", Dl, inc - rho)
           - 0.5 * np.einsum("kijab,kij->kab", Ypl, df))
    rhs = np.diag(decay) + wl[:, None] * DNt[1:] + decay[:, None] * far + corr
    return np.linalg.solve(lhs, rhs)


def _as_columns(x: np.ndarray, n: int):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != n:
        raise DomainError("last axis must hold the spectral coefficients")
    batch = x.shape[:-1]
    return x.reshape(-1, n).T.copy(), batch


def _from_columns(path: np.ndarray, batch: tuple) -> np.ndarray:
    M1, n, _ = path.shape
    return np.swapaxes(path, 1, 2).reshape((M1,) + batch + (n,))


def jacobian_path(sol: Solution, zeta, s_idx: int = 0, t_idx: int | None = None, source_dh=None) -> np.ndarray:
    """``J_{r,s} zeta`` for ``r`` from ``s`` to ``t`` (inclusive), batched over leading axes of ``zeta``.

    The linearized mild equation has frozen coefficients ``DN(u_r)``,
    ``DF(u_r)``; its integrand is ``Y^j = DF_j(u) w`` with
    ``Y'^{ij} = D^2F_j(u)(F_i(u), w) + DF_j(u) DF_i(u) w``.
    ``source_dh`` optionally adds the forcing ``int S_{t-r} F(u_r) dh_r``
    given the per-cell increments of ``h``; the forcing uses the same
    exponential trapezoid weights as the drift.
    """
    p = sol.problem
    u = _solution_values(sol)
    Z = p.driver
    t_idx = Z.n_intervals if t_idx is None else t_idx
    if not 0 <= s_idx <= t_idx <= Z.n_intervals:
        raise DomainError("need s <= t within the grid")
    n = p.basis.size
    x, batch = _as_columns(zeta, n)
    h = Z.grid.dt
    decay, wl, wr = exp_weights(p.basis, h)
    pieces = [x[None]]
    for lo in range(s_idx, t_idx, _CHUNK):
        hi = min(lo + _CHUNK, t_idx)
        uw = u[lo : hi + 1]
        Phi, lhs = _forward_cells(p, uw, *_cells(Z, lo, hi, False), decay, wl, wr)
        C = np.zeros((hi - lo, n))
        if source_dh is not None:
            dh = np.asarray(source_dh, dtype=float)[lo:hi]
            Fu = p.F(uw)
            forcing = (wl * np.einsum("kin,ki->kn", Fu[:-1], dh) + wr * np.einsum("kin,ki->kn", Fu[1:], dh)) / h
            C = np.linalg.solve(lhs, forcing[..., None])[..., 0]
        if source_dh is not None and x.shape[1] != 1:
            raise DomainError("a forced linear solve takes a single initial vector")
        seg = kernels.linear_propagate(np.ascontiguousarray(Phi), np.ascontiguousarray(C), pieces[-1][-1])
        pieces.append(seg[1:])
    return _from_columns(np.concatenate([pieces[0]] + pieces[1:]), batch)


def jacobian_apply(sol: Solution, zeta, s_idx: int = 0, t_idx: int | None = None, **kw) -> np.ndarray:
    """``J_{t,s} zeta``."""
    return jacobian_path(sol, zeta, s_idx, t_idx, **kw)[-1]


def adjoint_path(sol: Solution, phi, t_idx: int | None = None, s_min: int = 0) -> np.ndarray:
    """``K_{t,s} phi`` for ``s = s_min..t`` (axis 0 indexed by grid point ``s - s_min``).

    Solves the backward equation

        K_{t,s} phi = S_{t-s} phi + int_s^t S_{r-s} DN*(u_r) K_{t,r} phi dr
                      + int_s^t S_{r-s} DF*(u_r) K_{t,r} phi dX_r

    as its own discretization (right-endpoint backward germ), batched over
    the leading axes of ``phi``.
    """
    p = sol.problem
    u = _solution_values(sol)
    Z = p.driver
    t_idx = Z.n_intervals if t_idx is None else t_idx
    if not 0 <= s_min <= t_idx <= Z.n_intervals:
        raise DomainError("need s <= t within the grid")
    n = p.basis.size
    x, batch = _as_columns(phi, n)
    decay, wl, wr = exp_weights(p.basis, Z.grid.dt)
    pieces = [x[None]]
    hi = t_idx
    while hi > s_min:
        lo = max(hi - _CHUNK, s_min)
        Psi = _backward_cells(p, u[lo : hi + 1], *_cells(Z, lo, hi, False), decay, wl, wr)
        seg = kernels.linear_propagate(np.ascontiguousarray(Psi), np.zeros((hi - lo, n)), pieces[-1][0], True)
        pieces.append(seg[:-1])
        hi = lo
    return _from_columns(np.concatenate(pieces[:0:-1] + [pieces[0]]), batch)


def adjoint_jacobian_apply(sol: Solution, phi, s_idx: int = 0, t_idx: int | None = None) -> np.ndarray:
    """``K_{t,s} phi``."""
    return adjoint_path(sol, phi, t_idx, s_min=s_idx)[0]


# ----------------------------------------------------------------------
# Duhamel and Malliavin


def duhamel_derivative(sol: Solution, h, t_idx: int | None = None, method: str = "adjoint",
                       rule: str = "trapezoid") -> np.ndarray:
    """``int_0^t J_{t,s} F(u_s) dh_s``.

    ``h`` is a grid path ``(M+1, d)`` or a callable of time.  With
    ``method="adjoint"`` the integrand is assembled mode by mode from one
    batched adjoint solve, ``<J_{t,s} F_i(u_s), e_j> = <F_i(u_s), K_{t,s} e_j>``,
    and integrated as a Young integral.  ``method="forward"`` solves the
    linearized equation with the forcing ``F(u) dh`` instead.
    """
    p = sol.problem
    Z = p.driver
    t_idx = Z.n_intervals if t_idx is None else t_idx
    hv = np.asarray(h(Z.grid.points) if callable(h) else h, dtype=float)
    if hv.ndim == 1:
        hv = hv[:, None]
    if hv.shape != (Z.n_intervals + 1, p.d):
        raise DomainError("direction h must be a grid path of dimension d")
    if method == "adjoint":
        K = adjoint_path(sol, np.eye(p.basis.size), t_idx)  # (t+1, j, n)
        Fu = p.F(sol.values[: t_idx + 1])  # (t+1, i, n)
        A = np.einsum("sin,sjn->sij", Fu, K)  # <F_i(u_s), K_{t,s} e_j>
        return young_integral_path(A, hv[: t_idx + 1], rule=rule)[-1]
    if method == "forward":
        dh = np.diff(hv, axis=0)
        return jacobian_path(sol, np.zeros(p.basis.size), 0, t_idx, source_dh=dh)[-1]
    raise DomainError(f"unknown method {method!r}")


@dataclass(frozen=True, eq=False)
class MalliavinMatrix:
    """Gram matrix ``sum_i int <J_{T,s} F_i(u_s), e_j> <J_{T,s} F_i(u_s), e_l> ds``.

    ``full`` is the matrix on the whole truncated space; ``entries`` its
    restriction to the ``projection`` indices.
    """

    full: np.ndarray
    projection: tuple

    @property
    def entries(self) -> np.ndarray:
        idx = np.asarray(self.projection)
        return self.full[np.ix_(idx, idx)]

    def min_eigenvalue(self, projected: bool = True) -> float:
        m = self.entries if projected else self.full
        return float(np.linalg.eigvalsh(0.5 * (m + m.T))[0])

    def quadratic(self, phi) -> float:
        phi = np.asarray(phi, dtype=float)
        return float(phi @ self.full @ phi)


def malliavin_matrix(sol: Solution, projection: Sequence[int] | None = None,
                     pairings: np.ndarray | None = None) -> MalliavinMatrix:
    """Assemble ``M_T`` from one backward solve batched over all basis vectors.

    ``pairings`` may supply precomputed ``A[s, i, j] = <F_i(u_s), K_{T,s} e_j>``
    (used by the frozen-linearization scaling check).
    """
    p = sol.problem
    n = p.basis.size
    projection = tuple(range(n)) if projection is None else tuple(int(i) for i in projection)
    if pairings is None:
        pairings = malliavin_pairings(sol)
    dt = p.driver.grid.dt
    w = np.full(pairings.shape[0], dt)
    w[0] = w[-1] = 0.5 * dt
    full = np.einsum("s,sij,sil->jl", w, pairings, pairings)
    return MalliavinMatrix(0.5 * (full + full.T), projection)


def malliavin_pairings(sol: Solution) -> np.ndarray:
    p = sol.problem
    K = adjoint_path(sol, np.eye(p.basis.size))
    Fu = p.F(sol.values)
    return np.einsum("sin,sjn->sij", Fu, K)


# ----------------------------------------------------------------------
# reference scheme and diagnostics


def ito_reference_solve(p: RpdeProblem, scheme_depth: int, convention: str = "strat",
                        record_level: int | None = None) -> np.ndarray:
    """Exponential mild Euler scheme on the driver's stored fine increments.

    ``v_{k+1} = S_h (v_k + h N(v_k) + F(v_k) dB_k + c h sum_i DF_i(v_k) F_i(v_k) / 2)``
    with ``c = 1`` for the Stratonovich equation and ``c = 0`` for Itô.
    Returns values on the grid of ``record_level`` (default: the driver grid).
    """
    return ito_reference_batch(p, [p.driver], scheme_depth, convention, record_level)[0]


def ito_reference_batch(p: RpdeProblem, drivers: Sequence[RoughDriver], scheme_depth: int,
                        convention: str = "strat", record_level: int | None = None) -> np.ndarray:
    """:func:`ito_reference_solve` for several drivers on one grid, stepped together.

    Returns an array ``(len(drivers), 2^record_level + 1, n)``.
    """
    if not drivers:
        raise DomainError("need at least one driver")
    grid = drivers[0].grid
    for Z in drivers:
        if Z.fine is None:
            raise DomainError("reference solve needs a driver with stored fine increments")
        if Z.grid != grid or Z.d != p.d:
            raise DomainError("batched drivers must share the grid and the noise dimension")
    if convention not in ("ito", "strat"):
        raise DomainError("convention must be 'ito' or 'strat'")
    record_level = grid.level if record_level is None else record_level
    if not record_level <= scheme_depth <= min(Z.fine.depth for Z in drivers):
        raise DomainError("scheme depth must lie between the record level and the fine depth")
    dB = np.stack([Z.fine.coarsen(scheme_depth) for Z in drivers], axis=1)
    n_steps = dB.shape[0]
    h = grid.length / n_steps
    decay = np.exp(p.basis.eigenvalues * h)
    stride = 2 ** (scheme_depth - record_level)
    S = len(drivers)
    out = np.empty((S, 2**record_level + 1, p.basis.size))
    v = np.tile(p.initial, (S, 1))
    out[:, 0] = v
    c = 0.5 * h if convention == "strat" else 0.0
    for k in range(n_steps):
        Fv = p.F(v)
        incr = h * p.N(v) + np.einsum("si,sin->sn", dB[k], Fv)
        if c:
            incr = incr + c * sum(p.diffusions[i].derivative(v, Fv[:, i]) for i in range(p.d))
        v = decay * (v + incr)
        if not np.all(np.isfinite(v)):
            raise BlowUpError(f"reference scheme blew up at step {k}")
        if (k + 1) % stride == 0:
            out[:, (k + 1) // stride] = v
    return out


def mild_residual(sol: Solution) -> float:
    """Largest one-cell defect of the discrete mild identity (should be at Picard tolerance)."""
    p = sol.problem
    Z = p.driver
    u = sol.values
    decay, wl, wr = exp_weights(p.basis, Z.grid.dt)
    Fu = p.F(u)
    DFF = p.DFF(u, Fu)
    g = endpoint_germ_forward(decay, Fu[:-1], Fu[1:], DFF[:-1], Z.inc, Z.weighted_inc, Z.area, DFF[1:],
                              Z.weighted_area)
    NU = p.N(u)
    pred = decay * u[:-1] + wl * NU[:-1] + wr * NU[1:] + g
    return float(np.max(np.abs(pred - u[1:])))


def smoothing_profile(sol: Solution, beta: float, t_list: Sequence[float]) -> dict:
    """``||u_t||_{H_beta}`` at the requested times with a fitted smoothing constant.

    The constant is ``C = max_t ||u_t||_{beta} / (t^{-beta} ||u||_inf + 1)``,
    the smallest value making ``||u_t||_beta <= C (t^{-beta} ||u||_inf + 1)``
    hold on the sampled times.
    """
    p = sol.problem
    grid = p.driver.grid
    t_list = [float(t) for t in t_list]
    if any(not (grid.t_start < t <= grid.t_end + 1e-15) for t in t_list):
        raise DomainError("profile times must lie in (0, T]")
    sup0 = float(np.max(p.basis.norm(sol.values, 0.0)))
    rows = []
    C = 0.0
    for t in t_list:
        k = grid.index_of(t)
        nb = float(p.basis.norm(sol.values[k], beta))
        bound = (t - grid.t_start) ** (-beta) * sup0 + 1.0
        C = max(C, nb / bound)
        rows.append({"t": t, "norm": nb})
    finite = all(np.isfinite(r["norm"]) for r in rows)
    return {"beta": beta, "rows": rows, "sup_norm": sup0, "fitted_C": C, "finite": finite}
