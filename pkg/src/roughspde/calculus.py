"""Computable residuals of the rough calculus identities.

Every verifier returns raw residuals; thresholds belong to the callers.
"""

from __future__ import annotations

import numpy as np

from .controlled import (
    ControlledPath,
    JointlyControlledPath,
    endpoint_germ_forward,
    forward_germ,
    rough_integral_flat_path,
    _scan,
)
from .errors import DomainError
from .rough_path import RoughDriver, bracket, geometric_decompose
from .rpde import Solution, adjoint_path, jacobian_path
from .spectral_space import exp_weights
from .vector_fields import DriftComposite, PolyField, VectorField, lie_bracket

__all__ = [
    "driver_function",
    "double_integral",
    "fubini_swap_residual",
    "FubiniReport",
    "weak_form_residual",
    "mild_ito_residual",
    "pairing_constancy",
    "PairingReport",
    "pairing_rde_residual",
]


def driver_function(Z: RoughDriver, fn, dfn) -> ControlledPath:
    """Flat controlled path ``Y_t = fn(X_t)`` with ``Y'_t = dfn(X_t)``.

    ``fn`` maps ``(M+1, d)`` to ``(M+1, m)`` and ``dfn`` to ``(M+1, d, m)``
    (derivative along each driver coordinate).
    """
    X = Z.path
    v = np.asarray(fn(X), dtype=float)
    dv = np.asarray(dfn(X), dtype=float)
    return ControlledPath(Z.grid, v, dv, "forward", "flat")


def _trapz_path(g: np.ndarray, dt: float) -> np.ndarray:
    out = np.zeros_like(g)
    np.cumsum(0.5 * dt * (g[1:] + g[:-1]), axis=0, out=out[1:])
    return out


# ----------------------------------------------------------------------
# rough Fubini


def _use_factors(Y: JointlyControlledPath, method: str) -> bool:
    if method == "factored":
        if Y.factors is None:
            raise DomainError("integrand carries no bilinear factors")
        return True
    if method == "dense":
        if not Y.is_dense:
            raise DomainError("integrand has no dense storage")
        return False
    if method == "auto":
        return Y.factors is not None
    raise DomainError(f"unknown method {method!r}")


def _inner_first(Y: JointlyControlledPath, Z: RoughDriver, method: str) -> tuple[np.ndarray, np.ndarray]:
    """``r -> int_0^r Y_{r,s} dX_s`` (values ``(M+1, d)``, derivative ``(M+1, d, d)``)."""
    if _use_factors(Y, method):
        B, P, Q = Y.factors
        vals, der = _slot_path(Q, Z.d)
        C = rough_integral_flat_path(ControlledPath(Z.grid, vals, der, "forward", "flat"), Z)
        # C[r, q, b] = int_0^r Q^q dX^b
        val = np.einsum("abpq,rp,rqb->ra", B, P.values, C)
        diag = np.einsum("abpq,rp,rq->rba", B, P.values, Q.values)  # Y_{r,r} with slots swapped
        der = np.einsum("abpq,rip,rqb->ria", B, P.deriv, C) + diag
        return val, der
    M = Z.n_intervals
    val = np.zeros((M + 1, Z.d))
    der = np.zeros((M + 1, Z.d, Z.d))
    for r in range(1, M + 1):
        g = np.einsum("sab,sb->sa", Y.Y[r, :r], Z.inc[:r]) + np.einsum("siab,sib->sa", Y.Y2[r, :r], Z.area[:r])
        val[r] = g.sum(axis=0)
        gd = (np.einsum("siab,sb->sia", Y.Y1[r, :r], Z.inc[:r])
              + np.einsum("sijab,sjb->sia", Y.Y12[r, :r], Z.area[:r]))
        der[r] = gd.sum(axis=0)
    return val, der + np.einsum("rrab->rba", Y.Y)


def _slot_path(Q: ControlledPath, d: int) -> tuple[np.ndarray, np.ndarray]:
    """Integrand ``Q^q`` against every ``dX^b``: slot ``b`` first, values ``(M+1, d, q, d)``.

    ``vals[r, b, q, c] = Q^q_r delta_{bc}`` so that the flat integral gives
    ``C[r, q, c] = int_0^r Q^q dX^c``.
    """
    eye = np.eye(d)
    vals = np.einsum("rq,bc->rbqc", Q.values, eye)
    der = np.einsum("riq,bc->ribqc", Q.deriv, eye)
    return vals, der


def _outer_first(Y: JointlyControlledPath, Z: RoughDriver, t_idx: int, method: str) -> tuple[np.ndarray, np.ndarray]:
    """``s -> int_s^t Y_{r,s} dX_r`` (values ``(t+1, d)`` indexed by ``b``, derivative ``(t+1, d, d)``)."""
    if _use_factors(Y, method):
        B, P, Q = Y.factors
        vals, der = _slot_path(P, Z.d)
        Cp = rough_integral_flat_path(ControlledPath(Z.grid, vals, der, "forward", "flat"), Z)
        D = Cp[t_idx][None] - Cp[: t_idx + 1]  # D[s, p, a] = int_s^t P^p dX^a
        Qv, Qd = Q.values[: t_idx + 1], Q.deriv[: t_idx + 1]
        Pv = P.values[: t_idx + 1]
        val = np.einsum("abpq,sq,spa->sb", B, Qv, D)
        diag = np.einsum("abpq,sp,sq->sab", B, Pv, Qv)  # Y_{s,s}
        der = np.einsum("abpq,siq,spa->sib", B, Qd, D) - diag
        return val, der
    val = np.zeros((t_idx + 1, Z.d))
    der = np.zeros((t_idx + 1, Z.d, Z.d))
    for s in range(t_idx):
        rows = slice(s, t_idx)
        g = np.einsum("rab,ra->rb", Y.Y[rows, s], Z.inc[rows]) + np.einsum("riab,ria->rb", Y.Y1[rows, s], Z.area[rows])
        val[s] = g.sum(axis=0)
        gd = (np.einsum("rkab,ra->rkb", Y.Y2[rows, s], Z.inc[rows])
              + np.einsum("rikab,ria->rkb", Y.Y12[rows, s], Z.area[rows]))
        der[s] = gd.sum(axis=0)
    diag = np.einsum("ssab->sab", Y.Y)[: t_idx + 1]
    return val, der - diag


def double_integral(Y: JointlyControlledPath, Z: RoughDriver, order: str = "inner_first",
                    t_idx: int | None = None, method: str = "auto") -> float:
    """Iterated rough integral ``sum_ab int int Y^{ab}_{r,s} dX^b_s dX^a_r`` over the triangle.

    ``inner_first``: ``int_0^t (int_0^r Y_{r,s} dX_s) dX_r``;
    ``outer_first``: ``int_0^t (int_s^t Y_{r,s} dX_r) dX_s``.
    The inner integral is a controlled path whose Gubinelli derivative
    picks up the diagonal value ``Y_{r,r}`` (with a minus sign in the
    second order); the outer one is a compensated sum.  ``method`` picks the
    ``O(M)`` factored evaluation of a bilinear pairing or the ``O(M^2)``
    dense one (``auto`` prefers the factors).
    """
    if Y.grid != Z.grid:
        raise DomainError("integrand and driver must share the grid")
    t_idx = Z.n_intervals if t_idx is None else t_idx
    if order == "inner_first":
        val, der = _inner_first(Y, Z, method)
    elif order == "outer_first":
        val, der = _outer_first(Y, Z, t_idx, method)
    else:
        raise DomainError(f"unknown order {order!r}")
    k = slice(0, t_idx)
    return float(forward_germ(val[k], der[k], Z.inc[k], Z.area[k]).sum())


class FubiniReport(dict):
    """``{"uncorrected", "corrected", "correction", "inner", "outer"}``."""


def fubini_swap_residual(Y: JointlyControlledPath, Z: RoughDriver, t_idx: int | None = None,
                         method: str = "auto") -> FubiniReport:
    """Residuals of the order swap with and without the bracket correction.

    With ``f`` the non-geometric part of ``Z`` and ``c = int Y_{s,s} . df_s``
    (Frobenius pairing, left-point sums), the identity reads
    ``outer + c = inner - c``; ``corrected = |outer + c - inner + c|`` and
    ``uncorrected = |outer - inner|``.
    """
    t_idx = Z.n_intervals if t_idx is None else t_idx
    inner = double_integral(Y, Z, "inner_first", t_idx, method)
    outer = double_integral(Y, Z, "outer_first", t_idx, method)
    f = geometric_decompose(Z).f
    df = np.diff(f[: t_idx + 1], axis=0)
    if _use_factors(Y, method):
        B, P, Q = Y.factors
        diag = np.einsum("abpq,sp,sq->sab", B, P.values[:t_idx], Q.values[:t_idx])
    else:
        diag = np.einsum("ssab->sab", Y.Y)[:t_idx]
    corr = float(np.einsum("sab,sab->", diag, df))
    return FubiniReport(
        inner=inner,
        outer=outer,
        correction=corr,
        uncorrected=abs(outer - inner),
        corrected=abs(outer + corr - (inner - corr)),
    )


# ----------------------------------------------------------------------
# weak form and Itô formulas


def _problem(sol: Solution):
    if sol.problem is None:
        raise DomainError("residuals need a Solution carrying its problem")
    return sol.problem


def weak_form_residual(sol: Solution, h, t_idx: int | None = None, values: np.ndarray | None = None) -> float:
    """``max_t |<u_t,h> - <u_0,h> - int <u,Lh> - int <N(u),h> - int <F(u),h> dX|``.

    The time integrals are trapezoid sums; the rough integral is the
    endpoint-germ sum of the scalar controlled path ``<F_j(u),h>`` with
    derivative ``<DF_j(u) F_i(u), h>``.
    ``values`` can replace the solution coefficients (to test detection).
    """
    p = _problem(sol)
    Z = p.driver
    T = Z.n_intervals if t_idx is None else t_idx
    u = sol.values[: T + 1] if values is None else np.asarray(values, dtype=float)[: T + 1]
    h = np.asarray(h, dtype=float)
    Lh = p.basis.apply_generator(h)
    dt = Z.grid.dt
    lin = _trapz_path(u @ Lh, dt)
    drift = _trapz_path(p.N(u) @ h, dt)
    Fu = p.F(u)
    Y = Fu @ h
    Yp = np.einsum("kijn,n->kij", p.DFF(u, Fu), h)
    g = endpoint_germ_forward(1.0, Y[:-1], Y[1:], Yp[:-1], Z.inc[:T], Z.weighted_inc[:T], Z.area[:T], Yp[1:],
                              Z.weighted_area[:T])
    rough = np.concatenate([[0.0], np.cumsum(g)])
    res = u @ h - u[0] @ h - lin - drift - rough
    return float(np.max(np.abs(res)))


def mild_ito_residual(sol: Solution, A: VectorField, t_idx: int | None = None, include_bracket: bool = True,
                      include_commutator: bool = True) -> float:
    """Sup over grid times of the mild Itô formula defect for ``A(u_t)``.

    ``A(u_t) = S_t A(u_0) + int S_{t-r}(DA(u) N(u) + [L,A](u)) dr
               + int S_{t-r} DA(u) F(u) dX + 1/2 int S_{t-r} D^2A(u)(F_i, F_j) d[X]^{ij}``

    with ``[L,A](v) = DA(v) L v - L A(v)``.  The drift and bracket terms use
    exponential trapezoid weights; the rough term is a semigroup
    convolution of the controlled integrand ``DA(u) F_j(u)`` with derivative
    ``D^2A(u)(F_i, F_j) + DA(u) DF_j(u) F_i(u)``.
    """
    p = _problem(sol)
    Z = p.driver
    basis = p.basis
    T = Z.n_intervals if t_idx is None else t_idx
    u = sol.values[: T + 1]
    d = p.d
    dt = Z.grid.dt
    decay, wl, wr = exp_weights(basis, dt)
    Au = A.apply(u)
    drv = A.derivative(u, p.N(u))
    if include_commutator:
        drv = drv + A.derivative(u, basis.apply_generator(u)) - basis.apply_generator(Au)
    G = wl * drv[:-1] + wr * drv[1:]
    Fu = p.F(u)
    Y = np.stack([A.derivative(u, Fu[:, j]) for j in range(d)], axis=1)
    DFF = p.DFF(u, Fu)
    Yp = np.empty((T + 1, d, d, basis.size))
    for i in range(d):
        for j in range(d):
            Yp[:, i, j] = A.second_derivative(u, Fu[:, i], Fu[:, j]) + A.derivative(u, DFF[:, i, j])
    G = G + endpoint_germ_forward(decay, Y[:-1], Y[1:], Yp[:-1], Z.inc[:T], Z.weighted_inc[:T], Z.area[:T],
                                  Yp[1:], Z.weighted_area[:T])
    if include_bracket:
        db = np.diff(bracket(Z, np.arange(T + 1)), axis=0)  # (T, d, d)
        if np.max(np.abs(db)) > 0:
            # 1/2 D^2A(F_i, F_j) d[X]^{ij} with the bracket rate constant within each cell
            left = np.zeros((T, basis.size))
            right = np.zeros((T, basis.size))
            for i in range(d):
                for j in range(d):
                    D2 = A.second_derivative(u, Fu[:, i], Fu[:, j])
                    left += 0.5 * D2[:-1] * db[:, i, j, None]
                    right += 0.5 * D2[1:] * db[:, i, j, None]
            G = G + (wl * left + wr * right) / dt
    pred = _scan(G, basis, dt, Au[0], reverse=False)
    return float(np.max(np.abs(pred - Au)))


# ----------------------------------------------------------------------
# forward-backward pairing


class PairingReport(dict):
    """``{"Y", "deviation", "relative", "correction", "corrected", "corrected_relative"}``."""


def pairing_constancy(sol: Solution, phi, psi, t_idx: int | None = None) -> PairingReport:
    """``Y_t = <J_{t,0} phi, K_{T,t} psi>`` and its deviation from ``Y_0``.

    For geometric drivers ``Y`` is constant.  Otherwise
    ``Y_t - Y_0 = 2 int_0^t <F_s, F~_s> . df_s`` with ``F_s = DF(u_s) J_{s,0}phi``,
    ``F~_s = DF*(u_s) K_{T,s} psi`` and ``f`` the non-geometric part of the
    driver; ``corrected`` is the defect of that identity.
    """
    p = _problem(sol)
    Z = p.driver
    T = Z.n_intervals if t_idx is None else t_idx
    V = jacobian_path(sol, phi, 0, T)
    W = adjoint_path(sol, psi, T)
    Y = np.einsum("kn,kn->k", V, W)
    u = sol.values[: T + 1]
    Fs = np.stack([F.derivative(u, V) for F in p.diffusions], axis=1)
    Ft = np.stack([F.derivative_adjoint(u, W) for F in p.diffusions], axis=1)
    pair = np.einsum("kin,kjn->kij", Fs, Ft)
    f = geometric_decompose(Z).f[: T + 1]
    inc = np.einsum("kij,kij->k", pair[:-1], np.diff(f, axis=0))
    corr = 2.0 * np.concatenate([[0.0], np.cumsum(inc)])
    dev = Y - Y[0]
    scale = abs(Y[0]) if Y[0] != 0 else 1.0
    return PairingReport(
        Y=Y,
        deviation=float(np.max(np.abs(dev))),
        relative=float(np.max(np.abs(dev)) / scale),
        correction=corr,
        corrected=float(np.max(np.abs(dev - corr))),
        corrected_relative=float(np.max(np.abs(dev - corr)) / scale),
    )


def pairing_rde_residual(sol: Solution, A: VectorField, phi, t_idx: int | None = None, s_idx: int = 0,
                         corrupt: bool = False, K: np.ndarray | None = None) -> float:
    """Defect of ``Z_A(r) = Z_A(s) + int_s^r Z_{[F0,A]} dv + int_s^r Z_{[F,A]} dX``.

    ``Z_B(r) = <B(u_r), K_{t,r} phi>`` with ``F0 = L + N``.  The rough term
    is a compensated sum whose derivative in direction ``j`` of the
    integrand ``Z_{[F_i,A]}`` is ``Z_{[F_j,[F_i,A]]}``.  ``corrupt`` flips
    the sign of every bracket (a detector check).  ``K`` may pass a
    precomputed adjoint path ``(t+1, n)``.
    """
    p = _problem(sol)
    Z = p.driver
    t = Z.n_intervals if t_idx is None else t_idx
    if not 0 <= s_idx < t:
        raise DomainError("need s < t")

    if p.drift is None:
        F0 = DriftComposite(p.basis, PolyField(p.basis, np.zeros((1, p.basis.size))))
    elif isinstance(p.drift, DriftComposite):
        F0 = p.drift
    else:
        F0 = DriftComposite(p.basis, p.drift)
    sign = -1.0 if corrupt else 1.0
    if K is None:
        K = adjoint_path(sol, phi, t)
    u = sol.values[: t + 1]
    d = p.d

    def Zof(B):
        return np.einsum("kn,kn->k", B.apply(u), K)

    ZA = Zof(A)
    ZF0 = sign * Zof(lie_bracket(F0, A))
    br1 = [lie_bracket(F, A) for F in p.diffusions]
    Y = sign * np.stack([Zof(B) for B in br1], axis=1)  # (t+1, d)
    Yp = np.empty((t + 1, d, d))
    for i in range(d):
        for j in range(d):
            Yp[:, j, i] = Zof(lie_bracket(p.diffusions[j], br1[i]))
    dt = Z.grid.dt
    k = slice(s_idx, t)
    drift = np.concatenate([[0.0], np.cumsum(0.5 * dt * (ZF0[s_idx:t] + ZF0[s_idx + 1 : t + 1]))])
    k1 = slice(s_idx + 1, t + 1)
    g = endpoint_germ_forward(1.0, Y[k], Y[k1], Yp[k], Z.inc[k], Z.weighted_inc[k], Z.area[k], Yp[k1],
                              Z.weighted_area[k])
    rough = np.concatenate([[0.0], np.cumsum(g)])
    res = ZA[s_idx:] - ZA[s_idx] - drift - rough
    return float(np.max(np.abs(res)))
