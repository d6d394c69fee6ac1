from dataclasses import dataclass

import numpy as np
import pytest

from roughspde.calculus import (
    double_integral,
    driver_function,
    fubini_swap_residual,
    mild_ito_residual,
    pairing_constancy,
    pairing_rde_residual,
    weak_form_residual,
)
from roughspde.controlled import JointlyControlledPath
from roughspde.errors import DomainError
from roughspde.rough_path import lift_brownian, lift_canonical, with_bracket
from roughspde.rpde import RpdeProblem, mild_residual, solve_forward
from roughspde.spectral_space import ModeBasis, TimeGrid
from roughspde.vector_fields import PolyField, VectorField

from conftest import smooth_path


def _fn(X):
    return np.stack([np.sin(X[:, 0]), np.cos(X[:, 1]), X[:, 0] * X[:, 1]], -1)


def _dfn(X):
    out = np.zeros((X.shape[0], 2, 3))
    out[:, 0, 0] = np.cos(X[:, 0])
    out[:, 1, 1] = -np.sin(X[:, 1])
    out[:, 0, 2] = X[:, 1]
    out[:, 1, 2] = X[:, 0]
    return out


def _gn(X):
    return np.stack([np.exp(0.3 * X[:, 1]), X[:, 0] ** 2], -1)


def _dgn(X):
    out = np.zeros((X.shape[0], 2, 2))
    out[:, 1, 0] = 0.3 * np.exp(0.3 * X[:, 1])
    out[:, 0, 1] = 2 * X[:, 0]
    return out


B = np.random.default_rng(0).standard_normal((2, 2, 3, 2))


def _pairing(Z, dense=False):
    return JointlyControlledPath.from_bilinear(B, driver_function(Z, _fn, _dfn), driver_function(Z, _gn, _dgn),
                                               dense=dense)


@dataclass(frozen=True, eq=False)
class Projection(VectorField):
    """``A(u) = <u, e_j> e_j``."""

    basis: ModeBasis
    j: int

    def apply(self, u):
        out = np.zeros(np.shape(u))
        out[..., self.j] = np.asarray(u)[..., self.j]
        return out

    def derivative(self, u, v):
        return self.apply(np.broadcast_to(v, np.broadcast_shapes(np.shape(u), np.shape(v))))

    def second_derivative(self, u, v, w):
        return np.zeros(np.broadcast_shapes(np.shape(u), np.shape(v), np.shape(w)))


@pytest.fixture(scope="module")
def geo9():
    return lift_canonical(smooth_path, TimeGrid(0.0, 1.0, 9), 12)


@pytest.fixture(scope="module")
def gl_sol9(basis4, gl4, xi4, geo9):
    _, N, fields = gl4
    return solve_forward(RpdeProblem(basis4, N, tuple(fields), geo9, xi4))


def test_double_integral_examples():
    Z = lift_canonical(smooth_path, TimeGrid(0.0, 1.0, 6), 10)
    zero = JointlyControlledPath.from_bilinear(np.zeros_like(B), driver_function(Z, _fn, _dfn),
                                               driver_function(Z, _gn, _dgn))
    assert double_integral(zero, Z) == 0.0 and double_integral(zero, Z, "outer_first") == 0.0
    # rank-one constants against X_t = t: int_0^1 int_0^r a b ds dr = a b / 2
    Zt = lift_canonical(lambda t: t[:, None], TimeGrid(0.0, 1.0, 6), 10)
    a, b = 1.5, -0.4
    P = driver_function(Zt, lambda X: np.full((X.shape[0], 1), a), lambda X: np.zeros((X.shape[0], 1, 1)))
    Q = driver_function(Zt, lambda X: np.full((X.shape[0], 1), b), lambda X: np.zeros((X.shape[0], 1, 1)))
    J = JointlyControlledPath.from_bilinear(np.ones((1, 1, 1, 1)), P, Q, dense=True)
    for order in ("inner_first", "outer_first"):
        for method in ("factored", "dense"):
            assert double_integral(J, Zt, order, method=method) == pytest.approx(0.5 * a * b, abs=1e-12)
    with pytest.raises(DomainError):
        double_integral(J, Zt, "sideways")
    with pytest.raises(DomainError):
        double_integral(J, Zt, method="other")


def test_bilinear_slots_match_their_formulas():
    Z = lift_brownian(1, 2, TimeGrid(0.0, 1.0, 4), "strat")
    P, Q = driver_function(Z, _fn, _dfn), driver_function(Z, _gn, _dgn)
    J = JointlyControlledPath.from_bilinear(B, P, Q, dense=True)
    assert np.max(np.abs(J.Y - np.einsum("abpq,up,sq->usab", B, P.values, Q.values))) < 1e-10
    assert np.max(np.abs(J.Y1 - np.einsum("abpq,uip,sq->usiab", B, P.deriv, Q.values))) < 1e-10
    assert np.max(np.abs(J.Y2 - np.einsum("abpq,up,siq->usiab", B, P.values, Q.deriv))) < 1e-10
    assert np.max(np.abs(J.Y12 - np.einsum("abpq,uip,sjq->usijab", B, P.deriv, Q.deriv))) < 1e-10


def test_fubini_geometric_driver():
    res = []
    for L in (9, 15):
        Z = lift_canonical(smooth_path, TimeGrid(0.0, 1.0, L), L + 2)
        res.append(fubini_swap_residual(_pairing(Z), Z))
    assert res[-1]["uncorrected"] < 1e-8
    assert abs(res[-1]["correction"]) < 1e-12
    assert res[-1]["uncorrected"] < res[0]["uncorrected"]
    # the dense and factored evaluations coincide
    Z = lift_canonical(smooth_path, TimeGrid(0.0, 1.0, 6), 9)
    f = fubini_swap_residual(_pairing(Z, dense=True), Z, method="factored")
    d = fubini_swap_residual(_pairing(Z, dense=True), Z, method="dense")
    assert f["inner"] == pytest.approx(d["inner"], abs=1e-12) and f["outer"] == pytest.approx(d["outer"], abs=1e-12)


def test_fubini_ito_correction():
    Z = lift_brownian(1, 2, TimeGrid(0.0, 1.0, 9), "ito")
    r = fubini_swap_residual(_pairing(Z), Z)
    assert r["uncorrected"] >= 10 * r["corrected"]


def test_fubini_degenerate_integrand():
    # the two orders differ by third-order terms on a finite grid, hence the fine level
    Z = lift_canonical(smooth_path, TimeGrid(0.0, 1.0, 15), 17)
    P = driver_function(Z, _fn, _dfn)
    Q = driver_function(Z, lambda X: np.ones((X.shape[0], 2)), lambda X: np.zeros((X.shape[0], 2, 2)))
    assert fubini_swap_residual(JointlyControlledPath.from_bilinear(B, P, Q, dense=False), Z)["uncorrected"] < 1e-9


def test_weak_form(basis4, gl_sol9, geo9):
    h = basis4.mode(basis4.cos_index(1)) + 0.5 * basis4.mode(basis4.sin_index(2))
    xi = np.random.default_rng(1).standard_normal(basis4.size)
    zero = tuple(PolyField(basis4, np.zeros((1, basis4.size))) for _ in range(2))
    heat = solve_forward(RpdeProblem(basis4, None, zero, geo9, xi))
    assert weak_form_residual(heat, h) < 1e-4
    assert weak_form_residual(gl_sol9, h) < 1e-5
    bumped = gl_sol9.values.copy()
    bumped[100:, basis4.cos_index(1)] += 1e-2
    assert weak_form_residual(gl_sol9, h, values=bumped) > 1e-3


def test_mild_ito_linear_functionals(basis4, gl_sol9):
    ident = PolyField(basis4, np.stack([np.zeros(basis4.size), basis4.mode(0)]))
    assert mild_ito_residual(gl_sol9, ident) == pytest.approx(mild_residual(gl_sol9), abs=1e-12)
    proj = Projection(basis4, basis4.cos_index(1))
    r_with = mild_ito_residual(gl_sol9, proj)
    assert r_with < 1e-5
    assert mild_ito_residual(gl_sol9, proj, include_commutator=False) == pytest.approx(r_with, abs=1e-14)


def test_mild_ito_square(basis4, gl4, xi4, gl_sol9, geo9):
    _, N, fields = gl4
    sq = PolyField(basis4, np.stack([np.zeros(basis4.size), np.zeros(basis4.size), basis4.mode(0)]))
    assert mild_ito_residual(gl_sol9, sq) < 1e-4
    Zi = with_bracket(geo9, -0.5 * geo9.grid.points[:, None, None] * np.eye(2)[None])
    sol = solve_forward(RpdeProblem(basis4, N, tuple(fields), Zi, xi4))
    with_term = mild_ito_residual(sol, sq)
    assert with_term < 1e-4
    assert mild_ito_residual(sol, sq, include_bracket=False) >= 10 * with_term


def test_pairing_constancy(basis4, gl4, xi4, gl_sol9, geo9):
    rng = np.random.default_rng(2)
    phi, psi = rng.standard_normal((2, basis4.size))
    zero = tuple(PolyField(basis4, np.zeros((1, basis4.size))) for _ in range(2))
    heat = solve_forward(RpdeProblem(basis4, None, zero, geo9, xi4))
    assert pairing_constancy(heat, phi, psi)["relative"] < 1e-13
    assert pairing_constancy(gl_sol9, basis4.mode(0), basis4.mode(0))["relative"] < 1e-4
    _, N, fields = gl4
    Zi = lift_brownian(2, 2, TimeGrid(0.0, 1.0, 9), "ito")
    rep = pairing_constancy(solve_forward(RpdeProblem(basis4, N, tuple(fields), Zi, xi4)), basis4.mode(0),
                            basis4.mode(0))
    assert rep["relative"] >= 10 * rep["corrected_relative"]


def test_pairing_rde(basis4, gl4, xi4, gl_sol9, geo9):
    _, _, (F1, _) = gl4
    c = PolyField(basis4, np.random.default_rng(3).standard_normal((1, basis4.size)))
    zero = tuple(PolyField(basis4, np.zeros((1, basis4.size))) for _ in range(2))
    heat = solve_forward(RpdeProblem(basis4, None, zero, geo9, xi4))
    assert pairing_rde_residual(heat, c, basis4.mode(1)) < 1e-4
    good = pairing_rde_residual(gl_sol9, F1, basis4.mode(0))
    assert good < 1e-4
    assert pairing_rde_residual(gl_sol9, F1, basis4.mode(0), corrupt=True) >= 10 * good
    with pytest.raises(DomainError):
        pairing_rde_residual(gl_sol9, F1, basis4.mode(0), t_idx=4, s_idx=4)
