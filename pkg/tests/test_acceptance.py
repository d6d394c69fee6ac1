"""Acceptance measurements, one test per criterion.

Each test prints a ``criterion NN: PASS|FAIL`` line (also collected in the
terminal summary) and then asserts the criterion at its stated tolerance and
runtime budget.
"""

import json
import time
from pathlib import Path

import numpy as np
import pytest

from roughspde.calculus import (
    driver_function,
    fubini_swap_residual,
    mild_ito_residual,
    pairing_constancy,
    weak_form_residual,
)
from roughspde.cli import load_config, run_experiment
from roughspde.controlled import ControlledPath, JointlyControlledPath, sewing_local_errors
from roughspde.hormander import constant_rank, generate_brackets, norris_check, scaled_instances
from roughspde.rough_path import (
    bracket,
    chen_residual_max,
    geometric_decompose,
    geometric_residual_max,
    lift_brownian,
    lift_canonical,
    load_driver,
    roughness_modulus,
    save_driver,
    translate,
    with_bracket,
)
from roughspde.rpde import (
    RpdeProblem,
    adjoint_jacobian_apply,
    adjoint_path,
    duhamel_derivative,
    ito_reference_batch,
    jacobian_apply,
    malliavin_matrix,
    malliavin_pairings,
    solve_forward,
)
from roughspde.spectral_space import ModeBasis, TimeGrid
from roughspde.vector_fields import PolyField, lie_bracket

from conftest import smooth_path

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _gl(basis4, gl4, xi4, Z):
    _, N, fields = gl4
    return RpdeProblem(basis4, N, tuple(fields), Z, xi4)


# bilinear pairing integrand shared by the Fubini measurements
_B = np.random.default_rng(0).standard_normal((2, 2, 3, 2))


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


def _pairing(Z):
    return JointlyControlledPath.from_bilinear(_B, driver_function(Z, _fn, _dfn), driver_function(Z, _gn, _dgn),
                                               dense=False)


def test_c01_chen_and_geometric(report, tmp_path):
    t0 = time.perf_counter()
    g = TimeGrid(0.0, 1.0, 5)
    Zc = lift_canonical(smooth_path, g, 12)
    Zs = lift_brownian(1, 2, g, "strat")
    Zi = lift_brownian(1, 2, g, "ito")
    drivers = {
        "canonical": Zc,
        "brownian_strat": Zs,
        "brownian_ito": Zi,
        "with_bracket": with_bracket(Zc, 0.3 * g.points[:, None, None] * np.eye(2)[None]),
        "translate": translate(Zs, smooth_path),
        "coarsen": lift_brownian(1, 2, TimeGrid(0.0, 1.0, 7), "strat").coarsen(5),
        "geometric_part": geometric_decompose(Zi).geometric_part,
        "loaded": load_driver(save_driver(Zs, tmp_path / "z.npz")),
    }
    chen = {k: chen_residual_max(Z) for k, Z in drivers.items()}
    geo = geometric_residual_max(Zc)
    dt = time.perf_counter() - t0
    ok = max(chen.values()) < 1e-12 and geo < 1e-8 and dt < 1.0
    report(1, ok, f"max Chen {max(chen.values()):.2e} over {len(chen)} constructors, "
                  f"canonical geometric {geo:.2e}, {dt:.2f} s")
    assert ok


def test_c02_ito_stratonovich(report):
    t0 = time.perf_counter()
    g = TimeGrid(0.0, 1.0, 8)
    Zs = lift_brownian(4, 2, g, "strat")
    Zi = lift_brownian(4, 2, g, "ito")
    diff = np.max(np.abs(Zs.area - Zi.area - 0.5 * g.dt * np.eye(2)[None]))
    br = np.max(np.abs(bracket(Zs)))
    dec = geometric_decompose(Zi)
    f_err = np.max(np.abs(dec.f + 0.5 * g.points[:, None, None] * np.eye(2)[None]))
    # quadratic-variation fluctuation of the fine Riemann sum: a few sqrt(dt_fine)
    tol = 6.0 * np.sqrt(2.0 / Zi.fine.inc.shape[0])
    reassembled = np.max(np.abs(dec.reassemble().area - Zi.area))
    dt = time.perf_counter() - t0
    ok = diff < 1e-14 and br < 1e-12 and f_err < tol and reassembled < 1e-13 and dt < 1.0
    report(2, ok, f"Strat-Ito area gap {diff:.1e}, Strat bracket {br:.1e}, "
                  f"|f + t/2 id| {f_err:.2e} (tol {tol:.2e}), {dt:.2f} s")
    assert ok


def test_c03_sewing_order(report, basis4, gl4, xi4):
    t0 = time.perf_counter()
    Z = lift_brownian(7, 2, TimeGrid(0.0, 1.0, 12), "strat")
    sol = solve_forward(_gl(basis4, gl4, xi4, Z))
    p = sol.problem
    Fu = p.F(sol.values)
    Y = ControlledPath(Z.grid, Fu, p.DFF(sol.values, Fu), "forward", "semigroup", basis4)
    e = sewing_local_errors(Y, Z, range(4, 10))
    lv = np.array(list(e), float)
    err = np.array(list(e.values()))
    rate = -np.polyfit(lv, np.log2(err), 1)[0]
    dt = time.perf_counter() - t0
    target = 3 * Z.gamma - 0.15
    ok = rate >= target and dt < 30
    report(3, ok, f"fitted rate {rate:.3f} (need >= {target:.2f}) over levels 4-9 vs level 12, {dt:.1f} s")
    assert ok


def test_c04_solver_oracles(report, basis4, gl4, xi4):
    t0 = time.perf_counter()
    lin = []
    for mass in (1.0, 0.5):
        b0 = ModeBasis(0, mass)
        F = PolyField(b0, np.array([[0.0], [1.0]]))
        Z = lift_canonical(lambda t: np.asarray(t)[..., None], TimeGrid(0.0, 1.0, 9), 12)
        s = solve_forward(RpdeProblem(b0, None, (F,), Z, np.array([0.7])))
        lin.append(np.max(np.abs(s.values[:, 0] - 0.7 * np.exp((1.0 - mass) * Z.grid.points))))
    Zr = lift_brownian(3, 2, TimeGrid(0.0, 1.0, 10), "strat")
    p = _gl(basis4, gl4, xi4, Zr)
    us = {L: solve_forward(p.with_driver(Zr.coarsen(L))).values for L in (7, 8, 9, 10)}
    diffs = [float(np.max(np.linalg.norm(us[L] - us[L + 1][::2], axis=1))) for L in (7, 8, 9)]
    dt = time.perf_counter() - t0
    ok = max(lin) < 1e-6 and all(np.diff(diffs) < 0) and dt < 60
    report(4, ok, f"linear oracle {max(lin):.2e}, GL refinement diffs "
                  f"{', '.join(f'{d:.2e}' for d in diffs)}, {dt:.1f} s")
    assert ok


@pytest.mark.slow
def test_c05_rough_vs_ito_scheme(report, basis4, gl4, xi4):
    t0 = time.perf_counter()
    seeds = range(100, 108)
    Zs = [lift_brownian(s, 2, TimeGrid(0.0, 1.0, 11), "strat", fine_depth=15) for s in seeds]
    p = _gl(basis4, gl4, xi4, Zs[0])
    res = []
    for L in (8, 9, 10, 11):
        ZL = [Z.coarsen(L) for Z in Zs]
        ref = ito_reference_batch(p, ZL, L + 4, "strat")
        res.append([np.max(np.linalg.norm(solve_forward(p.with_driver(Z)).values - ref[i], axis=1))
                    for i, Z in enumerate(ZL)])
    res = np.array(res)
    mean = res.mean(axis=1)
    per_seed = float(np.mean(np.all(np.diff(res, axis=0) < 0, axis=0)))
    dt = time.perf_counter() - t0
    ok = bool(np.all(np.diff(mean) < 0)) and mean[-1] < 1e-2 and dt < 300
    report(5, ok, f"mean sup gap over {len(seeds)} shared paths, levels 8-11: "
                  f"{', '.join(f'{m:.2e}' for m in mean)}, {dt:.1f} s",
           [f"fraction of single seeds with a strictly decreasing gap: {per_seed:.2f}",
            f"largest single-seed gap at level 11: {res[-1].max():.2e}"])
    assert ok


def test_c06_adjoint_duality(report, basis4, gl4, xi4):
    t0 = time.perf_counter()
    sol = solve_forward(_gl(basis4, gl4, xi4, lift_canonical(smooth_path, TimeGrid(0.0, 1.0, 9), 12)))
    rng = np.random.default_rng(11)
    phi, psi = rng.standard_normal((2, 20, basis4.size))
    J = jacobian_apply(sol, phi)
    K = adjoint_jacobian_apply(sol, psi)
    gap = np.abs(np.sum(J * psi, 1) - np.sum(phi * K, 1)) / np.linalg.norm(phi, axis=1) / np.linalg.norm(psi, axis=1)
    dt = time.perf_counter() - t0
    ok = gap.max() < 1e-4 and dt < 120
    report(6, ok, f"max relative duality gap {gap.max():.2e} over 20 pairs, {dt:.1f} s")
    assert ok


@pytest.mark.slow
def test_c07_forward_backward_constancy(report, basis4, gl4, xi4):
    t0 = time.perf_counter()
    e0 = basis4.mode(0)
    Zs = lift_brownian(2, 2, TimeGrid(0.0, 1.0, 15), "strat", 19)
    strat = pairing_constancy(solve_forward(_gl(basis4, gl4, xi4, Zs)), e0, e0)["relative"]
    Zi = lift_brownian(2, 2, TimeGrid(0.0, 1.0, 9), "ito")
    ito = pairing_constancy(solve_forward(_gl(basis4, gl4, xi4, Zi)), e0, e0)
    dt = time.perf_counter() - t0
    ok = strat < 1e-4 and ito["relative"] >= 10 * ito["corrected_relative"] and dt < 120
    report(7, ok, f"Strat relative deviation {strat:.2e} (level 15); Ito uncorrected {ito['relative']:.2e} "
                  f"vs corrected {ito['corrected_relative']:.2e}, {dt:.1f} s")
    assert ok


def test_c08_rough_fubini(report):
    t0 = time.perf_counter()
    Zg = lift_canonical(smooth_path, TimeGrid(0.0, 1.0, 15), 17)
    geo = fubini_swap_residual(_pairing(Zg), Zg)
    Zi = lift_brownian(1, 2, TimeGrid(0.0, 1.0, 9), "ito")
    ito = fubini_swap_residual(_pairing(Zi), Zi)
    dt = time.perf_counter() - t0
    ok = geo["uncorrected"] < 1e-8 and ito["uncorrected"] >= 10 * ito["corrected"] and dt < 60
    report(8, ok, f"geometric swap residual {geo['uncorrected']:.2e} (level 15); Ito uncorrected "
                  f"{ito['uncorrected']:.2e} vs corrected {ito['corrected']:.2e}, {dt:.1f} s")
    assert ok


def test_c09_weak_and_mild_ito(report, basis4, gl4, xi4):
    t0 = time.perf_counter()
    b = basis4
    Z = lift_canonical(smooth_path, TimeGrid(0.0, 1.0, 9), 12)
    sol = solve_forward(_gl(b, gl4, xi4, Z))
    h = b.mode(b.cos_index(1)) + 0.5 * b.mode(b.sin_index(2))
    weak = weak_form_residual(sol, h)
    sq = PolyField(b, np.stack([np.zeros(b.size), np.zeros(b.size), b.mode(0)]))
    mild = mild_ito_residual(sol, sq)
    Zi = with_bracket(Z, -0.5 * Z.grid.points[:, None, None] * np.eye(2)[None])
    soli = solve_forward(_gl(b, gl4, xi4, Zi))
    with_term = mild_ito_residual(soli, sq)
    without = mild_ito_residual(soli, sq, include_bracket=False)
    dt = time.perf_counter() - t0
    ok = weak < 1e-5 and mild < 1e-4 and with_term < 1e-4 and without >= 10 * with_term and dt < 120
    report(9, ok, f"weak {weak:.2e}, mild Ito {mild:.2e}; Ito driver with bracket {with_term:.2e} "
                  f"vs without {without:.2e}, {dt:.1f} s")
    assert ok


def test_c10_duhamel(report, basis4, gl4, xi4):
    t0 = time.perf_counter()
    Z = lift_canonical(smooth_path, TimeGrid(0.0, 1.0, 9), 12)
    p = _gl(basis4, gl4, xi4, Z)
    sol = solve_forward(p)

    def h(t):
        return np.stack([np.sin(np.pi * t), t**2], -1)

    D = duhamel_derivative(sol, h)
    errs = {}
    for eps in (1e-2, 1e-3, 1e-4):
        moved = solve_forward(p.with_driver(translate(Z, lambda t, e=eps: e * h(t))))
        q = (moved.values[-1] - sol.values[-1]) / eps
        errs[eps] = float(np.linalg.norm(q - D) / np.linalg.norm(D))
    dt = time.perf_counter() - t0
    vals = list(errs.values())
    ok = errs[1e-3] < 5e-2 and all(np.diff(vals) < 0) and dt < 180
    report(10, ok, "relative error vs difference quotient "
                   + ", ".join(f"eps={e:.0e}: {v:.2e}" for e, v in errs.items()) + f", {dt:.1f} s")
    assert ok


def test_c11_bracket_algebra(report, basis4, gl4):
    t0 = time.perf_counter()
    b = basis4
    F0, _, (F1, F2) = gl4
    one = b.mode(0)
    cos1 = b.mode(b.cos_index(1)) / np.sqrt(2.0)
    sin1 = b.mode(b.sin_index(1)) / np.sqrt(2.0)

    def gap(G, target):
        return float(np.max(np.abs(G.coeffs[0] - target))) if G.degree == 0 else np.inf

    B12 = lie_bracket(F1, F2)
    literal = [gap(B12, one), gap(lie_bracket(B12, F1), cos1), gap(lie_bracket(B12, F2), -sin1)]
    B21 = lie_bracket(F2, F1)
    swapped = [gap(B21, one), gap(lie_bracket(B21, F1), cos1), gap(lie_bracket(B21, F2), -sin1)]
    A = generate_brackets(F0, [F1, F2], 6)
    ranks = [constant_rank(A, k, 5) for k in range(7)]
    k_star = next((k for k, r in enumerate(ranks) if r == 5), None)
    dt = time.perf_counter() - t0
    rank_ok = k_star is not None and k_star <= 6
    literal_ok = max(literal) < 1e-12
    ok = literal_ok and rank_ok and dt < 1.0
    report(11, ok, f"literal values [F1,F2]=1, [[F1,F2],F1]=cos, [[F1,F2],F2]=-sin: max gap {max(literal):.2e}; "
                   f"full rank 5 at k*={k_star} (ranks {ranks}), {dt:.2f} s",
           [f"with [G,H] = DH G - DG H the computed values are [F1,F2]={B12.coeffs[0][0]:+.0f}, "
            f"[[F1,F2],F1]=-cos, [[F1,F2],F2]=+sin",
            f"the listed values are reproduced by the reversed order [F2,F1]: max gap {max(swapped):.2e}",
            "no single sign convention yields all three listed values in the listed order, "
            "so the literal check is left failing"])
    assert rank_ok and max(swapped) < 1e-12
    assert literal_ok


@pytest.mark.slow
def test_c12_malliavin(report, basis4, gl4, xi4, tmp_path):
    t0 = time.perf_counter()
    mins = []
    for s in range(50):
        sol = solve_forward(_gl(basis4, gl4, xi4, lift_brownian(1000 + s, 2, TimeGrid(0.0, 1.0, 8), "strat")))
        mins.append(np.linalg.eigvalsh(malliavin_matrix(sol).full)[0])
    A = malliavin_pairings(sol)
    K = adjoint_path(sol, np.eye(basis4.size))
    M1 = malliavin_matrix(sol, pairings=A).full
    _, N, (F1, F2) = gl4
    scale_err = 0.0
    for c in (0.5, 3.0):
        pc = RpdeProblem(basis4, N, (F1.scaled(c), F2.scaled(c)), sol.problem.driver, xi4)
        Mc = malliavin_matrix(sol, pairings=np.einsum("sin,sjn->sij", pc.F(sol.values), K)).full
        scale_err = max(scale_err, float(np.max(np.abs(Mc - c * c * M1)) / np.max(np.abs(M1))))
    cfg = load_config(CONFIGS / "gl_tail.yaml")
    res = run_experiment(cfg, out_dir=tmp_path)
    summ = json.loads(res.json_path.read_text())["summary"]
    dt = time.perf_counter() - t0
    ok = (min(mins) >= -1e-10 and scale_err < 1e-10 and summ["n_samples"] == 200 and summ["all_positive"]
          and summ["tail_non_increasing"] and summ["tail_reaches_zero"] and dt < 1800)
    report(12, ok, f"min eigenvalue over 50 samples {min(mins):.2e}; frozen scaling {scale_err:.1e}; "
                   f"tail over {summ['n_samples']} seeds: min {summ['lambda_min']:.3e}, "
                   f"non-increasing {summ['tail_non_increasing']}, reaches 0 {summ['tail_reaches_zero']}, {dt:.0f} s",
           [f"resolvable window {summ['resolvable_window']}, tail slope {summ['tail_slope']}"])
    assert ok


@pytest.mark.slow
def test_c13_roughness_and_norris(report):
    t0 = time.perf_counter()
    L = [roughness_modulus(lift_brownian(s, 2, TimeGrid(0.0, 1.0, 10), "strat"), 0.51) for s in range(100)]
    Z = lift_brownian(42, 2, TimeGrid(0.0, 1.0, 10), "strat")
    M1 = Z.n_intervals + 1
    Y = np.zeros((M1, 2))
    Y[:, 0] = 1.0
    rep = norris_check(scaled_instances(Y, np.zeros((M1, 2, 2)), np.zeros(M1), [0.1, 0.3, 1, 3, 10]), Z)
    dt = time.perf_counter() - t0
    ok = min(L) > 0 and 0.8 <= rep.slope <= 1.2 and dt < 300
    report(13, ok, f"min roughness over 100 seeds {min(L):.2e}; Norris slope {rep.slope:.3f}, {dt:.1f} s")
    assert ok
