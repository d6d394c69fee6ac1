"""Bracket sets, projected quadratic forms and the Malliavin-matrix probe.

The recursion is ``A_0 = {F_i}`` and
``A_{k+1} = A_k u {[F_0, A], [F_i, A] : A in A_k}``, with the bracket
``[G, H] = DH G - DG H`` from :mod:`vector_fields`.  Closed-form elements
are polynomial fields; with the drift only brackets against constants are
polynomial, so ``[F_0, A]`` for non-constant ``A`` is kept as a numerical
element.  Numerical elements are bracketed again only up to
``numerical_depth`` nestings.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError
from .rough_path import RoughDriver, lift_brownian, roughness_modulus
from .rpde import RpdeProblem, malliavin_matrix, solve_forward
from .spectral_space import ModeBasis
from .vector_fields import BracketField, PolyField, VectorField, lie_bracket

__all__ = [
    "BracketSet",
    "generate_brackets",
    "constant_rank",
    "projection_matrix",
    "gram_qk",
    "lambda_projected",
    "NorrisReport",
    "norris_check",
    "scaled_instances",
    "TailEstimate",
    "malliavin_tail_mc",
    "DEDUP_TOL",
]

DEDUP_TOL = 1e-12
_N_PROBES = 3


def _normalized(v: np.ndarray) -> np.ndarray | None:
    """Unit vector with the first significant entry positive (``None`` for zero)."""
    s = float(np.max(np.abs(v)))
    if s == 0.0:
        return None
    w = v / np.linalg.norm(v)
    lead = np.flatnonzero(np.abs(w) > 1e-8 * np.max(np.abs(w)))[0]
    return w if w[lead] > 0 else -w


@dataclass
class BracketSet:
    """Iterated bracket generations with their bracket words.

    ``generations[k]`` holds the elements first produced at step ``k``; the
    set ``A_k`` is the union of generations ``0..k``.
    """

    basis: ModeBasis
    generations: list = field(default_factory=list)
    provenance: list = field(default_factory=list)
    numerical_depth: int = 1

    @property
    def k_max(self) -> int:
        return len(self.generations) - 1

    def upto(self, k: int) -> list:
        k = min(k, self.k_max)
        return [A for g in self.generations[: k + 1] for A in g]

    def words_upto(self, k: int) -> list:
        k = min(k, self.k_max)
        return [w for g in self.provenance[: k + 1] for w in g]

    def sizes(self) -> list:
        return [len(g) for g in self.generations]

    def constant_directions(self, k: int | None = None) -> np.ndarray:
        """Coefficient rows of the constant elements of ``A_k``, shape ``(m, n)``."""
        k = self.k_max if k is None else k
        rows = [A.coeffs[0] for A in self.upto(k) if isinstance(A, PolyField) and A.degree == 0]
        return np.array(rows).reshape(-1, self.basis.size)

    def constant_words(self, k: int | None = None) -> list:
        k = self.k_max if k is None else k
        return [w for A, w in zip(self.upto(k), self.words_upto(k))
                if isinstance(A, PolyField) and A.degree == 0]

    def to_records(self) -> list:
        out = []
        for k, (gen, words) in enumerate(zip(self.generations, self.provenance)):
            for A, w in zip(gen, words):
                out.append({
                    "generation": k,
                    "word": w,
                    "kind": A.kind,
                    "degree": A.degree if isinstance(A, PolyField) else -1,
                    "regularity_loss": _regularity_loss(w),
                })
        return out


def _regularity_loss(word: str) -> int:
    """Drift brackets in the word; each can cost one unit of spatial regularity."""
    return word.count("F0")


class _Dedup:
    """Sign-insensitive duplicate filter.

    Polynomial fields compare their normalized coefficient arrays; numerical
    elements compare normalized values at fixed band-limited probe states.
    """

    def __init__(self, basis: ModeBasis, seed: int = 12345):
        self.basis = basis
        rng = np.random.default_rng(seed)
        band = max(basis.K_max - 2, 0)
        scale = np.zeros(basis.size)
        scale[: 2 * band + 1] = 1.0 / (1.0 + basis.frequencies[: 2 * band + 1] ** 2)
        self.probes = rng.standard_normal((_N_PROBES, basis.size)) * scale
        self.poly: dict = {}
        self.numeric: list = []

    def _poly_key(self, A: PolyField):
        w = _normalized(A.coeffs.ravel())
        return None if w is None else (A.degree, w)

    def add(self, A: VectorField) -> bool:
        """Register ``A``; false when it is zero or already present."""
        if isinstance(A, PolyField):
            key = self._poly_key(A)
            if key is None:
                return False
            deg, w = key
            for v in self.poly.get(deg, []):
                if np.max(np.abs(v - w)) <= DEDUP_TOL:
                    return False
            self.poly.setdefault(deg, []).append(w)
            return True
        vals = np.concatenate([A.apply(p) for p in self.probes])
        scale = np.max(np.abs(vals))
        if not np.isfinite(scale) or scale <= DEDUP_TOL:
            return False
        w = _normalized(vals)
        # probe values of numerical elements carry finite-difference noise
        tol = 1e-7
        for v in self.numeric:
            if np.max(np.abs(v - w)) <= tol:
                return False
        self.numeric.append(w)
        return True


def generate_brackets(F0: VectorField, fields: Sequence[VectorField], k_max: int,
                      numerical_depth: int = 1, names: Sequence[str] | None = None) -> BracketSet:
    """Bracket generations ``0..k_max`` with provenance words.

    Each new element is ``[F_0, A]`` or ``[F_i, A]`` for ``A`` in the previous
    generation.  Zero and duplicate elements (equal up to sign within
    ``DEDUP_TOL`` after normalization) are dropped.
    """
    if k_max < 0:
        raise DomainError("k_max must be non-negative")
    fields = list(fields)
    if not fields:
        basis = F0.basis
        return BracketSet(basis, [[] for _ in range(k_max + 1)], [[] for _ in range(k_max + 1)], numerical_depth)
    basis = fields[0].basis
    names = list(names) if names is not None else [f"F{i + 1}" for i in range(len(fields))]
    dedup = _Dedup(basis)
    gen, words = [], []
    for F, w in zip(fields, names):
        if dedup.add(F):
            gen.append(F)
            words.append(w)
    out = BracketSet(basis, [gen], [words], numerical_depth)
    left = [(F0, "F0")] if F0 is not None else []
    left += list(zip(fields, names))
    for _ in range(k_max):
        new, new_words = [], []
        for A, wa in zip(out.generations[-1], out.provenance[-1]):
            if isinstance(A, BracketField) and A.depth >= numerical_depth:
                continue
            for G, wg in left:
                B = lie_bracket(G, A)
                if isinstance(B, BracketField) and B.depth > numerical_depth:
                    continue
                if dedup.add(B):
                    new.append(B)
                    new_words.append(f"[{wg},{wa}]")
        out.generations.append(new)
        out.provenance.append(new_words)
    return out


def constant_rank(A: BracketSet, k: int, projection=5, tol: float = 1e-10) -> int:
    """Rank of the projected constant directions of ``A_k``."""
    P = projection_matrix(A.basis, projection)
    C = A.constant_directions(k)
    if C.shape[0] == 0:
        return 0
    s = np.linalg.svd(C @ P.T, compute_uv=False)
    return int(np.sum(s > tol * max(1.0, s[0])))


def projection_matrix(basis: ModeBasis, projection) -> np.ndarray:
    """Rows spanning ``Pi(H)``: an int ``r`` (first ``r`` modes), an index list or a matrix."""
    n = basis.size
    if projection is None:
        return np.eye(n)
    if np.isscalar(projection):
        r = int(projection)
        if not 0 <= r <= n:
            raise DomainError(f"projection rank must lie in [0, {n}]")
        return np.eye(n)[:r]
    arr = np.asarray(projection)
    if arr.ndim == 1:
        return np.eye(n)[arr.astype(int)]
    if arr.ndim != 2 or arr.shape[1] != n:
        raise DomainError("projection matrix must have one column per mode")
    if not np.allclose(arr @ arr.T, np.eye(arr.shape[0]), atol=1e-10):
        raise DomainError("projection rows must be orthonormal")
    return arr.astype(float)


def gram_qk(A: BracketSet, k: int, u, projection=None) -> np.ndarray:
    """``Q_k(u) = sum_{B in A_k} Pi B(u) (Pi B(u))^T`` on ``Pi(H)``."""
    P = projection_matrix(A.basis, projection)
    u = np.asarray(u, dtype=float)
    elems = A.upto(k)
    if not elems:
        return np.zeros((P.shape[0], P.shape[0]))
    V = np.stack([B.apply(u) for B in elems]) @ P.T
    Q = V.T @ V
    return 0.5 * (Q + Q.T)


def lambda_projected(Q, a: float, projection=None, tol: float = 1e-13) -> float:
    """``inf {<phi, Q phi> : ||phi|| = 1, ||Pi phi|| >= a}``.

    Without ``projection``, ``Q`` is a form on ``Pi(H)`` extended by zero to
    a strictly larger space, and the infimum is ``a^2 lambda_min(Q)``.  With
    ``projection``, ``Q`` acts on the full space and the infimum equals the
    Lagrange dual ``max_{mu >= 0} lambda_min(Q - mu P) + mu a^2``: the joint
    range of two quadratic forms on the sphere is convex in dimension three
    or more, so there is no duality gap.  The concave dual is maximized by
    bisection on its supergradient ``a^2 - ||Pi phi_mu||^2``.
    """
    Q = np.asarray(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise DomainError("Q must be square")
    if not 0.0 <= a <= 1.0:
        raise DomainError("a must lie in [0, 1]")
    Q = 0.5 * (Q + Q.T)
    if projection is None:
        return max(0.0, a * a * float(np.linalg.eigvalsh(Q)[0]))
    n = Q.shape[0]
    R = np.asarray(projection, dtype=float)
    if R.ndim == 1 or np.isscalar(projection):
        R = np.eye(n)[: int(projection)] if np.isscalar(projection) else np.eye(n)[R.astype(int)]
    P = R.T @ R
    if R.shape[0] == 0:
        return max(0.0, float(np.linalg.eigvalsh(Q)[0])) if a == 0 else np.inf
    if a == 1.0 or R.shape[0] == n:
        if R.shape[0] == n:
            return max(0.0, float(np.linalg.eigvalsh(Q)[0]))
        return max(0.0, float(np.linalg.eigvalsh(R @ Q @ R.T)[0]))
    if n < 3:
        raise DomainError("the dual evaluation needs at least three modes")

    def slope(mu):
        w, V = np.linalg.eigh(Q - mu * P)
        v = V[:, 0]
        return a * a - float(v @ P @ v), float(w[0]) + mu * a * a

    g0, f0 = slope(0.0)
    if g0 <= 0.0:
        return max(0.0, f0)
    ev = np.linalg.eigvalsh(Q)
    hi = (ev[-1] - ev[0]) / (1.0 - a * a) + 1.0
    lo = 0.0
    best = f0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        g, f = slope(mid)
        best = max(best, f)
        if g > 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= tol * max(1.0, hi):
            break
    best = max(best, slope(lo)[1], slope(hi)[1])
    return max(0.0, best)


# ----------------------------------------------------------------------
# Norris scaling check


@dataclass
class NorrisReport:
    """Size of the integrands against the size of the output over scaled instances."""

    z_sup: np.ndarray
    integrand_sup: np.ndarray
    slope: float
    intercept: float
    monotone: bool
    roughness: float
    holder: tuple
    deriv_sup: np.ndarray

    def to_record(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "monotone": self.monotone,
            "roughness": self.roughness,
            "holder_x": self.holder[0],
            "holder_area": self.holder[1],
            "z_sup_min": float(np.min(self.z_sup)),
            "z_sup_max": float(np.max(self.z_sup)),
        }


def _norris_output(Y: np.ndarray, Yp: np.ndarray, V: np.ndarray, Z: RoughDriver, z0: float) -> np.ndarray:
    """``Z_t = z0 + int V ds + int Y dX`` by trapezoid and compensated germ sums."""
    dt = Z.grid.dt
    drift = np.concatenate([[0.0], np.cumsum(0.5 * dt * (V[:-1] + V[1:]))])
    g = np.einsum("ki,ki->k", Y[:-1], Z.inc) + np.einsum("kij,kij->k", Yp[:-1], Z.area)
    rough = np.concatenate([[0.0], np.cumsum(g)])
    return z0 + drift + rough


def scaled_instances(Y, Yp, V, scales) -> list:
    """``(c Y, c Y', c V)`` for each ``c`` in ``scales``."""
    Y, Yp, V = (np.asarray(x, dtype=float) for x in (Y, Yp, V))
    return [(c * Y, c * Yp, c * V) for c in scales]


def norris_check(instances, Z: RoughDriver, theta: float = 0.51, z0: float = 0.0,
                 sphere_samples: int = 64) -> NorrisReport:
    """Log-log regression of ``||Y||_inf + ||V||_inf`` against ``||Z||_inf``.

    ``instances`` is a sequence of ``(Y (M+1, d), Y' (M+1, d, d), V (M+1,))``.
    The roughness modulus and Hölder norms of the driver are reported as
    the ``R`` components of the bound.  ``monotone`` states that a smaller
    output never comes with larger integrands across the family.
    """
    zs, ys, ds = [], [], []
    for Y, Yp, V in instances:
        Y = np.asarray(Y, dtype=float).reshape(Z.n_intervals + 1, Z.d)
        Yp = np.asarray(Yp, dtype=float).reshape(Z.n_intervals + 1, Z.d, Z.d)
        V = np.asarray(V, dtype=float).reshape(Z.n_intervals + 1)
        out = _norris_output(Y, Yp, V, Z, z0)
        size = float(np.max(np.abs(Y)) + np.max(np.abs(V)))
        if size == 0.0:
            continue
        zs.append(float(np.max(np.abs(out))))
        ys.append(size)
        ds.append(float(np.max(np.abs(Yp))))
    if len(zs) < 2:
        raise DomainError("norris_check needs at least two non-degenerate instances")
    zs, ys = np.array(zs), np.array(ys)
    if np.any(zs <= 0.0):
        raise DomainError("an instance has identically zero output")
    slope, intercept = np.polyfit(np.log(zs), np.log(ys), 1)
    order = np.argsort(zs)
    monotone = bool(np.all(np.diff(ys[order]) >= -1e-12 * ys.max()))
    return NorrisReport(zs, ys, float(slope), float(intercept), monotone,
                        roughness_modulus(Z, theta, sphere_samples), Z.holder_norms(), np.array(ds))


# ----------------------------------------------------------------------
# Monte Carlo tail of the projected Malliavin minimum


@dataclass
class TailEstimate:
    """Empirical ``P(lambda <= eps)`` with Wilson score half-widths."""

    eps_grid: np.ndarray
    probs: np.ndarray
    n_samples: int
    half_width: np.ndarray
    samples: np.ndarray
    slope: float
    resolvable: tuple
    runtime: float = 0.0
    seeds: tuple = ()

    def __post_init__(self):
        if self.eps_grid.size and np.any(np.diff(self.eps_grid) >= 0):
            raise DomainError("eps_grid must be strictly decreasing")
        if np.any(self.probs < 0) or np.any(self.probs > 1):
            raise DomainError("probabilities must lie in [0, 1]")

    @property
    def non_increasing(self) -> bool:
        return bool(np.all(np.diff(self.probs) <= 0))

    def to_records(self) -> list:
        return [{"eps": float(e), "prob": float(p), "half_width": float(h), "n_samples": self.n_samples}
                for e, p, h in zip(self.eps_grid, self.probs, self.half_width)]


def _wilson(k: np.ndarray, n: int, z: float = 1.96):
    p = k / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return centre, half


def _tail_slope(eps: np.ndarray, probs: np.ndarray) -> tuple[float, tuple]:
    """Log-log slope over the range where ``0 < P < 1``."""
    mask = (probs > 0) & (probs < 1)
    if mask.sum() < 2:
        return float("nan"), ()
    e, p = eps[mask], probs[mask]
    s, _ = np.polyfit(np.log(e), np.log(p), 1)
    return float(s), (float(e.max()), float(e.min()))


def malliavin_tail_mc(problem: RpdeProblem, projection, a: float, eps_grid, n_samples: int,
                      seeds: Sequence[int] | None = None, fine_depth: int | None = None,
                      convention: str = "strat", solver_kw: dict | None = None) -> TailEstimate:
    """Empirical tail of ``inf_{phi in S_a} <M_T phi, phi>`` over Brownian seeds.

    Each seed lifts a fresh Brownian path on the problem's grid, solves
    forward, assembles ``M_T`` on the whole truncated space and evaluates
    :func:`lambda_projected` with the given projection.
    """
    if n_samples <= 0:
        raise DomainError("n_samples must be positive")
    seeds = list(range(n_samples)) if seeds is None else [int(s) for s in seeds][:n_samples]
    if len(seeds) < n_samples:
        raise DomainError("fewer seeds than samples")
    eps = np.asarray(eps_grid, dtype=float)
    if eps.ndim != 1 or eps.size == 0 or np.any(eps <= 0):
        raise DomainError("eps_grid must be a non-empty list of positive values")
    eps = np.sort(eps)[::-1]
    grid = problem.driver.grid
    R = projection_matrix(problem.basis, projection)
    t0 = time.perf_counter()
    lam = np.empty(n_samples)
    for j, seed in enumerate(seeds):
        Z = lift_brownian(seed, problem.d, grid, convention, fine_depth, problem.driver.gamma)
        sol = solve_forward(problem.with_driver(Z), **(solver_kw or {}))
        M = malliavin_matrix(sol)
        lam[j] = lambda_projected(M.full, a, R)
    counts = np.array([(lam <= e).sum() for e in eps], dtype=float)
    probs = counts / n_samples
    _, half = _wilson(counts, n_samples)
    slope, window = _tail_slope(eps, probs)
    return TailEstimate(eps, probs, n_samples, half, lam, slope, window, time.perf_counter() - t0, tuple(seeds))
