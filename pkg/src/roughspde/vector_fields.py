"""Vector fields on the truncated space and their Lie brackets.

Fields act on coefficient arrays of shape ``(..., n)``.  Pointwise
(Nemytskii) fields ``u -> sum_p g_p u^p`` are evaluated on a collocation
grid large enough that every product involved is alias free, so the
closed-form bracket rules match the definitional formula exactly for
band-limited data.

Bracket convention: ``[G, H](u) = DH(u) G(u) - DG(u) H(u)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError, NumericalOnlyBracket
from .spectral_space import ModeBasis

__all__ = [
    "VectorField",
    "PolyField",
    "DriftComposite",
    "BracketField",
    "ScaledField",
    "lie_bracket",
    "field_apply",
    "field_derivative",
    "field_derivative_adjoint",
    "field_second_derivative",
    "apply_all",
    "derivative_all",
    "ginzburg_landau_fields",
    "field_from_spec",
    "mode_vector",
    "FD_STEP",
]

FD_STEP = 1e-5


class VectorField:
    """Common interface.  Subclasses implement ``apply`` and ``derivative``."""

    basis: ModeBasis
    kind: str = "generic"
    smoothing_loss: float = 0.0
    closed: bool = False

    def apply(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.apply(u)

    def derivative(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Central difference fallback, error ``O(FD_STEP^2)``."""
        v = np.asarray(v, dtype=float)
        scale = np.maximum(self.basis.norm(v), 1e-300)[..., None]
        e = FD_STEP / scale
        return (self.apply(u + e * v) - self.apply(u - e * v)) / (2 * e)

    def second_derivative(self, u: np.ndarray, v: np.ndarray, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=float)
        scale = np.maximum(self.basis.norm(w), 1e-300)[..., None]
        e = FD_STEP / scale
        return (self.derivative(u + e * w, v) - self.derivative(u - e * w, v)) / (2 * e)

    def derivative_matrix(self, u: np.ndarray) -> np.ndarray:
        """``DF(u)`` as an ``n x n`` matrix (column ``k`` is ``DF(u) e_k``)."""
        n = self.basis.size
        eye = np.eye(n)
        u = np.asarray(u, dtype=float)
        ub = np.broadcast_to(u, (n, n))
        return self.derivative(ub, eye).T

    def derivative_adjoint(self, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            return np.asarray(w) @ self.derivative_matrix(u)
        out = np.empty(np.broadcast_shapes(u.shape, np.shape(w)))
        for idx in np.ndindex(out.shape[:-1]):
            ui = u[idx] if u.ndim > 1 else u
            out[idx] = np.asarray(w)[idx] @ self.derivative_matrix(ui)
        return out

    def canonical(self) -> np.ndarray | None:
        """Coefficient fingerprint used for deduplication (None if not closed)."""
        return None

    def __neg__(self) -> "VectorField":
        return ScaledField(self, -1.0)

    def scaled(self, c: float) -> "VectorField":
        return ScaledField(self, c)


@dataclass(frozen=True, eq=False)
class PolyField(VectorField):
    """``F(u) = sum_p g_p u^p`` with spatial multipliers ``g_p``.

    ``coeffs`` has shape ``(P+1, n)``; row ``p`` holds the coefficients of
    ``g_p``.  Degree 0 fields are constant, degree at most 1 affine.
    """

    basis: ModeBasis
    coeffs: np.ndarray
    label: str = ""
    closed: bool = True
    smoothing_loss: float = 0.0

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.coeffs, dtype=float))
        if c.shape[-1] != self.basis.size:
            raise DomainError("polynomial coefficients must match the basis size")
        nz = np.flatnonzero(np.any(c != 0, axis=1))
        deg = int(nz[-1]) if nz.size else 0
        c = c[: deg + 1].copy()
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def degree(self) -> int:
        return self.coeffs.shape[0] - 1

    @property
    def kind(self) -> str:
        if self.degree == 0:
            return "constant"
        return "affine" if self.degree == 1 else "nemytskii_poly"

    @cached_property
    def n_points(self) -> int:
        # alias free for g_p u^{p-2} v w projected on K modes
        K = self.basis.K_max
        need = K * (self.degree + 3) + 1
        return max(self.basis.n_colloc, need + (need % 2))

    @cached_property
    def _g_colloc(self) -> np.ndarray:
        return self.basis.to_collocation(self.coeffs, self.n_points)

    def _U(self, u):
        return self.basis.to_collocation(np.asarray(u, dtype=float), self.n_points)

    def _poly(self, U, order: int):
        """Pointwise ``d^order/du^order sum_p g_p u^p`` on the grid."""
        G = self._g_colloc
        out = np.zeros(np.broadcast_shapes(U.shape, G.shape[1:]))
        for p in range(order, self.degree + 1):
            c = 1.0
            for r in range(order):
                c *= p - r
            out = out + c * G[p] * U ** (p - order)
        return out

    def apply(self, u):
        u = np.asarray(u, dtype=float)
        if self.degree == 0:
            return np.broadcast_to(self.coeffs[0], u.shape).copy()
        return self.basis.from_collocation(self._poly(self._U(u), 0))

    def multiplier(self, u) -> np.ndarray:
        """Point values of ``sum_p p g_p u^{p-1}``."""
        return self._poly(self._U(u), 1)

    def derivative(self, u, v):
        v = np.asarray(v, dtype=float)
        if self.degree == 0:
            return np.zeros(np.broadcast_shapes(np.shape(u), v.shape))
        return self.basis.from_collocation(self.multiplier(u) * self._U(v))

    def derivative_adjoint(self, u, w):
        # collocation projection makes the multiplication exactly symmetric
        return self.derivative(u, w)

    def second_derivative(self, u, v, w):
        v = np.asarray(v, dtype=float)
        if self.degree <= 1:
            return np.zeros(np.broadcast_shapes(np.shape(u), v.shape, np.shape(w)))
        return self.basis.from_collocation(self._poly(self._U(u), 2) * self._U(v) * self._U(w))

    def canonical(self) -> np.ndarray:
        return self.coeffs.ravel()

    def __add__(self, other: "PolyField") -> "PolyField":
        P = max(self.degree, other.degree) + 1
        c = np.zeros((P, self.basis.size))
        c[: self.coeffs.shape[0]] += self.coeffs
        c[: other.coeffs.shape[0]] += other.coeffs
        return PolyField(self.basis, c)

    def scaled(self, c: float) -> "PolyField":
        return PolyField(self.basis, c * self.coeffs, self.label)

    def __neg__(self):
        return self.scaled(-1.0)


@dataclass(frozen=True, eq=False)
class DriftComposite(VectorField):
    """``F_0(u) = L u + N(u)`` with ``N`` a polynomial field."""

    basis: ModeBasis
    nonlinearity: PolyField
    label: str = "L+N"
    closed: bool = True
    smoothing_loss: float = 2.0
    kind: str = "drift_composite"

    def apply(self, u):
        return self.basis.apply_generator(u) + self.nonlinearity.apply(u)

    def derivative(self, u, v):
        return self.basis.apply_generator(v) + self.nonlinearity.derivative(u, v)

    def derivative_adjoint(self, u, w):
        return self.basis.apply_generator(w) + self.nonlinearity.derivative_adjoint(u, w)

    def second_derivative(self, u, v, w):
        return self.nonlinearity.second_derivative(u, v, w)

    def canonical(self):
        return None


@dataclass(frozen=True, eq=False)
class ScaledField(VectorField):
    inner: VectorField
    factor: float

    def __post_init__(self):
        object.__setattr__(self, "basis", self.inner.basis)

    @property
    def kind(self):
        return self.inner.kind

    @property
    def closed(self):
        return self.inner.closed

    def apply(self, u):
        return self.factor * self.inner.apply(u)

    def derivative(self, u, v):
        return self.factor * self.inner.derivative(u, v)

    def derivative_adjoint(self, u, w):
        return self.factor * self.inner.derivative_adjoint(u, w)

    def second_derivative(self, u, v, w):
        return self.factor * self.inner.second_derivative(u, v, w)


@dataclass(frozen=True, eq=False)
class BracketField(VectorField):
    """``[G, H]`` evaluated by the definitional formula (no closed form).

    The first derivative uses the children's first and second derivatives;
    the second derivative, where needed, is a central difference.
    """

    G: VectorField
    H: VectorField
    label: str = ""
    closed: bool = False
    kind: str = "numerical_only"

    def __post_init__(self):
        object.__setattr__(self, "basis", self.G.basis)

    @property
    def smoothing_loss(self):
        return self.G.smoothing_loss + self.H.smoothing_loss

    @property
    def depth(self) -> int:
        dg = self.G.depth if isinstance(self.G, BracketField) else 0
        dh = self.H.depth if isinstance(self.H, BracketField) else 0
        return 1 + max(dg, dh)

    def apply(self, u):
        return self.H.derivative(u, self.G.apply(u)) - self.G.derivative(u, self.H.apply(u))

    def derivative(self, u, v):
        g = self.G.apply(u)
        h = self.H.apply(u)
        return (self.H.second_derivative(u, g, v) + self.H.derivative(u, self.G.derivative(u, v))
                - self.G.second_derivative(u, h, v) - self.G.derivative(u, self.H.derivative(u, v)))


def _poly_mul(basis: ModeBasis, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Truncated product of two multipliers (alias free at double padding)."""
    N = max(basis.n_colloc, 3 * basis.K_max + 2)
    return basis.from_collocation(basis.to_collocation(a, N) * basis.to_collocation(b, N))


def _poly_bracket(G: PolyField, H: PolyField) -> PolyField:
    """Monomial rule ``[g u^p, h u^q] = (q - p) g h u^{p+q-1}``."""
    basis = G.basis
    P = max(G.degree + H.degree, 1)
    out = np.zeros((P, basis.size))
    for p in range(G.degree + 1):
        for q in range(H.degree + 1):
            if p == q or p + q == 0:
                continue
            out[p + q - 1] += (q - p) * _poly_mul(basis, G.coeffs[p], H.coeffs[q])
    return PolyField(basis, out)


def _drift_bracket_constant(F0: DriftComposite, A: PolyField) -> PolyField:
    """``[L + N, c] = -L c - DN(u) c`` for a constant field ``c``."""
    basis = F0.basis
    c = A.coeffs[0]
    Nc = F0.nonlinearity.coeffs
    deg = max(F0.nonlinearity.degree - 1, 0)
    out = np.zeros((deg + 1, basis.size))
    out[0] -= basis.apply_generator(c)
    for p in range(1, F0.nonlinearity.degree + 1):
        out[p - 1] -= p * _poly_mul(basis, Nc[p], c)
    return PolyField(basis, out)


def lie_bracket(G: VectorField, H: VectorField, allow_numerical: bool = True) -> VectorField:
    """``[G, H] = DH G - DG H`` in closed form where the family allows it.

    Polynomial pairs use the monomial rule; the drift ``L + N`` against a
    constant field is again polynomial.  Anything else is returned as a
    :class:`BracketField`, or raises :class:`NumericalOnlyBracket` when
    ``allow_numerical`` is false.
    """
    if isinstance(G, PolyField) and isinstance(H, PolyField):
        return _poly_bracket(G, H)
    if isinstance(G, DriftComposite) and isinstance(H, PolyField) and H.degree == 0:
        return _drift_bracket_constant(G, H)
    if isinstance(H, DriftComposite) and isinstance(G, PolyField) and G.degree == 0:
        return -_drift_bracket_constant(H, G)
    if not allow_numerical:
        raise NumericalOnlyBracket(f"bracket of {G.kind} and {H.kind} has no closed form")
    return BracketField(G, H)


def definitional_bracket(G: VectorField, H: VectorField, u: np.ndarray) -> np.ndarray:
    return H.derivative(u, G.apply(u)) - G.derivative(u, H.apply(u))


# ----------------------------------------------------------------------
# functional forms


def field_apply(F: VectorField, u):
    return F.apply(u)


def field_derivative(F: VectorField, u, v):
    return F.derivative(u, v)


def field_derivative_adjoint(F: VectorField, u, w):
    return F.derivative_adjoint(u, w)


def field_second_derivative(F: VectorField, u, v, w):
    return F.second_derivative(u, v, w)


def apply_all(fields: Sequence[VectorField], u: np.ndarray) -> np.ndarray:
    """Stack ``F_i(u)`` on a new axis before the mode axis: ``(..., d, n)``."""
    return np.stack([F.apply(u) for F in fields], axis=-2)


def derivative_all(fields: Sequence[VectorField], u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.stack([F.derivative(u, v) for F in fields], axis=-2)


# ----------------------------------------------------------------------
# constructors


def ginzburg_landau_fields(basis: ModeBasis, scale: float = 1.0):
    """Drift ``L + N`` with ``N(u) = (1 + m) u - u^3`` and the two noises
    ``F_1 = sin + u cos`` and ``F_2 = cos - u sin``."""
    if basis.K_max < 1:
        raise DomainError("the Ginzburg-Landau noises need K_max >= 1")
    n = basis.size
    one = basis.mode(0)
    nc = np.zeros((4, n))
    nc[1] = (1.0 + basis.mass) * one
    nc[3] = -one
    N = PolyField(basis, nc, "N")
    cos1 = basis.mode(basis.cos_index(1)) / np.sqrt(2.0)
    sin1 = basis.mode(basis.sin_index(1)) / np.sqrt(2.0)
    F1 = PolyField(basis, scale * np.stack([sin1, cos1]), "F1")
    F2 = PolyField(basis, scale * np.stack([cos1, -sin1]), "F2")
    return DriftComposite(basis, N), N, [F1, F2]


def mode_vector(basis: ModeBasis, spec) -> np.ndarray:
    """Coefficients from a number (constant), a coefficient list or a ``{"sin1": a, ...}`` mapping."""
    if isinstance(spec, (int, float)):
        return float(spec) * basis.mode(0)
    if isinstance(spec, dict):
        out = np.zeros(basis.size)
        for key, val in spec.items():
            key = str(key)
            if key in ("const", "1"):
                out[0] += val
            elif key.startswith("cos"):
                out[basis.cos_index(int(key[3:]))] += val / np.sqrt(2.0)
            elif key.startswith("sin"):
                out[basis.sin_index(int(key[3:]))] += val / np.sqrt(2.0)
            else:
                raise ConfigError(f"unknown mode key {key!r}")
        return out
    arr = np.asarray(spec, dtype=float)
    if arr.ndim != 1 or arr.size > basis.size:
        raise ConfigError("coefficient list longer than the basis")
    out = np.zeros(basis.size)
    out[: arr.size] = arr
    return out


def field_from_spec(spec: dict, basis: ModeBasis) -> PolyField:
    """Build a polynomial field from a config entry.

    ``{"poly": [g_0, g_1, ...]}`` where each ``g_p`` is a number (constant
    multiple of ``1``), a coefficient list in basis order, or a mapping like
    ``{"sin1": 1.0, "cos2": -0.5}`` in terms of ``sin(kx)`` / ``cos(kx)``.
    """
    if not isinstance(spec, dict) or "poly" not in spec:
        raise ConfigError("field spec must be a mapping with a 'poly' list")
    rows = [mode_vector(basis, g) for g in spec["poly"]]
    if not rows:
        raise ConfigError("empty polynomial")
    return PolyField(basis, np.stack(rows), spec.get("label", ""))
