import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from roughspde import _kernels_py, kernels

compiled = pytest.importorskip("roughspde._kernels", reason="compiled extension not built")


def _naive_areas(inc, ratio, weight):
    # loop oracle written from the definition of the blockwise iterated sum
    Mc, d = inc.shape[0] // ratio, inc.shape[1]
    tot, area = np.zeros((Mc, d)), np.zeros((Mc, d, d))
    for c in range(Mc):
        x = np.zeros(d)
        for k in range(ratio):
            dx = inc[c * ratio + k]
            area[c] += np.outer(x + weight * dx, dx)
            x += dx
        tot[c] = x
    return tot, area


def test_dispatch_backend():
    assert kernels.BACKEND in ("cython", "python")
    if kernels.BACKEND == "cython":
        assert kernels.linear_propagate is compiled.linear_propagate


@pytest.mark.parametrize("reverse", [False, True])
def test_semigroup_scan_agrees(reverse):
    rng = np.random.default_rng(0)
    G = rng.standard_normal((300, 9))
    decay = np.exp(-rng.random(9))
    init = rng.standard_normal(9)
    a = compiled.semigroup_scan(G, decay, init, reverse)
    b = _kernels_py.semigroup_scan(G, decay, init, reverse)
    assert np.max(np.abs(a - b)) < 1e-12
    anchor = 0 if not reverse else -1
    assert np.array_equal(a[anchor], init)


@pytest.mark.parametrize("weight", [0.0, 0.5])
def test_block_areas_agree(weight):
    rng = np.random.default_rng(1)
    inc = rng.standard_normal((64, 3)) * 0.1
    ref = _naive_areas(inc, 8, weight)
    for impl in (compiled, _kernels_py):
        tot, area = impl.block_areas(inc, 8, weight)
        assert np.max(np.abs(tot - ref[0])) < 1e-14
        assert np.max(np.abs(area - ref[1])) < 1e-14
    # trapezoid weight gives a symmetric part equal to half the squared increment
    tot, area = _kernels_py.block_areas(inc, 8, 0.5)
    sym = 0.5 * (area + area.transpose(0, 2, 1))
    assert np.allclose(sym, 0.5 * np.einsum("ci,cj->cij", tot, tot), atol=1e-14)


@pytest.mark.parametrize("reverse", [False, True])
def test_linear_propagate_agrees(reverse):
    rng = np.random.default_rng(2)
    A = np.eye(6)[None] + 0.05 * rng.standard_normal((128, 6, 6))
    C = 0.1 * rng.standard_normal((128, 6))
    X0 = rng.standard_normal((6, 4))
    a = compiled.linear_propagate(A, C, X0, reverse)
    b = _kernels_py.linear_propagate(A, C, X0, reverse)
    assert a.shape == (129, 6, 4)
    assert np.max(np.abs(a - b)) < 1e-12 * (1 + np.abs(b).max())


def test_shape_errors():
    for impl in (compiled, _kernels_py):
        with pytest.raises(ValueError):
            impl.semigroup_scan(np.zeros((3, 2)), np.ones(3), np.zeros(2))
        with pytest.raises(ValueError):
            impl.block_areas(np.zeros((10, 2)), 3, 0.5)
        with pytest.raises(ValueError):
            impl.linear_propagate(np.zeros((4, 3, 3)), np.zeros((4, 2)), np.zeros((3, 1)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 40), st.booleans())
def test_kernels_agree_on_random_shapes(seed, n, M, reverse):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((M, n))
    decay = rng.random(n)
    init = rng.standard_normal(n)
    assert np.allclose(compiled.semigroup_scan(G, decay, init, reverse),
                       _kernels_py.semigroup_scan(G, decay, init, reverse), atol=1e-12)
    A = 0.5 * rng.standard_normal((M, n, n))
    X0 = rng.standard_normal((n, 2))
    assert np.allclose(compiled.linear_propagate(A, G, X0, reverse),
                       _kernels_py.linear_propagate(A, G, X0, reverse), atol=1e-10)
