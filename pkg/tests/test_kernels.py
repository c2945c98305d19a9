"""The compiled kernels and the numpy reference agree."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fsnerf import _kernels_py, kernels

try:
    from fsnerf import _ckernels
except ImportError:  # pragma: no cover - extension not built
    _ckernels = None

needs_ext = pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")
    if _ckernels is not None and kernels.BACKEND == "python":
        import os

        assert os.environ.get("FSNERF_PURE_PYTHON") not in (None, "", "0")


def rays(seed, r=7, n=9, dtype=np.float64):
    g = np.random.default_rng(seed)
    sigma = g.exponential(1.5, (r, n)).astype(dtype)
    sigma[0] = 0.0
    sigma[1, 2] = 200.0
    delta = g.uniform(0.01, 0.6, (r, n)).astype(dtype)
    return sigma, delta


@needs_ext
@given(st.integers(0, 10**6))
def test_composite_forward_equivalent(seed):
    sigma, delta = rays(seed)
    wp, tp = kernels.composite_forward(sigma, delta, impl=_kernels_py)
    wc, tc = kernels.composite_forward(sigma, delta, impl=_ckernels)
    np.testing.assert_allclose(wc, wp, rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(tc, tp, rtol=1e-12, atol=1e-15)


@needs_ext
def test_composite_forward_float32_equivalent():
    sigma, delta = rays(3, dtype=np.float32)
    wp, tp = kernels.composite_forward(sigma, delta, impl=_kernels_py)
    wc, tc = kernels.composite_forward(sigma, delta, impl=_ckernels)
    assert wc.dtype == np.float32 and tc.dtype == np.float32
    np.testing.assert_allclose(wc, wp, rtol=1e-5, atol=1e-7)


@needs_ext
@given(st.integers(0, 10**6))
def test_composite_backward_equivalent(seed):
    sigma, delta = rays(seed)
    w, t = kernels.composite_forward(sigma, delta)
    g = np.random.default_rng(seed)
    gw, gf = g.normal(size=w.shape), g.normal(size=w.shape[0])
    a = kernels.composite_backward(gw, gf, w, t, delta, impl=_kernels_py)
    b = kernels.composite_backward(gw, gf, w, t, delta, impl=_ckernels)
    np.testing.assert_allclose(b, a, rtol=1e-10, atol=1e-13)


def splats(seed, n=400, h=9, w=11):
    g = np.random.default_rng(seed)
    u = g.uniform(-1.5, w + 1.5, n)
    v = g.uniform(-1.5, h + 1.5, n)
    z = g.choice([1.0, 1.005, 2.0, 3.0], n) * g.uniform(0.999, 1.001, n)
    vals = g.uniform(0, 1, (n, 4))
    return u, v, z, vals, h, w


@needs_ext
@given(st.integers(0, 10**6), st.sampled_from([0.0, 0.05, 0.3]))
def test_scatter_equivalent(seed, min_weight):
    u, v, z, vals, h, w = splats(seed)
    a = kernels.scatter(u, v, z, vals, h, w, 0.01, min_weight, impl=_kernels_py)
    b = kernels.scatter(u, v, z, vals, h, w, 0.01, min_weight, impl=_ckernels)
    for x, y in zip(a, b):
        np.testing.assert_allclose(y, x, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("impl", [_kernels_py] + ([_ckernels] if _ckernels is not None else []))
def test_scatter_integer_centres_are_identity(impl):
    h, w = 5, 6
    vv, uu = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    vals = np.random.default_rng(0).uniform(size=(h * w, 3))
    front, fw, back, bw, total, zmin = kernels.scatter(uu.ravel(), vv.ravel(), np.ones(h * w), vals, h, w,
                                                       0.01, 0.05, impl=impl)
    np.testing.assert_array_equal(fw, 1.0)
    np.testing.assert_array_equal(bw, 0.0)
    np.testing.assert_array_equal(front.reshape(-1, 3), vals)


@pytest.mark.parametrize("impl", [_kernels_py] + ([_ckernels] if _ckernels is not None else []))
def test_scatter_two_layers(impl):
    # three points on one pixel: two near (within the band) and one far
    u = np.array([0.5, 0.5, 0.5])
    v = np.array([0.5, 0.5, 0.5])
    z = np.array([1.0, 1.005, 2.0])
    vals = np.array([[1.0], [0.0], [5.0]])
    front, fw, back, bw, total, zmin = kernels.scatter(u, v, z, vals, 1, 1, 0.01, 0.0, impl=impl)
    assert fw[0, 0] == 2.0 and front[0, 0, 0] == 1.0
    assert bw[0, 0] == 1.0 and back[0, 0, 0] == 5.0
    assert total[0, 0] == 3.0 and zmin[0, 0] == 1.0
