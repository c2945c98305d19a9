import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from fsnerf.field import ContractError, EncodingConfig, FieldParams, init_field, param_shapes
from fsnerf.geometry import Intrinsics, Pose, Rays, look_at
from fsnerf.renderer import (
    RenderOptions,
    backward_rays,
    composite,
    composite_backward,
    render_image,
    render_rays,
    sample_intervals,
    sample_stratified,
)

from conftest import central_difference, rel_error, relu_margin


def test_midpoints():
    t = sample_stratified(0.0, 1.0, 4)
    np.testing.assert_allclose(t, [[0.125, 0.375, 0.625, 0.875]])


def test_jitter_stays_in_bins():
    near, far = np.array([0.0, 2.0]), np.array([1.0, 6.0])
    t = sample_stratified(near, far, 8, np.random.default_rng(0))
    edges = near[:, None] + (far - near)[:, None] * np.arange(9) / 8
    assert np.all(t >= edges[:, :-1]) and np.all(t < edges[:, 1:])


def test_jitter_sequence_is_reproducible():
    a = sample_stratified(2.0, 6.0, 4, np.random.default_rng(7))
    b = sample_stratified(2.0, 6.0, 4, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    # one uniform offset per bin, drawn row-major from the generator
    u = np.random.default_rng(7).random((1, 4))
    np.testing.assert_allclose(a, 2.0 + (np.arange(4) + u) * 1.0)


def test_sampling_contract():
    with pytest.raises(ContractError):
        sample_stratified(0.0, 1.0, 1)


def run_composite(sigma, delta, rgb, background=None):
    t = np.cumsum(delta, axis=1)
    return composite(t, delta, sigma, rgb, background)


def test_empty_space():
    res = run_composite(np.zeros((3, 5)), np.full((3, 5), 0.2), np.random.default_rng(0).uniform(size=(3, 5, 3)))
    assert np.all(res.weights == 0) and np.all(res.rgb == 0) and np.all(res.acc == 0)
    assert np.all(np.isinf(res.depth))


def test_two_sample_oracle():
    res = run_composite(np.array([[1.0, 2.0]]), np.array([[0.5, 0.5]]),
                        np.array([[[1.0, 0, 0], [0, 1.0, 0]]]))
    w1 = 1 - math.exp(-0.5)
    w2 = math.exp(-0.5) * (1 - math.exp(-1.0))
    assert abs(w1 - 0.39347) < 1e-5 and abs(w2 - 0.38340) < 1e-5
    np.testing.assert_allclose(res.weights[0], [w1, w2], atol=1e-12)
    np.testing.assert_allclose(res.rgb[0], [w1, w2, 0.0], atol=1e-12)


def test_opaque_first_sample():
    t = np.array([[1.0, 2.0, 3.0]])
    res = composite(t, np.ones((1, 3)), np.array([[1e4, 1.0, 1.0]]), np.array([[[0.2, 0.4, 0.6], [1, 1, 1], [1, 1, 1]]]))
    np.testing.assert_allclose(res.rgb[0], [0.2, 0.4, 0.6], atol=1e-9)
    assert abs(res.depth[0] - 1.0) < 1e-9


@given(st.integers(0, 10**6))
def test_weights_sum_to_one_minus_transmittance(seed):
    g = np.random.default_rng(seed)
    sigma = g.exponential(2.0, (16, 32))
    delta = g.uniform(0.0, 0.3, (16, 32))
    res = run_composite(sigma, delta, g.uniform(size=(16, 32, 3)))
    np.testing.assert_allclose(res.weights.sum(axis=1), 1.0 - res.state.trans[:, -1], rtol=0, atol=1e-12)
    assert np.all(res.weights >= 0)


def test_background_blend():
    res = run_composite(np.zeros((1, 4)), np.full((1, 4), 0.1), np.zeros((1, 4, 3)), background=[1.0, 0.5, 0.0])
    np.testing.assert_allclose(res.rgb[0], [1.0, 0.5, 0.0])


def test_negative_density_rejected():
    with pytest.raises(ContractError):
        run_composite(-np.ones((1, 2)), np.ones((1, 2)), np.zeros((1, 2, 3)))


def test_color_gradient_is_weight():
    g = np.random.default_rng(1)
    res = run_composite(g.exponential(size=(4, 6)), g.uniform(0.1, 0.5, (4, 6)), g.uniform(size=(4, 6, 3)))
    gs, gc = composite_backward(res.state, np.ones((4, 3)), None)
    np.testing.assert_array_equal(gc[..., 1], res.weights)
    gs0, gc0 = composite_backward(res.state, np.zeros((4, 3)), np.zeros((4, 6)))
    assert np.all(gs0 == 0) and np.all(gc0 == 0)


@pytest.mark.parametrize("background", [None, (1.0, 1.0, 1.0), (0.2, 0.7, 0.1)])
@given(seed=st.integers(0, 10**6))
def test_composite_gradients(background, seed):
    g = np.random.default_rng(seed)
    r, n = 3, 5
    sigma = g.exponential(1.0, (r, n))
    delta = g.uniform(0.05, 0.5, (r, n))
    rgb = g.uniform(size=(r, n, 3))
    up_rgb, up_w = g.normal(size=(r, 3)), g.normal(size=(r, n))

    def objective():
        res = run_composite(sigma, delta, rgb, background)
        return float((res.rgb * up_rgb).sum() + (res.weights * up_w).sum())

    res = run_composite(sigma, delta, rgb, background)
    gs, gc = composite_backward(res.state, up_rgb, up_w)
    assert rel_error(gs, central_difference(objective, sigma), floor=1e-6) < 1e-4
    assert rel_error(gc, central_difference(objective, rgb), floor=1e-6) < 1e-4


def test_sample_intervals():
    t = np.array([[1.0, 1.5, 3.0]])
    np.testing.assert_allclose(sample_intervals(t, np.array([4.0])), [[0.5, 1.5, 1.0]])


# full rendering -------------------------------------------------------------------

CAM = Intrinsics(12.0, 12.0, 6.0, 6.0, 12, 12)


def zero_density_field():
    p = init_field(np.random.default_rng(0), EncodingConfig(2, 1), depth=2, width=8)
    for v in p.tensors.values():
        v[...] = 0
    p.tensors["density.bias"][:] = -80.0  # softplus(-80) is ~1e-35
    return p


def test_zero_density_renders_black_and_background():
    p = zero_density_field()
    pose = look_at([0, -3, 0])
    rgb, depth, acc = render_image(p, CAM, pose, RenderOptions(1.0, 5.0, 16))
    assert np.all(rgb < 1e-20) and np.all(acc < 1e-20) and np.all(np.isinf(depth))
    rgb, _, _ = render_image(p, CAM, pose, RenderOptions(1.0, 5.0, 16, background=(1.0, 1.0, 1.0)))
    np.testing.assert_allclose(rgb, 1.0)


def slab_field(half_width=1.0, density=2000.0):
    """Raw-coordinate field with density ~ softplus(k (1 - |x|)): an opaque slab |x| < 1.

    A ReLU trunk cannot express a sphere exactly, but two units give |x| and
    with it a slab whose ray intersection is known in closed form.
    """
    enc = EncodingConfig(0, 0, True)
    t = {k: np.zeros(s) for k, s in param_shapes(enc, 1, 4, None).items()}
    t["trunk0.weight"][0, :2] = [1.0, -1.0]
    t["density.weight"][:2, 0] = -density
    t["density.bias"][0] = density * half_width
    return FieldParams(t, enc, 1, 4, None)


def test_slab_depth_matches_intersection():
    p = slab_field()
    origins = np.array([[-4.0, 0.0, 0.0], [-4.0, 0.3, -0.2], [-3.0, -1.0, 2.0]])
    dirs = np.array([[1.0, 0.0, 0.0], [0.8, 0.6, 0.0], [0.6, 0.0, -0.8]])
    near, far, n = 0.5, 7.0, 130
    rays = Rays(origins, dirs, np.full(3, near), np.full(3, far))
    out = render_rays(p, rays, n)
    entry = (-1.0 - origins[:, 0]) / dirs[:, 0]
    np.testing.assert_allclose(out.depth, entry, atol=(far - near) / n)


def test_render_is_deterministic_with_seed():
    p = init_field(np.random.default_rng(2), EncodingConfig(3, 2), depth=2, width=8)
    pose = look_at([0, -3, 1])
    opts = RenderOptions(1.0, 5.0, 8, seed=11, chunk=37)
    a = render_image(p, CAM, pose, opts)
    b = render_image(p, CAM, pose, opts)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x, y)


def test_chunking_does_not_change_result():
    p = init_field(np.random.default_rng(2), EncodingConfig(3, 2), depth=2, width=8)
    pose = look_at([0, -3, 1])
    a = render_image(p, CAM, pose, RenderOptions(1.0, 5.0, 8, chunk=10000))
    b = render_image(p, CAM, pose, RenderOptions(1.0, 5.0, 8, chunk=7))
    for x, y in zip(a, b):
        np.testing.assert_allclose(x, y, rtol=1e-6)


@given(st.integers(0, 10**6))
def test_end_to_end_gradients(seed):
    g = np.random.default_rng(seed)
    p = init_field(g, EncodingConfig(2, 1), depth=2, width=6, dtype=np.float64)
    for v in p.tensors.values():
        v += g.normal(0, 0.2, v.shape)
    d = g.normal(size=(4, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rays = Rays(g.normal(0, 0.3, (4, 3)), d, np.full(4, 0.2), np.full(4, 2.5))
    up = g.normal(size=(4, 3))

    def objective():
        return float((render_rays(p, rays, 6, None, (1.0, 1.0, 1.0)).rgb * up).sum())

    out = render_rays(p, rays, 6, None, (1.0, 1.0, 1.0))
    assume(relu_margin(p, out.positions, out.directions) > 1e-3)  # ReLU kinks break finite differences
    grads = backward_rays(p, out, up)
    for name, tensor in p.tensors.items():
        assert rel_error(grads[name], central_difference(objective, tensor), floor=1e-6) < 1e-4, name
