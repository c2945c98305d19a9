import math
import struct

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from fsnerf.field import (
    MAGIC,
    CheckpointError,
    ContractError,
    EncodingConfig,
    FieldError,
    FieldParams,
    encode,
    field_backward,
    field_forward,
    init_field,
    load_checkpoint,
    param_shapes,
    save_checkpoint,
)

from conftest import central_difference, rel_error, relu_margin


def tiny_field(seed, depth=3, width=6, skip=1, freqs=(2, 1)):
    r = np.random.default_rng(seed)
    p = init_field(r, EncodingConfig(*freqs), depth=depth, width=width, skip=skip, dtype=np.float64)
    for v in p.tensors.values():
        v += r.normal(0.0, 0.2, v.shape)
    return p


def batch(seed, m=5):
    r = np.random.default_rng(seed + 99)
    d = r.normal(size=(m, 3))
    return r.uniform(-1, 1, (m, 3)), d / np.linalg.norm(d, axis=1, keepdims=True)


# encoding ---------------------------------------------------------------------


def test_encoding_at_origin():
    e = encode(np.zeros((1, 3)), 4, include_input=True)[0]
    blocks = e[3:].reshape(4, 2, 3)
    assert np.all(blocks[:, 0] == 0) and np.all(blocks[:, 1] == 1)


def test_encoding_zero_frequencies_is_identity():
    x = np.random.default_rng(0).normal(size=(4, 3))
    np.testing.assert_array_equal(encode(x, 0, True), x)


def test_encoding_scalar_oracle():
    e = encode(np.array([[0.5, 0.0, 0.0]]), 2)[0]
    expected = [0.5, 0, 0]
    for k in range(2):
        a = (2**k) * 0.5
        expected += [math.sin(a), 0.0, 0.0, math.cos(a), 1.0, 1.0]
    np.testing.assert_allclose(e, expected, atol=1e-15)


def test_encoding_dims():
    cfg = EncodingConfig(10, 4)
    assert cfg.position_dim == 63 and cfg.direction_dim == 27
    assert encode(np.zeros((2, 3)), 10).shape == (2, 63)


# forward ----------------------------------------------------------------------


def test_zero_field_is_constant():
    p = init_field(np.random.default_rng(0), EncodingConfig(3, 2), depth=2, width=8)
    for v in p.tensors.values():
        v[...] = 0
    pos, dirs = batch(0, 7)
    sigma, rgb = field_forward(p, pos, dirs)
    np.testing.assert_allclose(sigma, math.log(2.0), rtol=1e-6)
    np.testing.assert_allclose(rgb, 0.5)


@given(st.integers(0, 1000))
def test_batch_equivariance(seed):
    p = tiny_field(seed)
    pos, dirs = batch(seed, 9)
    perm = np.random.default_rng(seed).permutation(9)
    s, c = field_forward(p, pos, dirs)
    sp, cp = field_forward(p, pos[perm], dirs[perm])
    np.testing.assert_allclose(sp, s[perm], rtol=1e-12)
    np.testing.assert_allclose(cp, c[perm], rtol=1e-12)


def test_hand_computed_forward():
    """One hidden layer of width 2, raw coordinates in, checked with scalar arithmetic."""
    enc = EncodingConfig(0, 0, True)
    shapes = param_shapes(enc, 1, 2, None)
    t = {
        "trunk0.weight": np.array([[1.0, -1.0], [0.5, 0.0], [0.0, 2.0]]),
        "trunk0.bias": np.array([0.1, -0.2]),
        "density.weight": np.array([[1.0], [-0.5]]),
        "density.bias": np.array([0.3]),
        "feature.weight": np.array([[1.0, 0.0], [0.0, 1.0]]),
        "feature.bias": np.array([0.0, 0.1]),
        "color_hidden.weight": np.array([[1.0], [0.0], [0.0], [0.0], [1.0]]),
        "color_hidden.bias": np.array([0.0]),
        "color.weight": np.array([[1.0, -1.0, 0.5]]),
        "color.bias": np.array([0.0, 0.0, 0.2]),
    }
    assert {k: v.shape for k, v in t.items()} == shapes
    p = FieldParams(t, enc, 1, 2, None)
    x, d = (0.2, 0.4, 0.3), (0.0, 0.6, 0.8)
    h1 = max(0.0, 1.0 * x[0] + 0.5 * x[1] + 0.1)  # 0.5
    h2 = max(0.0, -1.0 * x[0] + 2.0 * x[2] - 0.2)  # 0.2
    sigma = math.log1p(math.exp(h1 - 0.5 * h2 + 0.3))
    f1, f2 = h1, h2 + 0.1
    ch = max(0.0, f1 + d[2])  # colour input is [f1, f2, dx, dy, dz]
    rgb = [1 / (1 + math.exp(-(w * ch + b))) for w, b in ((1.0, 0.0), (-1.0, 0.0), (0.5, 0.2))]
    s, c = field_forward(p, np.array([x]), np.array([d]))
    assert math.isclose(s[0], sigma, rel_tol=1e-12)
    np.testing.assert_allclose(c[0], rgb, rtol=1e-12)


def test_shape_errors():
    p = tiny_field(0)
    with pytest.raises(ContractError):
        field_forward(p, np.zeros((4, 2)), np.zeros((4, 2)))
    with pytest.raises(ContractError):
        field_forward(p, np.zeros((4, 3)), np.zeros((3, 3)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_activation_names_layer():
    p = tiny_field(0)
    p.tensors["trunk1.weight"][0, 0] = np.inf
    pos, dirs = batch(0)
    pos[:] = 0.3
    with pytest.raises(FieldError, match="trunk"):
        field_forward(p, pos, dirs)


# backward ----------------------------------------------------------------------


def test_zero_upstream_gives_zero_gradients():
    p = tiny_field(1)
    pos, dirs = batch(1)
    g = field_backward(p, pos, dirs, np.zeros(5), np.zeros((5, 3)))
    assert all(np.all(v == 0) for v in g.values())


def test_duplicate_sample_doubles_gradient():
    p = tiny_field(2)
    pos, dirs = batch(2, 1)
    gs, gc = np.array([0.7]), np.array([[0.1, -0.3, 0.2]])
    one = field_backward(p, pos, dirs, gs, gc)
    two = field_backward(p, np.repeat(pos, 2, 0), np.repeat(dirs, 2, 0), np.repeat(gs, 2), np.repeat(gc, 2, 0))
    for k in one:
        np.testing.assert_allclose(two[k], 2 * one[k], rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("skip", [None, 1, 2])
@given(seed=st.integers(0, 10**6))
def test_gradients_match_finite_differences(skip, seed):
    p = tiny_field(seed, skip=skip)
    pos, dirs = batch(seed)
    r = np.random.default_rng(seed)
    gs, gc = r.normal(size=5), r.normal(size=(5, 3))
    assume(relu_margin(p, pos, dirs) > 1e-3)  # ReLU kinks break finite differences

    def objective():
        s, c = field_forward(p, pos, dirs)
        return float(s @ gs + (c * gc).sum())

    grads = field_backward(p, pos, dirs, gs, gc)
    for name, tensor in p.tensors.items():
        fd = central_difference(objective, tensor)
        assert rel_error(grads[name], fd, floor=1e-6) < 1e-4, name


# checkpoints --------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    p = init_field(np.random.default_rng(0), EncodingConfig(4, 2), depth=3, width=8, skip=2)
    extra = {"adam.m/x": np.arange(6, dtype=np.float32).reshape(2, 3)}
    save_checkpoint(tmp_path / "a.ckpt", p, extra, {"iteration": 7, "note": "x"})
    q, ex, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert meta == {"iteration": 7, "note": "x"}
    assert (q.depth, q.width, q.skip, q.encoding) == (p.depth, p.width, p.skip, p.encoding)
    for k in p.tensors:
        np.testing.assert_array_equal(q.tensors[k], p.tensors[k])
    np.testing.assert_array_equal(ex["adam.m/x"], extra["adam.m/x"])
    assert not (tmp_path / "a.ckpt.tmp").exists()


def test_checkpoint_is_deterministic(tmp_path):
    p = init_field(np.random.default_rng(5), EncodingConfig(2, 1), depth=2, width=4)
    save_checkpoint(tmp_path / "a", p, metadata={"b": 1, "a": 2})
    save_checkpoint(tmp_path / "b", p, metadata={"a": 2, "b": 1})
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_checkpoint_errors(tmp_path):
    p = init_field(np.random.default_rng(0), EncodingConfig(2, 1), depth=2, width=4)
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, p)
    data = path.read_bytes()

    (tmp_path / "magic").write_bytes(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "magic")

    (tmp_path / "ver").write_bytes(MAGIC + struct.pack("<I", 99) + data[12:])
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(tmp_path / "ver")

    (tmp_path / "trunc").write_bytes(data[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "trunc")


def test_checkpoint_missing_tensor(tmp_path):
    p = init_field(np.random.default_rng(0), EncodingConfig(2, 1), depth=2, width=4)
    short = FieldParams({k: v for k, v in p.tensors.items() if k != "color.bias"}, p.encoding, 2, 4, None)
    save_checkpoint(tmp_path / "m", short)
    with pytest.raises(CheckpointError, match="color.bias"):
        load_checkpoint(tmp_path / "m")


def test_init_is_seeded():
    a = init_field(np.random.default_rng(3), depth=2, width=16)
    b = init_field(np.random.default_rng(3), depth=2, width=16)
    assert all(np.array_equal(a.tensors[k], b.tensors[k]) for k in a.tensors)
    assert a.skip is None  # skip index beyond the trunk is dropped
