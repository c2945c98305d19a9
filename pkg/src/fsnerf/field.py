"""Positionally-encoded MLP radiance field with a hand-written backward pass.

Topology (fixed)::

    enc(x) -> [Linear -> ReLU] x depth   (input re-concatenated before layer ``skip``)
           -> density head: Linear(width, 1) -> softplus
           -> feature: Linear(width, width)
    [feature, enc(d)] -> Linear(., width // 2) -> ReLU -> Linear(., 3) -> sigmoid

Gradients are computed layer by layer in reverse, without a tape.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import asdict, dataclass

import numpy as np

MAGIC = b"FSNFCKPT"
FORMAT_VERSION = 1


class FieldError(RuntimeError):
    """Non-finite activation inside the network."""


class ContractError(ValueError):
    """Shapes or arguments violate an operation's contract."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncodingConfig:
    position_frequencies: int = 10
    direction_frequencies: int = 4
    include_input: bool = True

    def __post_init__(self):
        if self.position_frequencies < 0 or self.direction_frequencies < 0:
            raise ContractError("frequency counts must be non-negative")

    @property
    def position_dim(self) -> int:
        return 3 * (int(self.include_input) + 2 * self.position_frequencies)

    @property
    def direction_dim(self) -> int:
        return 3 * (int(self.include_input) + 2 * self.direction_frequencies)


def encode(x, frequencies: int, include_input: bool = True) -> np.ndarray:
    """Sin/cos features of ``x * 2**k`` for k < frequencies, per component.

    Layout along the last axis: ``[x, sin(x), cos(x), sin(2x), cos(2x), ...]``
    where each block has the same width as ``x``.
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    lead, c = x.shape[:-1], x.shape[-1]
    # built component-major so every sin/cos writes a contiguous block; the
    # transposed view handed back is fine for matmul
    xt = np.ascontiguousarray(x.reshape(-1, c).T)
    first = 1 if include_input else 0
    out = np.empty((first + 2 * frequencies, c, xt.shape[1]), dtype=x.dtype)
    if include_input:
        out[0] = xt
    if frequencies:
        scaled = (2.0 ** np.arange(frequencies)).astype(x.dtype)[:, None, None] * xt[None]
        np.sin(scaled, out=out[first::2])
        np.cos(scaled, out=out[first + 1 :: 2])
    return out.reshape(-1, xt.shape[1]).T.reshape(lead + (out.shape[0] * c,))


@dataclass
class FieldParams:
    """Named weights of the field, ordered as they appear in the forward pass."""

    tensors: dict
    encoding: EncodingConfig
    depth: int
    width: int
    skip: int | None

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "FieldParams":
        return FieldParams({k: v.copy() for k, v in self.tensors.items()}, self.encoding, self.depth, self.width, self.skip)

    def astype(self, dtype) -> "FieldParams":
        return FieldParams(
            {k: v.astype(dtype) for k, v in self.tensors.items()}, self.encoding, self.depth, self.width, self.skip
        )

    def zeros_like(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def check(self) -> None:
        shapes = param_shapes(self.encoding, self.depth, self.width, self.skip)
        if list(shapes) != list(self.tensors):
            raise ContractError(f"parameter names {list(self.tensors)} do not match topology {list(shapes)}")
        for name, shape in shapes.items():
            if self.tensors[name].shape != shape:
                raise ContractError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")
            if not np.all(np.isfinite(self.tensors[name])):
                raise ContractError(f"{name}: non-finite values")


def param_shapes(encoding: EncodingConfig, depth: int, width: int, skip: int | None) -> dict:
    if depth < 1 or width < 2:
        raise ContractError(f"need depth >= 1 and width >= 2, got {depth}, {width}")
    if skip is not None and not 0 < skip < depth:
        raise ContractError(f"skip index {skip} must lie in (0, {depth})")
    shapes = {}
    in_dim = encoding.position_dim
    for i in range(depth):
        fan_in = in_dim if i == 0 else width
        if skip is not None and i == skip:
            fan_in += in_dim
        shapes[f"trunk{i}.weight"] = (fan_in, width)
        shapes[f"trunk{i}.bias"] = (width,)
    half = max(1, width // 2)
    shapes["density.weight"] = (width, 1)
    shapes["density.bias"] = (1,)
    shapes["feature.weight"] = (width, width)
    shapes["feature.bias"] = (width,)
    shapes["color_hidden.weight"] = (width + encoding.direction_dim, half)
    shapes["color_hidden.bias"] = (half,)
    shapes["color.weight"] = (half, 3)
    shapes["color.bias"] = (3,)
    return shapes


def init_field(
    rng: np.random.Generator,
    encoding: EncodingConfig | None = None,
    depth: int = 8,
    width: int = 256,
    skip: int | None = 4,
    dtype=np.float32,
) -> FieldParams:
    """He-uniform weights, zero biases."""
    encoding = encoding or EncodingConfig()
    if skip is not None and skip >= depth:
        skip = None
    tensors = {}
    for name, shape in param_shapes(encoding, depth, width, skip).items():
        if name.endswith(".weight"):
            bound = np.sqrt(6.0 / shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        else:
            tensors[name] = np.zeros(shape, dtype=dtype)
    return FieldParams(tensors, encoding, depth, width, skip)


def softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _check_finite(name, arr):
    if not np.isfinite(arr).all():
        raise FieldError(f"non-finite activation in layer {name}")


@dataclass
class FieldCache:
    """Intermediate activations kept by :func:`field_forward` for the backward pass."""

    pos_enc: np.ndarray
    dir_enc: np.ndarray
    layer_inputs: list
    hidden: list
    density_pre: np.ndarray
    color_in: np.ndarray
    color_hidden: np.ndarray
    rgb: np.ndarray


def field_forward(params: FieldParams, positions, directions, return_cache: bool = False):
    """Evaluate density and colour for a batch of samples.

    Args:
        positions: (M, 3) world positions.
        directions: (M, 3) unit view directions.

    Returns:
        ``(sigma, rgb)`` with shapes (M,) and (M, 3), plus a :class:`FieldCache`
        when ``return_cache`` is set.
    """
    t = params.tensors
    dtype = params.dtype
    positions = np.asarray(positions, dtype=dtype)
    directions = np.asarray(directions, dtype=dtype)
    if positions.ndim != 2 or positions.shape[1] != 3 or directions.shape != positions.shape:
        raise ContractError(f"positions {positions.shape} and directions {directions.shape} must both be (M, 3)")
    enc = params.encoding
    pos_enc = encode(positions, enc.position_frequencies, enc.include_input)
    dir_enc = encode(directions, enc.direction_frequencies, enc.include_input)

    h = pos_enc
    layer_inputs, hidden = [], []
    for i in range(params.depth):
        if params.skip is not None and i == params.skip:
            h = np.concatenate([h, pos_enc], axis=-1)
        layer_inputs.append(h)
        h = h @ t[f"trunk{i}.weight"] + t[f"trunk{i}.bias"]
        np.maximum(h, 0, out=h)
        _check_finite(f"trunk{i}", h)
        hidden.append(h)

    density_pre = (h @ t["density.weight"] + t["density.bias"])[:, 0]
    _check_finite("density", density_pre)
    sigma = softplus(density_pre)

    feature = h @ t["feature.weight"] + t["feature.bias"]
    color_in = np.concatenate([feature, dir_enc], axis=-1)
    ch = color_in @ t["color_hidden.weight"] + t["color_hidden.bias"]
    np.maximum(ch, 0, out=ch)
    _check_finite("color_hidden", ch)
    color_pre = ch @ t["color.weight"] + t["color.bias"]
    _check_finite("color", color_pre)
    rgb = sigmoid(color_pre)

    if not return_cache:
        return sigma, rgb
    cache = FieldCache(pos_enc, dir_enc, layer_inputs, hidden, density_pre, color_in, ch, rgb)
    return sigma, rgb, cache


def field_backward(params: FieldParams, positions, directions, grad_sigma, grad_rgb, cache: FieldCache | None = None) -> dict:
    """Gradients of ``sum(sigma * grad_sigma) + sum(rgb * grad_rgb)`` w.r.t. every parameter."""
    if cache is None:
        _, _, cache = field_forward(params, positions, directions, return_cache=True)
    t = params.tensors
    dtype = params.dtype
    m = cache.pos_enc.shape[0]
    grad_sigma = np.asarray(grad_sigma, dtype=dtype).reshape(-1)
    grad_rgb = np.asarray(grad_rgb, dtype=dtype)
    if grad_sigma.shape != (m,) or grad_rgb.shape != (m, 3):
        raise ContractError(f"output gradients {grad_sigma.shape}, {grad_rgb.shape} do not match batch of {m}")

    grads = {}
    # colour branch
    rgb = cache.rgb
    g_color_pre = grad_rgb * rgb * (1 - rgb)
    grads["color.weight"] = cache.color_hidden.T @ g_color_pre
    grads["color.bias"] = g_color_pre.sum(axis=0)
    g_ch = g_color_pre @ t["color.weight"].T
    g_ch *= cache.color_hidden > 0
    grads["color_hidden.weight"] = cache.color_in.T @ g_ch
    grads["color_hidden.bias"] = g_ch.sum(axis=0)
    g_feature = g_ch @ t["color_hidden.weight"][: params.width].T

    h_last = cache.hidden[-1]
    grads["feature.weight"] = h_last.T @ g_feature
    grads["feature.bias"] = g_feature.sum(axis=0)

    # density head: d softplus = sigmoid
    g_density_pre = (grad_sigma * sigmoid(cache.density_pre))[:, None]
    grads["density.weight"] = h_last.T @ g_density_pre
    grads["density.bias"] = g_density_pre.sum(axis=0)

    g_h = g_feature @ t["feature.weight"].T + g_density_pre @ t["density.weight"].T
    for i in reversed(range(params.depth)):
        g_h = g_h * (cache.hidden[i] > 0)
        grads[f"trunk{i}.weight"] = cache.layer_inputs[i].T @ g_h
        grads[f"trunk{i}.bias"] = g_h.sum(axis=0)
        if i > 0:
            g_in = g_h @ t[f"trunk{i}.weight"].T
            # the skip's re-concatenated encoding has no parameters upstream
            g_h = g_in[:, : params.width]
    return {name: grads[name].astype(dtype, copy=False) for name in t}


# checkpoint file ------------------------------------------------------------


def save_checkpoint(path, params: FieldParams, extra_tensors: dict | None = None, metadata: dict | None = None) -> None:
    """Write a checkpoint atomically (temporary file, then rename).

    Layout, little-endian::

        magic (8 bytes) | version u32 | header_len u32 | header JSON (utf-8)
        record_count u32 | records...
        record: name_len u32 | name | ndim u32 | dims u32 * ndim | float32 data (row-major)
    """
    header = {
        "encoding": asdict(params.encoding),
        "depth": params.depth,
        "width": params.width,
        "skip": params.skip,
        "metadata": metadata or {},
    }
    records = list(params.tensors.items()) + list((extra_tensors or {}).items())
    buf = io.BytesIO()
    buf.write(MAGIC)
    header_bytes = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
    buf.write(header_bytes)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        name_bytes = name.encode()
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path, dtype=np.float32):
    """Returns ``(params, extra_tensors, metadata)``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a field checkpoint (bad magic)")
    try:
        return _parse_checkpoint(data, dtype, path)
    except (struct.error, ValueError, UnicodeDecodeError, KeyError, TypeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({type(exc).__name__}: {exc})") from exc


def _parse_checkpoint(data, dtype, path):
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<II", data, off)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    off += 8
    header = json.loads(data[off : off + hlen].decode())
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        if off + 4 * size > len(data):
            raise CheckpointError(f"{path}: truncated data for tensor {name}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape).astype(dtype)
        off += 4 * size
    encoding = EncodingConfig(**header["encoding"])
    names = param_shapes(encoding, header["depth"], header["width"], header["skip"])
    missing = [k for k in names if k not in tensors]
    if missing:
        raise CheckpointError(f"{path}: missing tensors {', '.join(missing)}")
    params = FieldParams({k: tensors.pop(k) for k in names}, encoding, header["depth"], header["width"], header["skip"])
    params.check()
    return params, tensors, header["metadata"]
