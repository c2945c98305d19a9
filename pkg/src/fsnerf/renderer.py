"""Differentiable volume rendering along rays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .field import ContractError, FieldError, FieldParams, field_backward, field_forward
from .geometry import Intrinsics, Pose, Rays, image_rays

DEPTH_EPS = 1e-6


class RenderError(RuntimeError):
    pass


def sample_stratified(near, far, n: int, rng: np.random.Generator | None = None, dtype=np.float64) -> np.ndarray:
    """One depth per equal bin of [near, far]; bin midpoints when ``rng`` is None.

    ``near`` and ``far`` are scalars or (R,) arrays; returns (R, n).
    """
    if n < 2:
        raise ContractError(f"need at least 2 samples per ray, got {n}")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    edges = np.linspace(0.0, 1.0, n + 1)
    lower = near[:, None] + (far - near)[:, None] * edges[None, :-1]
    width = ((far - near) / n)[:, None]
    if rng is None:
        offset = 0.5
    else:
        offset = rng.random((lower.shape[0], n))
    return (lower + offset * width).astype(dtype)


def sample_intervals(t, far) -> np.ndarray:
    """delta_i = t_{i+1} - t_i, and far - t_N for the last sample."""
    far = np.broadcast_to(np.asarray(far, dtype=t.dtype).reshape(-1, 1), (t.shape[0], 1))
    return np.diff(np.concatenate([t, far], axis=1), axis=1)


@dataclass
class CompositeState:
    """Forward quantities of :func:`composite`, needed by :func:`composite_backward`."""

    t: np.ndarray
    delta: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray
    weights: np.ndarray
    trans: np.ndarray
    background: np.ndarray | None


@dataclass
class CompositeResult:
    rgb: np.ndarray
    weights: np.ndarray
    depth: np.ndarray
    acc: np.ndarray
    state: CompositeState


def composite(t, delta, sigma, rgb, background=None) -> CompositeResult:
    """Alpha-composite samples along each ray.

    Args:
        t, delta, sigma: (R, N) depths, interval lengths and densities.
        rgb: (R, N, 3) sample colours.
        background: optional (3,) colour blended in with the leftover transmittance.

    ``depth`` is the expected depth sum(w t) / sum(w), ``inf`` where the
    accumulated weight is below 1e-6.
    """
    sigma = np.asarray(sigma)
    if np.any(sigma < 0):
        raise ContractError("negative density passed to composite")
    weights, trans = kernels.composite_forward(sigma, delta)
    color = np.einsum("rn,rnc->rc", weights, rgb)
    if background is not None:
        background = np.asarray(background, dtype=color.dtype)
        color = color + trans[:, -1:] * background
    acc = weights.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        depth = np.where(acc > DEPTH_EPS, (weights * t).sum(axis=1) / acc, np.inf)
    state = CompositeState(t, delta, sigma, rgb, weights, trans, background)
    return CompositeResult(color, weights, depth, acc, state)


def composite_backward(state: CompositeState | None, grad_rgb=None, grad_weights=None):
    """Gradients w.r.t. densities (R, N) and sample colours (R, N, 3)."""
    if state is None:
        raise ContractError("composite_backward needs the state of a forward pass")
    weights = state.weights
    gw = np.zeros_like(weights) if grad_weights is None else np.asarray(grad_weights, dtype=weights.dtype)
    if gw.shape != weights.shape:
        raise ContractError(f"weight gradient {gw.shape} does not match {weights.shape}")
    g_final = np.zeros(weights.shape[0], dtype=weights.dtype)
    if grad_rgb is None:
        grad_colors = np.zeros_like(state.rgb)
    else:
        grad_rgb = np.asarray(grad_rgb, dtype=weights.dtype)
        grad_colors = weights[:, :, None] * grad_rgb[:, None, :]
        gw = gw + np.einsum("rnc,rc->rn", state.rgb, grad_rgb)
        if state.background is not None:
            g_final = grad_rgb @ state.background
    grad_sigma = kernels.composite_backward(gw, g_final, weights, state.trans, state.delta)
    return grad_sigma, grad_colors


@dataclass
class RayBatchRender:
    """Output of :func:`render_rays` plus everything the backward pass needs."""

    rgb: np.ndarray
    depth: np.ndarray
    acc: np.ndarray
    weights: np.ndarray
    composite: CompositeState
    positions: np.ndarray
    directions: np.ndarray
    field_cache: object


def render_rays(params: FieldParams, rays: Rays, n_samples: int, rng=None, background=None, keep_cache: bool = True):
    dtype = params.dtype
    t = sample_stratified(rays.near, rays.far, n_samples, rng, dtype=np.float64)
    delta = sample_intervals(t, rays.far)
    positions = rays.origins[:, None, :] + t[:, :, None] * rays.directions[:, None, :]
    directions = np.broadcast_to(rays.directions[:, None, :], positions.shape)
    r = len(rays)
    pos_flat = positions.reshape(-1, 3).astype(dtype)
    dir_flat = directions.reshape(-1, 3).astype(dtype)
    if keep_cache:
        sigma, rgb, cache = field_forward(params, pos_flat, dir_flat, return_cache=True)
    else:
        sigma, rgb = field_forward(params, pos_flat, dir_flat)
        cache = None
    res = composite(t.astype(dtype), delta.astype(dtype), sigma.reshape(r, n_samples), rgb.reshape(r, n_samples, 3), background)
    return RayBatchRender(res.rgb, res.depth, res.acc, res.weights, res.state, pos_flat, dir_flat, cache)


def backward_rays(params: FieldParams, render: RayBatchRender, grad_rgb=None, grad_weights=None) -> dict:
    """Parameter gradients for upstream gradients on the rendered colours and/or weights."""
    grad_sigma, grad_colors = composite_backward(render.composite, grad_rgb, grad_weights)
    return field_backward(
        params,
        render.positions,
        render.directions,
        grad_sigma.reshape(-1),
        grad_colors.reshape(-1, 3),
        cache=render.field_cache,
    )


@dataclass
class RenderOptions:
    near: float
    far: float
    n_samples: int = 64
    background: tuple | None = None
    chunk: int = 4096
    seed: int | None = None


def render_image(params: FieldParams, camera: Intrinsics, pose: Pose, options: RenderOptions):
    """Render a full image.  Returns (rgb (H, W, 3), depth (H, W), acc (H, W)).

    Depth is the expected ray distance; pixels with no accumulated weight get ``inf``.
    Sampling is jittered only when ``options.seed`` is set.
    """
    rays = image_rays(camera, pose, options.near, options.far)
    rng = None if options.seed is None else np.random.default_rng(options.seed)
    n = len(rays)
    rgb = np.empty((n, 3), dtype=params.dtype)
    depth = np.empty(n)
    acc = np.empty(n, dtype=params.dtype)
    for start in range(0, n, options.chunk):
        sl = slice(start, start + options.chunk)
        chunk = Rays(rays.origins[sl], rays.directions[sl], rays.near[sl], rays.far[sl])
        try:
            out = render_rays(params, chunk, options.n_samples, rng, options.background, keep_cache=False)
        except FieldError as exc:
            rows = f"{start // camera.width}..{(min(start + options.chunk, n) - 1) // camera.width}"
            raise RenderError(f"{exc} while rendering pixel rows {rows}") from exc
        rgb[sl] = out.rgb
        depth[sl] = out.depth
        acc[sl] = out.acc
    shape = (camera.height, camera.width)
    return rgb.reshape(shape + (3,)), depth.reshape(shape), acc.reshape(shape)
