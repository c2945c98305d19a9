"""Training objectives: photometric loss with a saliency split, multi-level
semantic consistency (MSC) and information potential (IP).

Every loss returns its value together with the gradient w.r.t. its input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataio import unpack_floats

IP_EPS = 1e-6


class LossConfigError(ValueError):
    pass


@dataclass
class LossBreakdown:
    photometric_fg: float = 0.0
    photometric_bg: float = 0.0
    msc: float = 0.0
    ip: float = 0.0
    lambda_msc: float = 0.0
    lambda_ip: float = 0.0
    bg_weight: float = 1.0
    n_fg: int = 0
    n_bg: int = 0
    n_ip_rays: int = 0
    msc_evaluated: bool = False
    ip_evaluated: bool = False

    @property
    def photometric(self) -> float:
        return self.photometric_fg + self.bg_weight * self.photometric_bg

    @property
    def total(self) -> float:
        return self.photometric + self.lambda_msc * self.msc + self.lambda_ip * self.ip


# photometric ----------------------------------------------------------------


@dataclass
class PhotometricResult:
    loss: float
    grad: np.ndarray
    fg: float
    bg: float
    n_fg: int
    n_bg: int
    empty_fg: bool
    empty_bg: bool


def photometric_loss(rendered, reference, validity, saliency, bg_weight: float = 1.0) -> PhotometricResult:
    """``mean_fg ||c - c*||^2 + bg_weight * mean_bg ||c - c*||^2`` over valid pixels.

    A region without valid pixels contributes 0 and is flagged ``empty_*``.
    """
    rendered = np.asarray(rendered)
    reference = np.asarray(reference, dtype=rendered.dtype)
    validity = np.asarray(validity, dtype=bool)
    saliency = np.asarray(saliency, dtype=bool)
    if rendered.shape != reference.shape or validity.shape != rendered.shape[:1] or saliency.shape != validity.shape:
        raise LossConfigError(
            f"shape mismatch: rendered {rendered.shape}, reference {reference.shape}, "
            f"validity {validity.shape}, saliency {saliency.shape}"
        )
    diff = rendered - reference
    sq = (diff * diff).sum(axis=-1)
    grad = np.zeros_like(rendered)
    out = {}
    for name, mask, scale in (("fg", validity & saliency, 1.0), ("bg", validity & ~saliency, bg_weight)):
        n = int(mask.sum())
        out[name] = (float(sq[mask].mean()) if n else 0.0, n)
        if n:
            grad[mask] = (2.0 * scale / n) * diff[mask]
    (fg, n_fg), (bg, n_bg) = out["fg"], out["bg"]
    return PhotometricResult(fg + bg_weight * bg, grad, fg, bg, n_fg, n_bg, n_fg == 0, n_bg == 0)


# information potential ------------------------------------------------------


@dataclass
class IPResult:
    loss: float
    grad: np.ndarray
    n_rays: int
    n_excluded: int
    empty: bool


def ip_loss(weights, eps: float = IP_EPS) -> IPResult:
    """Negative mean over rays of the sum of squared normalised weights.

    Rays whose weights sum below ``eps`` are left out and counted.
    """
    weights = np.asarray(weights)
    if weights.ndim != 2:
        raise LossConfigError(f"weights must be (rays, samples), got {weights.shape}")
    if np.any(weights < 0):
        raise LossConfigError("ray weights must be non-negative")
    s = weights.sum(axis=1)
    keep = s >= eps
    n = int(keep.sum())
    grad = np.zeros_like(weights)
    if n == 0:
        return IPResult(0.0, grad, 0, weights.shape[0], True)
    w = weights[keep]
    sk = s[keep][:, None]
    q = (w * w).sum(axis=1, keepdims=True)
    loss = -float((q[:, 0] / sk[:, 0] ** 2).sum()) / n
    # d/dw_k (q / s^2) = 2 w_k / s^2 - 2 q / s^3
    grad[keep] = -(2.0 * w / sk**2 - 2.0 * q / sk**3) / n
    return IPResult(loss, grad, n, int((~keep).sum()), False)


# embeddings and MSC ---------------------------------------------------------


def area_resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) box-filter resampling operator; rows sum to one."""
    edges_out = np.linspace(0.0, n_in, n_out + 1)
    lo = edges_out[:-1, None]
    hi = edges_out[1:, None]
    j = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, j + 1) - np.maximum(lo, j), 0.0, None)
    return overlap / (hi - lo)


def resize2d(ry, image, rx) -> np.ndarray:
    """Separable resampling of an (H, W, C) image: rows by ``ry``, columns by ``rx``."""
    rows = np.tensordot(ry, image, axes=(1, 0))
    return np.tensordot(rows, rx, axes=(1, 1)).transpose(0, 2, 1)


def center_crop_box(height: int, width: int, fraction: float):
    ch = max(1, int(round(height * fraction)))
    cw = max(1, int(round(width * fraction)))
    top = (height - ch) // 2
    left = (width - cw) // 2
    return top, left, ch, cw


class BuiltinEmbedding:
    """Deterministic, differentiable stand-in for a pretrained image encoder.

    The image is split into ``grid x grid`` cells; per cell the features are
    the mean colour and the mean absolute horizontal and vertical finite
    differences per channel.  The concatenation is L2-normalised.
    """

    differentiable = True

    def __init__(self, input_size: int = 24, grid: int = 4):
        if input_size % grid:
            raise LossConfigError(f"input size {input_size} must be a multiple of the grid {grid}")
        self.input_size = input_size
        self.grid = grid
        self.min_input = grid

    @property
    def cell(self) -> int:
        return self.input_size // self.grid

    def _cells(self, image):
        g, s = self.grid, self.cell
        return image.reshape(g, s, g, s, image.shape[-1]).transpose(0, 2, 1, 3, 4)

    def raw_features(self, image) -> np.ndarray:
        cells = self._cells(np.asarray(image))
        mean = cells.mean(axis=(2, 3))
        dx = np.abs(np.diff(cells, axis=3)).mean(axis=(2, 3))
        dy = np.abs(np.diff(cells, axis=2)).mean(axis=(2, 3))
        return np.concatenate([mean.ravel(), dx.ravel(), dy.ravel()])

    def raw_backward(self, image, grad_raw) -> np.ndarray:
        image = np.asarray(image)
        g, s, c = self.grid, self.cell, image.shape[-1]
        cells = self._cells(image)
        n = g * g * c
        g_mean = grad_raw[:n].reshape(g, g, c)
        g_dx = grad_raw[n : 2 * n].reshape(g, g, c)
        g_dy = grad_raw[2 * n :].reshape(g, g, c)
        out = np.broadcast_to((g_mean / (s * s))[:, :, None, None, :], cells.shape).copy()
        if s > 1:
            sx = np.sign(np.diff(cells, axis=3)) * (g_dx / (s * (s - 1)))[:, :, None, None, :]
            out[:, :, :, 1:, :] += sx
            out[:, :, :, :-1, :] -= sx
            sy = np.sign(np.diff(cells, axis=2)) * (g_dy / (s * (s - 1)))[:, :, None, None, :]
            out[:, :, 1:, :, :] += sy
            out[:, :, :-1, :, :] -= sy
        return out.transpose(0, 2, 1, 3, 4).reshape(image.shape)

    def __call__(self, image) -> np.ndarray:
        raw = self.raw_features(image)
        return raw / max(np.linalg.norm(raw), 1e-12)

    def backward(self, image, grad_feature) -> np.ndarray:
        raw = self.raw_features(image)
        norm = max(np.linalg.norm(raw), 1e-12)
        f = raw / norm
        grad_raw = (grad_feature - f * (f @ grad_feature)) / norm
        return self.raw_backward(image, grad_raw)


class ExternalEmbedding:
    """Precomputed features read from flat-float files; evaluation only.

    ``lookup(key, level)`` opens ``<root>/<key>_l<level>.f32`` (u32 count, then
    little-endian float32 values).
    """

    differentiable = False

    def __init__(self, root):
        from pathlib import Path

        self.root = Path(root)

    def lookup(self, key: str, level: int) -> np.ndarray:
        return unpack_floats(self.root / f"{key}_l{level}.f32")


def msc_score_external(provider: ExternalEmbedding, synth_key: str, ref_key: str, levels: int) -> float:
    """MSC value from precomputed features (no gradients)."""
    total = 0.0
    for level in range(levels):
        a = provider.lookup(synth_key, level)
        b = provider.lookup(ref_key, level)
        total += 1.0 - float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return total


@dataclass
class MSCConfig:
    crop_fractions: tuple = (1 / 3, 2 / 3, 1.0)
    provider: object = field(default_factory=BuiltinEmbedding)

    def __post_init__(self):
        fr = tuple(self.crop_fractions)
        if not fr or any(not 0 < f <= 1 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise LossConfigError(f"crop fractions must be strictly increasing in (0, 1], got {fr}")


@dataclass
class MSCResult:
    loss: float
    grad: np.ndarray | None
    similarities: list
    crop_sizes: list


def msc_loss(synth, reference, cfg: MSCConfig | None = None, need_grad: bool = True) -> MSCResult:
    """Sum over nested centre crops of (1 - cosine similarity) between embeddings."""
    cfg = cfg or MSCConfig()
    provider = cfg.provider
    synth = np.asarray(synth)
    reference = np.asarray(reference, dtype=synth.dtype)
    if synth.shape != reference.shape:
        raise LossConfigError(f"image shapes differ: {synth.shape} vs {reference.shape}")
    if need_grad and not provider.differentiable:
        raise LossConfigError("embedding provider is not differentiable")
    h, w = synth.shape[:2]
    n = provider.input_size
    grad = np.zeros_like(synth) if need_grad else None
    total, sims, sizes = 0.0, [], []
    for frac in cfg.crop_fractions:
        top, left, ch, cw = center_crop_box(h, w, frac)
        if min(ch, cw) < provider.min_input:
            raise LossConfigError(f"crop {ch}x{cw} at fraction {frac:.3f} is below the provider minimum {provider.min_input}")
        sizes.append((ch, cw))
        ry, rx = area_resize_matrix(ch, n), area_resize_matrix(cw, n)
        crop_s = synth[top : top + ch, left : left + cw]
        crop_r = reference[top : top + ch, left : left + cw]
        small_s = resize2d(ry, crop_s, rx)
        small_r = resize2d(ry, crop_r, rx)
        fs, fr = provider(small_s), provider(small_r)
        sim = float(fs @ fr)
        sims.append(sim)
        total += 1.0 - sim
        if need_grad:
            g_small = provider.backward(small_s, -fr)
            grad[top : top + ch, left : left + cw] += resize2d(ry.T, g_small, rx.T)
    return MSCResult(total, grad, sims, sizes)
