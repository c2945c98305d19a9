"""Pseudo-view augmentation by depth-based forward warping.

A source pixel is back-projected with its depth, moved into the target
camera, re-projected, and its colour splatted onto the four surrounding
target pixels with bilinear weights.  Per target pixel a depth test keeps the
nearest surface, blending contributions within a relative tolerance band.
Pixels that gather less than ``w_min`` total weight are holes and are never
used for supervision.

Under the default ``coverage`` conflict rule a front surface that only
partly covers a pixel (silhouette edges) is mixed with the surface right
behind it in proportion to its splat weight, which mirrors how an
antialiased camera sees the edge.  ``nearest`` keeps the plain z-buffer.

All warping maths happens in the z-forward, y-down camera frame where
``K`` applies directly; poses are converted once in :func:`relative_vision_transform`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels
from .dataio import depth_validity, read_image, read_mask, write_image, write_mask
from .field import ContractError
from .geometry import (
    Intrinsics,
    Pose,
    RigidTransform,
    blender_to_vision,
    compose_relative,
    grid_angles,
    rotate_pose,
)

log = logging.getLogger(__name__)

BEHIND_EPS = 1e-6


@dataclass
class WarpPolicy:
    band: float = 0.01
    w_min: float = 0.25
    # splat coefficients below this are dropped before the depth test
    min_splat_weight: float = 0.05
    conflict: str = "coverage"
    # front-layer weight at which a pixel counts as fully covered
    front_coverage: float = 0.75

    def __post_init__(self):
        if self.conflict not in ("coverage", "nearest"):
            raise ValueError(f"unknown conflict policy {self.conflict!r}")


@dataclass
class WarpResult:
    image: np.ndarray
    validity: np.ndarray
    extra: np.ndarray | None
    depth: np.ndarray
    weight: np.ndarray
    dropped: int


@dataclass
class PseudoView:
    image: np.ndarray
    validity: np.ndarray
    saliency: np.ndarray
    pose: Pose
    source_id: int
    angles: tuple = (0.0, 0.0, 0.0)

    @property
    def hole_fraction(self) -> float:
        return float(1.0 - self.validity.mean())


def relative_vision_transform(src: Pose, dst: Pose) -> RigidTransform:
    """Source-camera to destination-camera transform in the projection frame."""
    return blender_to_vision(compose_relative(src, dst))


def warp_points(u, v, depth, K: Intrinsics, T: RigidTransform, K_dst: Intrinsics | None = None):
    """Vectorised :func:`warp_pixel`.  Returns (u', v', z') arrays."""
    K_dst = K_dst or K
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    z = np.asarray(depth, dtype=np.float64)
    pts = np.stack([(u - K.cx) / K.fx * z, (v - K.cy) / K.fy * z, z], axis=-1)
    moved = pts @ T.rotation.T + T.translation
    zt = moved[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ut = K_dst.fx * moved[..., 0] / zt + K_dst.cx
        vt = K_dst.fy * moved[..., 1] / zt + K_dst.cy
    return ut, vt, zt


def warp_pixel(px, depth: float, K: Intrinsics, T: RigidTransform):
    """Move pixel ``px`` seen at z-depth ``depth`` through ``T``.

    Returns ``((u', v'), z')`` or ``None`` when the point lands behind the
    target camera.
    """
    if not depth > 0:
        raise ContractError(f"depth must be positive, got {depth}")
    u, v, z = warp_points(px[0], px[1], depth, K, T)
    if not z > BEHIND_EPS:
        return None
    return (float(u), float(v)), float(z)


def forward_warp(image, depth, K: Intrinsics, T: RigidTransform, policy: WarpPolicy | None = None,
                 extra=None, fill_depth: float | None = None, K_dst: Intrinsics | None = None) -> WarpResult:
    """Splat ``image`` (H, W, C) with z-depth ``depth`` (H, W) into the camera ``T`` maps to.

    ``extra`` (H, W, E) channels travel with the colours (used for saliency).
    Pixels with invalid depth do not scatter unless ``fill_depth`` gives them one.
    """
    policy = policy or WarpPolicy()
    K_dst = K_dst or K
    image = np.asarray(image, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.shape[:2] != depth.shape:
        raise ContractError(f"image {image.shape[:2]} and depth {depth.shape} sizes differ")
    h, w = depth.shape
    values = image.reshape(h * w, -1)
    n_img = values.shape[1]
    if extra is not None:
        extra = np.asarray(extra, dtype=np.float64).reshape(h * w, -1)
        values = np.concatenate([values, extra], axis=1)

    d = depth.ravel()
    valid_src = depth_validity(d)
    if fill_depth is not None:
        d = np.where(valid_src, d, fill_depth)
        valid_src = np.ones_like(valid_src)
    vv, uu = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    src = np.flatnonzero(valid_src)
    ut, vt, zt = warp_points(uu.ravel()[src], vv.ravel()[src], d[src], K, T, K_dst)
    front = (zt > BEHIND_EPS) & np.isfinite(ut) & np.isfinite(vt)
    # far off-screen points cannot touch the image; also keeps the integer casts sane
    front &= (ut > -2) & (ut < K_dst.width + 2) & (vt > -2) & (vt < K_dst.height + 2)
    dropped = int(np.count_nonzero(zt <= BEHIND_EPS))
    sel = src[front]

    front, front_w, back, back_w, total, zmin = kernels.scatter(
        ut[front], vt[front], zt[front], values[sel], K_dst.height, K_dst.width, policy.band, policy.min_splat_weight
    )
    validity = (total >= policy.w_min) & (front_w > 0)
    with np.errstate(invalid="ignore", divide="ignore"):
        front_avg = front / front_w[..., None]
        back_avg = back / back_w[..., None]
    if policy.conflict == "coverage":
        a = np.where(back_w > 0, np.clip(front_w / policy.front_coverage, 0.0, 1.0), 1.0)[..., None]
        out = a * front_avg + (1 - a) * np.where(back_w[..., None] > 0, back_avg, 0.0)
    else:
        out = front_avg
    out = np.where(validity[..., None], out, 0.0)
    out_img = out[..., :n_img]
    out_extra = out[..., n_img:] if extra is not None else None
    out_depth = np.where(validity, zmin, np.inf)
    return WarpResult(out_img, validity, out_extra, out_depth, total, dropped)


# saliency ---------------------------------------------------------------------


def saliency_from_depth(depth, rule: str = "finite", value: float | None = None) -> np.ndarray:
    """Foreground mask from a depth map.

    Rules: ``finite`` (any surface is foreground), ``percentile`` (closer than
    the ``value``-th percentile of valid depths, default 50) and ``distance``
    (closer than ``value`` world units).
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = depth_validity(depth)
    if rule == "finite":
        return valid
    if not valid.any():
        return np.zeros(depth.shape, dtype=bool)
    vals = depth[valid]
    if np.ptp(vals) == 0:
        log.warning("degenerate depth map (single value); marking every pixel foreground")
        return np.ones(depth.shape, dtype=bool)
    if rule == "percentile":
        thresh = np.percentile(vals, 50.0 if value is None else value)
    elif rule == "distance":
        if value is None:
            raise ValueError("distance rule needs a threshold value")
        thresh = value
    else:
        raise ValueError(f"unknown saliency rule {rule!r}")
    return valid & (depth < thresh)


SaliencyProvider = Callable[[np.ndarray, np.ndarray, int], np.ndarray]


class DepthSaliency:
    """Saliency provider thresholding the depth map."""

    def __init__(self, rule: str = "finite", value: float | None = None):
        self.rule = rule
        self.value = value

    def __call__(self, image, depth, index):
        return saliency_from_depth(depth, self.rule, self.value)


class MaskFileSaliency:
    """Saliency provider returning precomputed masks (arrays or mask-file paths) per input index."""

    def __init__(self, masks):
        self.masks = list(masks)

    def __call__(self, image, depth, index):
        m = self.masks[index]
        if isinstance(m, (str, Path)):
            return read_mask(m)
        return np.asarray(m, dtype=bool)


# generation -------------------------------------------------------------------


@dataclass
class AugmentConfig:
    alpha_deg: float = 30.0
    step_deg: float = 5.0
    pivot: tuple | None = None
    fill_depth: float | None = None
    policy: WarpPolicy = field(default_factory=WarpPolicy)


def generate_pseudo_views(inputs, K: Intrinsics, cfg: AugmentConfig | None = None,
                          saliency_provider: SaliencyProvider | None = None) -> list:
    """One pseudo-view per (input view, grid pose).

    ``inputs`` is a sequence of (image, depth, pose).  Saliency is computed on
    the source and warped with the colours; it is only kept where the warp is valid.
    """
    cfg = cfg or AugmentConfig()
    if not inputs:
        raise ContractError("pseudo-view generation needs at least one input view")
    saliency_provider = saliency_provider or DepthSaliency()
    angles = grid_angles(cfg.alpha_deg, cfg.step_deg)
    views = []
    for sid, (image, depth, pose) in enumerate(inputs):
        sal = np.asarray(saliency_provider(image, depth, sid), dtype=np.float64)
        for ang in angles:
            target = rotate_pose(pose, ang, cfg.pivot)
            T = relative_vision_transform(pose, target)
            res = forward_warp(image, depth, K, T, cfg.policy, extra=sal[..., None], fill_depth=cfg.fill_depth)
            saliency = res.validity & (res.extra[..., 0] >= 0.5)
            img = np.clip(res.image, 0.0, 1.0).astype(np.float32)
            views.append(PseudoView(img, res.validity, saliency, target, sid, tuple(float(a) for a in ang)))
    return views


def hole_stats(views) -> dict:
    fr = np.array([v.hole_fraction for v in views])
    return {"count": len(views), "mean_hole_fraction": float(fr.mean()) if len(fr) else 0.0,
            "max_hole_fraction": float(fr.max()) if len(fr) else 0.0}


def save_pseudo_views(views, root) -> Path:
    """Cache layout: ``NNNNN_rgb.png``, ``NNNNN_valid.png``, ``NNNNN_sal.png`` and ``manifest.json``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, v in enumerate(views):
        stem = f"{i:05d}"
        write_image(root / f"{stem}_rgb.png", v.image)
        write_mask(root / f"{stem}_valid.png", v.validity)
        write_mask(root / f"{stem}_sal.png", v.saliency)
        entries.append({"stem": stem, "source_id": v.source_id, "angles": list(v.angles),
                        "hole_fraction": round(v.hole_fraction, 8), "transform_matrix": v.pose.matrix().tolist()})
    manifest = {"format": "fsnerf-pseudo-views", "version": 1, "views": entries, "stats": hole_stats(views)}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_pseudo_views(root) -> list:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    views = []
    for e in manifest["views"]:
        validity = read_mask(root / f"{e['stem']}_valid.png")
        image = read_image(root / f"{e['stem']}_rgb.png")
        saliency = read_mask(root / f"{e['stem']}_sal.png") & validity
        views.append(PseudoView(image, validity, saliency, Pose.from_matrix(e["transform_matrix"]),
                                int(e["source_id"]), tuple(e["angles"])))
    return views
