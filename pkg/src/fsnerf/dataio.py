"""Scenes on disk, the analytic toy-scene generator, file formats and image metrics.

Native scene manifest (``scene.json``)::

    {
      "format": "fsnerf-scene", "version": 1,
      "camera": {"fx":..,"fy":..,"cx":..,"cy":..,"width":..,"height":..},
      "near": 2.0, "far": 6.0, "white_background": true,
      "frames": [{"image": "rgb/000.png", "depth": "depth/000.pfm" | null,
                  "mask": "mask/000.png" | null, "split": "train",
                  "transform_matrix": [[...4x4 camera-to-world...]]}, ...]
    }

Images are 8-bit RGB(A) PNG mapped linearly to [0, 1] (no gamma handling);
masks are single-channel PNG (nonzero = foreground); depth is PFM holding the
camera-frame z distance, ``+inf`` where there is no surface.
"""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Intrinsics, Pose, image_rays, rays_for_pixels, spherical_pose

MANIFEST_FORMAT = "fsnerf-scene"
MANIFEST_VERSION = 1
LUMA = np.array([0.299, 0.587, 0.114])


class LoadError(IOError):
    pass


class MetricError(ValueError):
    pass


# scenes ---------------------------------------------------------------------


@dataclass
class Frame:
    image: np.ndarray
    pose: Pose
    depth: np.ndarray | None = None
    mask: np.ndarray | None = None
    split: str = "train"
    name: str = ""


@dataclass
class Scene:
    camera: Intrinsics
    frames: list
    near: float
    far: float
    white_background: bool = True

    @property
    def background(self) -> np.ndarray:
        return np.ones(3) if self.white_background else np.zeros(3)

    def split(self, name: str) -> list:
        return [f for f in self.frames if f.split == name]


def _camera_dict(cam: Intrinsics) -> dict:
    return {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy, "width": cam.width, "height": cam.height}


def save_scene(scene: Scene, root) -> Path:
    root = Path(root)
    for sub in ("rgb", "depth", "mask"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    frames = []
    for i, fr in enumerate(scene.frames):
        entry = {"image": f"rgb/{i:03d}.png", "depth": None, "mask": None, "split": fr.split,
                 "transform_matrix": fr.pose.matrix().tolist()}
        write_image(root / entry["image"], fr.image)
        if fr.depth is not None:
            entry["depth"] = f"depth/{i:03d}.pfm"
            write_depth(root / entry["depth"], fr.depth)
        if fr.mask is not None:
            entry["mask"] = f"mask/{i:03d}.png"
            write_mask(root / entry["mask"], fr.mask)
        frames.append(entry)
    manifest = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "camera": _camera_dict(scene.camera),
        "near": scene.near,
        "far": scene.far,
        "white_background": scene.white_background,
        "frames": frames,
    }
    path = root / "scene.json"
    path.write_text(json.dumps(manifest, indent=1))
    return path


def load_scene(path) -> Scene:
    """Load a native ``scene.json`` or a NeRF-synthetic directory (``transforms_*.json``)."""
    path = Path(path)
    if path.is_dir():
        if (path / "scene.json").exists():
            path = path / "scene.json"
        elif any(path.glob("transforms_*.json")):
            return _load_transforms_dir(path)
        else:
            raise LoadError(f"{path}: no scene.json or transforms_*.json found")
    if not path.exists():
        raise LoadError(f"{path}: no such file")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: malformed manifest: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        if "camera_angle_x" in manifest:
            return _load_transforms([path])
        raise LoadError(f"{path}: unknown manifest format")
    if manifest.get("version") != MANIFEST_VERSION:
        raise LoadError(f"{path}: manifest version {manifest.get('version')} not supported")
    root = path.parent
    cam = Intrinsics(**manifest["camera"])
    white = bool(manifest.get("white_background", True))
    frames = []
    for i, entry in enumerate(manifest["frames"]):
        label = f"frame {i} ({entry.get('image')})"
        pose = _frame_pose(entry.get("transform_matrix"), label)
        image = _read_frame_image(root / entry["image"], white, label)
        _check_size(image, cam, label)
        depth = mask = None
        if entry.get("depth"):
            depth = _guard(lambda: read_depth(root / entry["depth"]), label)
            _check_size(depth, cam, label)
        if entry.get("mask"):
            mask = _guard(lambda: read_mask(root / entry["mask"]), label)
            _check_size(mask, cam, label)
        frames.append(Frame(image, pose, depth, mask, entry.get("split", "train"), entry["image"]))
    return Scene(cam, frames, float(manifest["near"]), float(manifest["far"]), white)


def _guard(fn, label):
    try:
        return fn()
    except (OSError, ValueError) as exc:
        raise LoadError(f"{label}: {exc}") from exc


def _check_size(arr, cam, label):
    if arr.shape[:2] != (cam.height, cam.width):
        raise LoadError(f"{label}: size {arr.shape[1]}x{arr.shape[0]} does not match camera {cam.width}x{cam.height}")


def _frame_pose(matrix, label) -> Pose:
    try:
        return Pose.from_matrix(np.asarray(matrix, dtype=np.float64))
    except (ValueError, TypeError) as exc:
        raise LoadError(f"{label}: malformed transform matrix: {exc}") from exc


def _read_frame_image(path, white_background, label):
    if not Path(path).exists():
        raise LoadError(f"{label}: missing image file {path}")
    return _guard(lambda: read_image(path, white_background), label)


def _load_transforms_dir(root: Path) -> Scene:
    files = [root / f"transforms_{s}.json" for s in ("train", "val", "test") if (root / f"transforms_{s}.json").exists()]
    return _load_transforms(files)


def _load_transforms(files) -> Scene:
    frames, cam, fov = [], None, None
    white = True
    near, far = 2.0, 6.0
    for path in files:
        meta = json.loads(Path(path).read_text())
        fov = float(meta["camera_angle_x"])
        near = float(meta.get("near", near))
        far = float(meta.get("far", far))
        white = bool(meta.get("white_background", white))
        split = Path(path).stem.replace("transforms_", "")
        for i, entry in enumerate(meta["frames"]):
            label = f"{Path(path).name} frame {i} ({entry.get('file_path')})"
            img_path = Path(path).parent / entry["file_path"]
            if img_path.suffix == "":
                img_path = img_path.with_suffix(".png")
            image = _read_frame_image(img_path, white, label)
            if cam is None:
                cam = Intrinsics.from_fov(fov, image.shape[1], image.shape[0])
            _check_size(image, cam, label)
            depth = None
            if entry.get("depth_path"):
                depth = _guard(lambda: read_depth(Path(path).parent / entry["depth_path"]), label)
            frames.append(Frame(image, _frame_pose(entry["transform_matrix"], label), depth, None, split, str(img_path)))
    if cam is None:
        raise LoadError("transforms files contain no frames")
    return Scene(cam, frames, near, far, white)


# image / mask / depth files --------------------------------------------------


def read_image(path, white_background: bool = True) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA") if im.mode in ("RGBA", "LA", "P") else im.convert("RGB"))
    img = arr.astype(np.float32) / 255.0
    if img.shape[-1] == 4:
        alpha = img[..., 3:]
        bg = 1.0 if white_background else 0.0
        img = img[..., :3] * alpha + bg * (1.0 - alpha)
    return img.astype(np.float32)


def write_image(path, image) -> None:
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


def write_mask(path, mask) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(path)


def write_depth(path, depth) -> None:
    """Single-channel little-endian PFM; rows stored bottom-to-top as the format requires."""
    depth = np.asarray(depth, dtype="<f4")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(depth[::-1]).tobytes())


_PFM_HEADER = re.compile(rb"(P[fF])\s+(\d+)\s+(\d+)\s+(-?[0-9.eE+-]+)\s")


def read_depth(path) -> np.ndarray:
    """Read a PFM depth map (first channel if colour); non-finite or <= 0 means invalid."""
    data = Path(path).read_bytes()
    m = _PFM_HEADER.match(data)
    if m is None:
        bad = 0 if not data.startswith(b"P") else 2
        raise ValueError(f"{path}: malformed PFM header at byte offset {bad}")
    kind, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    if scale == 0:
        raise ValueError(f"{path}: zero scale in PFM header at byte offset {m.start(4)}")
    channels = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    if len(data) - m.end() < 4 * count:
        raise ValueError(f"{path}: truncated PFM payload at byte offset {m.end()}")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=m.end()).reshape(h, w, channels)
    return arr[::-1, :, 0].astype(np.float32)


def depth_validity(depth) -> np.ndarray:
    depth = np.asarray(depth)
    return np.isfinite(depth) & (depth > 0)


# toy scenes -----------------------------------------------------------------


@dataclass
class Sphere:
    center: tuple
    radius: float
    color: tuple

    def intersect(self, origins, dirs):
        oc = origins - np.asarray(self.center)
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius**2
        disc = b * b - c
        hit = disc >= 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        t0, t1 = -b - root, -b + root
        t = np.where(t0 > 1e-9, t0, t1)
        t = np.where(hit & (t > 1e-9), t, np.inf)
        points = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        normals = (points - np.asarray(self.center)) / self.radius
        return t, normals


@dataclass
class Box:
    lower: tuple
    upper: tuple
    color: tuple

    def intersect(self, origins, dirs):
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (lo - origins) * inv
            tb = (hi - origins) * inv
        tmin = np.nanmax(np.minimum(ta, tb), axis=1)
        tmax = np.nanmin(np.maximum(ta, tb), axis=1)
        hit = (tmax >= tmin) & (tmax > 1e-9)
        t = np.where(tmin > 1e-9, tmin, tmax)
        t = np.where(hit, t, np.inf)
        points = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        center = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        rel = (points - center) / half
        axis = np.argmax(np.abs(rel), axis=1)
        normals = np.zeros_like(points)
        normals[np.arange(len(points)), axis] = np.sign(rel[np.arange(len(points)), axis])
        return t, normals


DEFAULT_PRIMITIVES = (
    Sphere((0.0, 0.0, 0.1), 0.55, (0.85, 0.25, 0.2)),
    Box((-0.35, -0.35, -0.75), (0.45, 0.45, -0.45), (0.2, 0.45, 0.85)),
    Sphere((0.55, -0.5, -0.15), 0.25, (0.25, 0.75, 0.3)),
)

LIGHT_DIR = np.array([0.4, 0.3, 0.85]) / np.linalg.norm([0.4, 0.3, 0.85])
AMBIENT = 0.35


def trace(primitives, origins, dirs):
    """Closest hit distance, surface colour and hit mask for unit-direction rays."""
    best = np.full(origins.shape[0], np.inf)
    color = np.zeros((origins.shape[0], 3))
    for prim in primitives:
        t, normals = prim.intersect(origins, dirs)
        closer = t < best
        best = np.where(closer, t, best)
        shade = AMBIENT + (1 - AMBIENT) * np.clip(normals @ LIGHT_DIR, 0.0, None)
        color = np.where(closer[:, None], shade[:, None] * np.asarray(prim.color), color)
    return best, color, np.isfinite(best)


def render_toy_view(primitives, camera: Intrinsics, pose: Pose, white_background: bool = True,
                    quantize: bool = True, supersample: int = 3):
    """Ray-trace one view.  Returns (image, z-depth with inf on background, mask).

    Colours are box-filtered over a ``supersample`` x ``supersample`` grid of
    rays per pixel; depth and mask come from the pixel-centre ray.
    """
    bg = 1.0 if white_background else 0.0
    h, w = camera.height, camera.width
    rays = image_rays(camera, pose, 0.0, 1.0)
    t, color, hit = trace(primitives, rays.origins, rays.directions)
    forward = -pose.rotation[:, 2]
    zdepth = np.where(hit, t * (rays.directions @ forward), np.inf).reshape(h, w)
    image = np.zeros((h, w, 3))
    offsets = (np.arange(supersample) + 0.5) / supersample
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    for oy in offsets:
        for ox in offsets:
            sub = rays_for_pixels(camera, pose, (uu + ox).ravel(), (vv + oy).ravel(), 0.0, 1.0)
            _, c, sub_hit = trace(primitives, sub.origins, sub.directions)
            image += np.where(sub_hit[:, None], c, bg).reshape(h, w, 3)
    image /= supersample**2
    if quantize:
        image = np.rint(image * 255.0) / 255.0
    return image.astype(np.float32), zdepth.astype(np.float32), hit.reshape(h, w)


def generate_toy_scene(
    primitives=DEFAULT_PRIMITIVES,
    n_views: int = 8,
    resolution: int = 32,
    rng: np.random.Generator | None = None,
    radius: float = 4.0,
    fov_deg: float = 40.0,
    elevation_range=(15.0, 60.0),
    poses=None,
    splits=None,
) -> Scene:
    """Analytic scene: ray-traced images, exact z-depth maps and silhouettes.

    Cameras sit on a hemisphere of ``radius`` looking at the origin; with
    ``rng`` set, azimuth and elevation are drawn at random, otherwise the
    azimuths are evenly spaced at the middle elevation.
    """
    if not primitives:
        raise ValueError("toy scene needs at least one primitive")
    camera = Intrinsics.from_fov(math.radians(fov_deg), resolution, resolution)
    if poses is None:
        if rng is None:
            mid = 0.5 * sum(elevation_range)
            poses = [spherical_pose(360.0 * i / n_views, mid, radius) for i in range(n_views)]
        else:
            az = rng.uniform(0, 360, n_views)
            el = rng.uniform(*elevation_range, n_views)
            poses = [spherical_pose(a, e, radius) for a, e in zip(az, el)]
    splits = splits or ["train"] * len(poses)
    frames = []
    for i, (pose, split) in enumerate(zip(poses, splits)):
        image, depth, mask = render_toy_view(primitives, camera, pose)
        frames.append(Frame(image, pose, depth, mask, split, f"toy_{i:03d}"))
    return Scene(camera, frames, near=radius - 2.0, far=radius + 2.0, white_background=True)


# metrics --------------------------------------------------------------------


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b, mask=None) -> float:
    a, b = _pair(a, b)
    err = (a - b) ** 2
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise MetricError("mask selects no pixels")
        err = err[mask]
    return float(err.mean())


def psnr(a, b, max_value: float = 1.0, mask=None) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    m = mse(a, b, mask)
    if m == 0:
        return math.inf
    return -10.0 * math.log10(m / max_value**2)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation
    k = g.shape[0]
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=0) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=1) @ g


def to_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def ssim(a, b, max_value: float = 1.0, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Single-scale SSIM on luma (0.299 R + 0.587 G + 0.114 B), mean over valid window positions."""
    a, b = _pair(a, b)
    a, b = to_gray(a), to_gray(b)
    if min(a.shape) < window:
        raise MetricError(f"image {a.shape} smaller than the {window}x{window} SSIM window")
    g = gaussian_window(window, sigma)
    c1, c2 = (k1 * max_value) ** 2, (k2 * max_value) ** 2
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    names: list
    psnr: list
    ssim: list
    config: dict = field(default_factory=dict)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    @property
    def infinite(self) -> list:
        return [math.isinf(p) for p in self.psnr]

    def to_csv(self) -> str:
        lines = ["view,psnr,ssim,psnr_infinite"]
        for n, p, s in zip(self.names, self.psnr, self.ssim):
            lines.append(f"{n},{p:.6f},{s:.6f},{int(math.isinf(p))}")
        lines.append(f"mean,{self.mean_psnr:.6f},{self.mean_ssim:.6f},{int(math.isinf(self.mean_psnr))}")
        return "\n".join(lines) + "\n"


def evaluate_images(names, rendered, references, config=None) -> MetricReport:
    if not names:
        raise MetricError("nothing to evaluate")
    p = [psnr(r, g) for r, g in zip(rendered, references)]
    s = [ssim(r, g) for r, g in zip(rendered, references)]
    return MetricReport(list(names), p, s, dict(config or {}))


def pack_floats(path, values) -> None:
    """External embedding file: u32 count, then little-endian float32 values."""
    values = np.asarray(values, dtype="<f4").ravel()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", values.size))
        fh.write(values.tobytes())


def unpack_floats(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ValueError(f"{path}: truncated feature file")
    (n,) = struct.unpack_from("<I", data, 0)
    if len(data) != 4 + 4 * n:
        raise ValueError(f"{path}: expected {n} floats, file holds {(len(data) - 4) // 4}")
    return np.frombuffer(data, dtype="<f4", offset=4).astype(np.float64)
