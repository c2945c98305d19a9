"""Pinhole cameras, rigid transforms, ray generation and the pseudo-pose grid.

Poses are camera-to-world and follow the Blender / NeRF-synthetic axis
convention: the camera looks along -z with +y up and +x right.  Pixel rows
grow downwards.  The only place this convention meets the z-forward
("vision") frame used for projection is :func:`blender_to_vision`.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-6

# diag(1, -1, -1): flips y (up -> down) and z (backward -> forward).
_FLIP = np.diag([1.0, -1.0, -1.0])


class GeometryError(ValueError):
    """Invalid camera, pose, pixel or grid configuration."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )

    @classmethod
    def from_fov(cls, fov_x: float, width: int, height: int) -> "Intrinsics":
        """Square-pixel camera with horizontal field of view ``fov_x`` (radians)."""
        focal = 0.5 * width / math.tan(0.5 * fov_x)
        return cls(focal, focal, width / 2.0, height / 2.0, width, height)

    def scaled(self, factor: float) -> "Intrinsics":
        """The same camera at a resolution multiplied by ``factor``."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        sx, sy = w / self.width, h / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, w, h)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid pose."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise GeometryError("pose contains non-finite values")
        if np.abs(rot.T @ rot - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(rot) - 1.0) > ORTHO_TOL:
            raise GeometryError("pose rotation is not a proper orthonormal matrix")
        rot.setflags(write=False)
        trans.setflags(write=False)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def from_matrix(cls, mat) -> "Pose":
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape not in ((4, 4), (3, 4)):
            raise GeometryError(f"pose matrix must be 3x4 or 4x4, got {mat.shape}")
        if mat.shape == (4, 4) and not np.allclose(mat[3], [0, 0, 0, 1], atol=1e-6):
            raise GeometryError("last row of a 4x4 pose must be (0, 0, 0, 1)")
        return cls(mat[:3, :3], mat[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation, self.translation).inverse()


@dataclass(frozen=True)
class RigidTransform:
    """x -> rotation @ x + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self ∘ other``: apply ``other`` first."""
        return RigidTransform(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = self.rotation
        out[:3, 3] = self.translation
        return out


@dataclass(frozen=True)
class Rays:
    """A batch of rays; ``directions`` are unit length."""

    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self):
        return self.origins.shape[0]


def blender_to_vision(transform: RigidTransform) -> RigidTransform:
    """Re-express a camera-frame transform in the z-forward, y-down frame."""
    return RigidTransform(_FLIP @ transform.rotation @ _FLIP, _FLIP @ transform.translation)


def camera_directions(camera: Intrinsics, u, v) -> np.ndarray:
    """Unnormalised camera-frame ray directions through pixel coordinates (u, v)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u - camera.cx) / camera.fx
    y = (v - camera.cy) / camera.fy
    return np.stack([x, -y, -np.ones_like(x)], axis=-1)


def rays_for_pixels(camera: Intrinsics, pose: Pose, u, v, near: float, far: float) -> Rays:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    dirs = camera_directions(camera, u, v) @ pose.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    n = u.shape[0]
    origins = np.broadcast_to(pose.translation, (n, 3)).copy()
    return Rays(origins, dirs, np.full(n, float(near)), np.full(n, float(far)))


def ray_for_pixel(camera: Intrinsics, pose: Pose, px, near: float = 0.0, far: float = 1.0) -> Rays:
    """Single ray through pixel ``px = (u, v)``; returned as a batch of one."""
    u, v = float(px[0]), float(px[1])
    if not (0 <= u <= camera.width and 0 <= v <= camera.height):
        raise GeometryError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    if not 0 <= near < far:
        raise GeometryError(f"invalid ray bounds near={near}, far={far}")
    return rays_for_pixels(camera, pose, [u], [v], near, far)


def image_rays(camera: Intrinsics, pose: Pose, near: float, far: float) -> Rays:
    """Rays through every pixel centre, row-major."""
    vv, uu = np.meshgrid(np.arange(camera.height) + 0.5, np.arange(camera.width) + 0.5, indexing="ij")
    return rays_for_pixels(camera, pose, uu.ravel(), vv.ravel(), near, far)


def compose_relative(src: Pose, dst: Pose) -> RigidTransform:
    """Map source-camera coordinates to destination-camera coordinates."""
    src_to_world = RigidTransform(src.rotation, src.translation)
    world_to_dst = RigidTransform(dst.rotation, dst.translation).inverse()
    return world_to_dst.compose(src_to_world)


def rotation_x(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_y(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_z(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def euler_rotation(ax: float, ay: float, az: float) -> np.ndarray:
    """Rz @ Ry @ Rx, angles in degrees."""
    return rotation_z(az) @ rotation_y(ay) @ rotation_x(ax)


def grid_angles(alpha_deg: float, step_deg: float) -> list[tuple[float, float, float]]:
    """All (ax, ay, az) in [-alpha, alpha]^3 at ``step_deg`` spacing, minus (0, 0, 0)."""
    if not step_deg > 0:
        raise GeometryError(f"step must be positive, got {step_deg}")
    if alpha_deg < step_deg:
        raise GeometryError(f"alpha ({alpha_deg}) must be at least step ({step_deg})")
    ratio = alpha_deg / step_deg
    k = round(ratio)
    if abs(ratio - k) > 1e-9:
        raise GeometryError(f"alpha ({alpha_deg}) is not a multiple of step ({step_deg})")
    values = [i * step_deg for i in range(-k, k + 1)]
    return [c for c in itertools.product(values, repeat=3) if c != (0, 0, 0)]


def rotate_pose(reference: Pose, angles, pivot=None) -> Pose:
    """Rotate ``reference`` by Euler ``angles`` (degrees).

    With ``pivot=None`` the camera turns about its own centre, the rotation
    acting in the camera frame.  With a 3-vector pivot the camera orbits that
    world point about the world axes, so the new view carries parallax.
    """
    rot = euler_rotation(*angles)
    if pivot is None:
        return Pose(reference.rotation @ rot, reference.translation)
    pivot = np.asarray(pivot, dtype=np.float64)
    return Pose(rot @ reference.rotation, rot @ (reference.translation - pivot) + pivot)


def pose_grid(reference: Pose, alpha_deg: float, step_deg: float, pivot=None) -> list[Pose]:
    return [rotate_pose(reference, a, pivot) for a in grid_angles(alpha_deg, step_deg)]


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera at ``eye`` looking at ``target`` (Blender convention)."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross([0.0, 1.0, 0.0], back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    return Pose(np.stack([right, true_up, back], axis=1), eye)


def spherical_pose(azimuth_deg: float, elevation_deg: float, radius: float, target=(0.0, 0.0, 0.0)) -> Pose:
    az, el = math.radians(azimuth_deg), math.radians(elevation_deg)
    eye = np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]) * radius
    return look_at(eye + np.asarray(target, dtype=np.float64), target)
