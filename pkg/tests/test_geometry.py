import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fsnerf.geometry import (
    GeometryError,
    Intrinsics,
    Pose,
    RigidTransform,
    compose_relative,
    euler_rotation,
    grid_angles,
    image_rays,
    look_at,
    pose_grid,
    ray_for_pixel,
    rotate_pose,
    rotation_x,
    spherical_pose,
)

IDENTITY = Pose(np.eye(3), np.zeros(3))
CAM = Intrinsics(100.0, 100.0, 50.0, 50.0, 100, 100)


def random_pose(seed):
    r = np.random.default_rng(seed)
    q, _ = np.linalg.qr(r.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return Pose(q, r.normal(size=3))


def test_principal_ray_points_forward():
    ray = ray_for_pixel(CAM, IDENTITY, (CAM.cx, CAM.cy))
    # the camera looks down -z
    np.testing.assert_allclose(ray.directions[0], [0, 0, -1], atol=1e-12)


def test_45_degree_ray():
    # (cx + fx, cy) needs an image wider than fx
    cam = Intrinsics(10.0, 10.0, 5.0, 5.0, 20, 10)
    d = ray_for_pixel(cam, IDENTITY, (15.0, 5.0)).directions[0]
    np.testing.assert_allclose(d, np.array([1, 0, -1]) / math.sqrt(2), atol=1e-12)


def test_hand_pinhole_direction():
    d = ray_for_pixel(CAM, IDENTITY, (55, 50)).directions[0]
    expected = np.array([0.05, 0.0, -1.0]) / math.hypot(0.05, 1.0)
    np.testing.assert_allclose(d, expected, atol=1e-12)


def test_out_of_bounds_pixel():
    with pytest.raises(GeometryError):
        ray_for_pixel(CAM, IDENTITY, (101, 5))
    with pytest.raises(GeometryError):
        ray_for_pixel(CAM, IDENTITY, (-1, 5))


def test_invalid_intrinsics():
    with pytest.raises(GeometryError):
        Intrinsics(-1.0, 1.0, 0.0, 0.0, 4, 4)
    with pytest.raises(GeometryError):
        Intrinsics(1.0, 1.0, 9.0, 0.0, 4, 4)


def test_non_orthonormal_pose_rejected():
    with pytest.raises(GeometryError):
        Pose(np.diag([1.0, 1.0, 1.1]), np.zeros(3))
    with pytest.raises(GeometryError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


def test_relative_identity_and_translation():
    p = random_pose(0)
    rel = compose_relative(p, p)
    np.testing.assert_allclose(rel.matrix(), np.eye(4), atol=1e-12)
    t = np.array([0.3, -1.0, 2.0])
    rel = compose_relative(IDENTITY, Pose(np.eye(3), t))
    np.testing.assert_allclose(rel.rotation, np.eye(3))
    np.testing.assert_allclose(rel.translation, -t)


@given(st.integers(0, 10**6), st.integers(0, 10**6))
def test_relative_round_trip(a, b):
    src, dst = random_pose(a), random_pose(b)
    both = compose_relative(src, dst).compose(compose_relative(dst, src))
    np.testing.assert_allclose(both.matrix(), np.eye(4), atol=1e-6)


@given(st.integers(0, 10**6))
def test_relative_maps_points_consistently(seed):
    src, dst = random_pose(seed), random_pose(seed + 1)
    pts = np.random.default_rng(seed).normal(size=(5, 3))
    world = pts @ src.rotation.T + src.translation
    in_dst = (world - dst.translation) @ dst.rotation
    np.testing.assert_allclose(compose_relative(src, dst).apply(pts), in_dst, atol=1e-9)


@pytest.mark.parametrize("alpha,step,count", [(30, 5, 2196), (5, 5, 26), (10, 5, 124), (30, 10, 342)])
def test_grid_count(alpha, step, count):
    grid = pose_grid(IDENTITY, alpha, step)
    assert len(grid) == count == (2 * alpha // step + 1) ** 3 - 1


def test_grid_excludes_identity_and_is_unique():
    angles = grid_angles(10, 5)
    assert (0, 0, 0) not in angles and (0.0, 0.0, 0.0) not in angles
    assert len(set(angles)) == len(angles)


def test_grid_rejects_bad_step():
    with pytest.raises(GeometryError):
        grid_angles(30, 7)
    with pytest.raises(GeometryError):
        grid_angles(30, 0)
    with pytest.raises(GeometryError):
        grid_angles(3, 5)


def test_rotation_oracle():
    pose = rotate_pose(IDENTITY, (5.0, 0.0, 0.0))
    c, s = math.cos(math.radians(5)), math.sin(math.radians(5))
    np.testing.assert_allclose(pose.rotation, [[1, 0, 0], [0, c, -s], [0, s, c]], atol=1e-15)
    np.testing.assert_allclose(rotation_x(5.0), pose.rotation)


def test_euler_order():
    np.testing.assert_allclose(euler_rotation(10, 20, 30),
                               euler_rotation(0, 0, 30) @ euler_rotation(0, 20, 0) @ euler_rotation(10, 0, 0))


@given(st.integers(0, 10**6), st.tuples(*[st.sampled_from([-30, -5, 0, 15]) for _ in range(3)]))
def test_grid_poses_valid(seed, angles):
    ref = random_pose(seed)
    for pivot in (None, (0.0, 0.0, 0.0)):
        p = rotate_pose(ref, angles, pivot)
        np.testing.assert_allclose(p.rotation @ p.rotation.T, np.eye(3), atol=1e-9)
    assert np.allclose(rotate_pose(ref, angles).translation, ref.translation)


def test_orbit_keeps_distance_to_pivot():
    ref = spherical_pose(30, 40, 4.0)
    p = rotate_pose(ref, (10, -20, 30), pivot=(0, 0, 0))
    assert math.isclose(np.linalg.norm(p.translation), 4.0, rel_tol=1e-12)
    # the origin stays at the same camera-frame position
    np.testing.assert_allclose(ref.inverse().apply(np.zeros((1, 3))), p.inverse().apply(np.zeros((1, 3))), atol=1e-12)


def test_look_at_points_at_target():
    pose = look_at([3.0, -2.0, 1.5], [0.2, 0.1, -0.3])
    ray = ray_for_pixel(Intrinsics(8, 8, 4, 4, 8, 8), pose, (4, 4))
    target_dir = np.array([0.2, 0.1, -0.3]) - np.array([3.0, -2.0, 1.5])
    np.testing.assert_allclose(ray.directions[0], target_dir / np.linalg.norm(target_dir), atol=1e-12)


def test_image_rays_row_major():
    cam = Intrinsics(4, 4, 2, 1.5, 4, 3)
    rays = image_rays(cam, IDENTITY, 0.1, 2.0)
    assert len(rays) == 12
    # second pixel is one step to the right of the first
    assert rays.directions[1, 0] > rays.directions[0, 0]
    np.testing.assert_allclose(rays.directions[0, 1], rays.directions[3, 1])
    np.testing.assert_allclose(np.linalg.norm(rays.directions, axis=1), 1.0)


def test_rigid_transform_inverse():
    p = random_pose(3)
    t = RigidTransform(p.rotation, p.translation)
    np.testing.assert_allclose(t.compose(t.inverse()).matrix(), np.eye(4), atol=1e-12)


def test_scaled_intrinsics():
    cam = Intrinsics.from_fov(math.radians(40), 64, 64)
    half = cam.scaled(0.5)
    assert (half.width, half.height) == (32, 32)
    assert math.isclose(half.fx, cam.fx / 2) and math.isclose(half.cx, 16.0)
