import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthfuse.geometry import (DEPTH_QUANTUM, CameraPose, PointCloud, augment_cloud,
                                hemisphere_cameras, project_depth)
from depthfuse.numerics import SeededRng
from depthfuse.shapes import ShapeSpec, generate_coarse_cloud


def _quantize(z):
    return np.floor(z / DEPTH_QUANTUM) * DEPTH_QUANTUM


def _brute_force_zbuffer(cloud, pose):
    """Loop over pixels, and for each pixel over all points."""
    cam = pose.to_camera(cloud.points)
    out = np.full((pose.height, pose.width), np.inf)
    for v in range(pose.height):
        for u in range(pose.width):
            best = np.inf
            for x, y, z in cam:
                if z < DEPTH_QUANTUM:
                    continue
                pu = math.floor(pose.focal * x / z + pose.cx)
                pv = math.floor(pose.focal * y / z + pose.cy)
                if pu == u and pv == v:
                    best = min(best, z)
            out[v, u] = best
    return out


def test_pose_normalizes_azimuth():
    assert CameraPose(-math.pi / 2, 0.0, 2.0).azimuth == pytest.approx(1.5 * math.pi)
    assert CameraPose(2 * math.pi, 0.0, 2.0).azimuth == 0.0
    assert 0.0 <= CameraPose(math.nextafter(2 * math.pi, 0), 0.0, 2.0).azimuth < 2 * math.pi


@pytest.mark.parametrize("kwargs", [dict(radius=0.0), dict(radius=1.0, width=4), dict(radius=1.0, height=7)])
def test_pose_rejects_bad_values(kwargs):
    with pytest.raises(ValueError):
        CameraPose(0.0, 0.0, **kwargs)


def test_pose_rotation_is_orthonormal_and_looks_at_origin():
    pose = CameraPose(1.1, 0.4, 3.0)
    r = pose.rotation
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
    cam = pose.to_camera(np.zeros((1, 3)))[0]
    assert np.allclose(cam[:2], 0.0, atol=1e-12)
    assert cam[2] == pytest.approx(3.0)
    # looking straight down still gives a valid frame
    top = CameraPose(0.3, math.pi / 2, 2.0).rotation
    assert np.allclose(top @ top.T, np.eye(3), atol=1e-12)


def test_single_axial_point_hits_principal_point():
    pose = CameraPose(0.7, 0.3, 2.5)
    m = project_depth(PointCloud(np.zeros((1, 3))), pose)
    assert m.valid.sum() == 1
    assert m.valid[int(pose.cy), int(pose.cx)]
    assert m.depth[int(pose.cy), int(pose.cx)] == pytest.approx(2.5, abs=DEPTH_QUANTUM)


def test_empty_cloud_is_all_invalid():
    m = project_depth(PointCloud(np.zeros((0, 3))), CameraPose(0.0, 0.0, 2.0))
    assert m.valid.shape == (48, 48)
    assert not m.valid.any()
    assert np.array_equal(m.normalized(), np.zeros((48, 48)))


def test_zbuffer_matches_brute_force():
    rng = SeededRng(11)
    cloud = PointCloud(rng.uniform((50, 3), -0.8, 0.8))
    pose = CameraPose(0.4, 0.5, 2.5, width=16, height=16)
    oracle = _brute_force_zbuffer(cloud, pose)
    m = project_depth(cloud, pose)
    assert np.array_equal(m.valid, np.isfinite(oracle))
    assert np.array_equal(m.depth[m.valid], _quantize(oracle[m.valid]))


def test_points_behind_camera_are_culled():
    pose = CameraPose(0.0, 0.0, 2.0)
    behind = PointCloud(np.array([[3.0, 0.0, 0.0], [0.0, 0.0, 0.0]]))
    m = project_depth(behind, pose)
    assert m.valid.sum() == 1
    assert m.depth[m.valid][0] == pytest.approx(2.0, abs=DEPTH_QUANTUM)


def test_normalized_depth_maps_nearest_to_one():
    pose = CameraPose(0.0, 0.0, 3.0)
    cloud = PointCloud(np.array([[0.5, 0.0, 0.0], [-0.5, 0.3, 0.0], [0.0, -0.3, 0.2]]))
    m = project_depth(cloud, pose)
    n = m.normalized()
    assert m.valid.sum() == 3
    # nearest valid pixel -> 1, farthest -> 0, invalid pixels -> 0
    assert n[m.valid].max() == 1.0
    assert n[m.valid].min() == 0.0
    assert np.all(n[~m.valid] == 0.0)


@given(st.floats(0, 2 * math.pi), st.floats(0, 2 * math.pi), st.floats(-0.6, 0.6), st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_rotation_equivariance(azimuth, delta, elevation, seed):
    cloud = PointCloud(SeededRng(seed).uniform((200, 3), -0.7, 0.7))
    pose = CameraPose(azimuth, elevation, 2.8, width=24, height=24)
    a = project_depth(cloud, pose)
    b = project_depth(cloud.rotated_z(delta), pose.with_azimuth(azimuth + delta))
    assert np.array_equal(a.valid, b.valid)
    assert np.array_equal(a.depth, b.depth)


@given(st.floats(0, 2 * math.pi), st.floats(-1.0, 1.0), st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_backprojection_and_minimality(azimuth, elevation, seed):
    cloud = PointCloud(SeededRng(seed).uniform((150, 3), -0.7, 0.7))
    pose = CameraPose(azimuth, elevation, 2.5, width=20, height=20)
    m = project_depth(cloud, pose)
    cam = pose.to_camera(cloud.points)
    u = np.floor(pose.focal * cam[:, 0] / cam[:, 2] + pose.cx).astype(int)
    v = np.floor(pose.focal * cam[:, 1] / cam[:, 2] + pose.cy).astype(int)
    for py, px in zip(*np.nonzero(m.valid)):
        d = m.depth[py, px]
        # minimality: not deeper than any point landing here
        here = (u == px) & (v == py)
        assert d <= cam[here, 2].min()
        # back-project the pixel centre and find a cloud point within half a pixel footprint
        ray = np.array([(px + 0.5 - pose.cx) / pose.focal, (py + 0.5 - pose.cy) / pose.focal, 1.0])
        world = pose.center + (d * ray) @ pose.rotation
        gap = np.min(np.linalg.norm(cloud.points - world, axis=1))
        assert gap <= math.sqrt(2.0) * 0.5 * d / pose.focal + 2 * DEPTH_QUANTUM


def test_hemisphere_spacing_for_100_cameras():
    poses = hemisphere_cameras(100, math.radians(30.0), 2.5)
    gaps = np.diff([p.azimuth for p in poses])
    assert np.allclose(np.degrees(gaps), 3.6, atol=1e-12)
    assert {p.elevation for p in poses} == {math.radians(30.0)}
    assert {p.radius for p in poses} == {2.5}


def test_hemisphere_four_cameras():
    az = [p.azimuth for p in hemisphere_cameras(4, 0.2, 1.5)]
    assert np.allclose(az, [0.0, math.pi / 2, math.pi, 1.5 * math.pi])


def test_hemisphere_rejects_single_camera():
    with pytest.raises(ValueError):
        hemisphere_cameras(1, 0.0, 2.0)


def test_augment_identity():
    cloud = generate_coarse_cloud(ShapeSpec("box-with-bump"), 100, SeededRng(2))
    out = augment_cloud(cloud, 1.0, 0.0, 0.1, SeededRng(3))
    assert np.array_equal(out.points, cloud.points)
    assert np.array_equal(out.tags, cloud.tags)


def test_augment_counts():
    cloud = PointCloud(SeededRng(1).uniform((400, 3)))
    assert len(augment_cloud(cloud, 0.5, 0.1, 0.05, SeededRng(0))) == 240
    assert len(augment_cloud(cloud, 0.333, 0.0, 0.05, SeededRng(0))) == math.ceil(0.333 * 400)


@pytest.mark.parametrize("keep,noise", [(0.0, 0.0), (-0.1, 0.0), (1.1, 0.0), (0.5, 0.2)])
def test_augment_rejects_bad_fractions(keep, noise):
    with pytest.raises(ValueError):
        augment_cloud(PointCloud(np.ones((4, 3))), keep, noise, 0.1, SeededRng(0))


def test_augment_rejects_empty_cloud():
    with pytest.raises(ValueError):
        augment_cloud(PointCloud(np.zeros((0, 3))), 0.5, 0.0, 0.1, SeededRng(0))


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
def test_augmented_map_differs_only_at_noise_pixels(seed):
    cloud = generate_coarse_cloud(ShapeSpec("asymmetric-cone"), 400, SeededRng(seed))
    out = augment_cloud(cloud, 0.6, 0.1, 0.1, SeededRng(seed + 50))
    n_keep, n_noise = 240, 40
    survivors = PointCloud(out.points[:n_keep])
    # survivors are a subset of the original cloud
    assert all(np.any(np.all(cloud.points == p, axis=1)) for p in survivors.points[:20])
    assert np.all(out.tags[n_keep:] == -1)
    pose = CameraPose(0.9, 0.5, 2.5)
    a, b = project_depth(survivors, pose), project_depth(out, pose)
    differ = (a.valid != b.valid) | (a.valid & b.valid & (a.depth != b.depth))
    assert differ.sum() <= n_noise


def test_augment_noise_inside_inflated_box():
    cloud = PointCloud(SeededRng(4).uniform((200, 3), -0.5, 0.5))
    out = augment_cloud(cloud, 1.0, 0.1, 0.2, SeededRng(5))
    noise = out.points[200:]
    lo, hi = cloud.bounds()
    assert noise.shape == (20, 3)
    assert np.all(noise >= lo - 0.2) and np.all(noise <= hi + 0.2)
