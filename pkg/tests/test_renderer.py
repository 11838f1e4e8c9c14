import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from depthfuse.evaluation import foreground_color
from depthfuse.geometry import CameraPose
from depthfuse.numerics import SeededRng, finite_difference_gradient, softplus
from depthfuse.renderer import (VoxelRadianceField, dense_depth, render, render_backward,
                                render_image, render_turntable)
from depthfuse.shapes import FAMILIES, ShapeSpec, ground_truth_field


def _random_field(g=8, seed=0, scale=1.0):
    rng = SeededRng(seed)
    return VoxelRadianceField(scale * rng.normal([g, g, g]), rng.normal([g, g, g, 3]))


def _inverse_softplus(y):
    return math.log(math.expm1(y))


def test_empty_field_renders_background():
    img = render_image(VoxelRadianceField.empty(8), CameraPose(0.3, 0.2, 2.5), 16)
    assert np.array_equal(img.rgb, np.ones((48, 48, 3)))
    assert np.array_equal(img.opacity, np.zeros((48, 48)))


def test_opaque_red_cube_centre_pixel():
    g = 8
    fld = VoxelRadianceField(np.full((g, g, g), 60.0), np.tile([20.0, -20.0, -20.0], (g, g, g, 1)))
    img = render_image(fld, CameraPose(0.0, 0.0, 3.0, width=17, height=17), 16)
    assert np.allclose(img.rgb[8, 8], [1.0, 0.0, 0.0], atol=1e-3)


def test_uniform_density_matches_closed_form():
    # axial ray of an odd-sized image crosses the cube along a path of length 2 * extent
    g, sigma = 8, 0.7
    c = np.array([0.3, 0.6, 0.9])
    raw_c = np.log(c / (1 - c))
    fld = VoxelRadianceField(np.full((g, g, g), _inverse_softplus(sigma)), np.tile(raw_c, (g, g, g, 1)))
    img = render_image(fld, CameraPose(0.0, 0.0, 3.0, width=17, height=17), 16)
    through = math.exp(-sigma * 2.0)
    expected = c * (1.0 - through) + through
    assert np.allclose(img.rgb[8, 8], expected, atol=1e-12)
    assert img.opacity[8, 8] == pytest.approx(1.0 - through, abs=1e-12)


def test_step_refinement_changes_little_for_smooth_field():
    g = 8
    centers = VoxelRadianceField.empty(g).voxel_centers()
    density = 2.0 - 3.0 * np.sum(centers ** 2, axis=-1)
    color = np.stack([np.sin(2 * centers[..., 0]), centers[..., 1], np.cos(centers[..., 2])], axis=-1)
    fld = VoxelRadianceField(density, color)
    pose = CameraPose(0.8, 0.4, 2.5, width=16, height=16)
    a = render_image(fld, pose, 48)
    b = render_image(fld, pose, 96)
    assert np.max(np.abs(a.rgb - b.rgb)) < 1e-2


def test_render_is_deterministic_and_tape_replays_exactly():
    fld = _random_field(seed=3)
    pose = CameraPose(1.0, 0.3, 2.5, width=16, height=16)
    img, tape = render(fld, pose, 16)
    again = render_image(fld, pose, 16)
    assert np.array_equal(img.rgb, again.rgb)
    replay = tape.replay()
    assert np.array_equal(replay.rgb, img.rgb)
    assert np.array_equal(replay.opacity, img.opacity)


def test_render_rejects_camera_inside_cube_and_few_steps():
    fld = VoxelRadianceField.empty(8)
    with pytest.raises(ValueError):
        render(fld, CameraPose(0.0, 0.0, 0.5), 16)
    with pytest.raises(ValueError):
        render(fld, CameraPose(0.0, 0.0, 2.5), 4)


@given(st.integers(0, 2**31), st.floats(0, 2 * math.pi), st.floats(-1.2, 1.2), st.floats(0.1, 5.0))
@settings(max_examples=25, deadline=None)
def test_energy_bounded(seed, azimuth, elevation, scale):
    fld = _random_field(6, seed, scale)
    img = render_image(fld, CameraPose(azimuth, elevation, 2.5, width=8, height=8), 8)
    assert np.all(np.isfinite(img.rgb))
    assert np.all((img.rgb >= 0.0) & (img.rgb <= 1.0))
    assert np.all((img.opacity >= 0.0) & (img.opacity <= 1.0))


def test_backward_zero_gradient():
    fld = _random_field()
    _, tape = render(fld, CameraPose(0.5, 0.3, 2.5, width=16, height=16), 16)
    grads = render_backward(tape, np.zeros((16, 16, 3)), fld)
    assert not np.any(grads["density"]) and not np.any(grads["color"])


def test_backward_matches_finite_differences():
    fld = _random_field(seed=5)
    pose = CameraPose(0.9, 0.35, 2.5, width=8, height=8)
    _, tape = render(fld, pose, 12)
    n_pix = 8 * 8 * 3
    grads = render_backward(tape, np.full((8, 8, 3), 1.0 / n_pix))
    analytic = np.concatenate([grads["density"].ravel(), grads["color"].ravel()])
    g = fld.resolution

    def loss(flat):
        f = VoxelRadianceField(flat[: g ** 3].reshape(g, g, g), flat[g ** 3:].reshape(g, g, g, 3))
        return float(render_image(f, pose, 12).rgb.mean())

    x = np.concatenate([fld.density.ravel(), fld.color.ravel()])
    fd = finite_difference_gradient(loss, x, h=1e-5)
    mask = np.abs(fd) > 1e-6
    assert mask.sum() > 100
    rel = np.abs(analytic[mask] - fd[mask]) / np.abs(fd[mask])
    assert rel.max() < 1e-3


def test_backward_locality_of_colour():
    # voxels that no sample touches get zero colour gradient
    fld = _random_field(seed=1)
    pose = CameraPose(0.0, 0.0, 3.0, width=8, height=8, focal=40.0)
    _, tape = render(fld, pose, 16)
    grads = render_backward(tape, np.ones((8, 8, 3)))
    touched = np.asarray(tape.interp.sum(axis=0)).ravel().reshape(fld.density.shape) > 0
    assert (~touched).any()
    assert not np.any(grads["color"][~touched])


def test_backward_rejects_foreign_field_and_bad_shape():
    fld = _random_field()
    _, tape = render(fld, CameraPose(0.5, 0.3, 2.5, width=8, height=8), 8)
    with pytest.raises(ValueError):
        render_backward(tape, np.zeros((8, 8, 3)), _random_field(seed=9))
    with pytest.raises(ValueError):
        render_backward(tape, np.zeros((8, 8)))


def test_dense_depth_empty_field_invalid():
    d = dense_depth(VoxelRadianceField.empty(8), CameraPose(0.0, 0.3, 2.5))
    assert not d.valid.any()


@pytest.mark.parametrize("steps", [16, 24, 48])
def test_dense_depth_opaque_sphere(steps):
    # sphere radius 0.5 falls exactly between voxel centres of a 24^3 grid on [-1, 1]
    fld = VoxelRadianceField.empty(24)
    r = np.linalg.norm(fld.voxel_centers(), axis=-1)
    fld.density[:] = np.where(r < 0.5, 1000.0, -1000.0)
    pose = CameraPose(0.0, 0.0, 2.5, width=17, height=17)
    d = dense_depth(fld, pose, steps)
    assert d.valid[8, 8]
    step = 2.0 / steps
    assert abs(d.depth[8, 8] - (2.5 - 0.5)) <= step
    assert not d.valid[0, 0]


def test_dense_depth_decreases_when_field_moves_toward_camera():
    base = ground_truth_field(ShapeSpec("composite"), resolution=16)
    # shift the content one voxel along +x, toward a camera at azimuth 0
    moved = VoxelRadianceField(np.roll(base.density, 1, axis=0), np.roll(base.color, 1, axis=0))
    moved.density[0] = -12.0
    pose = CameraPose(0.0, 0.2, 2.5, width=24, height=24)
    a, b = dense_depth(base, pose, 32), dense_depth(moved, pose, 32)
    both = a.valid & b.valid
    assert both.sum() > 20
    assert np.all(b.depth[both] <= a.depth[both] + 1e-12)
    assert np.mean(a.depth[both] - b.depth[both]) > 0.05


def test_turntable_single_frame_is_frontal_render():
    fld = _random_field(seed=2)
    frames = render_turntable(fld, 1, 0.5, 2.5, 16, width=8, height=8)
    single = render_image(fld, CameraPose(0.0, 0.5, 2.5, width=8, height=8), 16)
    assert len(frames) == 1
    assert np.array_equal(frames[0].rgb, single.rgb)


def test_turntable_of_rotation_invariant_field_is_constant():
    # a saturated uniform field with the camera close enough that every ray hits the cube
    g = 6
    c = np.array([0.2, 0.5, 0.7])
    fld = VoxelRadianceField(np.full((g, g, g), 80.0), np.tile(np.log(c / (1 - c)), (g, g, g, 1)))
    frames = render_turntable(fld, 12, 0.3, 1.8, 16, width=12, height=12)
    for f in frames[1:]:
        assert np.max(np.abs(f.rgb - frames[0].rgb)) < 1e-6


def test_turntable_ordered_by_azimuth():
    fld = _random_field(seed=4)
    frames = render_turntable(fld, 4, 0.2, 2.5, 8, width=8, height=8)
    for k, f in enumerate(frames):
        ref = render_image(fld, CameraPose(k * math.pi / 2, 0.2, 2.5, width=8, height=8), 8)
        assert np.array_equal(f.rgb, ref.rgb)


@pytest.mark.parametrize("family", FAMILIES)
def test_turntable_frontal_frame_differs_most_from_back(family):
    # colour content distance: raw pixel distance is dominated by silhouette change
    # between side views, while the frontal feature drives the mean colour
    gt = ground_truth_field(ShapeSpec(family, feature_azimuth=1.0))
    frames = render_turntable(gt, 8, math.radians(30.0), 2.5, 24, width=32, height=32, start=1.0)
    back = foreground_color(frames[4])
    dist = [np.linalg.norm(foreground_color(f) - back) for f in frames]
    assert int(np.argmax(dist)) == 0


def test_field_validation():
    with pytest.raises(ValueError):
        VoxelRadianceField(np.zeros((4, 4, 3)), np.zeros((4, 4, 4, 3)))
    with pytest.raises(ValueError):
        VoxelRadianceField(np.full((4, 4, 4), np.nan), np.zeros((4, 4, 4, 3)))
    assert np.all(softplus(VoxelRadianceField.empty(4).density) < 1e-40)


def test_geometry_cache_is_transparent_and_bounded():
    from depthfuse import renderer

    fld = _random_field(seed=6)
    pose = CameraPose(0.4, 0.3, 2.5, width=8, height=8)
    first = render_image(fld, pose, 8)
    for k in range(renderer._GEOMETRY_CACHE_SIZE + 5):
        render_image(fld, CameraPose(0.01 * k, 0.2, 2.5, width=8, height=8), 8)
    assert len(renderer._GEOMETRY_CACHE) <= renderer._GEOMETRY_CACHE_SIZE
    # evicted and rebuilt geometry renders the same bits
    assert np.array_equal(render_image(fld, pose, 8).rgb, first.rgb)
    _, tape = render(fld, pose, 8)
    with pytest.raises(ValueError):
        tape.t_mid[0, 0] = 0.0
