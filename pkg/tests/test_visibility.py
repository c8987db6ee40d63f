import numpy as np
import pytest

from splatmotion import visibility as vis
from splatmotion.bundle import Camera, SequenceBundle
from splatmotion.geom import Pose
from splatmotion.scene import MotionBases, make_model


def cam(size=16, f=16.0):
    return Camera(f, f, size / 2, size / 2, Pose.identity(), size, size)


def test_two_half_transparent_layers_composite_to_two():
    # front layer at depth 2, back at depth 4, both alpha 0.5 on the centre pixel
    c = cam()
    pts = np.array([[0.0, 0.0, 4.0], [0.0, 0.0, 2.0]])
    buf = vis.rasterize_points(pts, np.full((2, 3), 1e-4), np.array([0.5, 0.5]), c)
    assert buf.depth[8, 8] == 2.0
    assert buf.alpha[8, 8] == 0.75


def test_uncovered_pixels_have_infinite_depth():
    c = cam()
    buf = vis.rasterize_points(np.array([[0.0, 0.0, 3.0]]), np.full((1, 3), 1e-4), np.ones(1), c)
    assert buf.depth[8, 8] == 3.0
    assert np.isinf(buf.depth[0, 0])
    assert np.isfinite(buf.depth).sum() == 1


def test_nearly_transparent_coverage_counts_as_empty():
    c = cam()
    buf = vis.rasterize_points(np.array([[0.0, 0.0, 3.0]]), np.full((1, 3), 1e-4), np.array([5e-4]), c)
    assert np.isinf(buf.depth[8, 8])


def test_points_behind_the_camera_are_skipped():
    c = cam()
    buf = vis.rasterize_points(np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 0.0]]), np.full((2, 3), 0.1), np.ones(2), c)
    assert buf.skipped == 2
    assert np.isinf(buf.depth).all()


def test_disk_radius_clamps_to_pixel_range():
    c = cam(size=128, f=128.0)
    # a huge splat: radius clamps at 32 px, so pixels 40 px away stay empty
    buf = vis.rasterize_points(np.array([[0.0, 0.0, 1.0]]), np.full((1, 3), 10.0), np.ones(1), c)
    assert np.isfinite(buf.depth[64, 64 + 31])
    assert np.isinf(buf.depth[64, 64 + 40])


def occluded_model():
    """A foreground splat at depth 5 hidden behind a background wall splat at depth 3."""
    mu = np.array([[0.0, 0.0, 5.0], [0.0, 0.0, 3.0], [1.0, 1.0, 5.0]])
    bases = MotionBases.identity(1, 2)
    return make_model(mu, [True, False, True], np.zeros((2, 1)), bases, scale=0.02)


def test_hidden_splat_scores_one_and_visible_surface_scores_zero():
    m = occluded_model()
    z = vis.invisibility(m, cam(), 0, 0.1, 0.5).zeta
    assert z[0] == 1.0          # 2 units behind the wall
    assert z[1] == 0.0          # the corner splat is its own surface


def test_zeta_is_smoothstep_of_depth_gap():
    mu = np.array([[0.0, 0.0, 3.3], [0.0, 0.0, 3.0]])
    m = make_model(mu, [True, False], np.zeros((1, 1)), MotionBases.identity(1, 1), scale=0.02)
    z = vis.invisibility(m, cam(), 0, 0.1, 0.5).zeta
    # gap 0.3 sits at the midpoint of [0.1, 0.5]
    assert z[0] == pytest.approx(0.5, abs=1e-12)


def test_invisibility_all_matches_per_frame_path(rng):
    mu = rng.uniform([-0.5, -0.5, 3.0], [0.5, 0.5, 5.0], size=(40, 3))
    fg = rng.random(40) < 0.7
    rot = rng.normal(size=(2, 3, 4)) * 0.05
    rot[..., 0] = 1.0
    rot /= np.linalg.norm(rot, axis=-1, keepdims=True)
    m = make_model(mu, fg, rng.normal(size=(int(fg.sum()), 2)),
                   MotionBases(rot, rng.normal(size=(2, 3, 3)) * 0.1), scale=0.05)
    cams = [cam(32, 32.0)] * 3
    fast = vis.invisibility_all(m, cams, 0.05, 0.2)
    slow = np.stack([vis.invisibility(m, cams[t], t, 0.05, 0.2).zeta for t in range(3)])
    np.testing.assert_array_equal(fast, slow)


def test_taus_must_be_ordered():
    with pytest.raises(ValueError):
        vis.invisibility_all(occluded_model(), [cam()] * 2, 0.5, 0.5)


def test_default_taus_scale_with_depth_range():
    t0, t1 = vis.default_taus(occluded_model(), cam(), 0.01, 0.05)
    assert (t0, t1) == pytest.approx((0.02, 0.1))


def test_disocclusion_lists_tracks_hidden_at_the_canonical_frame():
    visible = np.array([[1, 0, 0], [1, 0, 1], [1, 1, 1], [0, 1, 0]], dtype=bool)
    b = SequenceBundle([cam()] * 4, np.zeros((4, 3, 3)), visible, np.ones(3, bool), t1=2)
    d = vis.detect_disocclusion(b, t_cano=0)
    assert {t: list(v) for t, v in d.frames.items()} == {2: [1, 2], 3: [1]}
    assert d.first_frames() == {1: 2, 2: 2}
    assert len(d) == 3
