import numpy as np
import pytest

from splatmotion import synth
from splatmotion.losses import rigidity_init
from splatmotion.scene import build_knn_graph, positions

from conftest import DRIVING, occluded_arm_spec


def test_pair_shares_frame_zero_exactly(small_pair):
    _, base, driving, _ = small_pair
    assert np.array_equal(base.tracks[0], driving.tracks[0])
    assert np.array_equal(base.visibility[0], driving.visibility[0])


def test_arm_has_two_clusters():
    _, gt = synth.gen_scene(occluded_arm_spec(n=100, frames=3))
    obj = gt.labels[gt.labels >= 0]
    assert set(obj.tolist()) == {0, 1}


def test_generation_is_deterministic():
    spec = occluded_arm_spec(seed=5, n=60, frames=4, noise=0.01)
    a = synth.gen_pair(spec, DRIVING)
    b = synth.gen_pair(spec, DRIVING)
    assert a[0].equals(b[0]) and a[1].equals(b[1])


def test_noise_free_truth_matches_observations():
    spec = occluded_arm_spec(n=60, frames=4, noise=0.0)
    bundle, gt = synth.gen_scene(spec)
    np.testing.assert_allclose(bundle.tracks, gt.tracks, atol=1e-6)


def test_occluders_hide_points_and_then_reveal_them(small_pair):
    _, base, driving, (gb, gd) = small_pair
    obj = gb.labels >= 0
    assert (~base.visibility[:, obj]).any()
    hidden_first = ~driving.visibility[0] & obj
    assert (driving.visibility[1:, hidden_first]).any()


@pytest.mark.parametrize("kind", ["attach", "swap", "offset"])
def test_artifacts_perturb_only_the_driving_video(kind):
    spec = occluded_arm_spec(n=80, frames=5, num_background=60, noise=0.0)
    clean_b, clean_d, _ = synth.gen_pair(spec, DRIVING)
    base, driving, (gb, gd) = synth.gen_pair(spec, DRIVING, artifacts=(synth.ArtifactSpec(kind),))
    assert base.equals(clean_b)
    assert gd.corrupted.any() and not gb.corrupted.any()
    assert not np.array_equal(driving.tracks, clean_d.tracks)
    assert gd.artifacts[0]["type"] == kind
    # the truth stays clean
    np.testing.assert_array_equal(gd.tracks, synth.gen_pair(spec, DRIVING)[2][1].tracks)


def test_attach_marks_the_patch_as_foreground_in_the_driving_video_only():
    spec = occluded_arm_spec(n=80, frames=5, num_background=80)
    base, driving, (_, gd) = synth.gen_pair(spec, DRIVING, artifacts=(synth.ArtifactSpec("attach", radius=0.5),))
    patch = gd.corrupted
    assert driving.labels[patch].all()
    assert not base.labels[patch].any()


def test_attach_needs_background_points():
    with pytest.raises(ValueError):
        synth.gen_pair(occluded_arm_spec(n=50, frames=3), DRIVING, artifacts=(synth.ArtifactSpec("attach"),))


def test_driving_script_must_start_at_the_base_pose():
    with pytest.raises(ValueError):
        synth.gen_pair(occluded_arm_spec(n=50, frames=3), synth.MotionScript(rest_offset=0.3))


def test_truth_model_reproduces_truth_and_is_rigid_per_cluster():
    spec = synth.SceneSpec(kind="rigid_box", num_points=60, frames=5, seed=2)
    _, gt = synth.gen_scene(spec)
    m = synth.truth_model(spec, gt)
    X = positions(m)
    order = m.source_track
    np.testing.assert_allclose(X, gt.tracks[:, order], atol=1e-9)
    g = build_knn_graph(m, 6)
    assert rigidity_init(m, g)[0] < 1e-9


def test_bad_specs_raise():
    with pytest.raises(ValueError):
        synth.SceneSpec(kind="teapot")
    with pytest.raises(ValueError):
        synth.SceneSpec(noise_sigma=-1.0)
    with pytest.raises(ValueError):
        synth.ArtifactSpec("smear")
