import math

import numpy as np
import pytest

from splatmotion import metrics
from splatmotion.scene import ConfigurationError, MotionBases, build_knn_graph, make_model


def test_mean_squared_deviation_e_minus_four_scores_eight():
    assert metrics.consistency_score(math.exp(-4.0)) == 8.0


def test_volume_consistency_of_volumes_with_that_deviation():
    # volumes 1 +- e^-2 have mean squared deviation e^-4 up to rounding
    d = math.exp(-2.0)
    assert metrics.volume_consistency([1 - d, 1 + d]) == pytest.approx(8.0, abs=1e-14)


def test_constant_volume_hits_the_floor():
    val = metrics.volume_consistency([2.0, 2.0, 2.0])
    assert val == pytest.approx((-math.log(1e-12)) ** 1.5, rel=1e-15)


def test_score_keeps_sign_above_unit_deviation():
    assert metrics.consistency_score(math.e) == -1.0
    assert metrics.consistency_score(1.0) == 0.0


def test_score_is_monotone_in_deviation():
    vals = [metrics.consistency_score(m) for m in (1e-8, 1e-4, 1e-1, 1.0, 10.0)]
    assert vals == sorted(vals, reverse=True)


def test_score_argument_checks():
    with pytest.raises(ConfigurationError):
        metrics.consistency_score(0.1, gamma=-1.0)
    with pytest.raises(metrics.MetricsError):
        metrics.consistency_score(-0.1)
    with pytest.raises(metrics.MetricsError):
        metrics.volume_consistency([1.0])


def test_voxel_volume_counts_occupied_cells():
    pts = np.array([[0.05, 0.05, 0.05], [0.06, 0.01, 0.02], [0.15, 0.0, 0.0], [0.0, 0.0, 0.35]])
    assert metrics.voxel_volume(pts, 0.1, origin=[0, 0, 0]) == pytest.approx(3 * 1e-3)
    assert metrics.voxel_volume(np.zeros((0, 3)), 0.1) == 0.0
    with pytest.raises(ValueError):
        metrics.voxel_volume(pts, 0.0)


def oscillating_pair():
    """Two splats whose distance alternates 1, 2 over two frames."""
    mu = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    rot = np.zeros((2, 2, 4))
    rot[..., 0] = 1.0
    trans = np.zeros((2, 2, 3))
    trans[1, 1] = [1.0, 0, 0]
    return make_model(mu, [True, True], np.array([[50.0, 0], [0, 50.0]]), MotionBases(rot, trans))


def test_single_oscillating_edge_frozen_score():
    m = oscillating_pair()
    g = build_knn_graph(m, 1)
    var = metrics.edge_variances(m, g)
    np.testing.assert_allclose(var, 0.25, rtol=1e-12)
    assert metrics.edge_consistency(m, g) == pytest.approx((-math.log(0.25)) ** 1.5, rel=1e-10)
    assert metrics.edge_consistency(m, g) == pytest.approx(1.632, abs=1e-3)


def test_rigid_scene_edge_score_is_the_floor_value():
    mu = np.random.default_rng(0).normal(size=(20, 3))
    m = make_model(mu, np.ones(20, bool), np.zeros((20, 2)), MotionBases.identity(2, 4))
    g = build_knn_graph(m, 4)
    assert metrics.edge_consistency(m, g) == pytest.approx((-math.log(1e-12)) ** 1.5)


def test_edge_sample_is_seeded():
    mu = np.random.default_rng(1).normal(size=(30, 3))
    rng = np.random.default_rng(2)
    rot = rng.normal(size=(3, 4, 4)) * 0.2
    rot[..., 0] = 1
    rot /= np.linalg.norm(rot, axis=-1, keepdims=True)
    m = make_model(mu, np.ones(30, bool), rng.normal(size=(30, 3)), MotionBases(rot, rng.normal(size=(3, 4, 3))))
    g = build_knn_graph(m, 3)
    a = metrics.edge_variances(m, g, sample=10, seed=4)
    b = metrics.edge_variances(m, g, sample=10, seed=4)
    assert np.array_equal(a, b)
    assert len(a) == 30


def test_tracking_l1_scores_through_source_splats():
    m = oscillating_pair()
    m.source_track = np.array([1, 0])
    truth = np.zeros((2, 2, 3))
    truth[:, 0] = [1.0, 0, 0]
    truth[1, 0] = [2.0, 0, 0]
    truth[:, 1] = [0.0, 0, 1]                 # splat 0 sits 1 away in z
    val, per_frame = metrics.tracking_l1(m, truth, per_frame=True)
    assert val == pytest.approx(0.5)
    assert per_frame == pytest.approx([0.5, 0.5])
    assert metrics.tracking_l1(m, truth, subset=[0]) == 0.0


def test_tracking_l1_without_correspondence_is_an_error():
    m = oscillating_pair()
    with pytest.raises(metrics.MetricsError):
        metrics.tracking_l1(m, np.zeros((2, 3, 3)), subset=[2])
    with pytest.raises(metrics.MetricsError):
        metrics.tracking_l1(m, np.zeros((3, 2, 3)))


def test_evaluate_collects_every_metric():
    m = oscillating_pair()
    m.source_track = np.array([0, 1])
    g = build_knn_graph(m, 1)
    truth = np.zeros((2, 2, 3))
    rep = metrics.evaluate(m, g, truth, voxel_size=0.5)
    d = rep.to_dict()
    assert set(d) >= {"volume_consistency", "edge_consistency", "tracking_l1", "volumes", "per_frame_l1"}
    assert d["volumes"] == [0.25, 0.25]
