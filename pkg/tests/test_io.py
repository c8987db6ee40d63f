import json
import math

import numpy as np
import pytest

from splatmotion import io, restage, synth
from splatmotion.bundle import Camera, SequenceBundle
from splatmotion.geom import Pose

from conftest import DRIVING, occluded_arm_spec


def random_bundle(rng, T=4, N=9, colors=True):
    cams = []
    for t in range(T):
        q = rng.normal(size=4)
        cams.append(Camera(float(rng.uniform(50, 200)), 100.0, 63.5, 64.25,
                           Pose(q / np.linalg.norm(q), rng.normal(size=3)), 128, 96))
    return SequenceBundle(cams, rng.normal(size=(T, N, 3)), rng.random((T, N)) > 0.3, rng.random(N) > 0.5,
                          rng.random((N, 3)) if colors else None)


def file_bytes(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_bundle_round_trip_is_bit_exact(tmp_path, rng):
    b = random_bundle(rng)
    io.write_bundle(b, tmp_path / "a")
    back = io.read_bundle(tmp_path / "a")
    assert back.equals(b)
    io.write_bundle(back, tmp_path / "b")
    assert file_bytes(tmp_path / "a") == file_bytes(tmp_path / "b")


def test_bundle_without_colors(tmp_path, rng):
    b = random_bundle(rng, colors=False)
    io.write_bundle(b, tmp_path)
    assert io.read_bundle(tmp_path).colors is None


def test_combined_bundle_keeps_segment_metadata(tmp_path, small_pair):
    _, base, driving, _ = small_pair
    c = restage.rewind_concat(base, driving)
    io.write_bundle(c, tmp_path)
    back = io.read_bundle(tmp_path)
    assert back.t1 == c.t1 and back.provenance == c.provenance
    assert back.equals(c)


def test_manifest_layout(tmp_path, rng):
    io.write_bundle(random_bundle(rng, T=3, N=5), tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["format"] == "restage-bundle/1"
    assert (man["frames"], man["tracks"], man["layout"]) == (3, 5, "frame-major")
    assert man["arrays"]["tracks"] == {"file": "tracks.bin", "dtype": "<f4", "shape": [3, 5, 3]}
    assert (tmp_path / "tracks.bin").stat().st_size == 3 * 5 * 3 * 4
    assert (tmp_path / "visibility.bin").stat().st_size == 15


def test_truncated_array_reports_byte_counts(tmp_path, rng):
    io.write_bundle(random_bundle(rng, T=2, N=4), tmp_path)
    data = (tmp_path / "tracks.bin").read_bytes()
    (tmp_path / "tracks.bin").write_bytes(data[:-5])
    with pytest.raises(io.FormatError, match="expected 96 bytes.*found 91"):
        io.read_bundle(tmp_path)


def test_non_finite_value_reports_offset(tmp_path, rng):
    io.write_bundle(random_bundle(rng, T=2, N=4), tmp_path)
    arr = np.frombuffer((tmp_path / "tracks.bin").read_bytes(), dtype="<f4").copy()
    arr[7] = np.nan
    (tmp_path / "tracks.bin").write_bytes(arr.tobytes())
    with pytest.raises(io.FormatError, match="byte offset 28"):
        io.read_bundle(tmp_path)


def test_wrong_version_and_shape_are_rejected(tmp_path, rng):
    io.write_bundle(random_bundle(rng, T=2, N=4), tmp_path)
    man = json.loads((tmp_path / "manifest.json").read_text())
    man["format"] = "restage-bundle/0"
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(io.FormatError, match="restage-bundle/1"):
        io.read_bundle(tmp_path)
    man["format"] = "restage-bundle/1"
    man["arrays"]["labels"]["shape"] = [5]
    (tmp_path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(io.FormatError, match="labels shape"):
        io.read_bundle(tmp_path)


def test_missing_manifest(tmp_path):
    with pytest.raises(io.FormatError, match="not found"):
        io.read_bundle(tmp_path / "nope")


def test_visibility_bytes_must_be_binary(tmp_path, rng):
    io.write_bundle(random_bundle(rng, T=2, N=4), tmp_path)
    (tmp_path / "visibility.bin").write_bytes(bytes([0, 1, 2, 0, 1, 1, 0, 0]))
    with pytest.raises(io.FormatError, match="0 or 1"):
        io.read_bundle(tmp_path)


def test_synth_output_passes_manifest_checks(tmp_path):
    base, driving, (gb, gd) = synth.gen_pair(occluded_arm_spec(n=60, frames=4), DRIVING)
    io.write_bundle(driving, tmp_path / "d")
    io.write_truth(gd, tmp_path / "t")
    assert io.read_bundle(tmp_path / "d").equals(driving)
    t = io.read_truth(tmp_path / "t")
    np.testing.assert_array_equal(t.tracks, gd.tracks)
    np.testing.assert_array_equal(t.labels, gd.labels)


def test_model_round_trip(tmp_path):
    _, gt = synth.gen_scene(occluded_arm_spec(n=50, frames=3))
    m = synth.truth_model(occluded_arm_spec(n=50, frames=3), gt)
    io.write_model(m, tmp_path)
    back = io.read_model(tmp_path)
    for name in ("mu", "beta", "opacity", "source_track", "is_foreground"):
        assert np.array_equal(getattr(back, name), getattr(m, name))
    assert np.array_equal(back.bases.rotation, m.bases.rotation)
    assert back.t_cano == m.t_cano


def test_json_writer_handles_numpy_and_infinities(tmp_path):
    io.write_json(tmp_path / "r.json", {"b": np.float32(0.5), "a": np.arange(3), "c": math.inf, "d": np.nan,
                                        "e": np.bool_(True)})
    text = (tmp_path / "r.json").read_text()
    assert json.loads(text) == {"a": [0, 1, 2], "b": 0.5, "c": "inf", "d": None, "e": True}
    assert text.index('"a"') < text.index('"b"')


def test_atomic_write_leaves_no_temporaries(tmp_path):
    io.atomic_write_bytes(tmp_path / "x.bin", b"abc")
    io.atomic_write_bytes(tmp_path / "x.bin", b"defg")
    assert [p.name for p in tmp_path.iterdir()] == ["x.bin"]
    assert (tmp_path / "x.bin").read_bytes() == b"defg"


def test_pgm_dump_quantizes_linearly(tmp_path):
    depth = np.array([[1.0, 2.0], [3.0, np.inf]])
    text = io.depth_to_pgm(depth, 1.0, 3.0)
    assert text.splitlines()[:3] == ["P2", "2 2", "65535"]
    io.write_pgm(tmp_path / "d.pgm", depth, 1.0, 3.0)
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "d.pgm"), [[0, 32768], [65535, 65535]])
    with pytest.raises(ValueError):
        io.depth_to_pgm(depth, 2.0, 2.0)
