"""On-disk formats: bundle directories, model and ground-truth directories, JSON reports, PGM dumps.

Bundle directories hold a ``manifest.json`` plus raw little-endian arrays.
Tracks are stored frame-major (T, N, 3) so each frame is one contiguous slice.
Every file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .bundle import Camera, SequenceBundle
from .scene import MotionBases, SceneModel

BUNDLE_FORMAT = "restage-bundle/1"
MODEL_FORMAT = "splatmotion-model/1"
TRUTH_FORMAT = "splatmotion-truth/1"
MANIFEST = "manifest.json"


class FormatError(ValueError):
    pass


# -- atomic writes ----------------------------------------------------------

def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _plain(obj):
    """Convert numpy scalars and arrays into JSON-native values."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if not math.isfinite(f):
            return None if math.isnan(f) else ("inf" if f > 0 else "-inf")
        return f
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    atomic_write_bytes(path, dumps_json(obj).encode("utf-8"))


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FormatError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from None


# -- raw arrays -------------------------------------------------------------

def _write_array(directory: Path, name: str, array: np.ndarray, dtype: str) -> dict:
    arr = np.ascontiguousarray(array, dtype=np.dtype(dtype))
    fname = f"{name}.bin"
    atomic_write_bytes(directory / fname, arr.tobytes(order="C"))
    return {"file": fname, "dtype": dtype, "shape": list(arr.shape)}


def _read_array(directory: Path, desc: dict, name: str, finite: bool = False) -> np.ndarray:
    try:
        fname, dtype, shape = desc["file"], np.dtype(desc["dtype"]), tuple(desc["shape"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{directory / MANIFEST}: bad descriptor for {name!r}") from exc
    path = directory / fname
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"{path}: missing array file for {name!r}") from None
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for shape {list(shape)}, found {len(raw)}")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    if finite and arr.dtype.kind == "f":
        bad = np.flatnonzero(~np.isfinite(arr.reshape(-1)))
        if len(bad):
            raise FormatError(f"{path}: non-finite value at byte offset {int(bad[0]) * dtype.itemsize}")
    return arr


def _manifest(directory: Path, fmt: str) -> dict:
    man = read_json(directory / MANIFEST)
    if man.get("format") != fmt:
        raise FormatError(f"{directory / MANIFEST}: format {man.get('format')!r}, expected {fmt!r}")
    return man


# -- bundles ----------------------------------------------------------------

def write_bundle(bundle: SequenceBundle, path):
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {
        "tracks": _write_array(d, "tracks", bundle.tracks, "<f4"),
        "visibility": _write_array(d, "visibility", bundle.visibility, "u1"),
        "labels": _write_array(d, "labels", bundle.labels, "u1"),
    }
    if bundle.colors is not None:
        arrays["colors"] = _write_array(d, "colors", bundle.colors, "<f4")
    if bundle.driving_labels is not None:
        arrays["driving_labels"] = _write_array(d, "driving_labels", bundle.driving_labels, "u1")
    manifest = {
        "format": BUNDLE_FORMAT,
        "frames": bundle.num_frames,
        "tracks": bundle.num_tracks,
        "layout": "frame-major",
        "t1": bundle.t1,
        "provenance": bundle.provenance,
        "cameras": [c.to_dict() for c in bundle.cameras],
        "arrays": arrays,
    }
    write_json(d / MANIFEST, manifest)


def read_bundle(path) -> SequenceBundle:
    d = Path(path)
    man = _manifest(d, BUNDLE_FORMAT)
    try:
        T, N = int(man["frames"]), int(man["tracks"])
        arrays = man["arrays"]
        cams = [Camera.from_dict(c) for c in man["cameras"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{d / MANIFEST}: malformed manifest ({exc})") from None
    expect = {"tracks": (T, N, 3), "visibility": (T, N), "labels": (N,), "colors": (N, 3),
              "driving_labels": (N,)}
    for name in ("tracks", "visibility", "labels"):
        if name not in arrays:
            raise FormatError(f"{d / MANIFEST}: missing array {name!r}")
    for name, desc in arrays.items():
        if name not in expect:
            raise FormatError(f"{d / MANIFEST}: unknown array {name!r}")
        if tuple(desc.get("shape", ())) != expect[name]:
            raise FormatError(f"{d / MANIFEST}: {name} shape {desc.get('shape')} != {list(expect[name])}")
    if len(cams) != T:
        raise FormatError(f"{d / MANIFEST}: {len(cams)} cameras for {T} frames")
    tracks = _read_array(d, arrays["tracks"], "tracks", finite=True)
    vis = _read_array(d, arrays["visibility"], "visibility")
    labels = _read_array(d, arrays["labels"], "labels")
    dlabels = _read_array(d, arrays["driving_labels"], "driving_labels") if "driving_labels" in arrays else None
    for name, a in (("visibility", vis), ("labels", labels), ("driving_labels", dlabels)):
        if a is not None and a.size and a.max() > 1:
            raise FormatError(f"{d / arrays[name]['file']}: values must be 0 or 1")
    colors = _read_array(d, arrays["colors"], "colors", finite=True) if "colors" in arrays else None
    return SequenceBundle(cams, tracks, vis.astype(bool), labels.astype(bool), colors,
                          t1=man.get("t1"), provenance=man.get("provenance"),
                          driving_labels=None if dlabels is None else dlabels.astype(bool))


# -- models -----------------------------------------------------------------

_MODEL_ARRAYS = ("mu", "scale", "orientation", "opacity", "color", "beta", "source_track")


def write_model(model: SceneModel, path):
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {name: _write_array(d, name, getattr(model, name),
                                 "<i8" if name == "source_track" else "<f8") for name in _MODEL_ARRAYS}
    arrays["is_foreground"] = _write_array(d, "is_foreground", model.is_foreground, "u1")
    arrays["basis_rotation"] = _write_array(d, "basis_rotation", model.bases.rotation, "<f8")
    arrays["basis_translation"] = _write_array(d, "basis_translation", model.bases.translation, "<f8")
    write_json(d / MANIFEST, {"format": MODEL_FORMAT, "t_cano": model.t_cano, "arrays": arrays})


def read_model(path) -> SceneModel:
    d = Path(path)
    man = _manifest(d, MODEL_FORMAT)
    arrays = man.get("arrays", {})
    get = {name: _read_array(d, desc, name, finite=True) for name, desc in arrays.items()}
    try:
        bases = MotionBases(get["basis_rotation"], get["basis_translation"])
        return SceneModel(get["mu"], get["scale"], get["orientation"], get["opacity"], get["color"],
                          get["is_foreground"].astype(bool), get["beta"], bases,
                          int(man["t_cano"]), get["source_track"])
    except KeyError as exc:
        raise FormatError(f"{d / MANIFEST}: missing array {exc}") from None
    except ValueError as exc:
        raise FormatError(f"{d}: inconsistent model arrays ({exc})") from None


# -- ground truth -----------------------------------------------------------

def write_truth(gt, path):
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {
        "tracks": _write_array(d, "tracks", gt.tracks, "<f8"),
        "visibility": _write_array(d, "visibility", gt.visibility, "u1"),
        "labels": _write_array(d, "labels", gt.labels, "<i8"),
        "canonical": _write_array(d, "canonical", gt.canonical, "<f8"),
        "cluster_poses": _write_array(d, "cluster_poses", gt.cluster_poses, "<f8"),
        "corrupted": _write_array(d, "corrupted", gt.corrupted, "u1"),
    }
    occluders = [[{"center": c, "half_size": h} for c, h in frame] for frame in gt.occluders]
    write_json(d / MANIFEST, {"format": TRUTH_FORMAT, "arrays": arrays, "occluders": occluders,
                              "artifacts": gt.artifacts})


def read_truth(path):
    from .synth import GroundTruth
    d = Path(path)
    man = _manifest(d, TRUTH_FORMAT)
    a = {name: _read_array(d, desc, name, finite=True) for name, desc in man["arrays"].items()}
    occ = [[(np.asarray(o["center"], dtype=np.float64), np.asarray(o["half_size"], dtype=np.float64))
            for o in frame] for frame in man.get("occluders", [])]
    return GroundTruth(a["tracks"], a["visibility"].astype(bool), a["labels"], a["canonical"], occ,
                       a["cluster_poses"], a["corrupted"].astype(bool), man.get("artifacts", []))


# -- debug depth images -------------------------------------------------------

PGM_MAX = 65535


def depth_to_pgm(depth, near: float, far: float) -> str:
    """ASCII PGM with depths mapped linearly from [near, far] onto [0, 65535].

    Pixels without coverage (infinite depth) are written as the maximum value.
    """
    if not far > near:
        raise ValueError("far must exceed near")
    depth = np.asarray(depth, dtype=np.float64)
    h, w = depth.shape
    q = np.where(np.isfinite(depth), (depth - near) / (far - near), 1.0)
    q = np.rint(np.clip(q, 0.0, 1.0) * PGM_MAX).astype(np.int64)
    rows = "\n".join(" ".join(str(v) for v in row) for row in q)
    return f"P2\n{w} {h}\n{PGM_MAX}\n{rows}\n"


def write_pgm(path, depth, near: float, far: float):
    atomic_write_bytes(path, depth_to_pgm(depth, near, far).encode("ascii"))


def read_pgm(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if not tokens or tokens[0] != "P2":
        raise FormatError(f"{path}: not an ASCII PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    vals = np.array(tokens[4:], dtype=np.int64)
    if vals.size != w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, found {vals.size}")
    if vals.size and vals.max() > maxval:
        raise FormatError(f"{path}: pixel value above declared maximum {maxval}")
    return vals.reshape(h, w)
