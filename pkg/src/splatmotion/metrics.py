"""Geometry-consistency and tracking metrics for fitted motion models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .scene import ConfigurationError, KnnGraph, SceneModel, positions

GAMMA = 1.5
VARIANCE_FLOOR = 1e-12
VOXEL_FRACTION = 0.01


class MetricsError(ValueError):
    pass


@dataclass
class MetricsReport:
    volume_consistency: float
    edge_consistency: float
    tracking_l1: float | None
    volumes: list
    voxel_size: float
    sample_seed: int
    per_frame_l1: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"volume_consistency": self.volume_consistency,
               "edge_consistency": self.edge_consistency,
               "tracking_l1": self.tracking_l1,
               "volumes": list(self.volumes),
               "voxel_size": self.voxel_size,
               "sample_seed": self.sample_seed,
               "per_frame_l1": list(self.per_frame_l1)}
        out.update(self.extra)
        return out


def voxel_volume(points, voxel: float, origin=None) -> float:
    """Occupied voxel count times voxel volume.

    Voxels are aligned to ``origin``; pass the same origin for every frame of
    a sequence so that volumes are comparable. By default the points' own
    bounding-box minimum is used.
    """
    if not voxel > 0:
        raise ValueError("voxel size must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        return 0.0
    origin = pts.min(axis=0) if origin is None else np.asarray(origin, dtype=np.float64)
    cells = np.floor((pts - origin) / voxel).astype(np.int64)
    return float(len(np.unique(cells, axis=0)) * voxel ** 3)


def consistency_score(msd: float, gamma: float = GAMMA, floor: float = VARIANCE_FLOOR) -> float:
    """(-log msd)^gamma with msd clamped below at ``floor``.

    When msd exceeds 1 the log turns negative; the power is then applied to
    the magnitude and the sign kept, so the score stays finite and monotone.
    """
    if gamma < 0:
        raise ConfigurationError(f"gamma must be >= 0, got {gamma}")
    if msd < 0:
        raise MetricsError("mean squared deviation must be >= 0")
    y = -np.log(max(float(msd), floor))
    return float(np.sign(y) * abs(y) ** gamma)


def volume_consistency(volumes, gamma: float = GAMMA, floor: float = VARIANCE_FLOOR) -> float:
    v = np.asarray(volumes, dtype=np.float64)
    if v.size < 2:
        raise MetricsError("volume consistency needs at least 2 frames")
    msd = float(np.mean((v - v.mean()) ** 2))
    return consistency_score(msd, gamma, floor)


def default_voxel_size(model: SceneModel, fraction: float = VOXEL_FRACTION) -> float:
    fg = model.mu[model.fg_index]
    if len(fg) == 0:
        raise MetricsError("model has no foreground splats")
    diag = float(np.linalg.norm(fg.max(axis=0) - fg.min(axis=0)))
    return max(diag * fraction, 1e-9)


def volumes_over_time(model: SceneModel, voxel: float, frames=None, pts=None) -> list:
    """Foreground voxel volume per frame, on a grid anchored at the canonical bounding box."""
    fg = model.fg_index
    origin = model.mu[fg].min(axis=0)
    if pts is None:
        pts = positions(model, frames)
    return [voxel_volume(p[fg], voxel, origin) for p in pts]


def edge_variances(model: SceneModel, graph: KnnGraph, sample: int = 1000, seed: int = 0,
                   frames=None, pts=None) -> np.ndarray:
    """Temporal variance of every edge leaving a seeded sample of foreground splats."""
    if len(graph) == 0:
        raise MetricsError("edge consistency on an empty graph")
    fg = model.fg_index
    rng = np.random.default_rng(seed)
    m = min(sample, len(fg))
    chosen = np.sort(rng.choice(fg, size=m, replace=False))
    sel = np.isin(graph.src, chosen)
    if pts is None:
        pts = positions(model, frames)
    d = np.linalg.norm(pts[:, graph.src[sel]] - pts[:, graph.dst[sel]], axis=-1)
    return d.var(axis=0)


def edge_consistency(model: SceneModel, graph: KnnGraph, sample: int = 1000, seed: int = 0,
                     frames=None, gamma: float = GAMMA, floor: float = VARIANCE_FLOOR, pts=None) -> float:
    var = edge_variances(model, graph, sample, seed, frames, pts)
    return consistency_score(float(var.mean()) if var.size else 0.0, gamma, floor)


def _carry_prediction(model, pts, fg, observed, track, splat_tracks):
    """Predict an unmodeled track by carrying the offset to its nearest splat."""
    vis = np.flatnonzero(observed.visibility[:, track])
    if len(vis) == 0:
        return None
    tq = int(vis[0])
    x = observed.tracks[tq, track].astype(np.float64)
    _, j = cKDTree(pts[tq][fg]).query(x)
    j = fg[int(j)]
    return pts[:, j] + (x - pts[tq, j])


def track_predictions(model: SceneModel, track_ids, observed=None, pts=None):
    """Predicted trajectories (T, M, 3) for ground-truth track ids, plus a validity mask."""
    if pts is None:
        pts = positions(model)
    fg = model.fg_index
    owner = {int(t): int(i) for i, t in enumerate(model.source_track) if t >= 0}
    pred = np.zeros((pts.shape[0], len(track_ids), 3))
    valid = np.zeros(len(track_ids), dtype=bool)
    for col, tid in enumerate(track_ids):
        tid = int(tid)
        if tid in owner:
            pred[:, col] = pts[:, owner[tid]]
            valid[col] = True
        elif observed is not None:
            p = _carry_prediction(model, pts, fg, observed, tid, owner)
            if p is not None:
                pred[:, col] = p
                valid[col] = True
    return pred, valid


def tracking_l1(model: SceneModel, truth_tracks, subset=None, observed=None, per_frame=False,
                frames=None):
    """Mean L1 distance between predicted and true positions over all (track, frame).

    ``truth_tracks`` is (T, N, 3) indexed by track id. Tracks are scored
    through the splat built from them; with ``observed`` given, tracks lacking
    a splat are predicted from their nearest splat at their first visible
    frame. A track with no prediction at all is an error. ``frames``
    restricts scoring to a subset of model frames (all by default).
    """
    truth = np.asarray(truth_tracks, dtype=np.float64)
    if truth.shape[0] != model.frame_count:
        raise MetricsError(f"truth has {truth.shape[0]} frames, model {model.frame_count}")
    ids = np.arange(truth.shape[1]) if subset is None else np.asarray(subset, dtype=np.int64)
    if len(ids) == 0:
        raise MetricsError("no tracks to evaluate")
    pred, valid = track_predictions(model, ids, observed)
    if not valid.all():
        missing = ids[~valid][:5].tolist()
        raise MetricsError(f"no correspondence for track(s) {missing}")
    err = np.abs(pred - truth[:, ids]).sum(axis=-1)     # (T, M)
    if frames is not None:
        err = err[np.asarray(frames)]
    value = float(err.mean())
    if per_frame:
        return value, err.mean(axis=1).tolist()
    return value


def evaluate(model: SceneModel, graph: KnnGraph, truth_tracks=None, subset=None, observed=None,
             voxel_size: float | None = None, voxel_fraction: float = VOXEL_FRACTION,
             sample: int = 1000, seed: int = 0, gamma: float = GAMMA,
             floor: float = VARIANCE_FLOOR) -> MetricsReport:
    """All metrics over every frame of ``model`` (normally a truncated driving segment)."""
    pts = positions(model)
    voxel = default_voxel_size(model, voxel_fraction) if voxel_size is None else float(voxel_size)
    vols = volumes_over_time(model, voxel, pts=pts)
    cv = volume_consistency(vols, gamma, floor)
    ce = edge_consistency(model, graph, sample, seed, gamma=gamma, floor=floor, pts=pts)
    l1, per_frame = None, []
    if truth_tracks is not None:
        l1, per_frame = tracking_l1(model, truth_tracks, subset, observed, per_frame=True)
    return MetricsReport(cv, ce, l1, vols, voxel, seed, per_frame)
