"""Deterministic synthetic scenes with scripted articulated motion and occluders."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import geom
from .bundle import Camera, SequenceBundle
from .geom import Pose
from .scene import MotionBases, SceneModel, make_model

KINDS = ("rigid_box", "two_link_arm", "cluster_swarm")
ARTIFACTS = ("attach", "swap", "offset")

OCCLUDER_LABEL = -1
BACKGROUND_LABEL = -2


@dataclass(frozen=True)
class Occluder:
    """Opaque axis-aligned box; ``velocity`` is added per frame."""

    center: tuple = (0.0, 0.0, 4.0)
    half_size: tuple = (0.5, 0.5, 0.02)
    velocity: tuple = (0.0, 0.0, 0.0)

    def center_at(self, t: int) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) + t * np.asarray(self.velocity, dtype=np.float64)

    @property
    def moving(self) -> bool:
        return any(v != 0 for v in self.velocity)


@dataclass(frozen=True)
class MotionScript:
    """Angles follow ``amp * sin(2*pi*freq*s)`` with s = t / (T - 1), so every script starts at rest."""

    primary_amp: float = 0.3
    primary_freq: float = 0.5
    secondary_amp: float = 0.0
    secondary_freq: float = 0.25
    drift: tuple = (0.0, 0.0, 0.0)
    rest_offset: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "two_link_arm"
    num_points: int = 300
    frames: int = 20
    occluders: tuple = ()
    noise_sigma: float = 0.0
    seed: int = 0
    motion: MotionScript = MotionScript()
    num_background: int = 0
    num_clusters: int = 4
    image_size: int = 128
    focal: float = 128.0
    camera_orbit: float = 0.0
    self_occlusion: bool = True
    occluder_spacing: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if self.num_points < 1 or self.frames < 1:
            raise ValueError("num_points and frames must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


@dataclass
class GroundTruth:
    tracks: np.ndarray          # (T, N, 3) noise-free, artifact-free
    visibility: np.ndarray      # (T, N)
    labels: np.ndarray          # cluster id, OCCLUDER_LABEL or BACKGROUND_LABEL
    canonical: np.ndarray       # (N, 3) rest positions (frame 0)
    occluders: list             # per frame list of (center, half_size)
    cluster_poses: np.ndarray   # (C, T, 7) quaternion + translation relative to frame 0
    corrupted: np.ndarray = None
    artifacts: list = field(default_factory=list)

    def __post_init__(self):
        if self.corrupted is None:
            self.corrupted = np.zeros(self.tracks.shape[1], dtype=bool)

    @property
    def object_mask(self) -> np.ndarray:
        return self.labels >= 0


# -- geometry sampling ---------------------------------------------------------

def _rect_points(rng, n, x0, x1, y0, y1, z):
    return np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n), np.full(n, z)])


ARM_SHOULDER = np.array([-1.2, 0.0, 5.0])
ARM_L1, ARM_W1 = 1.1, 0.3
ARM_L2, ARM_W2 = 1.0, 0.24


def _arm_geometry(rng, n):
    a1 = ARM_L1 * ARM_W1
    a2 = ARM_L2 * ARM_W2
    n1 = int(round(n * a1 / (a1 + a2)))
    n2 = n - n1
    s = ARM_SHOULDER
    p1 = _rect_points(rng, n1, s[0], s[0] + ARM_L1, -ARM_W1 / 2, ARM_W1 / 2, s[2])
    p2 = _rect_points(rng, n2, s[0] + ARM_L1, s[0] + ARM_L1 + ARM_L2, -ARM_W2 / 2, ARM_W2 / 2, s[2])
    return np.concatenate([p1, p2]), np.concatenate([np.zeros(n1, int), np.ones(n2, int)])


BOX_CENTER = np.array([0.0, 0.0, 5.0])
BOX_HALF = np.array([0.5, 0.35, 0.25])


def _box_geometry(rng, n):
    h = BOX_HALF
    areas = np.array([h[1] * h[2], h[1] * h[2], h[0] * h[2], h[0] * h[2], h[0] * h[1], h[0] * h[1]])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1, 1, size=(n, 3)) * h
    axis = face // 2
    side = np.where(face % 2 == 0, -1.0, 1.0)
    u[np.arange(n), axis] = side * h[axis]
    return BOX_CENTER + u, np.zeros(n, int)


def _swarm_centers(c):
    ang = 2 * np.pi * np.arange(c) / c
    return np.column_stack([np.cos(ang), np.sin(ang), np.zeros(c)]) + np.array([0.0, 0.0, 5.0])


def _swarm_geometry(rng, n, c):
    labels = np.arange(n) % c
    d = rng.normal(size=(n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return _swarm_centers(c)[labels] + 0.25 * d, labels


def _geometry(spec: SceneSpec, rng):
    if spec.kind == "two_link_arm":
        return _arm_geometry(rng, spec.num_points)
    if spec.kind == "rigid_box":
        return _box_geometry(rng, spec.num_points)
    return _swarm_geometry(rng, spec.num_points, spec.num_clusters)


def num_clusters(spec: SceneSpec) -> int:
    return {"rigid_box": 1, "two_link_arm": 2, "cluster_swarm": spec.num_clusters}[spec.kind]


# -- motion scripts ----------------------------------------------------------

def _about(point, axis, angle) -> Pose:
    """Rotation by ``angle`` about an axis through ``point``."""
    point = np.asarray(point, dtype=np.float64)
    r = Pose.from_axis_angle(axis, angle)
    return Pose(r.rotation, point - geom.apply(r, point))


def cluster_poses(spec: SceneSpec, script: MotionScript, T: int) -> list:
    """World pose of every cluster at every frame, as list[cluster][frame]."""
    s = np.arange(T) / max(T - 1, 1)
    a1 = script.primary_amp * np.sin(2 * np.pi * script.primary_freq * s)
    a2 = script.secondary_amp * np.sin(2 * np.pi * script.secondary_freq * s) + script.rest_offset
    drift = np.outer(s, np.asarray(script.drift, dtype=np.float64))
    z = (0.0, 0.0, 1.0)
    out = []
    if spec.kind == "two_link_arm":
        elbow = ARM_SHOULDER + np.array([ARM_L1, 0.0, 0.0])
        link1, link2 = [], []
        for t in range(T):
            m1 = geom.compose(Pose.from_translation(drift[t]), _about(ARM_SHOULDER, z, a1[t]))
            link1.append(m1)
            link2.append(geom.compose(m1, _about(elbow, z, a2[t])))
        out = [link1, link2]
    elif spec.kind == "rigid_box":
        out = [[geom.compose(Pose.from_translation(drift[t]), _about(BOX_CENTER, (0.0, 1.0, 0.0), a1[t]))
                for t in range(T)]]
    else:
        c = spec.num_clusters
        centers = _swarm_centers(c)
        axes_rng = np.random.default_rng([spec.seed, 7])
        axes = axes_rng.normal(size=(c, 3))
        phases = 2 * np.pi * np.arange(c) / c
        for k in range(c):
            seq = []
            for t in range(T):
                wobble = script.secondary_amp * np.array(
                    [np.sin(2 * np.pi * script.secondary_freq * s[t] + phases[k]) - np.sin(phases[k]), 0.0, 0.0])
                seq.append(geom.compose(Pose.from_translation(drift[t] + wobble),
                                        _about(centers[k], axes[k], a1[t] + script.rest_offset)))
            out.append(seq)
    return out


# -- cameras and visibility --------------------------------------------------

def make_cameras(spec: SceneSpec, T: int) -> list:
    cams = []
    size = spec.image_size
    target = np.array([0.0, 0.0, 5.0])
    for t in range(T):
        phi = spec.camera_orbit * t / max(T - 1, 1)
        if phi == 0.0:
            pose = Pose.identity()
        else:
            # camera orbits about the vertical axis through the target
            world_from_cam = geom.compose(_about(target, (0.0, 1.0, 0.0), phi), Pose.identity())
            pose = geom.inverse(world_from_cam)
        cams.append(Camera(spec.focal, spec.focal, size / 2, size / 2, pose, size, size))
    return cams


def camera_center(cam: Camera) -> np.ndarray:
    return geom.apply(geom.inverse(cam.pose), np.zeros(3))


def ray_hits_box(origin, points, center, half) -> np.ndarray:
    """True where the open segment origin->point passes through the box (slab test)."""
    d = points - origin
    lo = np.asarray(center) - np.asarray(half)
    hi = np.asarray(center) + np.asarray(half)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - origin) / d
        t1 = (hi - origin) / d
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    # axis-parallel rays outside the slab never hit
    parallel = d == 0
    outside = parallel & ((origin < lo) | (origin > hi))
    enter = np.maximum(tmin.max(axis=1), 0.0)
    leave = np.minimum(tmax.min(axis=1), 1.0)
    return (enter <= leave) & (enter < 1.0) & ~outside.any(axis=1)


def _self_occluded(cam: Camera, pts, radius: float, margin: float) -> np.ndarray:
    u, v, z = cam.project(pts)
    uv = np.column_stack([u, v])
    r_px = radius * cam.fx / z
    hidden = np.zeros(len(pts), dtype=bool)
    tree = cKDTree(uv)
    for j, nbrs in enumerate(tree.query_ball_point(uv, r=float(r_px.max()))):
        nbrs = np.asarray(nbrs, dtype=np.int64)
        nbrs = nbrs[nbrs != j]
        if not len(nbrs):
            continue
        close = np.linalg.norm(uv[nbrs] - uv[j], axis=1) <= r_px[nbrs]
        if np.any(close & (z[nbrs] < z[j] - margin)):
            hidden[j] = True
    return hidden


def compute_visibility(spec: SceneSpec, cams, tracks, occluder_mask, occluders_per_frame, splat_radius):
    T, N, _ = tracks.shape
    vis = np.ones((T, N), dtype=bool)
    for t in range(T):
        cam = cams[t]
        u, v, z = cam.project(tracks[t])
        inside = (z > 1e-4) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        vis[t] &= inside
        origin = camera_center(cam)
        obj = ~occluder_mask
        for center, half in occluders_per_frame[t]:
            vis[t, obj] &= ~ray_hits_box(origin, tracks[t, obj], center, half)
        if spec.self_occlusion:
            vis[t, obj] &= ~_self_occluded(cam, tracks[t, obj], splat_radius, 4 * splat_radius)
    return vis


def _occluder_points(occ: Occluder, spacing: float, cam: Camera):
    """Grid on the camera-facing face of the box."""
    c = np.asarray(occ.center, dtype=np.float64)
    h = np.asarray(occ.half_size, dtype=np.float64)
    nx = max(int(np.ceil(2 * h[0] / spacing)) + 1, 2)
    ny = max(int(np.ceil(2 * h[1] / spacing)) + 1, 2)
    gx, gy = np.meshgrid(np.linspace(-h[0], h[0], nx), np.linspace(-h[1], h[1], ny), indexing="ij")
    front = c[2] - h[2] if camera_center(cam)[2] < c[2] else c[2] + h[2]
    return np.column_stack([c[0] + gx.ravel(), c[1] + gy.ravel(), np.full(gx.size, front)])


def mean_spacing(points) -> float:
    if len(points) < 2:
        return 0.05
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.mean(d[:, 1]))


# -- generation ----------------------------------------------------------------

def _relative(poses) -> np.ndarray:
    """Encode poses relative to frame 0 as (T, 7)."""
    inv0 = geom.inverse(poses[0])
    rel = [geom.compose(p, inv0) for p in poses]
    return np.array([np.concatenate([p.rotation, p.translation]) for p in rel])


def _move(points, poses0, pose_t):
    rel = geom.compose(pose_t, geom.inverse(poses0))
    return geom.apply(rel, points)


@dataclass
class _Layout:
    canonical: np.ndarray
    labels: np.ndarray
    object_n: int
    occluder_slices: list
    splat_radius: float


def _layout(spec: SceneSpec, cams) -> _Layout:
    rng = np.random.default_rng([spec.seed, 1])
    obj, labels = _geometry(spec, rng)
    spacing = mean_spacing(obj)
    parts = [obj]
    lab = [labels]
    if spec.num_background:
        # back wall behind the object
        bg = _rect_points(rng, spec.num_background, -2.2, 2.2, -1.5, 1.5, 6.0)
        parts.append(bg)
        lab.append(np.full(spec.num_background, BACKGROUND_LABEL))
    slices = []
    start = sum(len(p) for p in parts)
    occ_spacing = spec.occluder_spacing or spacing
    for occ in spec.occluders:
        pts = _occluder_points(occ, occ_spacing, cams[0])
        slices.append(slice(start, start + len(pts)))
        start += len(pts)
        parts.append(pts)
        lab.append(np.full(len(pts), OCCLUDER_LABEL))
    return _Layout(np.concatenate(parts), np.concatenate(lab), len(obj), slices, spacing)


def _true_tracks(spec, layout, poses, T):
    tracks = np.repeat(layout.canonical[None], T, axis=0).copy()
    n_obj = layout.object_n
    for k, seq in enumerate(poses):
        sel = np.flatnonzero(layout.labels[:n_obj] == k)
        for t in range(T):
            tracks[t, sel] = _move(layout.canonical[sel], seq[0], seq[t])
    for occ, sl in zip(spec.occluders, layout.occluder_slices):
        for t in range(T):
            tracks[t, sl] = layout.canonical[sl] + t * np.asarray(occ.velocity, dtype=np.float64)
    return tracks


def _occluders_per_frame(spec, T):
    return [[(occ.center_at(t), np.asarray(occ.half_size, dtype=np.float64)) for occ in spec.occluders]
            for t in range(T)]


def _bundle_labels(spec, layout):
    fg = layout.labels >= 0
    for occ, sl in zip(spec.occluders, layout.occluder_slices):
        if occ.moving:
            fg[sl] = True
    return fg


def _noise(spec, shape, stream: int, frame0_shared=True):
    """Observation noise; frame 0 draws from a stream shared by both videos of a pair."""
    if spec.noise_sigma == 0:
        return np.zeros(shape)
    out = np.empty(shape)
    out[0] = np.random.default_rng([spec.seed, 2, 0]).normal(0, spec.noise_sigma, shape[1:])
    out[1:] = np.random.default_rng([spec.seed, 2, stream]).normal(0, spec.noise_sigma, (shape[0] - 1,) + shape[1:])
    return out


def _colors(layout):
    rng = np.random.default_rng(11)
    palette = rng.uniform(0.2, 0.9, size=(8, 3))
    return palette[np.mod(layout.labels, 8)].astype(np.float32)


def _render(spec, script, layout, cams, stream, corrupt=None):
    T = spec.frames
    poses = cluster_poses(spec, script, T)
    truth = _true_tracks(spec, layout, poses, T)
    observed = truth.copy()
    corrupted = np.zeros(len(layout.labels), dtype=bool)
    records = []
    if corrupt is not None:
        observed, corrupted, records = corrupt(observed, poses)
    occ_frames = _occluders_per_frame(spec, T)
    occ_mask = layout.labels == OCCLUDER_LABEL
    vis = compute_visibility(spec, cams, observed, occ_mask, occ_frames, layout.splat_radius)
    noisy = observed + _noise(spec, observed.shape, stream)
    bundle = SequenceBundle(cams, noisy, vis, _bundle_labels(spec, layout), _colors(layout))
    rel = np.stack([_relative(seq) for seq in poses])
    gt = GroundTruth(truth, vis.copy(), layout.labels.copy(), layout.canonical.copy(), occ_frames,
                     rel, corrupted, records)
    return bundle, gt


def gen_scene(spec: SceneSpec):
    cams = make_cameras(spec, spec.frames)
    layout = _layout(spec, cams)
    return _render(spec, spec.motion, layout, cams, stream=1)


def _attach(spec, layout, target_cluster, radius):
    def corrupt(observed, poses):
        bg = np.flatnonzero(layout.labels == BACKGROUND_LABEL)
        if not len(bg):
            raise ValueError("attach artifact needs background points (num_background > 0)")
        obj = np.flatnonzero(layout.labels == target_cluster)
        tree = cKDTree(layout.canonical[obj][:, :2])
        d, _ = tree.query(layout.canonical[bg][:, :2])
        sel = bg[d <= radius]
        out = observed.copy()
        seq = poses[target_cluster]
        for t in range(len(out)):
            out[t, sel] = _move(layout.canonical[sel], seq[0], seq[t])
        mask = np.zeros(len(layout.labels), dtype=bool)
        mask[sel] = True
        return out, mask, [{"type": "attach", "cluster": int(target_cluster), "tracks": sel.tolist()}]
    return corrupt


def _swap(spec, layout, a, b):
    def corrupt(observed, poses):
        T = len(observed)
        mid = T // 2
        out = observed.copy()
        sel_a = np.flatnonzero(layout.labels == a)
        sel_b = np.flatnonzero(layout.labels == b)
        for t in range(mid, T):
            for sel, other in ((sel_a, b), (sel_b, a)):
                rel = geom.compose(poses[other][t], geom.inverse(poses[other][mid]))
                out[t, sel] = geom.apply(rel, observed[mid, sel])
        mask = np.zeros(len(layout.labels), dtype=bool)
        mask[sel_a] = mask[sel_b] = True
        return out, mask, [{"type": "swap", "clusters": [int(a), int(b)], "from_frame": int(mid),
                            "tracks": np.flatnonzero(mask).tolist()}]
    return corrupt


def _offset(spec, layout, cluster, vector):
    def corrupt(observed, poses):
        T = len(observed)
        ramp = np.arange(T) / max(T - 1, 1)
        out = observed.copy()
        sel = np.flatnonzero(layout.labels == cluster)
        out[:, sel] += ramp[:, None, None] * np.asarray(vector, dtype=np.float64)
        mask = np.zeros(len(layout.labels), dtype=bool)
        mask[sel] = True
        return out, mask, [{"type": "offset", "cluster": int(cluster), "vector": list(map(float, vector)),
                            "tracks": sel.tolist()}]
    return corrupt


@dataclass(frozen=True)
class ArtifactSpec:
    kind: str = "attach"
    cluster: int = 1
    other_cluster: int = 0
    radius: float = 0.4
    vector: tuple = (0.0, 0.3, 0.0)

    def __post_init__(self):
        if self.kind not in ARTIFACTS:
            raise ValueError(f"unknown artifact {self.kind!r}")


def _frame0_poses(spec, script):
    return [seq[0] for seq in cluster_poses(spec, script, 2)]


def gen_pair(spec: SceneSpec, driving_motion: MotionScript, artifacts=(), driving_frames: int | None = None):
    """Base and driving videos of one object starting from the same pose.

    Artifacts corrupt only the driving observations; ground truth stays clean.
    """
    for a, b in zip(_frame0_poses(spec, spec.motion), _frame0_poses(spec, driving_motion)):
        if not (np.allclose(a.matrix(), b.matrix(), atol=1e-12)):
            raise ValueError("base and driving scripts start from different poses")
    cams = make_cameras(spec, spec.frames)
    layout = _layout(spec, cams)
    base, gt_base = _render(spec, spec.motion, layout, cams, stream=1)
    dspec = spec if driving_frames is None else replace(spec, frames=driving_frames)
    dcams = make_cameras(dspec, dspec.frames)
    corrupt = None
    fns = []
    for art in artifacts:
        if art.kind == "attach":
            fns.append(_attach(dspec, layout, art.cluster, art.radius))
        elif art.kind == "swap":
            fns.append(_swap(dspec, layout, art.cluster, art.other_cluster))
        else:
            fns.append(_offset(dspec, layout, art.cluster, art.vector))
    if fns:
        def corrupt(observed, poses):
            mask = np.zeros(len(layout.labels), dtype=bool)
            records = []
            for fn in fns:
                observed, m, r = fn(observed, poses)
                mask |= m
                records += r
            return observed, mask, records
    driving, gt_driving = _render(dspec, driving_motion, layout, dcams, stream=2, corrupt=corrupt)
    if any(a.kind == "attach" for a in artifacts):
        # the generated clip's segmentation fuses the attached patch into the object
        driving.labels = driving.labels | gt_driving.corrupted
    return base, driving, (gt_base, gt_driving)


def truth_model(spec: SceneSpec, gt: GroundTruth, scale=None) -> SceneModel:
    """The generator's own motion as a SceneModel: one saturated basis per cluster."""
    C, T, _ = gt.cluster_poses.shape
    obj = np.flatnonzero(gt.labels >= 0)
    other = np.flatnonzero(gt.labels < 0)
    moving_occ = np.zeros(len(gt.labels), dtype=bool)
    K = C
    rot = gt.cluster_poses[..., :4].copy()
    trans = gt.cluster_poses[..., 4:].copy()
    occ_tracks = np.flatnonzero(gt.labels == OCCLUDER_LABEL)
    if len(occ_tracks):
        vel = gt.tracks[1:, occ_tracks] - gt.tracks[:-1, occ_tracks] if T > 1 else np.zeros((0, len(occ_tracks), 3))
        moving = np.any(np.abs(vel) > 0, axis=(0, 2)) if len(vel) else np.zeros(len(occ_tracks), bool)
        moving_occ[occ_tracks[moving]] = True
    if moving_occ.any():
        K = C + 1
        shift = gt.tracks[:, moving_occ][:, 0] - gt.tracks[0, moving_occ][0]
        rot = np.concatenate([rot, np.tile([1.0, 0, 0, 0], (1, T, 1))])
        trans = np.concatenate([trans, shift[None]])
    fg = np.concatenate([obj, np.flatnonzero(moving_occ)])
    bg = np.setdiff1d(other, np.flatnonzero(moving_occ))
    order = np.concatenate([fg, bg])
    labels = np.concatenate([gt.labels[obj], np.full(int(moving_occ.sum()), C)])
    beta = 30.0 * np.eye(K)[labels]
    if scale is None:
        scale = mean_spacing(gt.canonical[obj])
    is_fg = np.concatenate([np.ones(len(fg), bool), np.zeros(len(bg), bool)])
    return make_model(gt.canonical[order], is_fg, beta, MotionBases(rot, trans), 0,
                      scale=scale, source_track=order)


def hidden_counts_by_ray(spec: SceneSpec, gt: GroundTruth, cams) -> np.ndarray:
    """Per-frame number of object points whose camera ray crosses an occluder (brute force)."""
    counts = []
    for t in range(len(gt.tracks)):
        origin = camera_center(cams[t])
        n = 0
        for i in np.flatnonzero(gt.labels >= 0):
            p = gt.tracks[t, i]
            for center, half in gt.occluders[t]:
                if _segment_hits_box_scalar(origin, p, center, half):
                    n += 1
                    break
        counts.append(n)
    return np.array(counts)


def _segment_hits_box_scalar(origin, p, center, half) -> bool:
    lo = np.asarray(center) - half
    hi = np.asarray(center) + half
    tmin, tmax = 0.0, 1.0
    for a in range(3):
        d = p[a] - origin[a]
        if abs(d) < 1e-15:
            if origin[a] < lo[a] or origin[a] > hi[a]:
                return False
            continue
        t0 = (lo[a] - origin[a]) / d
        t1 = (hi[a] - origin[a]) / d
        if t0 > t1:
            t0, t1 = t1, t0
        tmin = max(tmin, t0)
        tmax = min(tmax, t1)
        if tmin > tmax:
            return False
    return tmin < 1.0
