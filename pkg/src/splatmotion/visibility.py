"""Depth-only splat rasterization, invisibility scores and disocclusion sets."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .bundle import Camera
from .geom import quat_to_mat
from .geom import smoothstep_array
from .scene import SceneModel, positions

NEAR_PLANE = 1e-4
MIN_RADIUS_PX = 0.5
MAX_RADIUS_PX = 32.0
ALPHA_EMPTY = 1e-3


@dataclass
class DepthBuffer:
    depth: np.ndarray   # (H, W), +inf where nothing was drawn
    alpha: np.ndarray   # (H, W)
    skipped: int = 0    # splats at or behind the near plane


@dataclass
class InvisibilityScores:
    zeta: np.ndarray    # per foreground splat, in [0, 1]


@dataclass
class DisocclusionSet:
    frames: dict = field(default_factory=dict)   # frame -> sorted track indices

    def __len__(self):
        return sum(len(v) for v in self.frames.values())

    def first_frames(self) -> dict:
        """Earliest disocclusion frame for each track."""
        first = {}
        for t in sorted(self.frames):
            for i in self.frames[t]:
                first.setdefault(int(i), t)
        return first


def splat_footprints(points, scale, opacity, camera: Camera, projected=None):
    """Project splats; return front-to-back sorted (u, v, z, radius, alpha, order) and skip count."""
    u, v, z = camera.project(points) if projected is None else projected
    keep = z > NEAR_PLANE
    idx = np.flatnonzero(keep)
    radius = np.clip(np.mean(scale[idx], axis=1) * camera.fx / z[idx], MIN_RADIUS_PX, MAX_RADIUS_PX)
    order = np.argsort(z[idx], kind="stable")
    idx = idx[order]
    return (u[idx], v[idx], z[idx], radius[order], np.asarray(opacity, dtype=np.float64)[idx],
            idx, int((~keep).sum()))


def rasterize_points(points, scale, opacity, camera: Camera, projected=None) -> DepthBuffer:
    u, v, z, radius, alpha, _, skipped = splat_footprints(points, scale, opacity, camera, projected)
    depth, trans = kernels.composite(u, v, z, radius, alpha, camera.width, camera.height)
    acc = 1.0 - trans
    depth[acc < ALPHA_EMPTY] = np.inf
    return DepthBuffer(depth, acc, skipped)


def render_depth(model: SceneModel, camera: Camera, t: int) -> DepthBuffer:
    pts = positions(model, [t])[0]
    return rasterize_points(pts, model.scale, model.opacity, camera)


def _zeta_from_buffer(buf: DepthBuffer, camera: Camera, pts, tau0, tau1, projected=None) -> np.ndarray:
    u, v, z = camera.project(pts) if projected is None else projected
    zeta = np.zeros(len(z))
    with np.errstate(invalid="ignore"):
        px = np.floor(u)
        py = np.floor(v)
    inside = (z > NEAR_PLANE) & (px >= 0) & (px < camera.width) & (py >= 0) & (py < camera.height)
    idx = np.flatnonzero(inside)
    d_hat = buf.depth[py[idx].astype(np.int64), px[idx].astype(np.int64)]
    ok = np.isfinite(d_hat)
    zeta[idx[ok]] = smoothstep_array(z[idx[ok]] - d_hat[ok], tau0, tau1)
    return zeta


def invisibility(model: SceneModel, camera: Camera, t: int, tau0: float, tau1: float) -> InvisibilityScores:
    if not tau0 < tau1:
        raise ValueError(f"invisibility needs tau0 < tau1, got {tau0}, {tau1}")
    pts = positions(model, [t])[0]
    buf = rasterize_points(pts, model.scale, model.opacity, camera)
    return InvisibilityScores(_zeta_from_buffer(buf, camera, pts[model.fg_index], tau0, tau1))


def invisibility_all(model: SceneModel, cameras, tau0: float, tau1: float, pts=None) -> np.ndarray:
    """Invisibility of every foreground splat at every frame, shape (T, Nf)."""
    if not tau0 < tau1:
        raise ValueError(f"invisibility needs tau0 < tau1, got {tau0}, {tau1}")
    if pts is None:
        pts = positions(model)
    fg = model.fg_index
    mean_scale = np.ascontiguousarray(np.mean(model.scale, axis=1), dtype=np.float64)
    opacity = np.ascontiguousarray(model.opacity, dtype=np.float64)
    out = np.zeros((len(cameras), len(fg)))
    for t, cam in enumerate(cameras):
        R = np.ascontiguousarray(quat_to_mat(cam.pose.rotation))
        out[t] = kernels.frame_invisibility(
            np.ascontiguousarray(pts[t], dtype=np.float64), R, np.asarray(cam.pose.translation, dtype=np.float64),
            float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy), int(cam.width), int(cam.height),
            mean_scale, opacity, fg, float(tau0), float(tau1),
            NEAR_PLANE, MIN_RADIUS_PX, MAX_RADIUS_PX, ALPHA_EMPTY)
    return out


def depth_range(model: SceneModel, camera: Camera, t: int) -> float:
    pts = positions(model, [t])[0]
    z = camera.to_camera(pts)[:, 2]
    z = z[z > NEAR_PLANE]
    return float(z.max() - z.min()) if len(z) else 0.0


def default_taus(model: SceneModel, camera: Camera, frac0: float = 0.01, frac1: float = 0.05):
    r = max(depth_range(model, camera, model.t_cano), 1e-6)
    return frac0 * r, frac1 * r


def detect_disocclusion(bundle, t_cano: int) -> DisocclusionSet:
    """Tracks visible at a driving frame but hidden at the canonical frame."""
    t1 = bundle.t1 or 0
    hidden = ~bundle.visibility[t_cano]
    out = {}
    for t in range(t1, bundle.num_frames):
        idx = np.flatnonzero(bundle.visibility[t] & hidden)
        if len(idx):
            out[t] = idx
    return DisocclusionSet(out)
