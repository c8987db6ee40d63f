"""Canonical splat scene, motion bases and the blended deformation map."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import geom, kernels
from .geom import Pose


class DomainError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class Splat:
    mu: np.ndarray
    scale: np.ndarray
    orientation: np.ndarray
    opacity: float
    color: np.ndarray
    is_foreground: bool


@dataclass
class MotionBases:
    """K x T grid of rigid transforms stored as quaternion and translation arrays."""

    rotation: np.ndarray     # (K, T, 4)
    translation: np.ndarray  # (K, T, 3)

    @classmethod
    def identity(cls, K: int, T: int) -> "MotionBases":
        rot = np.zeros((K, T, 4))
        rot[..., 0] = 1.0
        return cls(rot, np.zeros((K, T, 3)))

    @property
    def num_bases(self) -> int:
        return self.rotation.shape[0]

    @property
    def num_frames(self) -> int:
        return self.rotation.shape[1]

    def pose(self, k: int, t: int) -> Pose:
        return Pose(self.rotation[k, t], self.translation[k, t])

    def column(self, t: int) -> list:
        return [self.pose(k, t) for k in range(self.num_bases)]

    def copy(self) -> "MotionBases":
        return MotionBases(self.rotation.copy(), self.translation.copy())


@dataclass
class SceneModel:
    """Splat arrays indexed by splat, coefficients indexed by foreground row.

    ``beta[r]`` belongs to splat ``fg_index[r]``; background splats never move.
    ``source_track`` records the track each splat was seeded from (-1 if none).
    """

    mu: np.ndarray
    scale: np.ndarray
    orientation: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    is_foreground: np.ndarray
    beta: np.ndarray
    bases: MotionBases
    t_cano: int = 0
    source_track: np.ndarray = None

    def __post_init__(self):
        n = len(self.mu)
        self.is_foreground = np.asarray(self.is_foreground, dtype=bool)
        if self.source_track is None:
            self.source_track = np.full(n, -1, dtype=np.int64)
        self.source_track = np.asarray(self.source_track, dtype=np.int64)
        if self.beta.shape != (int(self.is_foreground.sum()), self.bases.num_bases):
            raise ValueError(
                f"beta shape {self.beta.shape} does not match "
                f"{int(self.is_foreground.sum())} foreground splats x {self.bases.num_bases} bases")
        if not 0 <= self.t_cano < self.frame_count:
            raise ValueError(f"t_cano {self.t_cano} outside [0, {self.frame_count})")

    @property
    def frame_count(self) -> int:
        return self.bases.num_frames

    @property
    def num_bases(self) -> int:
        return self.bases.num_bases

    @property
    def fg_index(self) -> np.ndarray:
        return np.flatnonzero(self.is_foreground)

    @property
    def fg_row(self) -> np.ndarray:
        """Map splat index -> beta row (-1 for background)."""
        rows = np.full(len(self.mu), -1, dtype=np.int64)
        rows[self.is_foreground] = np.arange(int(self.is_foreground.sum()))
        return rows

    @property
    def splats(self) -> list:
        return [self.splat(i) for i in range(len(self.mu))]

    def splat(self, i: int) -> Splat:
        return Splat(self.mu[i].copy(), self.scale[i].copy(), self.orientation[i].copy(),
                     float(self.opacity[i]), self.color[i].copy(), bool(self.is_foreground[i]))

    def copy(self) -> "SceneModel":
        return replace(
            self, mu=self.mu.copy(), scale=self.scale.copy(), orientation=self.orientation.copy(),
            opacity=self.opacity.copy(), color=self.color.copy(),
            is_foreground=self.is_foreground.copy(), beta=self.beta.copy(),
            bases=self.bases.copy(), source_track=self.source_track.copy())

    def _row(self, i: int) -> int:
        if not 0 <= i < len(self.mu):
            raise DomainError(f"splat index {i} out of range")
        if not self.is_foreground[i]:
            raise DomainError(f"splat {i} is background and has no motion")
        return int(self.fg_row[i])

    def _check_frame(self, t: int):
        if not 0 <= t < self.frame_count:
            raise DomainError(f"frame {t} outside [0, {self.frame_count})")


def make_model(mu, is_foreground, beta, bases: MotionBases, t_cano: int = 0,
               scale=None, opacity=None, color=None, source_track=None) -> SceneModel:
    """Build a model with default appearance (isotropic scale, opaque, grey)."""
    mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
    n = len(mu)
    if scale is None:
        scale = np.full((n, 3), 0.05)
    elif np.ndim(scale) == 0:
        scale = np.full((n, 3), float(scale))
    orientation = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    if opacity is None:
        opacity = np.ones(n)
    if color is None:
        color = np.full((n, 3), 0.5)
    return SceneModel(mu.copy(), np.asarray(scale, dtype=np.float64), orientation,
                      np.asarray(opacity, dtype=np.float64), np.asarray(color, dtype=np.float64),
                      np.asarray(is_foreground, dtype=bool), np.asarray(beta, dtype=np.float64),
                      bases, t_cano, source_track)


def softmax(beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    e = np.exp(beta - beta.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def blend_weights(beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    if not np.all(np.isfinite(beta)):
        raise ValueError("motion coefficients must be finite")
    return softmax(beta)


def softmax_cosine(beta_i, beta_j) -> np.ndarray:
    """Cosine similarity of softmax weights; broadcasts over leading axes."""
    wi = softmax(beta_i)
    wj = softmax(beta_j)
    num = np.sum(wi * wj, axis=-1)
    return num / (np.linalg.norm(wi, axis=-1) * np.linalg.norm(wj, axis=-1))


def point_transform(model: SceneModel, i: int, t: int) -> Pose:
    row = model._row(i)
    model._check_frame(t)
    return geom.blend(blend_weights(model.beta[row]), model.bases.column(t))


def deform(model: SceneModel, i: int, t: int) -> np.ndarray:
    model._check_frame(t)
    if not 0 <= i < len(model.mu):
        raise DomainError(f"splat index {i} out of range")
    if not model.is_foreground[i]:
        return model.mu[i].copy()
    return geom.apply(point_transform(model, i, t), model.mu[i])


def backtrace_to_canonical(model: SceneModel, x, beta, t: int) -> np.ndarray:
    """Map an observed point at frame ``t`` back through the inverse blended transform."""
    model._check_frame(t)
    pose = geom.blend(blend_weights(beta), model.bases.column(t))
    return geom.apply(geom.inverse(pose), x)


def backtrace_batch(bases: MotionBases, x, beta, t) -> np.ndarray:
    """Vectorized backtrace of points ``x`` (M, 3) with coefficients (M, K) at frames ``t`` (M,)."""
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.int64)
    w = blend_weights(beta)
    q, tr = geom.blend_arrays(w, bases.rotation[:, t].transpose(1, 0, 2),
                              bases.translation[:, t].transpose(1, 0, 2))
    r = geom.quat_to_mat(q)
    return np.einsum("mba,mb->ma", r, x - tr)


@dataclass
class KnnGraph:
    """Directed k-nearest-neighbor edges between foreground splats (splat indices)."""

    src: np.ndarray
    dst: np.ndarray
    rest_length: np.ndarray
    similarity: np.ndarray
    k: int

    @property
    def edges(self) -> list:
        return [(int(i), int(j), float(r)) for i, j, r in zip(self.src, self.dst, self.rest_length)]

    def __len__(self):
        return len(self.src)


def knn_indices(points, k: int) -> np.ndarray:
    """For every point, indices of its k nearest other points (lowest index on ties)."""
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    m = min(n, k + 1 + 8)
    tree = cKDTree(points)
    _, cand = tree.query(points, k=m)
    cand = np.asarray(cand).reshape(n, m)
    # recompute distances exactly so ties compare equal, then stable sort
    d = np.linalg.norm(points[cand] - points[:, None, :], axis=-1)
    d[cand == np.arange(n)[:, None]] = np.inf
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        order = np.lexsort((cand[i], d[i]))
        out[i] = cand[i][order[:k]]
    return out


def build_knn_graph(model: SceneModel, k: int) -> KnnGraph:
    fg = model.fg_index
    if len(fg) < k + 1:
        raise ConfigurationError(f"kNN graph with k={k} needs at least {k + 1} foreground splats, have {len(fg)}")
    nbr = knn_indices(model.mu[fg], k)
    src_rows = np.repeat(np.arange(len(fg)), k)
    dst_rows = nbr.reshape(-1)
    rest = np.linalg.norm(model.mu[fg[src_rows]] - model.mu[fg[dst_rows]], axis=-1)
    sim = softmax_cosine(model.beta[src_rows], model.beta[dst_rows])
    return KnnGraph(fg[src_rows], fg[dst_rows], rest, sim, k)


def refresh_similarity(model: SceneModel, graph: KnnGraph) -> KnnGraph:
    rows = model.fg_row
    sim = softmax_cosine(model.beta[rows[graph.src]], model.beta[rows[graph.dst]])
    return replace(graph, similarity=sim)


def select_canonical_frame(bundle, frame_mask=None) -> int:
    """Frame with the most visible foreground tracks (earliest on ties), among masked frames if given."""
    counts = bundle.visibility[:, bundle.labels].sum(axis=1)
    if frame_mask is not None:
        mask = np.asarray(frame_mask, dtype=bool)
        if not mask.any():
            raise ValueError("frame mask selects no frames")
        counts = np.where(mask, counts, -1)
    return int(np.argmax(counts))


@dataclass
class DeformCache:
    w: np.ndarray
    ref: np.ndarray
    rot: np.ndarray      # (T, K, 4) selected frames, frame-major
    trans: np.ndarray    # (T, K, 3)
    qhat: np.ndarray
    qnorm: np.ndarray
    mu: np.ndarray
    frames: np.ndarray = field(default=None)


def deform_forward(beta, rotation, translation, mu_fg, frames=None):
    """Positions of all foreground splats at the requested frames.

    Returns ``(X, cache)`` with X of shape (len(frames), Nf, 3).
    """
    if frames is None:
        frames = np.arange(rotation.shape[1])
    frames = np.asarray(frames)
    w = np.ascontiguousarray(softmax(beta))
    ref = np.argmax(w, axis=1)
    rot = np.ascontiguousarray(rotation[:, frames].transpose(1, 0, 2), dtype=np.float64)
    trans = np.ascontiguousarray(translation[:, frames].transpose(1, 0, 2), dtype=np.float64)
    mu = np.ascontiguousarray(mu_fg, dtype=np.float64)
    X, qhat, qnorm = kernels.blend_forward(w, ref, rot, trans, mu)
    if qnorm.size and qnorm.min() < geom.DEGENERATE_NORM:
        raise geom.DegenerateBlendError("blended quaternion vanished (antipodal cancellation)")
    return X, DeformCache(w, ref, rot, trans, qhat, qnorm, mu, frames)


def deform_backward(cache: DeformCache, gX, num_frames: int):
    """Gradients of a scalar w.r.t. beta, basis rotation/translation and mu from dL/dX."""
    c = cache
    g_w, g_rot_t, g_trans_t, g_mu = kernels.blend_backward(
        c.w, c.ref, c.rot, c.trans, c.mu, c.qhat, c.qnorm, np.ascontiguousarray(gX, dtype=np.float64))
    g_beta = c.w * (g_w - np.sum(c.w * g_w, axis=1, keepdims=True))
    K = c.w.shape[1]
    g_rot = np.zeros((K, num_frames, 4))
    g_trans = np.zeros((K, num_frames, 3))
    g_rot[:, c.frames] = g_rot_t.transpose(1, 0, 2)
    g_trans[:, c.frames] = g_trans_t.transpose(1, 0, 2)
    return {"beta": g_beta, "basis_rot": g_rot, "basis_trans": g_trans, "mu": g_mu}


def positions(model: SceneModel, frames=None) -> np.ndarray:
    """All splat positions (T, N, 3); background rows repeat mu."""
    if frames is None:
        frames = np.arange(model.frame_count)
    frames = np.asarray(frames)
    out = np.broadcast_to(model.mu, (len(frames),) + model.mu.shape).copy()
    fg = model.fg_index
    if len(fg):
        X, _ = deform_forward(model.beta, model.bases.rotation, model.bases.translation,
                              model.mu[fg], frames)
        out[:, fg] = X
    return out
