"""Training objectives and their analytic gradients.

Every term returns ``(value, grads)`` where ``grads`` maps a parameter group
(``beta``, ``basis_rot``, ``basis_trans``, ``mu``, ``opacity``) to an array
shaped like that group. ``mu`` gradients cover foreground splats only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom, kernels
from .scene import KnnGraph, MotionBases, SceneModel, deform_backward, deform_forward, softmax_cosine

# L1 subgradient is zero inside this band (float32 track resolution)
L1_DEADZONE = 1e-6

GROUPS = ("beta", "basis_rot", "basis_trans", "mu", "opacity")


class LossError(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_track: float = 1.0
    lambda_rigid: float = 1e-3
    lambda_smooth: float = 1e-2
    tau0: float = 0.01      # fraction of canonical depth range unless taus_absolute
    tau1: float = 0.05
    taus_absolute: bool = False
    knn_k: int = 8
    num_bases: int = 20

    def __post_init__(self):
        for name in ("lambda_track", "lambda_rigid", "lambda_smooth"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.tau0 < self.tau1:
            raise ValueError("tau0 must be < tau1")
        if self.num_bases < 1 or self.knn_k < 1:
            raise ValueError("num_bases and knn_k must be >= 1")


@dataclass
class LossBreakdown:
    track: float
    rigidity: float
    smoothness: float
    total: float
    grads: dict = field(default_factory=dict, repr=False)

    def values(self) -> dict:
        return {"track": self.track, "rigidity": self.rigidity,
                "smoothness": self.smoothness, "total": self.total}


def zero_grads(model: SceneModel) -> dict:
    nf = int(model.is_foreground.sum())
    return {
        "beta": np.zeros_like(model.beta),
        "basis_rot": np.zeros_like(model.bases.rotation),
        "basis_trans": np.zeros_like(model.bases.translation),
        "mu": np.zeros((nf, 3)),
        "opacity": np.zeros_like(model.opacity),
    }


def _l1_sign(r):
    return np.where(np.abs(r) <= L1_DEADZONE, 0.0, np.sign(r))


def similarity(beta_i, beta_j) -> float:
    return float(softmax_cosine(beta_i, beta_j))


def _forward(model: SceneModel):
    fg = model.fg_index
    return deform_forward(model.beta, model.bases.rotation, model.bases.translation, model.mu[fg])


def _backward(model: SceneModel, cache, gX) -> dict:
    g = deform_backward(cache, gX, model.frame_count)
    g["opacity"] = np.zeros_like(model.opacity)
    return g


def _track_value(model: SceneModel, bundle, X, frame_mask=None):
    fg = model.fg_index
    src = model.source_track[fg]
    has = src >= 0
    if bundle.num_frames != model.frame_count:
        raise LossError(f"bundle has {bundle.num_frames} frames, model {model.frame_count}")
    obs = np.zeros_like(X)
    vis = np.zeros(X.shape[:2], dtype=bool)
    obs[:, has] = bundle.tracks[:, src[has]]
    vis[:, has] = bundle.visibility[:, src[has]]
    if frame_mask is not None:
        vis &= np.asarray(frame_mask, dtype=bool)[:, None]
    n = int(vis.sum())
    if n == 0:
        raise LossError("no visible observations to fit")
    r = (X - obs) * vis[..., None]
    value = float(np.abs(r).sum() / n)
    gX = _l1_sign(r) * vis[..., None] / n
    return value, gX


def track_loss(model: SceneModel, bundle, frame_mask=None):
    """Mean L1 distance between deformed splats and their visible track observations."""
    X, cache = _forward(model)
    value, gX = _track_value(model, bundle, X, frame_mask)
    return value, _backward(model, cache, gX)


def _rigidity_value(model, graph, X, coef):
    """Sum over frames and edges of coef * |d(x_i, x_j) - rest|.

    ``coef`` is (T, E) or (E,). The per-edge deviation is a scalar, so its
    L1 and L2 norms coincide; both rigidity variants share this kernel.
    """
    if len(graph) == 0:
        raise LossError("rigidity loss on an empty graph")
    rows = model.fg_row
    coef = np.ascontiguousarray(np.broadcast_to(coef, (X.shape[0], len(graph))), dtype=np.float64)
    return kernels.rigidity(X, rows[graph.src], rows[graph.dst],
                            np.ascontiguousarray(graph.rest_length, dtype=np.float64), coef, L1_DEADZONE)


def rigidity_init(model: SceneModel, graph: KnnGraph):
    """Similarity-weighted L1 deviation of neighbor distances from rest lengths."""
    X, cache = _forward(model)
    value, gX = _rigidity_value(model, graph, X, graph.similarity)
    return value, _backward(model, cache, gX)


def _refine_coef(model, graph, zeta):
    rows = model.fg_row
    zeta = np.asarray(zeta, dtype=np.float64)
    if zeta.shape != (model.frame_count, int(model.is_foreground.sum())):
        raise LossError(f"zeta shape {zeta.shape} does not match (frames, foreground splats)")
    return zeta[:, rows[graph.src]] * zeta[:, rows[graph.dst]] * graph.similarity[None]


def rigidity_refine(model: SceneModel, graph: KnnGraph, zeta):
    """Occlusion-gated rigidity: edges weighted by the invisibility of both ends."""
    X, cache = _forward(model)
    value, gX = _rigidity_value(model, graph, X, _refine_coef(model, graph, zeta))
    return value, _backward(model, cache, gX)


def smoothness(bases: MotionBases):
    """Squared Frobenius norm of consecutive differences of each basis's [R | t]."""
    q = bases.rotation
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / n
    R = geom.quat_to_mat(qh)
    dR = R[:, 1:] - R[:, :-1]
    dt = bases.translation[:, 1:] - bases.translation[:, :-1]
    value = float(np.sum(dR * dR) + np.sum(dt * dt))
    gR = np.zeros_like(R)
    gR[:, 1:] += 2 * dR
    gR[:, :-1] -= 2 * dR
    gt = np.zeros_like(bases.translation)
    gt[:, 1:] += 2 * dt
    gt[:, :-1] -= 2 * dt
    gqh = geom.quat_to_mat_vjp(qh, gR)
    gq = (gqh - qh * np.sum(qh * gqh, axis=-1, keepdims=True)) / n
    return value, {"basis_rot": gq, "basis_trans": gt}


def total_loss(stage: str, model: SceneModel, bundle, graph: KnnGraph, weights: LossWeights,
               zeta=None, frame_mask=None) -> LossBreakdown:
    """Weighted sum of track, rigidity (init or occlusion-aware) and smoothness terms."""
    if stage not in ("init", "refine"):
        raise ValueError(f"unknown stage {stage!r}")
    X, cache = _forward(model)
    track, g_track = _track_value(model, bundle, X, frame_mask)
    if stage == "init":
        coef = graph.similarity
    else:
        if zeta is None:
            raise LossError("refine stage needs invisibility scores")
        coef = _refine_coef(model, graph, zeta)
    rigid, g_rigid = _rigidity_value(model, graph, X, coef)
    smooth, g_smooth = smoothness(model.bases)
    gX = weights.lambda_track * g_track + weights.lambda_rigid * g_rigid
    grads = _backward(model, cache, gX)
    grads["basis_rot"] += weights.lambda_smooth * g_smooth["basis_rot"]
    grads["basis_trans"] += weights.lambda_smooth * g_smooth["basis_trans"]
    total = (weights.lambda_track * track + weights.lambda_rigid * rigid
             + weights.lambda_smooth * smooth)
    return LossBreakdown(track, rigid, smooth, total, grads)
