"""Two-stage fitting (motion initialization, refinement) with adaptive-moment steps."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from . import geom, losses
from .bundle import SequenceBundle
from .losses import LossBreakdown, LossWeights
from .scene import (KnnGraph, MotionBases, SceneModel, build_knn_graph, make_model,
                    refresh_similarity, select_canonical_frame)
from .visibility import default_taus, invisibility_all

log = logging.getLogger(__name__)

INIT_GROUPS = ("beta", "basis_rot", "basis_trans")
REFINE_GROUPS = ("beta", "basis_rot", "basis_trans", "mu", "opacity")


class FitError(RuntimeError):
    pass


class DivergenceError(FitError):
    pass


def _default_multipliers():
    return {"basis_rot": 1.0, "basis_trans": 1.0, "beta": 1.0, "mu": 0.1, "opacity": 0.1}


@dataclass
class OptimConfig:
    epochs_init: int = 500
    epochs_refine: int = 500
    step_size: float = 3e-3     # larger steps make the L1 terms chatter
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    group_lr: dict = field(default_factory=_default_multipliers)
    seed: int = 0
    membership_softness: float = 0.05
    divergence_factor: float = 10.0
    divergence_patience: int = 50

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("moment decay rates must lie in (0, 1)")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.epochs_init < 0 or self.epochs_refine < 0:
            raise ValueError("epoch counts must be >= 0")
        unknown = set(self.group_lr) - set(REFINE_GROUPS)
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    count: int = 0


@dataclass
class FitReport:
    history: list = field(default_factory=list)   # one dict per epoch
    final: dict = field(default_factory=dict)
    wall_time: float = 0.0
    gradient_check: dict | None = None

    def record(self, stage: str, epoch: int, b: LossBreakdown):
        self.history.append({"stage": stage, "epoch": epoch, **b.values()})

    def to_dict(self) -> dict:
        # wall time is deliberately left out so reports are reproducible byte for byte
        out = {"epochs": len(self.history), "history": self.history, "final": self.final}
        if self.gradient_check is not None:
            out["gradient_check"] = self.gradient_check
        return out


def step(params: dict, grads: dict, state: AdamState, config: OptimConfig):
    """One bias-corrected adaptive-moment update; returns new params and state."""
    count = state.count + 1
    bc1 = 1.0 - config.beta1 ** count
    bc2 = 1.0 - config.beta2 ** count
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise FitError(f"non-finite gradient in parameter group {name!r}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = config.beta1 * m + (1.0 - config.beta1) * g
        v = config.beta2 * v + (1.0 - config.beta2) * (g * g)
        lr = config.step_size * config.group_lr.get(name, 1.0)
        p = p - lr * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
        if name == "basis_rot":
            p = p / np.linalg.norm(p, axis=-1, keepdims=True)
        elif name == "opacity":
            p = np.clip(p, 0.0, 1.0)
        new_params[name], new_m[name], new_v[name] = p, m, v
    return new_params, AdamState(new_m, new_v, count)


def get_params(model: SceneModel, groups) -> dict:
    fg = model.fg_index
    src = {"beta": model.beta, "basis_rot": model.bases.rotation,
           "basis_trans": model.bases.translation, "mu": model.mu[fg], "opacity": model.opacity}
    return {g: src[g].copy() for g in groups}


def set_params(model: SceneModel, params: dict) -> SceneModel:
    out = model.copy()
    if "beta" in params:
        out.beta = params["beta"].copy()
    if "basis_rot" in params:
        out.bases.rotation = params["basis_rot"].copy()
    if "basis_trans" in params:
        out.bases.translation = params["basis_trans"].copy()
    if "mu" in params:
        out.mu[out.fg_index] = params["mu"]
    if "opacity" in params:
        out.opacity = params["opacity"].copy()
    return out


# -- motion initialization -------------------------------------------------

def _fill_missing(values, visible):
    """Linear interpolation over time of (T, M, 3) samples at invisible frames."""
    T = len(values)
    out = values.astype(np.float64).copy()
    ts = np.arange(T)
    for i in range(values.shape[1]):
        vis = visible[:, i]
        if vis.all() or not vis.any():
            continue
        for c in range(3):
            out[~vis, i, c] = np.interp(ts[~vis], ts[vis], out[vis, i, c])
    return out


def _cluster(features, K: int, seed: int) -> np.ndarray:
    if K == 1:
        return np.zeros(len(features), dtype=np.int64)
    distinct, inverse = np.unique(features, axis=0, return_inverse=True)
    if len(distinct) <= K:
        # nothing to separate (a static scene, say): one cluster per distinct motion
        return inverse.reshape(-1).astype(np.int64)
    rng = np.random.default_rng(seed)
    _, labels = kmeans2(features, K, minit="++", seed=rng, missing="warn")
    return labels.astype(np.int64)


MIN_REGISTRATION_POINTS = 4
MIN_SPREAD_RATIO = 0.1


def _well_spread(points) -> bool:
    """Enough extent in two directions for a stable rotation estimate."""
    sv = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    return sv[0] > 0 and sv[1] >= MIN_SPREAD_RATIO * sv[0]


def _nearest(known, t):
    return known[np.argmin(np.abs(known - t))]


def _fit_cluster_motion(mu, obs, vis, t_cano):
    """Per-frame rigid registration of one cluster from canonical to each frame.

    Frames with too few (or nearly collinear) visible members borrow the
    rotation of the nearest well-registered frame and solve only for
    translation; frames with no visible member copy the nearest solved frame.
    """
    T = len(obs)
    rot = np.zeros((T, 4))
    trans = np.zeros((T, 3))
    reliable = np.zeros(T, dtype=bool)
    rot[t_cano] = (1.0, 0.0, 0.0, 0.0)
    reliable[t_cano] = True
    for t in range(T):
        sel = vis[t]
        if t == t_cano or sel.sum() < MIN_REGISTRATION_POINTS or not _well_spread(mu[sel]):
            continue
        p = geom.kabsch(mu[sel], obs[t, sel])
        rot[t], trans[t] = p.rotation, p.translation
        reliable[t] = True
    have = reliable.copy()
    good = np.flatnonzero(reliable)
    for t in np.flatnonzero(~reliable & vis.any(axis=1)):
        sel = vis[t]
        rot[t] = rot[_nearest(good, t)]
        trans[t] = np.mean(obs[t, sel] - mu[sel] @ geom.quat_to_mat(rot[t]).T, axis=0)
        have[t] = True
    known = np.flatnonzero(have)
    for t in np.flatnonzero(~have):
        n = _nearest(known, t)
        rot[t], trans[t] = rot[n], trans[n]
    return rot, trans


def _static_positions(tracks, vis, t_cano) -> np.ndarray:
    """Per-track median of the visible observations of points that never move.

    The median ignores frames where a track was dragged along by a tracking
    or generation artifact, as long as those frames are the minority.
    """
    out = tracks[t_cano].astype(np.float64)
    for j in range(tracks.shape[1]):
        seen = vis[:, j]
        if seen.any():
            out[j] = np.median(tracks[seen, j].astype(np.float64), axis=0)
    return out


def seed_motion(bundle: SequenceBundle, weights: LossWeights, config: OptimConfig,
                frame_mask=None) -> SceneModel:
    """Canonical splats, clustered coefficients and per-cluster rigid bases (no descent)."""
    K = weights.num_bases
    T = bundle.num_frames
    vis = bundle.visibility.copy()
    if frame_mask is not None:
        vis &= np.asarray(frame_mask, dtype=bool)[:, None]
    t_cano = select_canonical_frame(bundle, frame_mask)
    at_cano = bundle.visibility[t_cano]
    fg_tracks = np.flatnonzero(bundle.labels & at_cano)
    bg_tracks = np.flatnonzero(~bundle.labels & at_cano)
    if len(fg_tracks) < K:
        raise FitError(
            f"only {len(fg_tracks)} foreground tracks visible at the canonical frame, "
            f"fewer than {K} motion bases; use a smaller number of bases")
    obs = bundle.tracks[:, fg_tracks].astype(np.float64)
    fvis = vis[:, fg_tracks]
    mu_fg = obs[t_cano].copy()
    filled = _fill_missing(obs, fvis)
    feats = (filled - mu_fg[None]).transpose(1, 0, 2).reshape(len(fg_tracks), -1)
    labels = _cluster(feats, K, config.seed)

    rot = np.zeros((K, T, 4))
    trans = np.zeros((K, T, 3))
    for k in range(K):
        members = labels == k
        if not members.any():
            members = np.ones(len(fg_tracks), dtype=bool)
        rot[k], trans[k] = _fit_cluster_motion(mu_fg[members], obs[:, members], fvis[:, members], t_cano)

    eps = config.membership_softness
    onehot = np.eye(K)[labels]
    beta = np.log((1.0 - eps) * onehot + eps / K)

    n_fg, n_bg = len(fg_tracks), len(bg_tracks)
    mu = np.concatenate([mu_fg, _static_positions(bundle.tracks[:, bg_tracks], vis[:, bg_tracks], t_cano)])
    is_fg = np.concatenate([np.ones(n_fg, bool), np.zeros(n_bg, bool)])
    color = None
    if bundle.colors is not None:
        color = bundle.colors[np.concatenate([fg_tracks, bg_tracks])].astype(np.float64)
    scale = _default_scale(mu_fg)
    return make_model(mu, is_fg, beta, MotionBases(rot, trans), t_cano, scale=scale,
                      color=color, source_track=np.concatenate([fg_tracks, bg_tracks]))


def _default_scale(points) -> float:
    """Splat radius: mean distance to the nearest canonical neighbor."""
    if len(points) < 2:
        return 0.05
    from scipy.spatial import cKDTree
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.mean(d[:, 1]))


def _graph_for(model: SceneModel, k: int) -> KnnGraph:
    nf = int(model.is_foreground.sum())
    return build_knn_graph(model, min(k, nf - 1))


def _run(stage, model, bundle, graph, weights, config, groups, epochs, report,
         frame_mask=None, taus=None):
    params = get_params(model, groups)
    state = AdamState()
    initial = None
    bad = 0
    for epoch in range(epochs):
        graph = refresh_similarity(model, graph)
        zeta = None
        if stage == "refine":
            zeta = invisibility_all(model, bundle.cameras, *taus)
        b = losses.total_loss(stage, model, bundle, graph, weights, zeta=zeta, frame_mask=frame_mask)
        if report is not None:
            report.record(stage, epoch, b)
        if initial is None:
            initial = b.total
        bad = bad + 1 if b.total > config.divergence_factor * max(initial, 1e-300) else 0
        if bad >= config.divergence_patience:
            raise DivergenceError(
                f"{stage} diverged: loss {b.total:.6g} above {config.divergence_factor}x "
                f"initial {initial:.6g} for {bad} epochs")
        params, state = step(params, {g: b.grads[g] for g in groups}, state, config)
        model = set_params(model, params)
    return model, graph


def _finish(stage, model, bundle, graph, weights, report, frame_mask, taus=None):
    if report is None:
        return
    graph = refresh_similarity(model, graph)
    zeta = invisibility_all(model, bundle.cameras, *taus) if stage == "refine" else None
    b = losses.total_loss(stage, model, bundle, graph, weights, zeta=zeta, frame_mask=frame_mask)
    report.final[stage] = b.values()


def init_motion(bundle: SequenceBundle, weights: LossWeights, config: OptimConfig,
                frame_mask=None, report: FitReport | None = None) -> SceneModel:
    """Seed the motion model from tracks, then minimize the init-stage objective."""
    t0 = time.perf_counter()
    model = seed_motion(bundle, weights, config, frame_mask)
    graph = _graph_for(model, weights.knn_k)
    model, graph = _run("init", model, bundle, graph, weights, config, INIT_GROUPS,
                        config.epochs_init, report, frame_mask)
    _finish("init", model, bundle, graph, weights, report, frame_mask)
    if report is not None:
        report.wall_time += time.perf_counter() - t0
    log.info("init_motion: %d epochs, %.2fs", config.epochs_init, time.perf_counter() - t0)
    return model


def resolve_taus(model: SceneModel, bundle: SequenceBundle, weights: LossWeights):
    if weights.taus_absolute:
        return weights.tau0, weights.tau1
    return default_taus(model, bundle.cameras[model.t_cano], weights.tau0, weights.tau1)


def refine(model: SceneModel, bundle: SequenceBundle, weights: LossWeights, config: OptimConfig,
           frame_mask=None, report: FitReport | None = None, graph: KnnGraph | None = None) -> SceneModel:
    """Refine bases, coefficients, canonical positions and opacity with occlusion-aware rigidity."""
    t0 = time.perf_counter()
    if graph is None:
        graph = _graph_for(model, weights.knn_k)
    taus = resolve_taus(model, bundle, weights)
    model, graph = _run("refine", model, bundle, graph, weights, config, REFINE_GROUPS,
                        config.epochs_refine, report, frame_mask, taus)
    _finish("refine", model, bundle, graph, weights, report, frame_mask, taus)
    if report is not None:
        report.wall_time += time.perf_counter() - t0
    log.info("refine: %d epochs, %.2fs", config.epochs_refine, time.perf_counter() - t0)
    return model


# -- gradient checking -----------------------------------------------------

def _term_functions(bundle, graph, zeta, weights):
    return {
        "track": lambda m: losses.track_loss(m, bundle),
        "rigidity_init": lambda m: losses.rigidity_init(m, graph),
        "rigidity_refine": lambda m: losses.rigidity_refine(m, graph, zeta),
        "smoothness": lambda m: losses.smoothness(m.bases),
        "total": lambda m: (lambda b: (b.total, b.grads))(
            losses.total_loss("refine", m, bundle, graph, weights, zeta=zeta)),
    }


def _param_view(model: SceneModel, group: str) -> np.ndarray:
    return {"beta": model.beta, "basis_rot": model.bases.rotation,
            "basis_trans": model.bases.translation, "mu": model.mu}[group]


def gradient_check(model: SceneModel, bundle, graph: KnnGraph, weights: LossWeights,
                   eps: float = 1e-5, zeta=None) -> dict:
    """Worst relative error between analytic and central-difference gradients.

    Returns ``{term: {group: rel_err}}``. Relative error of a group is
    ``max|analytic - numeric| / max(max|numeric|, max|analytic|)``, and 0 when
    both are identically zero.
    """
    if zeta is None:
        zeta = np.ones((model.frame_count, int(model.is_foreground.sum())))
    model = model.copy()
    fg = model.fg_index
    out = {}
    for term, fn in _term_functions(bundle, graph, zeta, weights).items():
        _, analytic = fn(model)
        out[term] = {}
        for group in ("beta", "basis_rot", "basis_trans", "mu"):
            if group not in analytic:
                continue
            arr = _param_view(model, group)
            index_set = [(i,) + rest for i in fg for rest in np.ndindex(arr.shape[1:])] \
                if group == "mu" else list(np.ndindex(arr.shape))
            numeric = np.zeros_like(analytic[group])
            for idx in index_set:
                orig = arr[idx]
                arr[idx] = orig + eps
                fp = fn(model)[0]
                arr[idx] = orig - eps
                fm = fn(model)[0]
                arr[idx] = orig
                target = (np.searchsorted(fg, idx[0]),) + idx[1:] if group == "mu" else idx
                numeric[target] = (fp - fm) / (2 * eps)
            a = analytic[group]
            scale = max(np.abs(numeric).max(initial=0.0), np.abs(a).max(initial=0.0))
            err = np.abs(a - numeric).max(initial=0.0)
            out[term][group] = 0.0 if scale == 0 else float(err / scale)
    return out


def random_instance(seed: int, N: int = 12, T: int = 4, K: int = 3, knn_k: int = 3, margin: float = 0.05):
    """Small random model/bundle/graph/zeta whose L1 terms sit away from their kinks."""
    from .bundle import Camera
    rng = np.random.default_rng(seed)
    rot = rng.normal(size=(K, T, 4)) * 0.3
    rot[..., 0] = 1.0
    rot /= np.linalg.norm(rot, axis=-1, keepdims=True)
    bases = MotionBases(rot, rng.normal(size=(K, T, 3)) * 0.3)
    mu = rng.normal(size=(N, 3))
    model = make_model(mu, np.ones(N, bool), rng.normal(size=(N, K)), bases,
                       source_track=np.arange(N))
    from .scene import positions
    X = positions(model)
    offs = rng.uniform(margin, 4 * margin, size=X.shape) * rng.choice([-1.0, 1.0], size=X.shape)
    vis = rng.random((T, N)) > 0.2
    vis[0] = True
    bundle = SequenceBundle([Camera(100.0, 100.0, 64.0, 64.0)] * T, X + offs, vis, np.ones(N, bool))
    # float32 storage moves observations slightly; keep the true offsets margin-sized
    graph = build_knn_graph(model, knn_k)
    d = np.linalg.norm(X[:, graph.src] - X[:, graph.dst], axis=-1)
    graph.rest_length = d.max(axis=0) + rng.uniform(margin, 4 * margin, size=len(graph))
    zeta = rng.uniform(0.1, 1.0, size=(T, N))
    weights = LossWeights(lambda_track=1.0, lambda_rigid=0.5, lambda_smooth=0.1, num_bases=K, knn_k=knn_k)
    return model, bundle, graph, zeta, weights
