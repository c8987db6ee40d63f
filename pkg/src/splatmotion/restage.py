"""Rewound joint training, disocclusion backtracing, truncation and the variance experiment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import losses, optim
from .bundle import SequenceBundle
from .losses import LossWeights
from .optim import FitReport, OptimConfig
from .scene import MotionBases, SceneModel, backtrace_batch, positions
from .visibility import DisocclusionSet, detect_disocclusion

log = logging.getLogger(__name__)

SHARED_FRAME_TOL = 1e-4
BACKTRACE_NEIGHBORS = 8
IDW_FLOOR = 1e-8
ABLATIONS = ("rigidity", "backtracing", "joint")


class RestageError(ValueError):
    pass


def rewind_concat(base: SequenceBundle, driving: SequenceBundle, tol: float = SHARED_FRAME_TOL) -> SequenceBundle:
    """Reverse the base video and append the driving video after their shared first frame.

    The combined sequence uses the base video's foreground labels. When the
    driving video labels some tracks differently (a generated clip fusing
    background into the object, say) its labels ride along unchanged.
    """
    if base.num_tracks != driving.num_tracks:
        raise RestageError(f"base has {base.num_tracks} tracks but driving has {driving.num_tracks}")
    if base.t1 is not None or driving.t1 is not None:
        raise RestageError("inputs must be single videos, not combined sequences")
    shared = base.visibility[0] & driving.visibility[0]
    if shared.any():
        err = np.abs(base.tracks[0, shared].astype(np.float64) - driving.tracks[0, shared]).max(axis=1)
        worst = int(np.argmax(err))
        if err[worst] > tol:
            raise RestageError(
                f"shared first frame mismatch: track {int(np.flatnonzero(shared)[worst])} "
                f"differs by {err[worst]:.3g} (> {tol:g})")
    t1 = base.num_frames
    rev = slice(None, None, -1)
    combined = SequenceBundle(
        list(base.cameras[rev]) + list(driving.cameras[1:]),
        np.concatenate([base.tracks[rev], driving.tracks[1:]]),
        np.concatenate([base.visibility[rev], driving.visibility[1:]]),
        base.labels.copy(),
        None if base.colors is None else base.colors.copy(),
        t1=t1,
        provenance=["rewound_base"] * t1 + ["driving"] * (driving.num_frames - 1),
        driving_labels=(None if np.array_equal(base.labels, driving.labels)
                        else driving.labels.copy()),
    )
    return combined


def split_combined(combined: SequenceBundle):
    """Inverse of :func:`rewind_concat`: the base video and the driving video."""
    t1 = combined.t1
    base = combined.frames(0, t1)
    base = SequenceBundle(base.cameras[::-1], base.tracks[::-1], base.visibility[::-1],
                          base.labels, base.colors)
    driving = combined.frames(t1 - 1, combined.num_frames)
    if combined.driving_labels is not None:
        driving.labels = combined.driving_labels.copy()
    return base, driving


def insert_disoccluded(model: SceneModel, bundle: SequenceBundle, dis: DisocclusionSet,
                       neighbors: int = BACKTRACE_NEIGHBORS) -> SceneModel:
    """Append a splat for every newly seen track, mapped back to the canonical frame.

    Coefficients are inverse-distance averages over the nearest existing
    foreground splats at the disocclusion frame.
    """
    if len(dis) == 0:
        return model
    fg = model.fg_index
    if not len(fg):
        raise RestageError("cannot backtrace without existing foreground splats")
    have = set(model.source_track[model.source_track >= 0].tolist())
    first = {i: t for i, t in dis.first_frames().items() if i not in have}
    if not first:
        return model
    tracks = np.array(sorted(first))
    frames = np.array([first[i] for i in tracks])
    x_obs = bundle.tracks[frames, tracks].astype(np.float64)
    is_fg = bundle.labels[tracks]

    new_mu = x_obs.copy()
    new_beta = np.zeros((int(is_fg.sum()), model.num_bases))
    if is_fg.any():
        fg_pos = positions(model, np.unique(frames[is_fg]))
        frame_slot = {t: s for s, t in enumerate(np.unique(frames[is_fg]))}
        k = min(neighbors, len(fg))
        rows = []
        for row, (x, t) in enumerate(zip(x_obs[is_fg], frames[is_fg])):
            pts = fg_pos[frame_slot[t]][fg]
            d, idx = cKDTree(pts).query(x, k=k)
            d = np.atleast_1d(d)
            idx = np.atleast_1d(idx)
            w = 1.0 / np.maximum(d, IDW_FLOOR)
            new_beta[row] = (w @ model.beta[idx]) / w.sum()
            rows.append(row)
        new_mu[is_fg] = backtrace_batch(model.bases, x_obs[is_fg], new_beta, frames[is_fg])

    n = len(tracks)
    scale = np.tile(np.mean(model.scale[fg], axis=0), (n, 1))
    color = (bundle.colors[tracks].astype(np.float64) if bundle.colors is not None
             else np.full((n, 3), 0.5))
    out = model.copy()
    out.mu = np.concatenate([model.mu, new_mu])
    out.scale = np.concatenate([model.scale, scale])
    out.orientation = np.concatenate([model.orientation, np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))])
    out.opacity = np.concatenate([model.opacity, np.ones(n)])
    out.color = np.concatenate([model.color, color])
    out.is_foreground = np.concatenate([model.is_foreground, is_fg])
    out.source_track = np.concatenate([model.source_track, tracks])
    # foreground rows follow splat order, and new splats come last
    out.beta = np.concatenate([model.beta, new_beta])
    return out


def truncate(model: SceneModel, t1: int) -> SceneModel:
    """Keep frames [t1 - 1, T): the shared frame followed by the driving segment."""
    if not 1 <= t1 < model.frame_count:
        raise RestageError(f"t1={t1} outside [1, {model.frame_count})")
    out = model.copy()
    out.bases = MotionBases(model.bases.rotation[:, t1 - 1:].copy(),
                            model.bases.translation[:, t1 - 1:].copy())
    out.t_cano = model.t_cano - (t1 - 1) if model.t_cano >= t1 - 1 else 0
    return out


@dataclass
class RestageResult:
    model: SceneModel          # truncated to the driving segment
    full_model: SceneModel
    bundle: SequenceBundle     # the sequence actually fitted
    report: FitReport
    inserted: int = 0


def run_restage(base: SequenceBundle | None, driving: SequenceBundle, weights: LossWeights,
                config: OptimConfig, ablate=(), frame_mask=None) -> RestageResult:
    """Rewind+concatenate, initialize, backtrace, refine, truncate.

    ``ablate`` may contain ``rigidity`` (no rigidity terms), ``backtracing``
    (no insertion) or ``joint`` (fit the driving video alone).
    """
    ablate = set(ablate)
    unknown = ablate - set(ABLATIONS)
    if unknown:
        raise ValueError(f"unknown ablation(s) {sorted(unknown)}")
    if "rigidity" in ablate:
        weights = replace(weights, lambda_rigid=0.0)
    if "joint" in ablate or base is None:
        bundle = driving
        t1 = None
    else:
        bundle = rewind_concat(base, driving)
        t1 = bundle.t1
    report = FitReport()
    model = optim.init_motion(bundle, weights, config, frame_mask=frame_mask, report=report)
    inserted = 0
    if "backtracing" not in ablate:
        dis = detect_disocclusion(bundle, model.t_cano)
        before = len(model.mu)
        model = insert_disoccluded(model, bundle, dis)
        inserted = len(model.mu) - before
    model = optim.refine(model, bundle, weights, config, frame_mask=frame_mask, report=report)
    final = truncate(model, t1) if t1 is not None else model
    return RestageResult(final, model, bundle, report, inserted)


# -- variance experiment ---------------------------------------------------------

@dataclass
class VarianceReport:
    joint_variance: list
    solo_variance: list
    pairs: list
    seed: int
    floor: float = 1e-12
    extra: dict = field(default_factory=dict)

    @property
    def pair_count(self) -> int:
        return len(self.pairs)

    @property
    def mean_joint(self) -> float:
        return float(np.mean(self.joint_variance))

    @property
    def mean_solo(self) -> float:
        return float(np.mean(self.solo_variance))

    @property
    def ratio(self) -> float:
        if self.mean_solo < self.floor and self.mean_joint < self.floor:
            return 1.0
        return self.mean_joint / max(self.mean_solo, self.floor)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "pair_count": self.pair_count,
                "mean_joint_variance": self.mean_joint, "mean_solo_variance": self.mean_solo,
                "ratio": self.ratio, "pairs": self.pairs,
                "joint_variance": self.joint_variance, "solo_variance": self.solo_variance,
                **self.extra}


def pair_distance_variance(model: SceneModel, pairs, frames) -> np.ndarray:
    X = positions(model, frames)
    a = np.array([p[0] for p in pairs])
    b = np.array([p[1] for p in pairs])
    d = np.linalg.norm(X[:, a] - X[:, b], axis=-1)
    return d.var(axis=0)


def pair_variance_experiment(base: SequenceBundle, driving: SequenceBundle, weights: LossWeights,
                             config: OptimConfig, num_pairs: int = 30, seed: int = 0,
                             epochs: int | None = None) -> VarianceReport:
    """Distance variance over the unsupervised driving segment: joint vs solo training.

    Joint: the rewound concatenation, with tracks used (for seeding and for
    the track loss) only on the base segment. Solo: the driving video alone,
    seeded from its own coarse tracks and then trained with rigidity and
    smoothness only. Both runs use the same seed and epoch budget.
    """
    if weights.lambda_smooth <= 0:
        raise RestageError("the variance experiment requires lambda_smooth > 0")
    if num_pairs < 30:
        raise RestageError("num_pairs must be at least 30")
    epochs = config.epochs_init if epochs is None else epochs
    combined = rewind_concat(base, driving)
    t1 = combined.t1
    supervised = np.arange(combined.num_frames) < t1
    joint = _train_masked(optim.seed_motion(combined, weights, config, frame_mask=supervised),
                          combined, weights, config, epochs, supervised)
    unsupervised = np.zeros(driving.num_frames, dtype=bool)
    solo = _train_masked(optim.seed_motion(driving, weights, config),
                         driving, weights, config, epochs, unsupervised)

    # pairs are drawn by track id so both models are measured on the same points
    shared = np.intersect1d(joint.source_track[joint.fg_index], solo.source_track[solo.fg_index])
    if len(shared) < 2:
        raise RestageError("joint and solo models share fewer than two foreground tracks")
    rng = np.random.default_rng(seed)
    pairs = [sorted(rng.choice(shared, 2, replace=False).tolist()) for _ in range(num_pairs)]
    jv = pair_distance_variance(joint, _splat_pairs(joint, pairs), np.arange(t1 - 1, combined.num_frames))
    sv = pair_distance_variance(solo, _splat_pairs(solo, pairs), np.arange(driving.num_frames))
    return VarianceReport(jv.tolist(), sv.tolist(), [[int(a), int(b)] for a, b in pairs], seed)


def _splat_pairs(model: SceneModel, track_pairs):
    where = {int(t): i for i, t in enumerate(model.source_track) if t >= 0}
    return [(where[a], where[b]) for a, b in track_pairs]


def _train_masked(model, bundle, weights, config, epochs, supervised):
    graph = optim._graph_for(model, weights.knn_k)
    params = optim.get_params(model, optim.INIT_GROUPS)
    state = optim.AdamState()
    any_sup = bool(np.any(supervised))
    for _ in range(epochs):
        graph = optim.refresh_similarity(model, graph)
        if any_sup:
            b = losses.total_loss("init", model, bundle, graph, weights, frame_mask=supervised)
            grads = b.grads
        else:
            grads = _unsupervised_grads(model, graph, weights)
        params, state = optim.step(params, {g: grads[g] for g in optim.INIT_GROUPS}, state, config)
        model = optim.set_params(model, params)
    return model


def _unsupervised_grads(model, graph, weights):
    _, g_rigid = losses.rigidity_init(model, graph)
    _, g_smooth = losses.smoothness(model.bases)
    return {
        "beta": weights.lambda_rigid * g_rigid["beta"],
        "basis_rot": weights.lambda_rigid * g_rigid["basis_rot"] + weights.lambda_smooth * g_smooth["basis_rot"],
        "basis_trans": weights.lambda_rigid * g_rigid["basis_trans"] + weights.lambda_smooth * g_smooth["basis_trans"],
    }


def combined_truth(truth_base, truth_driving) -> np.ndarray:
    """Ground-truth tracks laid out like :func:`rewind_concat` output."""
    return np.concatenate([truth_base[::-1], truth_driving[1:]])


def scorable_tracks(bundle: SequenceBundle, candidates) -> np.ndarray:
    """Candidates observed at least once; tracks never seen cannot be placed by any method."""
    candidates = np.asarray(candidates, dtype=np.int64)
    return candidates[bundle.visibility[:, candidates].any(axis=0)]


def driving_tracking_l1(result: RestageResult, truth_base, truth_driving, candidates) -> float:
    """Tracking error over the driving segment, scored on the full fitted sequence."""
    from .metrics import tracking_l1
    bundle = result.bundle
    if bundle.t1 is None:
        truth = np.asarray(truth_driving)
        frames = None
    else:
        truth = combined_truth(truth_base, truth_driving)
        frames = np.arange(bundle.t1 - 1, bundle.num_frames)
    ids = scorable_tracks(bundle, candidates)
    return tracking_l1(result.full_model, truth, subset=ids, observed=bundle, frames=frames)
