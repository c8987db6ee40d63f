"""Command-line entry point: ``splatmotion <command> [options]``.

Every command accepts ``--config`` (a preset name or a JSON file), ``--seed``
and ``--out``. The fully resolved configuration is written to
``<out>/resolved-config.json``; passing that file back as ``--config``
reproduces the run. Failures print one line ``error: <kind>: <message>`` on
stderr and exit with status 1, or status 2 for configuration problems.
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import io, metrics, optim, plotting, restage, synth
from .scene import build_knn_graph

log = logging.getLogger("splatmotion")


class CommandError(RuntimeError):
    """A command could not produce its result (reported with exit status 1)."""


# -- helpers ------------------------------------------------------------------

def _prepare(args) -> tuple:
    cfg = config_mod.load(args.config).with_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.atomic_write_bytes(out / "resolved-config.json", cfg.to_json().encode("utf-8"))
    return cfg, out


def _object_tracks(truth) -> np.ndarray:
    return np.flatnonzero(np.asarray(truth.labels) >= 0)


def _metric_kwargs(cfg) -> dict:
    m = cfg.data["metrics"]
    return {"voxel_fraction": m["voxel_fraction"], "gamma": m["gamma"], "floor": m["floor"],
            "sample": m["edge_sample"], "seed": cfg.seed}


def _synth_pair(cfg):
    return synth.gen_pair(cfg.scene_spec(), cfg.driving_motion(), artifacts=cfg.artifacts(),
                          driving_frames=cfg.data["scene"]["driving_frames"])


# -- commands -----------------------------------------------------------------

def cmd_synth(args) -> dict:
    cfg, out = _prepare(args)
    base, driving, (gt_base, gt_driving) = _synth_pair(cfg)
    io.write_bundle(base, out / "base")
    io.write_bundle(driving, out / "driving")
    io.write_truth(gt_base, out / "truth_base")
    io.write_truth(gt_driving, out / "truth_driving")
    combined = restage.rewind_concat(base, driving)
    report = {
        "command": "synth",
        "seed": cfg.seed,
        "tracks": base.num_tracks,
        "base_frames": base.num_frames,
        "driving_frames": driving.num_frames,
        "foreground_tracks": int(base.labels.sum()),
        "corrupted_tracks": int(gt_driving.corrupted.sum()),
        "artifacts": gt_driving.artifacts,
        "visible_per_frame": combined.visibility.sum(axis=1).tolist(),
    }
    io.write_json(out / "synth-report.json", report)
    return report


def cmd_fit(args) -> dict:
    cfg, out = _prepare(args)
    bundle = io.read_bundle(args.bundle)
    weights, ocfg = cfg.weights(), cfg.optim()
    fit = optim.FitReport()
    model = optim.init_motion(bundle, weights, ocfg, report=fit)
    model = optim.refine(model, bundle, weights, ocfg, report=fit)
    io.write_model(model, out / "model")
    final_track = fit.final["refine"]["track"]
    threshold = cfg.data["metrics"]["track_loss_threshold"]
    report = {"command": "fit", "seed": cfg.seed, "splats": len(model.mu), "t_cano": model.t_cano,
              "fit": fit.to_dict(), "final_track_loss": final_track,
              "track_loss_threshold": threshold, "track_loss_ok": bool(final_track < threshold)}
    io.write_json(out / "fit-report.json", report)
    plotting.fit_history(fit.history, out / "fit-history.png")
    return report


def _load_truths(args):
    if not args.truth_base and not args.truth_driving:
        return None, None
    if not (args.truth_base and args.truth_driving):
        raise CommandError("--truth-base and --truth-driving must be given together")
    return io.read_truth(args.truth_base), io.read_truth(args.truth_driving)


def cmd_restage(args) -> dict:
    cfg, out = _prepare(args)
    base = io.read_bundle(args.base)
    driving = io.read_bundle(args.driving)
    truth_base, truth_driving = _load_truths(args)
    ablate = sorted(set(args.ablate or ()))
    weights, ocfg = cfg.weights(), cfg.optim()
    result = restage.run_restage(base, driving, weights, ocfg, ablate=ablate)
    io.write_model(result.model, out / "model")

    graph = build_knn_graph(result.model, weights.knn_k)
    mkw = _metric_kwargs(cfg)
    summary = metrics.evaluate(result.model, graph, voxel_fraction=mkw["voxel_fraction"],
                               sample=mkw["sample"], seed=mkw["seed"], gamma=mkw["gamma"],
                               floor=mkw["floor"]).to_dict()
    if truth_base is not None:
        ids = _object_tracks(truth_driving)
        summary["tracking_l1"] = restage.driving_tracking_l1(result, truth_base.tracks,
                                                             truth_driving.tracks, ids)
        corrupted = np.flatnonzero(truth_driving.corrupted)
        if len(corrupted):
            summary["corrupted_tracking_l1"] = restage.driving_tracking_l1(
                result, truth_base.tracks, truth_driving.tracks, corrupted)
        summary["per_frame_l1"] = _per_frame_driving_l1(result, truth_base, truth_driving, ids)

    report = {"command": "restage", "seed": cfg.seed, "ablate": ablate,
              "t1": result.bundle.t1, "t_cano": result.full_model.t_cano,
              "inserted": result.inserted, "splats": len(result.model.mu),
              "fit": result.report.to_dict(), "metrics": summary}
    io.write_json(out / "restage-report.json", report)
    plotting.fit_history(result.report.history, out / "fit-history.png")
    plotting.metrics_panel(summary, out / "metrics.png")
    return report


def _per_frame_driving_l1(result, truth_base, truth_driving, ids) -> list:
    bundle = result.bundle
    if bundle.t1 is None:
        truth, frames = truth_driving.tracks, None
    else:
        truth = restage.combined_truth(truth_base.tracks, truth_driving.tracks)
        frames = np.arange(bundle.t1 - 1, bundle.num_frames)
    ids = restage.scorable_tracks(bundle, ids)
    _, per_frame = metrics.tracking_l1(result.full_model, truth, subset=ids, observed=bundle,
                                       per_frame=True, frames=frames)
    return per_frame


def cmd_eval(args) -> dict:
    cfg, out = _prepare(args)
    model = io.read_model(args.model)
    bundle = io.read_bundle(args.bundle) if args.bundle else None
    truth = io.read_truth(args.truth) if args.truth else None
    if truth is not None and bundle is None:
        raise CommandError("--truth needs --bundle (the observations the model was fitted to)")
    if bundle is not None and bundle.num_frames != model.frame_count:
        raise CommandError(f"bundle has {bundle.num_frames} frames, model has {model.frame_count}")
    graph = build_knn_graph(model, cfg.weights().knn_k)
    mkw = _metric_kwargs(cfg)
    subset = None if truth is None else _object_tracks(truth)
    if subset is not None:
        subset = subset[bundle.visibility[:, subset].any(axis=0)]
    rep = metrics.evaluate(model, graph, truth_tracks=None if truth is None else truth.tracks,
                           subset=subset, observed=bundle, voxel_fraction=mkw["voxel_fraction"],
                           sample=mkw["sample"], seed=mkw["seed"], gamma=mkw["gamma"],
                           floor=mkw["floor"])
    report = {"command": "eval", "seed": cfg.seed, "metrics": rep.to_dict()}
    io.write_json(out / "eval-report.json", report)
    plotting.metrics_panel(rep.to_dict(), out / "metrics.png")
    return report


def cmd_gradcheck(args) -> dict:
    cfg, out = _prepare(args)
    g = cfg.data["gradcheck"]
    rows = []
    worst = 0.0
    for i in range(g["instances"]):
        model, bundle, graph, zeta, weights = optim.random_instance(cfg.seed + i)
        errs = optim.gradient_check(model, bundle, graph, weights, eps=g["eps"], zeta=zeta)
        inst_worst = max(v for term in errs.values() for v in term.values())
        worst = max(worst, inst_worst)
        rows.append({"instance": cfg.seed + i, "worst": inst_worst, "errors": errs})
    passed = worst <= g["tolerance"]
    report = {"command": "gradcheck", "seed": cfg.seed, "tolerance": g["tolerance"],
              "worst_relative_error": worst, "passed": passed, "instances": rows}
    io.write_json(out / "gradcheck-report.json", report)
    if not passed:
        raise CommandError(f"worst relative gradient error {worst:.3g} exceeds {g['tolerance']:g}")
    return report


def _variance_one(task) -> dict:
    """One seed of the variance experiment; module-level so worker processes can run it."""
    data, seed, base_dir, driving_dir = task
    cfg = config_mod.from_dict(data).with_seed(seed)
    if base_dir is None:
        base, driving, _ = _synth_pair(cfg)
    else:
        base, driving = io.read_bundle(base_dir), io.read_bundle(driving_dir)
    var = cfg.data["variance"]
    weights, ocfg = cfg.weights(), cfg.optim()
    rep = restage.pair_variance_experiment(base, driving, weights, ocfg, num_pairs=var["num_pairs"],
                                           seed=seed, epochs=var["epochs"])
    row = {"seed": seed, "mean_joint": rep.mean_joint, "mean_solo": rep.mean_solo,
           "ratio": rep.ratio, "joint_lower": rep.mean_joint < rep.mean_solo,
           "detail": rep.to_dict()}
    factor = var["smooth_factor"]
    if factor > 0:
        stiff = replace(weights, lambda_smooth=weights.lambda_smooth * factor)
        rep_s = restage.pair_variance_experiment(base, driving, stiff, ocfg, num_pairs=var["num_pairs"],
                                                 seed=seed, epochs=var["epochs"])
        row["mean_joint_stiffer"] = rep_s.mean_joint
        row["stiffer_not_higher"] = rep_s.mean_joint <= rep.mean_joint
    return row


def cmd_variance(args) -> dict:
    cfg, out = _prepare(args)
    if bool(args.base) != bool(args.driving):
        raise CommandError("--base and --driving must be given together")
    var = cfg.data["variance"]
    seeds = [cfg.seed + i for i in range(var["seeds"])]
    tasks = [(cfg.data, s, args.base, args.driving) for s in seeds]
    workers = max(1, int(args.workers))
    if workers == 1:
        rows = [_variance_one(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_variance_one, tasks))   # map keeps seed order
    wins = sum(r["joint_lower"] for r in rows)
    report = {"command": "variance", "seed": cfg.seed, "seeds": seeds, "epochs": var["epochs"],
              "joint_lower_count": wins, "runs": rows}
    if var["smooth_factor"] > 0:
        report["smooth_factor"] = var["smooth_factor"]
        report["stiffer_never_higher"] = all(r["stiffer_not_higher"] for r in rows)
    io.write_json(out / "variance-report.json", report)
    plotting.variance_comparison(rows, out / "variance.png")
    return report


# -- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatmotion", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default="default",
                        help=f"preset ({', '.join(config_mod.PRESETS)}) or JSON file")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--out", required=True, help="output directory")
        return sp

    common(sub.add_parser("synth", help="generate a base/driving pair with ground truth"))
    sp = common(sub.add_parser("fit", help="fit the motion model to one bundle"))
    sp.add_argument("--bundle", required=True)
    sp = common(sub.add_parser("restage", help="joint fit of a base and a driving video"))
    sp.add_argument("--base", required=True)
    sp.add_argument("--driving", required=True)
    sp.add_argument("--truth-base")
    sp.add_argument("--truth-driving")
    sp.add_argument("--ablate", action="append", choices=restage.ABLATIONS,
                    help="disable a component (repeatable)")
    sp = common(sub.add_parser("eval", help="metrics for a fitted model"))
    sp.add_argument("--model", required=True)
    sp.add_argument("--bundle")
    sp.add_argument("--truth")
    common(sub.add_parser("gradcheck", help="analytic vs finite-difference gradients"))
    sp = common(sub.add_parser("variance", help="joint vs solo distance-variance experiment"))
    sp.add_argument("--base")
    sp.add_argument("--driving")
    sp.add_argument("--workers", type=int, default=1)
    return p


COMMANDS = {"synth": cmd_synth, "fit": cmd_fit, "restage": cmd_restage, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "variance": cmd_variance}


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or type(exc).__name__


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except config_mod.ConfigError as exc:
        print(f"error: config: {_one_line(exc)}", file=sys.stderr)
        return 2
    except (CommandError, io.FormatError, restage.RestageError, optim.FitError,
            metrics.MetricsError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {_one_line(exc)}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
