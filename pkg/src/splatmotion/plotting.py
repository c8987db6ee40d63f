"""PNG figures for CLI reports.

Everything renders through the non-interactive Agg canvas, so no display is
needed, and PNG metadata is stripped so identical inputs give identical files.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .io import atomic_write_bytes  # noqa: E402

_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.4,
    "savefig.dpi": 110,
}
_STAGE_COLORS = {"init": "tab:blue", "refine": "tab:orange"}
_LOSS_KEYS = ("total", "track", "rigidity", "smoothness")


def _save(fig, path) -> Path:
    import io as _io

    buf = _io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def fit_history(history: list, path, title: str = "training losses") -> Path:
    """Loss terms per epoch on a log axis, one line style per stage."""
    with plt.rc_context(_STYLE):
        keys = [k for k in _LOSS_KEYS if history and k in history[0]]
        fig, axes = plt.subplots(1, max(len(keys), 1), figsize=(3.0 * max(len(keys), 1), 2.6),
                                 squeeze=False, layout="constrained")
        x = np.arange(len(history))
        stages = [h.get("stage", "") for h in history]
        for ax, key in zip(axes[0], keys):
            vals = np.array([h[key] for h in history], dtype=np.float64)
            for stage in dict.fromkeys(stages):
                sel = np.array([s == stage for s in stages])
                ax.plot(x[sel], np.maximum(vals[sel], 1e-16), label=stage,
                        color=_STAGE_COLORS.get(stage, "tab:gray"))
            ax.set_yscale("log")
            ax.set_title(key)
            ax.set_xlabel("epoch")
        if keys:
            axes[0][0].legend(frameon=False)
        fig.suptitle(title)
        return _save(fig, path)


def metrics_panel(report: dict, path, title: str = "driving segment") -> Path:
    """Foreground volume per frame and, when available, per-frame tracking error."""
    per_frame = report.get("per_frame_l1") or []
    with plt.rc_context(_STYLE):
        ncols = 2 if per_frame else 1
        fig, axes = plt.subplots(1, ncols, figsize=(3.6 * ncols, 2.8), squeeze=False, layout="constrained")
        ax = axes[0][0]
        vols = np.asarray(report.get("volumes", []), dtype=np.float64)
        ax.plot(np.arange(len(vols)), vols, marker="o", ms=3, color="tab:green")
        ax.set_xlabel("frame")
        ax.set_ylabel("voxel volume")
        ax.set_title(f"volume (C_v = {report.get('volume_consistency', float('nan')):.3g})")
        if per_frame:
            ax = axes[0][1]
            pf = np.array([np.nan if v is None else v for v in per_frame], dtype=np.float64)
            ax.plot(np.arange(len(pf)), pf, marker="o", ms=3, color="tab:red")
            ax.set_xlabel("frame")
            ax.set_ylabel("mean L1 error")
            ax.set_title(f"tracking (mean {report.get('tracking_l1', float('nan')):.3g})")
        fig.suptitle(title)
        return _save(fig, path)


def variance_comparison(rows: list, path) -> Path:
    """Joint against solo pair-distance variance, one point per seed.

    Points below the diagonal are seeds where joint training gave the
    steadier distances.
    """
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 3.2), layout="constrained")
        joint = np.array([r["mean_joint"] for r in rows], dtype=np.float64)
        solo = np.array([r["mean_solo"] for r in rows], dtype=np.float64)
        both = np.concatenate([joint, solo])
        positive = both[both > 0]
        lo = 0.5 * positive.min() if len(positive) else 1e-14
        hi = max(both.max(initial=0.0), 2 * lo)
        ax.plot([lo, hi], [lo, hi], color="0.6", lw=0.8, ls="--")
        ax.scatter(np.maximum(solo, lo), np.maximum(joint, lo), s=18, color="tab:purple")
        for r, xs, ys in zip(rows, solo, joint):
            ax.annotate(str(r.get("seed", "")), (max(xs, lo), max(ys, lo)), fontsize=7,
                        xytext=(2, 2), textcoords="offset points")
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("solo variance")
        ax.set_ylabel("joint variance")
        ax.set_title("pair-distance variance")
        return _save(fig, path)
