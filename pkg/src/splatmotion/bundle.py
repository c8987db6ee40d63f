"""Observed data: pinhole cameras and 3D point tracks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geom import Pose, quat_to_mat


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    pose: Pose = field(default_factory=Pose.identity)  # world -> camera
    width: int = 128
    height: int = 128

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must be at least 1x1")

    def to_camera(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return x @ quat_to_mat(self.pose.rotation).T + self.pose.translation

    def project(self, x):
        """Return pixel coordinates (u, v) and camera-space depth for world points."""
        xc = self.to_camera(x)
        z = xc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * xc[..., 0] / z + self.cx
            v = self.fy * xc[..., 1] / z + self.cy
        return u, v, z

    def to_dict(self) -> dict:
        return {
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": int(self.width), "height": int(self.height),
            "rotation": [float(v) for v in self.pose.rotation],
            "translation": [float(v) for v in self.pose.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"],
                   Pose(d["rotation"], d["translation"]), int(d["width"]), int(d["height"]))


@dataclass
class SequenceBundle:
    """Per-frame cameras plus N tracked 3D points over T frames.

    ``tracks`` is (T, N, 3) float32 and ``visibility`` (T, N) bool, so a
    frame's slice is contiguous. ``labels`` marks foreground tracks. A
    combined sequence keeps the base video's labels and stores the driving
    video's own labels in ``driving_labels`` so the split can restore them.
    """

    cameras: list
    tracks: np.ndarray
    visibility: np.ndarray
    labels: np.ndarray
    colors: np.ndarray | None = None
    t1: int | None = None
    provenance: list | None = None
    driving_labels: np.ndarray | None = None

    def __post_init__(self):
        self.tracks = np.ascontiguousarray(self.tracks, dtype=np.float32)
        self.visibility = np.ascontiguousarray(self.visibility, dtype=bool)
        self.labels = np.ascontiguousarray(self.labels, dtype=bool)
        if self.colors is not None:
            self.colors = np.ascontiguousarray(self.colors, dtype=np.float32)
        if self.driving_labels is not None:
            self.driving_labels = np.ascontiguousarray(self.driving_labels, dtype=bool)
        T, N = self.visibility.shape
        if self.tracks.shape != (T, N, 3):
            raise ValueError(f"tracks shape {self.tracks.shape} != {(T, N, 3)}")
        if self.labels.shape != (N,):
            raise ValueError(f"labels shape {self.labels.shape} != {(N,)}")
        if self.driving_labels is not None and self.driving_labels.shape != (N,):
            raise ValueError(f"driving_labels shape {self.driving_labels.shape} != {(N,)}")
        if len(self.cameras) != T:
            raise ValueError(f"{len(self.cameras)} cameras for {T} frames")
        if self.colors is not None and self.colors.shape != (N, 3):
            raise ValueError(f"colors shape {self.colors.shape} != {(N, 3)}")
        if not np.all(np.isfinite(self.tracks)):
            raise ValueError("tracks contain non-finite values")

    @property
    def num_frames(self) -> int:
        return self.visibility.shape[0]

    @property
    def num_tracks(self) -> int:
        return self.visibility.shape[1]

    def frames(self, start: int, stop: int) -> "SequenceBundle":
        return SequenceBundle(
            self.cameras[start:stop], self.tracks[start:stop].copy(),
            self.visibility[start:stop].copy(), self.labels.copy(),
            None if self.colors is None else self.colors.copy())

    def equals(self, other: "SequenceBundle") -> bool:
        same_colors = (self.colors is None) == (other.colors is None) and (
            self.colors is None or np.array_equal(self.colors, other.colors))
        return (self.num_frames == other.num_frames
                and [c.to_dict() for c in self.cameras] == [c.to_dict() for c in other.cameras]
                and np.array_equal(self.tracks, other.tracks)
                and np.array_equal(self.visibility, other.visibility)
                and np.array_equal(self.labels, other.labels)
                and same_colors
                and (self.driving_labels is None) == (other.driving_labels is None)
                and (self.driving_labels is None
                     or np.array_equal(self.driving_labels, other.driving_labels)))
