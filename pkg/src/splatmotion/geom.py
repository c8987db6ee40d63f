"""Rigid transforms stored as (w, x, y, z) unit quaternion plus translation.

Scalar helpers operate on :class:`Pose`; the ``*_batch`` helpers work on
stacked arrays and are what the fitting code uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

QUAT_TOL = 1e-9
DEGENERATE_NORM = 1e-8
_UNIT_SLACK = 4 * np.finfo(np.float64).eps


class DegenerateBlendError(ValueError):
    """Weighted quaternion sum cancelled out (antipodal inputs)."""


def _normalize_quat(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < DEGENERATE_NORM:
        raise ValueError(f"quaternion {q} cannot be normalized")
    if abs(n - 1.0) <= _UNIT_SLACK:
        # already unit length up to rounding: keep the bits so round trips are exact
        return q.copy()
    return q / n


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _normalize_quat(self.rotation))
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> "Pose":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), t)

    @classmethod
    def from_axis_angle(cls, axis, angle: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        q = np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])
        return cls(q, translation)

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(mat_to_quat(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        out = np.eye(4)
        out[:3, :3] = quat_to_mat(self.rotation)
        out[:3, 3] = self.translation
        return out

    def __repr__(self):
        return f"Pose(q={np.round(self.rotation, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def quat_mul(a, b) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_conj(q) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_mat(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion; broadcasts over leading axes.

    The polynomial form assumes unit norm, callers normalize first.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    out = np.empty(q.shape[:-1] + (3, 3))
    out[..., 0, 0] = 1 - 2 * (y * y + z * z)
    out[..., 0, 1] = 2 * (x * y - w * z)
    out[..., 0, 2] = 2 * (x * z + w * y)
    out[..., 1, 0] = 2 * (x * y + w * z)
    out[..., 1, 1] = 1 - 2 * (x * x + z * z)
    out[..., 1, 2] = 2 * (y * z - w * x)
    out[..., 2, 0] = 2 * (x * z - w * y)
    out[..., 2, 1] = 2 * (y * z + w * x)
    out[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def quat_to_mat_vjp(q, g) -> np.ndarray:
    """Pull a gradient w.r.t. the matrix of :func:`quat_to_mat` back to q.

    ``g`` has shape ``(..., 3, 3)``; the result has shape ``(..., 4)``.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    g00, g01, g02 = g[..., 0, 0], g[..., 0, 1], g[..., 0, 2]
    g10, g11, g12 = g[..., 1, 0], g[..., 1, 1], g[..., 1, 2]
    g20, g21, g22 = g[..., 2, 0], g[..., 2, 1], g[..., 2, 2]
    dw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    dx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12
              + z * g20 + w * g21 - 2 * x * g22)
    dy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12
              - w * g20 + z * g21 - 2 * y * g22)
    dz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11
              + y * g12 + x * g20 + y * g21)
    return np.stack([dw, dx, dy, dz], axis=-1)


def mat_to_quat(m) -> np.ndarray:
    """Shepperd's method; returns the representative with w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


def compose(a: Pose, b: Pose) -> Pose:
    """Transform applying ``b`` first, then ``a``."""
    rot = quat_mul(a.rotation, b.rotation)
    trans = quat_to_mat(a.rotation) @ b.translation + a.translation
    return Pose(rot, trans)


def inverse(p: Pose) -> Pose:
    q_inv = quat_conj(p.rotation)
    return Pose(q_inv, -(quat_to_mat(q_inv) @ p.translation))


def apply(p: Pose, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ quat_to_mat(p.rotation).T + p.translation


def blend_arrays(w, quats, trans):
    """Blend K rotations/translations with convex weights.

    ``w`` is (..., K), ``quats`` (..., K, 4), ``trans`` (..., K, 3). Every
    quaternion is flipped into the hemisphere of the largest-weight one
    (lowest index on ties) before the weighted sum is normalized.
    Returns ``(q, t)``.
    """
    w = np.asarray(w, dtype=np.float64)
    quats = np.asarray(quats, dtype=np.float64)
    ref = np.argmax(w, axis=-1)
    q_ref = np.take_along_axis(quats, ref[..., None, None], axis=-2)
    sign = np.where(np.sum(quats * q_ref, axis=-1) >= 0, 1.0, -1.0)
    summed = np.sum((w * sign)[..., None] * quats, axis=-2)
    norm = np.linalg.norm(summed, axis=-1)
    if np.any(norm < DEGENERATE_NORM):
        raise DegenerateBlendError("blended quaternion vanished (antipodal cancellation)")
    t = np.sum(w[..., None] * np.asarray(trans, dtype=np.float64), axis=-2)
    return summed / norm[..., None], t


def blend(w, poses: Sequence[Pose]) -> Pose:
    w = np.asarray(w, dtype=np.float64)
    if len(poses) != len(w):
        raise ValueError(f"{len(w)} weights for {len(poses)} poses")
    q, t = blend_arrays(w, np.stack([p.rotation for p in poses]),
                        np.stack([p.translation for p in poses]))
    return Pose(q, t)


def smoothstep(delta: float, tau0: float, tau1: float) -> float:
    if not tau0 < tau1:
        raise ValueError(f"smoothstep needs tau0 < tau1, got {tau0}, {tau1}")
    if delta < tau0:
        return 0.0
    if delta >= tau1:
        return 1.0
    # 3u^2 - 2u^3 written around the window centre, so delta at the midpoint
    # gives v = 0 and exactly 0.5 however tau0 and tau1 round
    v = (delta - 0.5 * (tau0 + tau1)) / (0.5 * (tau1 - tau0))
    return 0.5 + v * (0.75 - 0.25 * v * v)


def smoothstep_array(delta, tau0: float, tau1: float) -> np.ndarray:
    if not tau0 < tau1:
        raise ValueError(f"smoothstep needs tau0 < tau1, got {tau0}, {tau1}")
    delta = np.asarray(delta, dtype=np.float64)
    v = np.clip((delta - 0.5 * (tau0 + tau1)) / (0.5 * (tau1 - tau0)), -1.0, 1.0)
    out = 0.5 + v * (0.75 - 0.25 * v * v)
    out[delta < tau0] = 0.0
    out[delta >= tau1] = 1.0
    return out


def kabsch(src, dst, weights=None) -> Pose:
    """Least-squares rigid transform mapping ``src`` points onto ``dst``."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if weights is None:
        weights = np.ones(len(src))
    w = weights / weights.sum()
    cs = w @ src
    cd = w @ dst
    h = (src - cs).T @ ((dst - cd) * w[:, None])
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose(mat_to_quat(r), cd - r @ cs)
