"""Compiled inner loops for deformation, rigidity and per-frame invisibility.

All loops run serially in a fixed order so results do not depend on thread
count. Array arguments are float64 and C-contiguous.
"""

from __future__ import annotations

import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _rotmat(w, x, y, z, R):
    R[0, 0] = 1 - 2 * (y * y + z * z)
    R[0, 1] = 2 * (x * y - w * z)
    R[0, 2] = 2 * (x * z + w * y)
    R[1, 0] = 2 * (x * y + w * z)
    R[1, 1] = 1 - 2 * (x * x + z * z)
    R[1, 2] = 2 * (y * z - w * x)
    R[2, 0] = 2 * (x * z - w * y)
    R[2, 1] = 2 * (y * z + w * x)
    R[2, 2] = 1 - 2 * (x * x + y * y)


@numba.njit(cache=True)
def blend_forward(w, ref, rot, trans, mu):
    """Blend basis poses per splat and frame and move each canonical point.

    w (N, K) blend weights, ref (N,) reference basis for sign alignment,
    rot (T, K, 4), trans (T, K, 3), mu (N, 3). Returns X (T, N, 3), the
    normalized blended quaternions (T, N, 4) and their pre-normalization
    norms (T, N).
    """
    T, K = rot.shape[0], rot.shape[1]
    N = mu.shape[0]
    X = np.empty((T, N, 3))
    qhat = np.empty((T, N, 4))
    qnorm = np.empty((T, N))
    R = np.empty((3, 3))
    for t in range(T):
        for i in range(N):
            r = ref[i]
            q0 = q1 = q2 = q3 = 0.0
            p0 = p1 = p2 = 0.0
            for k in range(K):
                d = (rot[t, r, 0] * rot[t, k, 0] + rot[t, r, 1] * rot[t, k, 1]
                     + rot[t, r, 2] * rot[t, k, 2] + rot[t, r, 3] * rot[t, k, 3])
                s = w[i, k] if d >= 0 else -w[i, k]
                q0 += s * rot[t, k, 0]
                q1 += s * rot[t, k, 1]
                q2 += s * rot[t, k, 2]
                q3 += s * rot[t, k, 3]
                p0 += w[i, k] * trans[t, k, 0]
                p1 += w[i, k] * trans[t, k, 1]
                p2 += w[i, k] * trans[t, k, 2]
            n = np.sqrt(q0 * q0 + q1 * q1 + q2 * q2 + q3 * q3)
            qnorm[t, i] = n
            if n > 0:
                q0 /= n
                q1 /= n
                q2 /= n
                q3 /= n
            qhat[t, i, 0] = q0
            qhat[t, i, 1] = q1
            qhat[t, i, 2] = q2
            qhat[t, i, 3] = q3
            _rotmat(q0, q1, q2, q3, R)
            for a in range(3):
                X[t, i, a] = R[a, 0] * mu[i, 0] + R[a, 1] * mu[i, 1] + R[a, 2] * mu[i, 2]
            X[t, i, 0] += p0
            X[t, i, 1] += p1
            X[t, i, 2] += p2
    return X, qhat, qnorm


@numba.njit(cache=True)
def blend_backward(w, ref, rot, trans, mu, qhat, qnorm, gX):
    """Reverse pass of :func:`blend_forward` given dL/dX.

    Returns dL/dw (N, K), dL/drot (T, K, 4), dL/dtrans (T, K, 3), dL/dmu (N, 3).
    """
    T, K = rot.shape[0], rot.shape[1]
    N = mu.shape[0]
    g_w = np.zeros((N, K))
    g_rot = np.zeros((T, K, 4))
    g_trans = np.zeros((T, K, 3))
    g_mu = np.zeros((N, 3))
    R = np.empty((3, 3))
    G = np.empty((3, 3))
    for t in range(T):
        for i in range(N):
            g0, g1, g2 = gX[t, i, 0], gX[t, i, 1], gX[t, i, 2]
            if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                continue
            w_, x, y, z = qhat[t, i, 0], qhat[t, i, 1], qhat[t, i, 2], qhat[t, i, 3]
            _rotmat(w_, x, y, z, R)
            for a in range(3):
                g_mu[i, a] += R[0, a] * g0 + R[1, a] * g1 + R[2, a] * g2
            gv = (g0, g1, g2)
            for a in range(3):
                for b in range(3):
                    G[a, b] = gv[a] * mu[i, b]
            dw = 2 * (-z * G[0, 1] + y * G[0, 2] + z * G[1, 0] - x * G[1, 2] - y * G[2, 0] + x * G[2, 1])
            dx = 2 * (y * G[0, 1] + z * G[0, 2] + y * G[1, 0] - 2 * x * G[1, 1] - w_ * G[1, 2]
                      + z * G[2, 0] + w_ * G[2, 1] - 2 * x * G[2, 2])
            dy = 2 * (-2 * y * G[0, 0] + x * G[0, 1] + w_ * G[0, 2] + x * G[1, 0] + z * G[1, 2]
                      - w_ * G[2, 0] + z * G[2, 1] - 2 * y * G[2, 2])
            dz = 2 * (-2 * z * G[0, 0] - w_ * G[0, 1] + x * G[0, 2] + w_ * G[1, 0] - 2 * z * G[1, 1]
                      + y * G[1, 2] + x * G[2, 0] + y * G[2, 1])
            proj = w_ * dw + x * dx + y * dy + z * dz
            n = qnorm[t, i]
            gq0 = (dw - w_ * proj) / n
            gq1 = (dx - x * proj) / n
            gq2 = (dy - y * proj) / n
            gq3 = (dz - z * proj) / n
            r = ref[i]
            for k in range(K):
                d = (rot[t, r, 0] * rot[t, k, 0] + rot[t, r, 1] * rot[t, k, 1]
                     + rot[t, r, 2] * rot[t, k, 2] + rot[t, r, 3] * rot[t, k, 3])
                s = 1.0 if d >= 0 else -1.0
                wk = w[i, k]
                g_rot[t, k, 0] += wk * s * gq0
                g_rot[t, k, 1] += wk * s * gq1
                g_rot[t, k, 2] += wk * s * gq2
                g_rot[t, k, 3] += wk * s * gq3
                g_trans[t, k, 0] += wk * g0
                g_trans[t, k, 1] += wk * g1
                g_trans[t, k, 2] += wk * g2
                g_w[i, k] += (s * (gq0 * rot[t, k, 0] + gq1 * rot[t, k, 1] + gq2 * rot[t, k, 2]
                                   + gq3 * rot[t, k, 3])
                              + g0 * trans[t, k, 0] + g1 * trans[t, k, 1] + g2 * trans[t, k, 2])
    return g_w, g_rot, g_trans, g_mu


@numba.njit(cache=True)
def rigidity(X, src, dst, rest, coef, deadzone):
    """Sum of coef[t, e] * |dist(X[t, src], X[t, dst]) - rest[e]| and its gradient in X."""
    T = X.shape[0]
    E = src.shape[0]
    gX = np.zeros(X.shape)
    value = 0.0
    for t in range(T):
        for e in range(E):
            i, j = src[e], dst[e]
            d0 = X[t, i, 0] - X[t, j, 0]
            d1 = X[t, i, 1] - X[t, j, 1]
            d2 = X[t, i, 2] - X[t, j, 2]
            d = np.sqrt(d0 * d0 + d1 * d1 + d2 * d2)
            dev = d - rest[e]
            c = coef[t, e]
            value += c * abs(dev)
            if abs(dev) <= deadzone or d <= 0 or c == 0:
                continue
            s = c / d if dev > 0 else -c / d
            gX[t, i, 0] += s * d0
            gX[t, i, 1] += s * d1
            gX[t, i, 2] += s * d2
            gX[t, j, 0] -= s * d0
            gX[t, j, 1] -= s * d1
            gX[t, j, 2] -= s * d2
    return value, gX


@numba.njit(cache=True)
def composite(u, v, z, r, a, width, height):
    """Front-to-back alpha compositing of screen-space disks (inputs sorted by depth)."""
    depth = np.zeros((height, width))
    trans = np.ones((height, width))
    for s in range(len(z)):
        cu = int(np.floor(u[s]))
        cv = int(np.floor(v[s]))
        x0 = max(int(np.floor(u[s] - r[s])), 0)
        x1 = min(int(np.floor(u[s] + r[s])), width - 1)
        y0 = max(int(np.floor(v[s] - r[s])), 0)
        y1 = min(int(np.floor(v[s] + r[s])), height - 1)
        r2 = r[s] * r[s]
        for y in range(y0, y1 + 1):
            for x in range(x0, x1 + 1):
                du = x + 0.5 - u[s]
                dv = y + 0.5 - v[s]
                if du * du + dv * dv <= r2 or (x == cu and y == cv):
                    depth[y, x] += z[s] * a[s] * trans[y, x]
                    trans[y, x] *= 1.0 - a[s]
    return depth, trans


@numba.njit(cache=True)
def smoothstep(x, tau0, tau1):
    if x < tau0:
        return 0.0
    if x >= tau1:
        return 1.0
    v = (x - 0.5 * (tau0 + tau1)) / (0.5 * (tau1 - tau0))
    return 0.5 + v * (0.75 - 0.25 * v * v)


@numba.njit(cache=True)
def frame_invisibility(pts, R, tvec, fx, fy, cx, cy, width, height, mean_scale, opacity,
                       fg, tau0, tau1, near, rmin, rmax, alpha_empty):
    """Rasterize one frame's splats and score every foreground splat against the depth buffer."""
    N = pts.shape[0]
    u = np.empty(N)
    v = np.empty(N)
    z = np.empty(N)
    for i in range(N):
        xc0 = R[0, 0] * pts[i, 0] + R[0, 1] * pts[i, 1] + R[0, 2] * pts[i, 2] + tvec[0]
        xc1 = R[1, 0] * pts[i, 0] + R[1, 1] * pts[i, 1] + R[1, 2] * pts[i, 2] + tvec[1]
        xc2 = R[2, 0] * pts[i, 0] + R[2, 1] * pts[i, 1] + R[2, 2] * pts[i, 2] + tvec[2]
        z[i] = xc2
        if xc2 > near:
            u[i] = fx * xc0 / xc2 + cx
            v[i] = fy * xc1 / xc2 + cy
        else:
            u[i] = np.nan
            v[i] = np.nan
    keep = np.flatnonzero(z > near)
    order = keep[np.argsort(z[keep], kind="mergesort")]
    M = order.shape[0]
    su = np.empty(M)
    sv = np.empty(M)
    sz = np.empty(M)
    sr = np.empty(M)
    sa = np.empty(M)
    for m in range(M):
        i = order[m]
        su[m] = u[i]
        sv[m] = v[i]
        sz[m] = z[i]
        sr[m] = min(max(mean_scale[i] * fx / z[i], rmin), rmax)
        sa[m] = opacity[i]
    depth, trans = composite(su, sv, sz, sr, sa, width, height)
    zeta = np.zeros(fg.shape[0])
    for f in range(fg.shape[0]):
        i = fg[f]
        if not z[i] > near:
            continue
        px = np.floor(u[i])
        py = np.floor(v[i])
        if px < 0 or px >= width or py < 0 or py >= height:
            continue
        yi, xi = int(py), int(px)
        if 1.0 - trans[yi, xi] < alpha_empty:
            continue
        zeta[f] = smoothstep(z[i] - depth[yi, xi], tau0, tau1)
    return zeta
