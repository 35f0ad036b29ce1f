"""Compiled per-ray compositing loops (forward and reverse).

Each ray is processed independently in a fixed sample order, so results do
not depend on how rays are batched.
"""
import math

import numba
import numpy as np


@numba.njit(cache=True, inline="always")
def _locate(px, py, pz, bmin, vsize, nx, ny, nz):
    """Cell base index and in-cell fractions; base < 0 means outside the box."""
    gx = (px - bmin[0]) / vsize[0]
    gy = (py - bmin[1]) / vsize[1]
    gz = (pz - bmin[2]) / vsize[2]
    if not (gx >= 0.0 and gy >= 0.0 and gz >= 0.0
            and gx <= nx - 1 and gy <= ny - 1 and gz <= nz - 1):
        return -1, 0.0, 0.0, 0.0
    ix = min(int(math.floor(gx)), nx - 2)
    iy = min(int(math.floor(gy)), ny - 2)
    iz = min(int(math.floor(gz)), nz - 2)
    fx = min(max(gx - ix, 0.0), 1.0)
    fy = min(max(gy - iy, 0.0), 1.0)
    fz = min(max(gz - iz, 0.0), 1.0)
    return (ix * ny + iy) * nz + iz, fx, fy, fz


@numba.njit(cache=True, inline="always")
def _corner(c, base, fx, fy, fz, sx, sy):
    # corner order matches scenefield.interp_stencil
    dx = (c >> 2) & 1
    dy = (c >> 1) & 1
    dz = c & 1
    w = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy) * (fz if dz else 1.0 - fz)
    return base + dx * sx + dy * sy + dz, w


@numba.njit(cache=True, inline="always")
def _softplus(x):
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@numba.njit(cache=True, inline="always")
def _sigmoid(x):
    return 0.5 * (1.0 + math.tanh(0.5 * x))


@numba.njit(cache=True, nogil=True)
def render_forward(packed, res, bmin, vsize, origins, dirs, far, t,
                   out_color, out_depth, out_w, out_tfinal):
    nx, ny, nz = res[0], res[1], res[2]
    sy = nz
    sx = ny * nz
    n_rays, n = t.shape
    for r in range(n_rays):
        trans = 1.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        dep = 0.0
        for k in range(n):
            tk = t[r, k]
            delta = (t[r, k + 1] - tk) if k < n - 1 else far[r] - tk
            px = origins[r, 0] + tk * dirs[r, 0]
            py = origins[r, 1] + tk * dirs[r, 1]
            pz = origins[r, 2] + tk * dirs[r, 2]
            base, fx, fy, fz = _locate(px, py, pz, bmin, vsize, nx, ny, nz)
            if base < 0:
                out_w[r, k] = 0.0
                continue
            a0 = 0.0
            a1 = 0.0
            a2 = 0.0
            a3 = 0.0
            for c in range(8):
                idx, w = _corner(c, base, fx, fy, fz, sx, sy)
                a0 += w * packed[idx, 0]
                a1 += w * packed[idx, 1]
                a2 += w * packed[idx, 2]
                a3 += w * packed[idx, 3]
            tau = _softplus(a0) * delta
            wk = trans * -math.expm1(-tau)
            out_w[r, k] = wk
            c0 += wk * _sigmoid(a1)
            c1 += wk * _sigmoid(a2)
            c2 += wk * _sigmoid(a3)
            dep += wk * tk
            trans *= math.exp(-tau)
        out_color[r, 0] = c0
        out_color[r, 1] = c1
        out_color[r, 2] = c2
        out_depth[r] = dep
        out_tfinal[r] = trans


@numba.njit(cache=True, nogil=True)
def render_backward(packed, res, bmin, vsize, origins, dirs, far, t,
                    d_color, d_depth, d_tfinal, grad):
    """Accumulate into ``grad`` (n_vertices, 4) the gradient of
    sum_r d_color[r].color[r] + d_depth[r] * depth[r] + d_tfinal[r] * T_final[r]."""
    nx, ny, nz = res[0], res[1], res[2]
    sy = nz
    sx = ny * nz
    n_rays, n = t.shape
    raw = np.empty((n, 4))
    base_k = np.empty(n, dtype=np.int64)
    frac = np.empty((n, 3))
    wts = np.empty(n)
    tnext = np.empty(n)
    av = np.empty(n)
    dlt = np.empty(n)
    for r in range(n_rays):
        g0 = d_color[r, 0]
        g1 = d_color[r, 1]
        g2 = d_color[r, 2]
        gd = d_depth[r]
        gt = d_tfinal[r]
        if g0 == 0.0 and g1 == 0.0 and g2 == 0.0 and gd == 0.0 and gt == 0.0:
            continue
        trans = 1.0
        for k in range(n):
            tk = t[r, k]
            delta = (t[r, k + 1] - tk) if k < n - 1 else far[r] - tk
            dlt[k] = delta
            px = origins[r, 0] + tk * dirs[r, 0]
            py = origins[r, 1] + tk * dirs[r, 1]
            pz = origins[r, 2] + tk * dirs[r, 2]
            base, fx, fy, fz = _locate(px, py, pz, bmin, vsize, nx, ny, nz)
            base_k[k] = base
            if base < 0:
                wts[k] = 0.0
                tnext[k] = trans
                av[k] = 0.0
                continue
            frac[k, 0] = fx
            frac[k, 1] = fy
            frac[k, 2] = fz
            a0 = 0.0
            a1 = 0.0
            a2 = 0.0
            a3 = 0.0
            for c in range(8):
                idx, w = _corner(c, base, fx, fy, fz, sx, sy)
                a0 += w * packed[idx, 0]
                a1 += w * packed[idx, 1]
                a2 += w * packed[idx, 2]
                a3 += w * packed[idx, 3]
            raw[k, 0] = a0
            raw[k, 1] = a1
            raw[k, 2] = a2
            raw[k, 3] = a3
            tau = _softplus(a0) * delta
            wts[k] = trans * -math.expm1(-tau)
            trans *= math.exp(-tau)
            tnext[k] = trans
            av[k] = g0 * _sigmoid(a1) + g1 * _sigmoid(a2) + g2 * _sigmoid(a3) + gd * tk
        # sum_{j>k} w_j a_j, where the final transmittance acts as one more
        # sample with weight T_final and value d_tfinal
        tail = trans * gt
        for k in range(n - 1, -1, -1):
            base = base_k[k]
            if base >= 0:
                d_sigma = dlt[k] * (tnext[k] * av[k] - tail)
                d0 = d_sigma * _sigmoid(raw[k, 0])
                s1 = _sigmoid(raw[k, 1])
                s2 = _sigmoid(raw[k, 2])
                s3 = _sigmoid(raw[k, 3])
                wk = wts[k]
                d1 = wk * g0 * s1 * (1.0 - s1)
                d2 = wk * g1 * s2 * (1.0 - s2)
                d3 = wk * g2 * s3 * (1.0 - s3)
                fx = frac[k, 0]
                fy = frac[k, 1]
                fz = frac[k, 2]
                for c in range(8):
                    idx, w = _corner(c, base, fx, fy, fz, sx, sy)
                    grad[idx, 0] += w * d0
                    grad[idx, 1] += w * d1
                    grad[idx, 2] += w * d2
                    grad[idx, 3] += w * d3
            tail += wts[k] * av[k]
