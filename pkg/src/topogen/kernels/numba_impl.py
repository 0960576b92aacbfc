"""Numba @njit twins of the numpy kernels.

Same signatures and semantics as numpy_impl; see that module for shape docs.
fastmath stays off so results track the numpy path closely.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def siren_eval(first_t, hidden_t, hidden_b, mod, out_t, out_b, omega0, z, pts):
    x = np.sin(omega0 * np.dot(pts, first_t))
    for l in range(hidden_t.shape[0]):
        shift = hidden_b[l] + np.dot(mod[l], z)
        h = np.dot(x, hidden_t[l])
        x = np.sin(h + shift)
    return np.dot(x, out_t) + out_b


@njit(cache=True)
def siren_eval_jac(first_t, hidden_t, hidden_b, mod, out_t, out_b, omega0, z, pts):
    a0 = omega0 * np.dot(pts, first_t)
    x = np.sin(a0)
    c0 = np.cos(a0)
    tx = c0 * (omega0 * first_t[0])
    ty = c0 * (omega0 * first_t[1])
    for l in range(hidden_t.shape[0]):
        shift = hidden_b[l] + np.dot(mod[l], z)
        h = np.dot(x, hidden_t[l]) + shift
        sx = np.dot(tx, hidden_t[l])
        sy = np.dot(ty, hidden_t[l])
        c = np.cos(h)
        x = np.sin(h)
        tx = c * sx
        ty = c * sy
    out = np.dot(x, out_t) + out_b
    jx = np.dot(tx, out_t)
    jy = np.dot(ty, out_t)
    jac = np.empty((pts.shape[0], 2, 2))
    for b in range(pts.shape[0]):
        jac[b, 0, 0] = jx[b, 0]
        jac[b, 1, 0] = jx[b, 1]
        jac[b, 0, 1] = jy[b, 0]
        jac[b, 1, 1] = jy[b, 1]
    return out, jac


@njit(cache=True)
def siren_grad_z(first_t, hidden_t, hidden_b, mod, out_t, out_b, omega0, z, pts, targets):
    L = hidden_t.shape[0]
    B = pts.shape[0]
    Dp = first_t.shape[1]
    x = np.sin(omega0 * np.dot(pts, first_t))
    xs = np.empty((L + 1, B, Dp))
    cs = np.empty((L, B, Dp))
    xs[0] = x
    for l in range(L):
        shift = hidden_b[l] + np.dot(mod[l], z)
        h = np.dot(xs[l], hidden_t[l]) + shift
        cs[l] = np.cos(h)
        xs[l + 1] = np.sin(h)
    out = np.dot(xs[L], out_t) + out_b
    r = out - targets
    mse = np.mean(r * r)
    gx = np.dot((2.0 / r.size) * r, out_t.T)
    gz = np.zeros(z.shape[0])
    for l in range(L - 1, -1, -1):
        d = gx * cs[l]
        dsum = np.zeros(Dp)
        for b in range(B):
            dsum += d[b]
        gz += np.dot(dsum, mod[l])
        if l > 0:
            gx = np.dot(d, np.ascontiguousarray(hidden_t[l].T))
    return mse, gz


@njit(cache=True)
def fourier_eval(omegas, amps, phases, anchor_mats, anchor_pts, pts):
    B = pts.shape[0]
    K = amps.shape[1]
    out = np.zeros((B, 2))
    for b in range(B):
        px = pts[b, 0]
        py = pts[b, 1]
        for c in range(2):
            acc = 0.0
            for k in range(K):
                acc += amps[c, k] * np.sin(omegas[c, k, 0] * px + omegas[c, k, 1] * py + phases[c, k])
            out[b, c] = acc
        for a in range(anchor_mats.shape[0]):
            dx = px - anchor_pts[a, 0]
            dy = py - anchor_pts[a, 1]
            out[b, 0] += anchor_mats[a, 0, 0] * dx + anchor_mats[a, 0, 1] * dy
            out[b, 1] += anchor_mats[a, 1, 0] * dx + anchor_mats[a, 1, 1] * dy
    return out


@njit(cache=True)
def fourier_jac(omegas, amps, phases, anchor_mats, pts):
    B = pts.shape[0]
    K = amps.shape[1]
    jac = np.zeros((B, 2, 2))
    for b in range(B):
        px = pts[b, 0]
        py = pts[b, 1]
        for c in range(2):
            jx = 0.0
            jy = 0.0
            for k in range(K):
                coef = amps[c, k] * np.cos(omegas[c, k, 0] * px + omegas[c, k, 1] * py + phases[c, k])
                jx += coef * omegas[c, k, 0]
                jy += coef * omegas[c, k, 1]
            jac[b, c, 0] = jx
            jac[b, c, 1] = jy
        for a in range(anchor_mats.shape[0]):
            jac[b, 0, 0] += anchor_mats[a, 0, 0]
            jac[b, 0, 1] += anchor_mats[a, 0, 1]
            jac[b, 1, 0] += anchor_mats[a, 1, 0]
            jac[b, 1, 1] += anchor_mats[a, 1, 1]
    return jac


@njit(cache=True)
def scan_cells(u, v):
    H, W = u.shape
    mask = np.empty((H - 1, W - 1), dtype=np.bool_)
    for r in range(H - 1):
        for c in range(W - 1):
            upos = 0
            uneg = 0
            vpos = 0
            vneg = 0
            for dr in range(2):
                for dc in range(2):
                    uu = u[r + dr, c + dc]
                    vv = v[r + dr, c + dc]
                    if uu > 0.0:
                        upos += 1
                    elif uu < 0.0:
                        uneg += 1
                    if vv > 0.0:
                        vpos += 1
                    elif vv < 0.0:
                        vneg += 1
            mask[r, c] = (upos < 4) and (uneg < 4) and (vpos < 4) and (vneg < 4)
    return mask
