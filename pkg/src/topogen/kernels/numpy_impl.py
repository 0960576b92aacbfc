"""Pure-numpy implementations of the hot kernels.

All kernels take plain float64 ndarrays. Weight matrices arrive pre-transposed
(``*_t`` suffix) so the same layout works for the numba twins, which need
contiguous operands for BLAS dispatch.

Shapes:
    first_t   (2, Dp)      first-layer weights, transposed
    hidden_t  (L, Dp, Dp)  hidden-layer weights, each transposed
    hidden_b  (L, Dp)
    mod       (L, Dp, D)   latent modulation maps
    out_t     (Dp, 2)      output weights, transposed
    out_b     (2,)
    z         (D,)
    pts       (B, 2)
"""

from __future__ import annotations

import numpy as np


def siren_eval(first_t, hidden_t, hidden_b, mod, out_t, out_b, omega0, z, pts):
    """Batched forward pass; returns (B, 2) field values."""
    x = np.sin(omega0 * (pts @ first_t))
    for l in range(hidden_t.shape[0]):
        x = np.sin(x @ hidden_t[l] + (hidden_b[l] + mod[l] @ z))
    return x @ out_t + out_b


def siren_eval_jac(first_t, hidden_t, hidden_b, mod, out_t, out_b, omega0, z, pts):
    """Forward pass with exact spatial tangents; returns ((B, 2), (B, 2, 2)).

    jac[b, o, c] is the derivative of output component o with respect to
    input coordinate c at point b, propagated through the sine layers.
    """
    a0 = omega0 * (pts @ first_t)
    x = np.sin(a0)
    c0 = np.cos(a0)
    tx = c0 * (omega0 * first_t[0])
    ty = c0 * (omega0 * first_t[1])
    for l in range(hidden_t.shape[0]):
        h = x @ hidden_t[l] + (hidden_b[l] + mod[l] @ z)
        sx = tx @ hidden_t[l]
        sy = ty @ hidden_t[l]
        c = np.cos(h)
        x = np.sin(h)
        tx = c * sx
        ty = c * sy
    out = x @ out_t + out_b
    jx = tx @ out_t
    jy = ty @ out_t
    jac = np.stack((jx, jy), axis=2)
    return out, jac


def siren_grad_z(first_t, hidden_t, hidden_b, mod, out_t, out_b, omega0, z, pts, targets):
    """MSE against targets plus its gradient with respect to the latent code.

    Returns (mse, gz) where mse averages over all 2B scalars.
    """
    L = hidden_t.shape[0]
    x = np.sin(omega0 * (pts @ first_t))
    xs = [x]
    cs = []
    for l in range(L):
        h = x @ hidden_t[l] + (hidden_b[l] + mod[l] @ z)
        c = np.cos(h)
        x = np.sin(h)
        cs.append(c)
        xs.append(x)
    out = x @ out_t + out_b
    r = out - targets
    mse = float(np.mean(r * r))
    gx = ((2.0 / r.size) * r) @ out_t.T
    gz = np.zeros(z.shape[0])
    for l in range(L - 1, -1, -1):
        d = gx * cs[l]
        gz += d.sum(axis=0) @ mod[l]
        if l > 0:
            gx = d @ hidden_t[l].T
    return mse, gz


def fourier_eval(omegas, amps, phases, anchor_mats, anchor_pts, pts):
    """Band-limited synthetic field: per-component sine series plus affine anchors.

    omegas (2, K, 2), amps (2, K), phases (2, K); anchor_mats (A, 2, 2) with
    zeros at anchor_pts (A, 2). Returns (B, 2).
    """
    out = np.zeros((pts.shape[0], 2))
    if amps.shape[1] > 0:
        for c in range(2):
            out[:, c] = np.sin(pts @ omegas[c].T + phases[c]) @ amps[c]
    for a in range(anchor_mats.shape[0]):
        out += (pts - anchor_pts[a]) @ anchor_mats[a].T
    return out


def fourier_jac(omegas, amps, phases, anchor_mats, pts):
    """Exact Jacobian of the synthetic field at each point; returns (B, 2, 2)."""
    jac = np.zeros((pts.shape[0], 2, 2))
    if amps.shape[1] > 0:
        for c in range(2):
            coef = np.cos(pts @ omegas[c].T + phases[c]) * amps[c]
            jac[:, c, :] = coef @ omegas[c]
    if anchor_mats.shape[0] > 0:
        jac += anchor_mats.sum(axis=0)
    return jac


def scan_cells(u, v):
    """Per-component mixed-sign test over all (H-1, W-1) cells.

    A cell qualifies iff its four corner u-values are not all of one strict
    sign and likewise for v (an exact zero counts as both signs).
    """

    def mixed(comp):
        pos = comp > 0.0
        neg = comp < 0.0
        allpos = pos[:-1, :-1] & pos[:-1, 1:] & pos[1:, :-1] & pos[1:, 1:]
        allneg = neg[:-1, :-1] & neg[:-1, 1:] & neg[1:, :-1] & neg[1:, 1:]
        return ~(allpos | allneg)

    return mixed(u) & mixed(v)
