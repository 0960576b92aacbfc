"""Latent-modulated sinusoidal coordinate network over [-1, 1]^2.

The network maps (position, latent code) to a 2D vector:

    x0     = sin(omega0 * W_first p)
    x_l    = sin(W_l x_{l-1} + b_l + M_l z)        l = 1..L
    output = W_out x_L + b_out

Weights are held multiply-ready (transposed) so the hot kernels can run both
as BLAS calls and inside numba. All spatial and latent derivatives are exact
chain-rule propagations through the sine layers; finite differences appear
only in tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, kernels
from .diffmath import Jacobian2


@dataclass(frozen=True)
class SirenConfig:
    hidden_width: int
    hidden_layers: int
    latent_dim: int
    omega0: float = 30.0
    input_dim: int = 2
    output_dim: int = 2

    def __post_init__(self):
        if self.hidden_width < 1 or self.hidden_layers < 1 or self.latent_dim < 1:
            raise ValueError("hidden_width, hidden_layers and latent_dim must be >= 1")
        if self.omega0 <= 0:
            raise ValueError("omega0 must be positive")
        if self.input_dim != 2 or self.output_dim != 2:
            raise ValueError("only 2D-in / 2D-out fields are supported")


@dataclass
class SirenWeights:
    """Parameter arrays in multiply-ready orientation.

    first_t  (2, Dp)      hidden_t (L, Dp, Dp)   hidden_b (L, Dp)
    mod      (L, Dp, D)   out_t    (Dp, 2)       out_b    (2,)
    """

    config: SirenConfig
    first_t: np.ndarray
    hidden_t: np.ndarray
    hidden_b: np.ndarray
    mod: np.ndarray
    out_t: np.ndarray
    out_b: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.first_t, self.hidden_t, self.hidden_b, self.mod, self.out_t, self.out_b]

    def copy(self) -> "SirenWeights":
        return SirenWeights(self.config, *[a.copy() for a in self.arrays()])

    def _kernel_args(self):
        return (self.first_t, self.hidden_t, self.hidden_b, self.mod, self.out_t, self.out_b,
                self.config.omega0)


@dataclass
class VectorFieldGrid:
    """H x W samples of (u, v) at cell centers of a regular grid over [-1, 1]^2.

    Cell (r, c) is centered at x = -1 + (2c+1)/W, y = -1 + (2r+1)/H.
    """

    width: int
    height: int
    values: np.ndarray  # (H, W, 2)

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError("grids must be at least 2x2")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.height, self.width, 2):
            raise ValueError(
                f"values shape {self.values.shape} does not match {(self.height, self.width, 2)}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid values must be finite")

    def xs(self) -> np.ndarray:
        return -1.0 + (2.0 * np.arange(self.width) + 1.0) / self.width

    def ys(self) -> np.ndarray:
        return -1.0 + (2.0 * np.arange(self.height) + 1.0) / self.height


def grid_points(width: int, height: int) -> np.ndarray:
    """Cell-center coordinates as an (H*W, 2) row-major array."""
    xs = -1.0 + (2.0 * np.arange(width) + 1.0) / width
    ys = -1.0 + (2.0 * np.arange(height) + 1.0) / height
    gx, gy = np.meshgrid(xs, ys)
    return np.stack((gx.reshape(-1), gy.reshape(-1)), axis=1)


def init_weights(cfg: SirenConfig, rng: np.random.Generator) -> SirenWeights:
    """Sine-network initialization: first layer U(-1/2, 1/2) before the omega0
    scaling, hidden and output layers U(+-sqrt(6/width)), modulation maps zero
    so that z = 0 reproduces the unmodulated network."""
    dp, L, d = cfg.hidden_width, cfg.hidden_layers, cfg.latent_dim
    first = rng.uniform(-0.5, 0.5, size=(dp, 2))
    bound = np.sqrt(6.0 / dp)
    hidden = rng.uniform(-bound, bound, size=(L, dp, dp))
    out = rng.uniform(-bound, bound, size=(2, dp))
    return SirenWeights(
        config=cfg,
        first_t=np.ascontiguousarray(first.T),
        hidden_t=np.ascontiguousarray(hidden.transpose(0, 2, 1)),
        hidden_b=np.zeros((L, dp)),
        mod=np.zeros((L, dp, d)),
        out_t=np.ascontiguousarray(out.T),
        out_b=np.zeros(2),
    )


def zero_like_grads(w: SirenWeights) -> list[np.ndarray]:
    return [np.zeros_like(a) for a in w.arrays()]


def _check_inputs(w: SirenWeights, z, pts):
    z = np.ascontiguousarray(z, dtype=np.float64)
    if z.shape != (w.config.latent_dim,):
        raise ValueError(f"latent shape {z.shape} != ({w.config.latent_dim},)")
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"points must be (B, 2), got {pts.shape}")
    return z, pts


def evaluate_batch(w: SirenWeights, z, pts) -> np.ndarray:
    z, pts = _check_inputs(w, z, pts)
    return kernels.siren_eval(*w._kernel_args(), z, pts)


def evaluate(w: SirenWeights, z, p) -> tuple[float, float]:
    out = evaluate_batch(w, z, np.asarray(p, dtype=np.float64).reshape(1, 2))
    return float(out[0, 0]), float(out[0, 1])


def evaluate_grid(w: SirenWeights, z, width: int, height: int) -> VectorFieldGrid:
    values = evaluate_batch(w, z, grid_points(width, height))
    return VectorFieldGrid(width, height, values.reshape(height, width, 2))


def jacobian_batch(w: SirenWeights, z, pts) -> tuple[np.ndarray, np.ndarray]:
    """Field values and exact spatial Jacobians, (B, 2) and (B, 2, 2)."""
    z, pts = _check_inputs(w, z, pts)
    return kernels.siren_eval_jac(*w._kernel_args(), z, pts)


def spatial_jacobian(w: SirenWeights, z, p) -> Jacobian2:
    _, jac = jacobian_batch(w, z, np.asarray(p, dtype=np.float64).reshape(1, 2))
    return Jacobian2.from_array(jac[0])


def value_and_jacobian(w: SirenWeights, z, p) -> tuple[np.ndarray, np.ndarray]:
    out, jac = jacobian_batch(w, z, np.asarray(p, dtype=np.float64).reshape(1, 2))
    return out[0], jac[0]


def pullback_to_latent(w: SirenWeights, z, p, head_gradients) -> np.ndarray:
    """Exact gradient with respect to z of any scalar objective of the outputs.

    head_gradients is (d_value, d_jacobian): the objective's derivative with
    respect to the field value (2,) and/or spatial Jacobian (2, 2) at p; pass
    None for an unused head. The reverse pass runs through the modulation
    terms and through the Jacobian entries' dependence on z.
    """
    g_val, g_jac = head_gradients
    z = np.ascontiguousarray(z, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64).reshape(2)
    cfg = w.config
    omega0 = cfg.omega0
    L = cfg.hidden_layers

    # forward with spatial tangents, caching per layer
    a0 = omega0 * (p @ w.first_t)
    x = np.sin(a0)
    c_first = np.cos(a0)
    tx = c_first * (omega0 * w.first_t[0])
    ty = c_first * (omega0 * w.first_t[1])
    cache = []
    for l in range(L):
        h = x @ w.hidden_t[l] + w.hidden_b[l] + w.mod[l] @ z
        sx = tx @ w.hidden_t[l]
        sy = ty @ w.hidden_t[l]
        c = np.cos(h)
        x_new = np.sin(h)
        cache.append((x, c, x_new, sx, sy))
        x = x_new
        tx = c * sx
        ty = c * sy

    gz = np.zeros(cfg.latent_dim)
    xbar = w.out_t @ np.asarray(g_val, dtype=np.float64) if g_val is not None else np.zeros(cfg.hidden_width)
    if g_jac is not None:
        g_jac = np.asarray(g_jac, dtype=np.float64)
        txbar = w.out_t @ g_jac[:, 0]
        tybar = w.out_t @ g_jac[:, 1]
    else:
        txbar = np.zeros(cfg.hidden_width)
        tybar = np.zeros(cfg.hidden_width)

    for l in range(L - 1, -1, -1):
        x_prev, c, x_out, sx, sy = cache[l]
        sxbar = c * txbar
        sybar = c * tybar
        cbar = txbar * sx + tybar * sy
        txbar = w.hidden_t[l] @ sxbar
        tybar = w.hidden_t[l] @ sybar
        hbar = xbar * c - cbar * x_out
        xbar = w.hidden_t[l] @ hbar
        gz += w.mod[l].T @ hbar
    return gz


@dataclass
class SirenCache:
    """Forward-pass intermediates for a point batch, kept for backprop."""

    pts: np.ndarray
    a0_cos: np.ndarray
    xs: list  # [x0, sin(H_1), ..., sin(H_L)]
    cs: list  # [cos(H_1), ..., cos(H_L)]
    out: np.ndarray


def forward_cached(w: SirenWeights, z, pts) -> tuple[np.ndarray, SirenCache]:
    z, pts = _check_inputs(w, z, pts)
    a0 = w.config.omega0 * (pts @ w.first_t)
    x = np.sin(a0)
    xs = [x]
    cs = []
    for l in range(w.config.hidden_layers):
        h = x @ w.hidden_t[l] + (w.hidden_b[l] + w.mod[l] @ z)
        cs.append(np.cos(h))
        x = np.sin(h)
        xs.append(x)
    out = x @ w.out_t + w.out_b
    return out, SirenCache(pts, np.cos(a0), xs, cs, out)


def backward_full(w: SirenWeights, z, cache: SirenCache, g_out):
    """Gradients of a scalar wrt all parameters and z, given d(scalar)/d(out)."""
    L = w.config.hidden_layers
    grads = zero_like_grads(w)
    g_first_t, g_hidden_t, g_hidden_b, g_mod, g_out_t, g_out_b = grads
    g_out_t += cache.xs[L].T @ g_out
    g_out_b += g_out.sum(axis=0)
    gx = g_out @ w.out_t.T
    gz = np.zeros(w.config.latent_dim)
    for l in range(L - 1, -1, -1):
        d = gx * cache.cs[l]
        g_hidden_t[l] += cache.xs[l].T @ d
        dsum = d.sum(axis=0)
        g_hidden_b[l] += dsum
        g_mod[l] += np.outer(dsum, z)
        gz += dsum @ w.mod[l]
        gx = d @ w.hidden_t[l].T
    a0bar = gx * cache.a0_cos
    g_first_t += w.config.omega0 * (cache.pts.T @ a0bar)
    return grads, gz


@dataclass
class MseCache:
    """Inner-step cache: forward intermediates plus the backward-pass nodes
    needed to differentiate the latent gradient itself."""

    z: np.ndarray
    fwd: SirenCache
    gU: np.ndarray
    G: list
    D: list


def mse_and_grad_z(w: SirenWeights, z, pts, targets) -> tuple[float, np.ndarray, MseCache]:
    """Mean squared error against targets, its z-gradient, and a reusable cache."""
    targets = np.asarray(targets, dtype=np.float64)
    out, fwd = forward_cached(w, z, pts)
    r = out - targets
    mse = float(np.mean(r * r))
    gU = (2.0 / r.size) * r
    L = w.config.hidden_layers
    G = [None] * L
    D = [None] * L
    G[L - 1] = gU @ w.out_t.T
    gz = np.zeros(w.config.latent_dim)
    for l in range(L - 1, -1, -1):
        D[l] = G[l] * fwd.cs[l]
        gz += D[l].sum(axis=0) @ w.mod[l]
        if l > 0:
            G[l - 1] = D[l] @ w.hidden_t[l].T
    cache = MseCache(np.array(z, dtype=np.float64, copy=True), fwd, gU, G, D)
    return mse, gz, cache


def mse_param_grads(w: SirenWeights, z, pts, targets):
    """MSE, full parameter gradients and z-gradient in one pass."""
    targets = np.asarray(targets, dtype=np.float64)
    out, fwd = forward_cached(w, z, pts)
    r = out - targets
    mse = float(np.mean(r * r))
    grads, gz = backward_full(w, z, fwd, (2.0 / r.size) * r)
    return mse, grads, gz


def mse_double_backward(w: SirenWeights, cache: MseCache, a):
    """Differentiate s = a . grad_z(mse) through the cached forward+backward.

    Returns (d(s)/d(params), d(s)/d(z)); the latter is the Hessian-vector
    product of the MSE with respect to z applied to a. This is the second-order
    piece of backpropagating through latent gradient-descent steps.
    """
    a = np.asarray(a, dtype=np.float64)
    L = w.config.hidden_layers
    fwd = cache.fwd
    B = fwd.pts.shape[0]
    grads = zero_like_grads(w)
    g_first_t, g_hidden_t, g_hidden_b, g_mod, g_out_t, g_out_b = grads

    m = [w.mod[l] @ a for l in range(L)]
    dbar = np.broadcast_to(m[0], (B, m[0].shape[0])).copy()
    cbar = [None] * L
    gUbar = None
    for l in range(L):
        g_mod[l] += np.outer(cache.D[l].sum(axis=0), a)
        gbar_l = dbar * fwd.cs[l]
        cbar[l] = dbar * cache.G[l]
        if l < L - 1:
            dbar = np.broadcast_to(m[l + 1], (B, m[l + 1].shape[0])) + gbar_l @ w.hidden_t[l + 1]
            g_hidden_t[l + 1] += gbar_l.T @ cache.D[l + 1]
        else:
            gUbar = gbar_l @ w.out_t
            g_out_t += gbar_l.T @ cache.gU

    outbar = (2.0 / cache.gU.size) * gUbar
    xfbar = outbar @ w.out_t.T
    g_out_t += fwd.xs[L].T @ outbar
    g_out_b += outbar.sum(axis=0)
    hvp = np.zeros_like(a)
    for l in range(L - 1, -1, -1):
        hbar = xfbar * fwd.cs[l] - cbar[l] * fwd.xs[l + 1]
        g_hidden_t[l] += fwd.xs[l].T @ hbar
        hsum = hbar.sum(axis=0)
        g_hidden_b[l] += hsum
        g_mod[l] += np.outer(hsum, cache.z)
        hvp += hsum @ w.mod[l]
        xfbar = hbar @ w.hidden_t[l].T
    a0bar = xfbar * fwd.a0_cos
    g_first_t += w.config.omega0 * (fwd.pts.T @ a0bar)
    return grads, hvp


def save_weights(json_path, w: SirenWeights) -> None:
    tensors = {
        "w_first": w.first_t.T,
        "w_hidden": w.hidden_t.transpose(0, 2, 1),
        "b_hidden": w.hidden_b,
        "m_latent": w.mod,
        "w_out": w.out_t.T,
        "b_out": w.out_b,
    }
    meta = {
        "kind": "field_network",
        "hidden_width": w.config.hidden_width,
        "hidden_layers": w.config.hidden_layers,
        "latent_dim": w.config.latent_dim,
        "omega0": w.config.omega0,
    }
    checkpoint.save_tensors(json_path, tensors, meta)


def load_weights(json_path) -> SirenWeights:
    tensors, meta = checkpoint.load_tensors(json_path)
    if meta.get("kind") != "field_network":
        raise checkpoint.CheckpointError(f"{json_path} is not a field network checkpoint")
    cfg = SirenConfig(
        hidden_width=int(meta["hidden_width"]),
        hidden_layers=int(meta["hidden_layers"]),
        latent_dim=int(meta["latent_dim"]),
        omega0=float(meta["omega0"]),
    )
    return SirenWeights(
        config=cfg,
        first_t=np.ascontiguousarray(tensors["w_first"].T),
        hidden_t=np.ascontiguousarray(tensors["w_hidden"].transpose(0, 2, 1)),
        hidden_b=np.ascontiguousarray(tensors["b_hidden"]),
        mod=np.ascontiguousarray(tensors["m_latent"]),
        out_t=np.ascontiguousarray(tensors["w_out"].T),
        out_b=np.ascontiguousarray(tensors["b_out"]),
    )
