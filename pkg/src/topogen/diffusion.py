"""Denoising diffusion over normalized latent codes.

Linear noise schedule, a residual MLP noise predictor with pre-activation
layer norm, from-scratch training, clean-latent prediction and ancestral
sampling. All forward/backward passes are explicit numpy so the sampler can
also differentiate the noise prediction with respect to its input (needed by
the guided sampler's full-chain gradients).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import checkpoint
from .optim import Adam, clip_global_norm

LN_EPS = 1e-5


class TrainingDiverged(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# noise schedule


@dataclass(frozen=True)
class NoiseSchedule:
    """Diffusion constants; arrays are indexed by t - 1 for t in 1..T."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    beta_start: float
    beta_end: float


DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA_START,
                  beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    if T < 2:
        raise ValueError("T must be >= 2")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T, beta, alpha, alpha_bar, np.sqrt(beta), beta_start, beta_end)


def _check_t(s: NoiseSchedule, t: int) -> int:
    t = int(t)
    if not (1 <= t <= s.T):
        raise ValueError(f"t={t} outside [1, {s.T}]")
    return t


def forward_noise(z0, t: int, eps, s: NoiseSchedule) -> np.ndarray:
    """sqrt(abar_t) z0 + sqrt(1 - abar_t) eps."""
    t = _check_t(s, t)
    ab = s.alpha_bar[t - 1]
    return math.sqrt(ab) * np.asarray(z0) + math.sqrt(1.0 - ab) * np.asarray(eps)


def predict_clean(z_t, t: int, eps_hat, s: NoiseSchedule) -> np.ndarray:
    """Invert the forward step assuming eps_hat is the injected noise."""
    t = _check_t(s, t)
    ab = s.alpha_bar[t - 1]
    return (np.asarray(z_t) - math.sqrt(1.0 - ab) * np.asarray(eps_hat)) / math.sqrt(ab)


def ddpm_step(z_t, t: int, eps_hat, noise, s: NoiseSchedule) -> np.ndarray:
    """Posterior-mean denoising step with additive noise scaled by sigma_t.

    The last step (t = 1) must be noise-free.
    """
    t = _check_t(s, t)
    noise = np.asarray(noise, dtype=np.float64)
    if t == 1 and np.any(noise != 0.0):
        raise ValueError("the t=1 step must use zero noise")
    a = s.alpha[t - 1]
    ab = s.alpha_bar[t - 1]
    coef = (1.0 - a) / math.sqrt(1.0 - ab)
    return (np.asarray(z_t) - coef * np.asarray(eps_hat)) / math.sqrt(a) + s.sigma[t - 1] * noise


# ---------------------------------------------------------------------------
# noise-prediction network


@dataclass(frozen=True)
class DenoiserConfig:
    latent_dim: int
    width: int = 1024
    blocks: int = 4
    dropout: float = 0.1
    time_embed_dim: int = 128

    def __post_init__(self):
        if self.latent_dim < 1 or self.width < 1 or self.blocks < 1:
            raise ValueError("latent_dim, width and blocks must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must be in [0, 1)")
        if self.time_embed_dim < 2 or self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be a positive even number")


@dataclass
class DenoiserWeights:
    config: DenoiserConfig
    emb_w1: np.ndarray  # (E, E)
    emb_b1: np.ndarray
    emb_w2: np.ndarray  # (E, E)
    emb_b2: np.ndarray
    in_w: np.ndarray  # (D + E, W)
    in_b: np.ndarray
    ln1_g: np.ndarray  # (B, W)
    ln1_b: np.ndarray
    w1: np.ndarray  # (B, W, W)
    b1: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    w2: np.ndarray  # (B, W, W)
    b2: np.ndarray
    lnf_g: np.ndarray
    lnf_b: np.ndarray
    out_w: np.ndarray  # (W, D)
    out_b: np.ndarray

    _NAMES = ("emb_w1", "emb_b1", "emb_w2", "emb_b2", "in_w", "in_b",
              "ln1_g", "ln1_b", "w1", "b1", "ln2_g", "ln2_b", "w2", "b2",
              "lnf_g", "lnf_b", "out_w", "out_b")

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, n) for n in self._NAMES]

    def copy(self) -> "DenoiserWeights":
        return DenoiserWeights(self.config, *[a.copy() for a in self.arrays()])


def denoiser_init(cfg: DenoiserConfig, rng: np.random.Generator) -> DenoiserWeights:
    """Kaiming-uniform linear layers, unit layer norms, zero output head."""
    e, wd, nb, d = cfg.time_embed_dim, cfg.width, cfg.blocks, cfg.latent_dim

    def lin(n_in, n_out, *lead):
        bound = math.sqrt(6.0 / n_in)
        return rng.uniform(-bound, bound, size=(*lead, n_in, n_out))

    return DenoiserWeights(
        config=cfg,
        emb_w1=lin(e, e), emb_b1=np.zeros(e),
        emb_w2=lin(e, e), emb_b2=np.zeros(e),
        in_w=lin(d + e, wd), in_b=np.zeros(wd),
        ln1_g=np.ones((nb, wd)), ln1_b=np.zeros((nb, wd)),
        w1=lin(wd, wd, nb), b1=np.zeros((nb, wd)),
        ln2_g=np.ones((nb, wd)), ln2_b=np.zeros((nb, wd)),
        w2=lin(wd, wd, nb), b2=np.zeros((nb, wd)),
        lnf_g=np.ones(wd), lnf_b=np.zeros(wd),
        out_w=np.zeros((wd, d)), out_b=np.zeros(d),
    )


def time_embedding(t, dim: int) -> np.ndarray:
    """Sinusoidal embedding of integer timesteps; t may be scalar or (N,)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / (half - 1))
    ang = t[:, None] * freqs[None, :]
    return np.concatenate((np.sin(ang), np.cos(ang)), axis=1)


def _silu(x):
    s = expit(x)
    return x * s, s


def _silu_grad(x, s):
    return s * (1.0 + x * (1.0 - s))


def _ln_forward(x, g, b):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _ln_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    mean_dxhat = dxhat.mean(axis=1, keepdims=True)
    mean_dxhat_xhat = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat)
    return dx, dg, db


def denoiser_forward(w: DenoiserWeights, z, t, train: bool = False,
                     rng: np.random.Generator | None = None):
    """Predicted noise for a batch; returns (eps_hat (N, D), cache).

    Dropout is applied only when train=True (with the supplied rng); inference
    is deterministic.
    """
    cfg = w.config
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != cfg.latent_dim:
        raise ValueError(f"latent dim {z.shape[1]} != {cfg.latent_dim}")
    t_arr = np.broadcast_to(np.atleast_1d(t), (z.shape[0],))

    e0 = time_embedding(t_arr, cfg.time_embed_dim)
    e1_pre = e0 @ w.emb_w1 + w.emb_b1
    e1, e1_s = _silu(e1_pre)
    emb = e1 @ w.emb_w2 + w.emb_b2
    inp = np.concatenate((z, emb), axis=1)
    h = inp @ w.in_w + w.in_b

    blocks = []
    for i in range(cfg.blocks):
        u1, ln1c = _ln_forward(h, w.ln1_g[i], w.ln1_b[i])
        a1, a1_s = _silu(u1)
        v = a1 @ w.w1[i] + w.b1[i]
        u2, ln2c = _ln_forward(v, w.ln2_g[i], w.ln2_b[i])
        a2, a2_s = _silu(u2)
        if train and cfg.dropout > 0.0:
            mask = (rng.random(a2.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
        else:
            mask = None
        a2d = a2 * mask if mask is not None else a2
        h = h + a2d @ w.w2[i] + w.b2[i]
        blocks.append((u1, ln1c, a1, a1_s, v, u2, ln2c, a2, a2_s, mask, a2d))
    hf, lnfc = _ln_forward(h, w.lnf_g, w.lnf_b)
    out = hf @ w.out_w + w.out_b
    cache = (z, e0, e1_pre, e1, e1_s, inp, blocks, hf, lnfc)
    return out, cache


def denoiser_backward(w: DenoiserWeights, cache, g_out, need_param_grads: bool = True):
    """Backprop d(scalar)/d(eps_hat) to parameters and the latent input.

    Returns (grads or None, g_z) with grads ordered like ``arrays()``.
    """
    cfg = w.config
    z, e0, e1_pre, e1, e1_s, inp, blocks, hf, lnfc = cache
    grads = [np.zeros_like(a) for a in w.arrays()] if need_param_grads else None

    def g(name):
        return grads[DenoiserWeights._NAMES.index(name)]

    if need_param_grads:
        g("out_w")[...] = hf.T @ g_out
        g("out_b")[...] = g_out.sum(axis=0)
    dhf = g_out @ w.out_w.T
    dh, dgam, dbet = _ln_backward(dhf, w.lnf_g, lnfc)
    if need_param_grads:
        g("lnf_g")[...] = dgam
        g("lnf_b")[...] = dbet

    for i in range(cfg.blocks - 1, -1, -1):
        u1, ln1c, a1, a1_s, v, u2, ln2c, a2, a2_s, mask, a2d = blocks[i]
        # h_out = h_in + a2d @ w2 + b2
        da2d = dh @ w.w2[i].T
        if need_param_grads:
            g("w2")[i] = a2d.T @ dh
            g("b2")[i] = dh.sum(axis=0)
        da2 = da2d * mask if mask is not None else da2d
        du2 = da2 * _silu_grad(u2, a2_s)
        dv, dgam2, dbet2 = _ln_backward(du2, w.ln2_g[i], ln2c)
        if need_param_grads:
            g("ln2_g")[i] = dgam2
            g("ln2_b")[i] = dbet2
            g("w1")[i] = a1.T @ dv
            g("b1")[i] = dv.sum(axis=0)
        da1 = dv @ w.w1[i].T
        du1 = da1 * _silu_grad(u1, a1_s)
        dh_ln, dgam1, dbet1 = _ln_backward(du1, w.ln1_g[i], ln1c)
        if need_param_grads:
            g("ln1_g")[i] = dgam1
            g("ln1_b")[i] = dbet1
        dh = dh + dh_ln  # residual connection

    dinp = dh @ w.in_w.T
    if need_param_grads:
        g("in_w")[...] = inp.T @ dh
        g("in_b")[...] = dh.sum(axis=0)
        demb = dinp[:, cfg.latent_dim:]
        g("emb_w2")[...] = e1.T @ demb
        g("emb_b2")[...] = demb.sum(axis=0)
        de1 = demb @ w.emb_w2.T
        de1_pre = de1 * _silu_grad(e1_pre, e1_s)
        g("emb_w1")[...] = e0.T @ de1_pre
        g("emb_b1")[...] = de1_pre.sum(axis=0)
    g_z = dinp[:, :cfg.latent_dim]
    return grads, g_z


def denoiser_apply(w: DenoiserWeights, z_t, t: int) -> np.ndarray:
    """Inference-mode noise prediction for a single latent (D,)."""
    out, _ = denoiser_forward(w, np.asarray(z_t, dtype=np.float64).reshape(1, -1), t)
    return out[0]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class DiffusionTrainConfig:
    iterations: int
    batch_size: int = 256
    lr: float = 1e-4
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


def train_denoiser(latents: np.ndarray, s: NoiseSchedule, cfg: DiffusionTrainConfig,
                   net: DenoiserConfig, on_iteration=None) -> DenoiserWeights:
    """Noise-prediction training on normalized latents.

    Per iteration: uniform minibatch, per-sample t uniform in [1, T], fresh
    Gaussian noise, squared-error loss on the predicted noise.
    """
    latents = np.asarray(latents, dtype=np.float64)
    n, d = latents.shape
    if d != net.latent_dim:
        raise ValueError(f"latent dim {d} != config {net.latent_dim}")
    seq = np.random.SeedSequence(cfg.seed)
    rng_init, rng_train = [np.random.default_rng(sq) for sq in seq.spawn(2)]
    w = denoiser_init(net, rng_init)
    opt = Adam(w.arrays(), lr=cfg.lr)
    sqrt_ab = np.sqrt(s.alpha_bar)
    sqrt_1mab = np.sqrt(1.0 - s.alpha_bar)
    for it in range(cfg.iterations):
        idx = rng_train.integers(0, n, size=cfg.batch_size)
        t_batch = rng_train.integers(1, s.T + 1, size=cfg.batch_size)
        eps = rng_train.standard_normal((cfg.batch_size, d))
        z0 = latents[idx]
        z_t = sqrt_ab[t_batch - 1, None] * z0 + sqrt_1mab[t_batch - 1, None] * eps
        pred, cache = denoiser_forward(w, z_t, t_batch, train=True, rng=rng_train)
        r = pred - eps
        loss = float(np.mean(r * r))
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite diffusion loss at iteration {it}")
        grads, _ = denoiser_backward(w, cache, (2.0 / r.size) * r)
        clip_global_norm(grads, cfg.clip_norm)
        opt.step(grads)
        if on_iteration is not None:
            on_iteration(it, loss)
    return w


# ---------------------------------------------------------------------------
# sampling


def sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def sample_chain(denoise_fn, dim: int, s: NoiseSchedule, rng: np.random.Generator,
                 step_hook=None) -> np.ndarray:
    """Ancestral sampling loop shared by unguided and guided samplers.

    denoise_fn(z, t) supplies the (possibly guidance-adjusted) noise estimate;
    the RNG stream is consumed identically regardless of denoise_fn.
    """
    z = rng.standard_normal(dim)
    for t in range(s.T, 0, -1):
        noise = rng.standard_normal(dim) if t > 1 else np.zeros(dim)
        eps_hat = denoise_fn(z, t)
        z = ddpm_step(z, t, eps_hat, noise, s)
        if step_hook is not None:
            step_hook(t, z)
        if not np.all(np.isfinite(z)):
            raise TrainingDiverged(f"non-finite sample state at step t={t}")
    return z


def sample_unguided(w: DenoiserWeights, s: NoiseSchedule, count: int, seed: int) -> np.ndarray:
    """count independent draws; sample i uses an RNG stream keyed (seed, i)."""
    d = w.config.latent_dim
    out = np.empty((count, d))
    for i in range(count):
        rng = sample_rng(seed, i)
        out[i] = sample_chain(lambda z, t: denoiser_apply(w, z, t), d, s, rng)
    return out


# ---------------------------------------------------------------------------
# checkpoint


def save_denoiser(json_path, w: DenoiserWeights, s: NoiseSchedule, stats) -> None:
    tensors = dict(zip(w._NAMES, w.arrays()))
    tensors["stats_mean"] = stats.mean
    tensors["stats_std"] = stats.std
    meta = {
        "kind": "denoiser",
        "latent_dim": w.config.latent_dim,
        "width": w.config.width,
        "blocks": w.config.blocks,
        "dropout": w.config.dropout,
        "time_embed_dim": w.config.time_embed_dim,
        "schedule": {"T": s.T, "beta_start": s.beta_start, "beta_end": s.beta_end},
    }
    checkpoint.save_tensors(json_path, tensors, meta)


def load_denoiser(json_path):
    """Returns (weights, schedule, stats); the manifest is self-describing."""
    from .latent_fit import LatentStats

    tensors, meta = checkpoint.load_tensors(json_path)
    if meta.get("kind") != "denoiser":
        raise checkpoint.CheckpointError(f"{json_path} is not a denoiser checkpoint")
    cfg = DenoiserConfig(
        latent_dim=int(meta["latent_dim"]),
        width=int(meta["width"]),
        blocks=int(meta["blocks"]),
        dropout=float(meta["dropout"]),
        time_embed_dim=int(meta["time_embed_dim"]),
    )
    w = DenoiserWeights(cfg, *[tensors[n] for n in DenoiserWeights._NAMES])
    sch = meta["schedule"]
    s = make_schedule(int(sch["T"]), float(sch["beta_start"]), float(sch["beta_end"]))
    stats = LatentStats(mean=tensors["stats_mean"], std=tensors["stats_std"])
    return w, s, stats
