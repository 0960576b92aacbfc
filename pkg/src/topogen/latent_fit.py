"""Meta-learning of shared field-network weights and per-field latent fitting.

The training scheme: an inner loop takes a few plain gradient-descent steps on
a zero-initialized latent code per field, and the outer loop updates only the
network weights, backpropagating through the inner trajectory (a first-order
approximation is available behind a config flag).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import field_model as fm
from . import kernels
from .optim import Adam, clip_global_norm

STD_FLOOR = 1e-8


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class MetaConfig:
    outer_iterations: int
    fields_per_batch: int
    points_per_field: int
    inner_steps: int = 3
    inner_lr: float = 1e-2
    outer_lr: float = 1e-4  # desk-scale default for the small network
    seed: int = 0
    first_order: bool = False
    clip_norm: float = 1.0

    def __post_init__(self):
        if min(self.outer_iterations, self.fields_per_batch, self.points_per_field) < 1:
            raise ValueError("iteration, batch and point counts must be positive")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.inner_lr <= 0 or self.outer_lr <= 0:
            raise ValueError("learning rates must be positive")


@dataclass(frozen=True)
class LatentStats:
    mean: np.ndarray
    std: np.ndarray


def inner_fit(w: fm.SirenWeights, pts, targets, steps: int, lr: float,
              keep_caches: bool = False):
    """Gradient descent on the latent from zero; optionally keep per-step caches."""
    z = np.zeros(w.config.latent_dim)
    caches = [] if keep_caches else None
    for _ in range(steps):
        if keep_caches:
            _, gz, cache = fm.mse_and_grad_z(w, z, pts, targets)
            caches.append(cache)
        else:
            _, gz = kernels.siren_grad_z(*w._kernel_args(), z, pts, targets)
        z = z - lr * gz
    return z, caches


def meta_train(dataset, cfg: MetaConfig, scfg: fm.SirenConfig, on_iteration=None) -> fm.SirenWeights:
    """Train shared weights so a few latent gradient steps fit each field.

    dataset is a sequence of VectorFieldGrid sharing one resolution. Raises
    TrainingDiverged when the loss stops being finite.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    width, height = dataset[0].width, dataset[0].height
    for g in dataset:
        if (g.width, g.height) != (width, height):
            raise ValueError("all fields must share one resolution")
    pts_all = fm.grid_points(width, height)
    targets_all = [g.values.reshape(-1, 2) for g in dataset]

    seq = np.random.SeedSequence(cfg.seed)
    rng_init, rng_train = [np.random.default_rng(s) for s in seq.spawn(2)]
    w = fm.init_weights(scfg, rng_init)
    opt = Adam(w.arrays(), lr=cfg.outer_lr)
    n_fields = len(dataset)
    n_pts = pts_all.shape[0]
    pick_pts = min(cfg.points_per_field, n_pts)

    for it in range(cfg.outer_iterations):
        field_idx = rng_train.choice(n_fields, size=min(cfg.fields_per_batch, n_fields),
                                     replace=n_fields < cfg.fields_per_batch)
        totals = fm.zero_like_grads(w)
        loss_sum = 0.0
        for fi in field_idx:
            sel = rng_train.choice(n_pts, size=pick_pts, replace=False)
            pts = pts_all[sel]
            targets = targets_all[fi][sel]
            z, caches = inner_fit(w, pts, targets, cfg.inner_steps, cfg.inner_lr,
                                  keep_caches=not cfg.first_order)
            outer_mse, grads, gz = fm.mse_param_grads(w, z, pts, targets)
            if not cfg.first_order:
                a = gz
                for cache in reversed(caches):
                    wg, hvp = fm.mse_double_backward(w, cache, a)
                    for total, g in zip(grads, wg):
                        total -= cfg.inner_lr * g
                    a = a - cfg.inner_lr * hvp
            for total, g in zip(totals, grads):
                total += g / len(field_idx)
            loss_sum += outer_mse
        loss = loss_sum / len(field_idx)
        if not math.isfinite(loss):
            raise TrainingDiverged(f"non-finite meta loss {loss} at iteration {it}")
        clip_global_norm(totals, cfg.clip_norm)
        opt.step(totals)
        if on_iteration is not None:
            on_iteration(it, loss)
    return w


def fit_latent(w: fm.SirenWeights, field: fm.VectorFieldGrid, steps: int, lr: float,
               points_per_step: int | None = None, seed: int = 0) -> np.ndarray:
    """Fit a latent code to a gridded field by gradient descent from zero.

    Each step may subsample grid cell centers (without replacement). The
    returned code never reconstructs worse than z = 0 on the full grid; if
    descent ended up worse, the zero code is returned instead.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    pts_all = fm.grid_points(field.width, field.height)
    targets_all = field.values.reshape(-1, 2)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5f17]))
    n_pts = pts_all.shape[0]
    pick = n_pts if points_per_step is None else min(points_per_step, n_pts)

    z = np.zeros(w.config.latent_dim)
    for _ in range(steps):
        if pick < n_pts:
            sel = rng.choice(n_pts, size=pick, replace=False)
            pts, targets = pts_all[sel], targets_all[sel]
        else:
            pts, targets = pts_all, targets_all
        mse, gz = kernels.siren_grad_z(*w._kernel_args(), z, pts, targets)
        if not math.isfinite(mse):
            raise TrainingDiverged("non-finite loss during latent fitting")
        z = z - lr * gz

    def full_mse(code):
        out = fm.evaluate_batch(w, code, pts_all)
        return float(np.mean((out - targets_all) ** 2))

    zero = np.zeros(w.config.latent_dim)
    if full_mse(z) > full_mse(zero):
        return zero
    return z


def grid_mse(a: fm.VectorFieldGrid, b: fm.VectorFieldGrid) -> float:
    if a.values.shape != b.values.shape:
        raise ValueError("grids must share shape")
    return float(np.mean((a.values - b.values) ** 2))


def psnr(a: fm.VectorFieldGrid, b: fm.VectorFieldGrid, data_range: float) -> float:
    """Peak signal-to-noise ratio in dB over all 2*W*H scalars; +inf when equal."""
    if data_range <= 0:
        raise ValueError("data_range must be positive")
    mse = grid_mse(a, b)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def reconstruction_psnr(w: fm.SirenWeights, z, field: fm.VectorFieldGrid, data_range: float) -> float:
    recon = fm.evaluate_grid(w, z, field.width, field.height)
    return psnr(recon, field, data_range)


def data_range_of(fields) -> float:
    """Global max minus min over all scalar components of a field collection."""
    lo = min(float(f.values.min()) for f in fields)
    hi = max(float(f.values.max()) for f in fields)
    return hi - lo


def latent_stats(latents) -> LatentStats:
    """Elementwise mean and population standard deviation, floored at 1e-8."""
    arr = np.asarray(latents, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("need at least 2 latent codes")
    mean = arr.mean(axis=0)
    std = np.maximum(arr.std(axis=0), STD_FLOOR)
    return LatentStats(mean=mean, std=std)


def normalize(z, stats: LatentStats) -> np.ndarray:
    return (np.asarray(z, dtype=np.float64) - stats.mean) / stats.std


def denormalize(z, stats: LatentStats) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * stats.std + stats.mean


def save_latents(json_path, latents: np.ndarray, stats: LatentStats, source_ids: list[str]) -> None:
    """Latent store: JSON manifest + raw float32 little-endian N x D blob."""
    json_path = Path(json_path)
    bin_path = json_path.with_suffix(".bin")
    arr = np.ascontiguousarray(latents, dtype="<f4")
    manifest = {
        "format_version": 1,
        "count": int(arr.shape[0]),
        "dim": int(arr.shape[1]),
        "blob": bin_path.name,
        "stats": {"mean": stats.mean.tolist(), "std": stats.std.tolist()},
        "source_ids": list(source_ids),
    }
    json_path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    bin_path.write_bytes(arr.tobytes())


def load_latents(json_path) -> tuple[np.ndarray, LatentStats, list[str]]:
    json_path = Path(json_path)
    manifest = json.loads(json_path.read_text())
    if manifest.get("format_version") != 1:
        raise ValueError(f"unsupported latent store version in {json_path}")
    count, dim = manifest["count"], manifest["dim"]
    blob = (json_path.parent / manifest["blob"]).read_bytes()
    expected = 4 * count * dim
    if len(blob) != expected:
        raise ValueError(f"latent blob has {len(blob)} bytes, expected {expected}")
    latents = np.frombuffer(blob, dtype="<f4").reshape(count, dim).astype(np.float64)
    stats = LatentStats(
        mean=np.asarray(manifest["stats"]["mean"], dtype=np.float64),
        std=np.asarray(manifest["stats"]["std"], dtype=np.float64),
    )
    return latents, stats, list(manifest["source_ids"])
