"""Benchmark the numba kernels against the pure-numpy fallbacks.

Usage: python benchmarks/bench_kernels.py [--repeats N]

Times every kernel on representative workloads for both backends and prints
a table with the speedup. The numba kernels pay a one-off compilation cost
on first call (excluded via warmup).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from topogen import dataset as ds
from topogen import field_model as fm
from topogen.kernels import resolve_backend


def make_siren_args():
    rng = np.random.default_rng(0)
    cfg = fm.SirenConfig(hidden_width=128, hidden_layers=3, latent_dim=64, omega0=30.0)
    w = fm.init_weights(cfg, rng)
    w.mod[:] = rng.normal(size=w.mod.shape) * 0.1
    z = rng.normal(size=64)
    pts = rng.uniform(-1, 1, size=(4096, 2))
    targets = rng.normal(size=(4096, 2))
    return w._kernel_args(), z, pts, targets


def make_fourier_args():
    cfg = ds.SynthConfig(n_fields=1, resolution=64, seed=3)
    params, _ = ds.synth_field(cfg, 0)
    pts = fm.grid_points(512, 512)
    return params, pts


def make_grid():
    rng = np.random.default_rng(1)
    field = rng.normal(size=(512, 512))
    return np.ascontiguousarray(field), np.ascontiguousarray(field[::-1])


def time_call(fn, repeats):
    fn()  # warmup (JIT compile / cache touch)
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args()

    _, np_impl = resolve_backend("numpy")
    nb_name, nb_impl = resolve_backend("numba")
    if nb_name != "numba":
        raise SystemExit("numba backend unavailable; nothing to compare")

    siren_args, z, pts, targets = make_siren_args()
    params, fpts = make_fourier_args()
    u, v = make_grid()

    cases = {
        "siren_eval (4096 pts, 3x128)": lambda impl: impl.siren_eval(*siren_args, z, pts),
        "siren_eval_jac (4096 pts)": lambda impl: impl.siren_eval_jac(*siren_args, z, pts),
        "siren_grad_z (4096 pts)": lambda impl: impl.siren_grad_z(*siren_args, z, pts, targets),
        "fourier_eval (512^2 pts, K=4)": lambda impl: impl.fourier_eval(
            params.omegas, params.amps, params.phases,
            params.anchor_mats, params.anchor_pts, fpts),
        "fourier_jac (512^2 pts)": lambda impl: impl.fourier_jac(
            params.omegas, params.amps, params.phases, params.anchor_mats, fpts),
        "scan_cells (512^2 grid)": lambda impl: impl.scan_cells(u, v),
    }

    print(f"{'kernel':36s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    print("-" * 68)
    for name, call in cases.items():
        t_np = time_call(lambda: call(np_impl), args.repeats)
        t_nb = time_call(lambda: call(nb_impl), args.repeats)
        print(f"{name:36s} {t_np * 1e3:9.2f}ms {t_nb * 1e3:9.2f}ms {t_np / t_nb:7.2f}x")


if __name__ == "__main__":
    main()
