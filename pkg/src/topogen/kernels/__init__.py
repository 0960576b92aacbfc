"""Hot-kernel backend selection.

The environment variable TOPOGEN_KERNELS picks the implementation:

    auto   (default) numba when it imports cleanly, numpy otherwise
    numba  force the @njit kernels
    numpy  force the pure-numpy kernels

``benchmarks/bench_kernels.py`` times the two backends side by side.
"""

from __future__ import annotations

import os

from . import numpy_impl

KERNEL_NAMES = (
    "siren_eval",
    "siren_eval_jac",
    "siren_grad_z",
    "fourier_eval",
    "fourier_jac",
    "scan_cells",
)

_ENV_VAR = "TOPOGEN_KERNELS"


def _load_numba_impl():
    from . import numba_impl

    return numba_impl


def resolve_backend(name: str | None = None):
    """Return (backend_name, module) for an explicit or environment choice."""
    choice = (name or os.environ.get(_ENV_VAR, "auto")).lower()
    if choice not in ("auto", "numba", "numpy"):
        raise ValueError(f"unknown kernel backend {choice!r}; use auto, numba or numpy")
    if choice == "numpy":
        return "numpy", numpy_impl
    if choice == "numba":
        return "numba", _load_numba_impl()
    try:
        return "numba", _load_numba_impl()
    except Exception:
        return "numpy", numpy_impl


BACKEND, _impl = resolve_backend()

siren_eval = _impl.siren_eval
siren_eval_jac = _impl.siren_eval_jac
siren_grad_z = _impl.siren_grad_z
fourier_eval = _impl.fourier_eval
fourier_jac = _impl.fourier_jac
scan_cells = _impl.scan_cells
