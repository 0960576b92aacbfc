"""Differentiable 2x2 Jacobian analysis and scalar kernels shared by all modules.

Everything here is a pure function of its arguments and safe to call from
any number of threads.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

# Default classification margin (normalized field units). Margins tighter than
# this are reported Degenerate/Indeterminate instead of guessed.
DEFAULT_EPS_CLASS = 1e-6

# Clamp for the discriminant square root used on differentiation paths, so the
# derivative stays finite as the discriminant crosses zero.
EPS_SQRT = 1e-12


class PointKind(enum.Enum):
    SINK = "sink"
    SOURCE = "source"
    SADDLE = "saddle"
    DEGENERATE = "degenerate"


class Stability(enum.Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"
    INDETERMINATE = "indeterminate"


@dataclass(frozen=True)
class Jacobian2:
    """2x2 matrix of first spatial derivatives of a 2D vector field."""

    a11: float
    a12: float
    a21: float
    a22: float

    def as_array(self) -> np.ndarray:
        return np.array([[self.a11, self.a12], [self.a21, self.a22]], dtype=np.float64)

    @staticmethod
    def from_array(m) -> "Jacobian2":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (2, 2):
            raise ValueError(f"expected a 2x2 matrix, got shape {m.shape}")
        return Jacobian2(float(m[0, 0]), float(m[0, 1]), float(m[1, 0]), float(m[1, 1]))


@dataclass(frozen=True)
class JacobianAnalysis:
    """Trace/determinant/discriminant of a Jacobian2 plus eigenvalue real parts.

    ``lam1_re <= lam2_re`` always (ascending real parts); when the eigenvalues
    are complex both real parts equal ``trace / 2`` and ``is_complex`` is set.
    """

    trace: float
    det: float
    delta: float
    lam1_re: float
    lam2_re: float
    is_complex: bool


@dataclass(frozen=True)
class CriticalClass:
    kind: PointKind
    stability: Stability


def analyze_jacobian(jac: Jacobian2) -> JacobianAnalysis:
    """Compute trace, determinant, discriminant and eigenvalue real parts.

    The real parts are piecewise: ``(trace -+ sqrt(delta)) / 2`` when the
    discriminant is nonnegative, otherwise both equal ``trace / 2``.
    """
    entries = (jac.a11, jac.a12, jac.a21, jac.a22)
    if not all(math.isfinite(v) for v in entries):
        raise ValueError(f"non-finite Jacobian entries: {entries}")
    trace = jac.a11 + jac.a22
    det = jac.a11 * jac.a22 - jac.a12 * jac.a21
    delta = trace * trace - 4.0 * det
    if delta < 0.0:
        half = trace / 2.0
        return JacobianAnalysis(trace, det, delta, half, half, True)
    root = math.sqrt(delta)
    return JacobianAnalysis(trace, det, delta, (trace - root) / 2.0, (trace + root) / 2.0, False)


def classify(analysis: JacobianAnalysis, eps_class: float = DEFAULT_EPS_CLASS) -> CriticalClass:
    """Classify by eigenvalue real-part signs and discriminant sign.

    Margins within ``eps_class`` of zero yield Degenerate/Indeterminate.
    A saddle always gets Stable: its determinant is below ``-eps_class**2``,
    forcing a positive discriminant even when the discriminant itself is
    within the margin.
    """
    if eps_class <= 0.0:
        raise ValueError("eps_class must be positive")
    l1, l2, delta = analysis.lam1_re, analysis.lam2_re, analysis.delta
    if l2 < -eps_class:
        kind = PointKind.SINK
    elif l1 > eps_class:
        kind = PointKind.SOURCE
    elif l1 < -eps_class and l2 > eps_class:
        kind = PointKind.SADDLE
    else:
        kind = PointKind.DEGENERATE

    if kind is PointKind.SADDLE:
        stability = Stability.STABLE
    elif delta > eps_class:
        stability = Stability.STABLE
    elif delta < -eps_class:
        stability = Stability.UNSTABLE
    else:
        stability = Stability.INDETERMINATE
    return CriticalClass(kind, stability)


def sigmoid(x: float) -> float:
    """Numerically stable logistic function 1 / (1 + exp(-x))."""
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def sigmoid_grad(x: float) -> float:
    s = sigmoid(x)
    return s * (1.0 - s)


def eigreal_with_grads(jac: Jacobian2) -> tuple[JacobianAnalysis, np.ndarray, np.ndarray, np.ndarray]:
    """Analysis plus d(lam1_re)/dJ, d(lam2_re)/dJ and d(delta)/dJ as 2x2 arrays.

    On the nonnegative-discriminant side the square root argument is clamped
    at EPS_SQRT so the derivative stays finite at the boundary.
    """
    analysis = analyze_jacobian(jac)
    # d(trace)/dJ and d(det)/dJ
    d_tr = np.array([[1.0, 0.0], [0.0, 1.0]])
    d_det = np.array([[jac.a22, -jac.a21], [-jac.a12, jac.a11]])
    d_delta = 2.0 * analysis.trace * d_tr - 4.0 * d_det
    if analysis.is_complex:
        d_l1 = 0.5 * d_tr
        d_l2 = 0.5 * d_tr
    else:
        root = math.sqrt(max(analysis.delta, EPS_SQRT))
        d_root = (0.5 / root) * d_delta if analysis.delta > EPS_SQRT else np.zeros((2, 2))
        d_l1 = 0.5 * (d_tr - d_root)
        d_l2 = 0.5 * (d_tr + d_root)
    return analysis, d_l1, d_l2, d_delta


def finite_diff_gradient(f, x, h: float) -> np.ndarray:
    """Central-difference gradient of a scalar function, used as a test oracle."""
    if h <= 0.0:
        raise ValueError("step size h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        step = np.zeros_like(xf)
        step[i] = h
        flat[i] = (f((xf + step).reshape(x.shape)) - f((xf - step).reshape(x.shape))) / (2.0 * h)
    return grad
