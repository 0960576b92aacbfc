"""Topology energies over the predicted clean latent and the guided sampler.

Each prescription combines up to three differentiable terms at a location p:

    presence    |f(p; z)|                         drive the field to zero
    type        sig(b1 l1) + sig(b2 l2)           prescribe eigenvalue signs
    stability   sig(b_s Delta)                    prescribe node vs focus

evaluated on the denormalized clean-latent prediction. During sampling the
energy gradient with respect to the noisy latent is added to the predicted
noise, scaled by the guidance strength, inside a configurable step window.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import diffusion as df
from . import field_model as fm
from .diffmath import PointKind, Stability, analyze_jacobian, eigreal_with_grads, sigmoid, sigmoid_grad
from .latent_fit import LatentStats, denormalize

BOUNDARY_MARGIN = 0.1  # prescriptions stay this far inside the domain


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class CriticalPointSpec:
    x: float
    y: float
    kind: PointKind | None = None
    stability: Stability | None = None

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise SpecError("location must be finite")
        limit = 1.0 - BOUNDARY_MARGIN
        if abs(self.x) > limit or abs(self.y) > limit:
            raise SpecError(
                f"location ({self.x}, {self.y}) must stay within +-{limit} "
                f"(margin {BOUNDARY_MARGIN} from the boundary)")
        if self.kind is PointKind.DEGENERATE:
            raise SpecError("degenerate is not a prescribable kind")
        if self.stability is Stability.INDETERMINATE:
            raise SpecError("indeterminate is not a prescribable stability")
        if self.kind is PointKind.SADDLE and self.stability is Stability.UNSTABLE:
            raise SpecError("saddles are always nodes; unstable saddles are unsatisfiable")

    @property
    def p(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class TopologySpec:
    points: tuple[CriticalPointSpec, ...]

    def __post_init__(self):
        if len(self.points) == 0:
            raise SpecError("a topology prescription needs at least one point")
        for i, a in enumerate(self.points):
            for b in self.points[i + 1:]:
                if a.x == b.x and a.y == b.y:
                    raise SpecError(f"duplicate prescription location ({a.x}, {a.y})")


@dataclass(frozen=True)
class BetaTargets:
    beta1: float | None = None
    beta2: float | None = None
    beta_s: float | None = None

    def __post_init__(self):
        if (self.beta1 is None) != (self.beta2 is None):
            raise SpecError("type guidance uses both eigenvalue targets or neither")
        for b in (self.beta1, self.beta2, self.beta_s):
            if b is not None and b not in (-1.0, 1.0):
                raise SpecError("beta targets must be -1 or +1")


@dataclass(frozen=True)
class GuidanceConfig:
    omega: float = 2.0
    t_start: int = 600
    t_end: int = 0
    full_chain: bool = True
    # swap to the (-1, +1) saddle targets instead of the default (+1, -1)
    swap_saddle_betas: bool = False

    def __post_init__(self):
        if self.omega < 0.0:
            raise SpecError("guidance strength must be nonnegative")
        if not (self.t_start > self.t_end >= 0):
            raise SpecError("need t_start > t_end >= 0")


@dataclass(frozen=True)
class ModelBundle:
    siren: fm.SirenWeights
    denoiser: df.DenoiserWeights
    schedule: df.NoiseSchedule
    stats: LatentStats


def spec_to_betas(kind: PointKind | None, stability: Stability | None,
                  swap_saddle: bool = False) -> BetaTargets:
    """Sigmoid targets: sink (+1, +1), source (-1, -1), saddle (+1, -1) under
    ascending eigenvalue order; stable -> -1, unstable -> +1 on the
    discriminant."""
    beta1 = beta2 = beta_s = None
    if kind is PointKind.SINK:
        beta1, beta2 = 1.0, 1.0
    elif kind is PointKind.SOURCE:
        beta1, beta2 = -1.0, -1.0
    elif kind is PointKind.SADDLE:
        beta1, beta2 = (-1.0, 1.0) if swap_saddle else (1.0, -1.0)
    elif kind is not None:
        raise SpecError(f"kind {kind} is not prescribable")
    if stability is Stability.STABLE:
        beta_s = -1.0
    elif stability is Stability.UNSTABLE:
        beta_s = 1.0
    elif stability is not None:
        raise SpecError(f"stability {stability} is not prescribable")
    return BetaTargets(beta1, beta2, beta_s)


# ---------------------------------------------------------------------------
# energies


def type_energy_from_eigs(lam1_re: float, lam2_re: float, beta1: float, beta2: float) -> float:
    return sigmoid(beta1 * lam1_re) + sigmoid(beta2 * lam2_re)


def stability_energy_from_delta(delta: float, beta_s: float) -> float:
    return sigmoid(beta_s * delta)


def energy_presence(w: fm.SirenWeights, z, p) -> float:
    u, v = fm.evaluate(w, z, p)
    return math.hypot(u, v)


def energy_type(w: fm.SirenWeights, z, p, beta1: float, beta2: float) -> float:
    analysis = analyze_jacobian(fm.spatial_jacobian(w, z, p))
    return type_energy_from_eigs(analysis.lam1_re, analysis.lam2_re, beta1, beta2)


def energy_stability(w: fm.SirenWeights, z, p, beta_s: float) -> float:
    analysis = analyze_jacobian(fm.spatial_jacobian(w, z, p))
    return stability_energy_from_delta(analysis.delta, beta_s)


def point_energy_and_grad(w: fm.SirenWeights, z, cp: CriticalPointSpec,
                          swap_saddle: bool = False) -> tuple[float, np.ndarray]:
    """Energy of one prescription and its exact gradient with respect to z."""
    betas = spec_to_betas(cp.kind, cp.stability, swap_saddle)
    need_jac = betas.beta1 is not None or betas.beta_s is not None
    value, jac = fm.value_and_jacobian(w, z, cp.p)

    norm = float(np.hypot(value[0], value[1]))
    energy = norm
    g_val = value / norm if norm > 0.0 else np.zeros(2)  # subgradient 0 at f = 0

    g_jac = None
    if need_jac:
        from .diffmath import Jacobian2

        analysis, d_l1, d_l2, d_delta = eigreal_with_grads(Jacobian2.from_array(jac))
        g_jac = np.zeros((2, 2))
        if betas.beta1 is not None:
            energy += type_energy_from_eigs(analysis.lam1_re, analysis.lam2_re,
                                            betas.beta1, betas.beta2)
            g_jac += betas.beta1 * sigmoid_grad(betas.beta1 * analysis.lam1_re) * d_l1
            g_jac += betas.beta2 * sigmoid_grad(betas.beta2 * analysis.lam2_re) * d_l2
        if betas.beta_s is not None:
            energy += stability_energy_from_delta(analysis.delta, betas.beta_s)
            g_jac += betas.beta_s * sigmoid_grad(betas.beta_s * analysis.delta) * d_delta

    gz = fm.pullback_to_latent(w, z, cp.p, (g_val, g_jac))
    return energy, gz


def energy_total(w: fm.SirenWeights, z, spec: TopologySpec, swap_saddle: bool = False) -> float:
    total = 0.0
    for cp in spec.points:
        e, _ = point_energy_and_grad(w, z, cp, swap_saddle)
        total += e
    return total


def energy_total_and_grad(w: fm.SirenWeights, z, spec: TopologySpec,
                          swap_saddle: bool = False) -> tuple[float, np.ndarray]:
    total = 0.0
    gz = np.zeros(w.config.latent_dim)
    for cp in spec.points:
        e, g = point_energy_and_grad(w, z, cp, swap_saddle)
        total += e
        gz += g
    return total, gz


# ---------------------------------------------------------------------------
# guided sampling


def guidance_gradient(z_t, t: int, spec: TopologySpec, models: ModelBundle,
                      cfg: GuidanceConfig) -> np.ndarray:
    """Gradient of the total energy with respect to the noisy latent.

    The energy is evaluated on the denormalized clean-latent prediction. With
    full_chain the derivative of that prediction flows back through the noise
    network; otherwise the network output is held constant and only the
    analytic 1/sqrt(abar_t) coefficient remains.
    """
    s = models.schedule
    ab = s.alpha_bar[int(t) - 1]
    sqrt_ab = math.sqrt(ab)
    sqrt_1mab = math.sqrt(1.0 - ab)
    z_t = np.asarray(z_t, dtype=np.float64)

    eps_hat, cache = df.denoiser_forward(models.denoiser, z_t.reshape(1, -1), t)
    z_hat = (z_t - sqrt_1mab * eps_hat[0]) / sqrt_ab
    z_raw = denormalize(z_hat, models.stats)
    _, g_raw = energy_total_and_grad(models.siren, z_raw, spec, cfg.swap_saddle_betas)
    g_hat = models.stats.std * g_raw
    if cfg.full_chain:
        g_eps = (-sqrt_1mab / sqrt_ab) * g_hat
        _, g_thru = df.denoiser_backward(models.denoiser, cache, g_eps.reshape(1, -1),
                                         need_param_grads=False)
        return g_hat / sqrt_ab + g_thru[0]
    return g_hat / sqrt_ab


def in_window(t: int, cfg: GuidanceConfig) -> bool:
    return cfg.t_end < t <= cfg.t_start


def guided_noise_estimate(z_t, t: int, spec: TopologySpec, models: ModelBundle,
                          cfg: GuidanceConfig) -> np.ndarray:
    eps_hat = df.denoiser_apply(models.denoiser, z_t, t)
    if cfg.omega != 0.0 and in_window(t, cfg):
        eps_hat = eps_hat + cfg.omega * guidance_gradient(z_t, t, spec, models, cfg)
    return eps_hat


def guided_step(z_t, t: int, spec: TopologySpec, models: ModelBundle,
                cfg: GuidanceConfig, rng: np.random.Generator) -> np.ndarray:
    """One reverse step with the guidance-adjusted noise estimate."""
    noise = rng.standard_normal(len(z_t)) if t > 1 else np.zeros(len(z_t))
    eps_tilde = guided_noise_estimate(z_t, t, spec, models, cfg)
    return df.ddpm_step(z_t, t, eps_tilde, noise, models.schedule)


def guided_sample(spec: TopologySpec, models: ModelBundle, cfg: GuidanceConfig,
                  seed: int, step_hook=None) -> np.ndarray:
    """Full guided reverse chain; returns the denormalized clean latent.

    Deterministic given seed; with omega = 0 (or an empty window) the chain
    reproduces the unguided sampler draw for the same seed bit for bit.
    """
    rng = df.sample_rng(seed, 0)
    z0 = df.sample_chain(
        lambda z, t: guided_noise_estimate(z, t, spec, models, cfg),
        models.denoiser.config.latent_dim, models.schedule, rng, step_hook=step_hook)
    return denormalize(z0, models.stats)


# ---------------------------------------------------------------------------
# wire format


_KIND_FROM_WIRE = {"sink": PointKind.SINK, "source": PointKind.SOURCE, "saddle": PointKind.SADDLE}
_STAB_FROM_WIRE = {"stable": Stability.STABLE, "unstable": Stability.UNSTABLE}


def spec_from_dict(doc: dict) -> tuple[TopologySpec, dict]:
    """Parse the JSON prescription document.

    {"points": [{"x", "y", "type", "stability"}], "omega"?, "t_start"?,
     "t_end"?, "seed"?}; returns the spec and the optional overrides found.
    """
    if not isinstance(doc, dict) or "points" not in doc:
        raise SpecError('prescription document needs a "points" list')
    raw_points = doc["points"]
    if not isinstance(raw_points, list) or len(raw_points) == 0:
        raise SpecError('"points" must be a nonempty list')
    points = []
    for i, rp in enumerate(raw_points):
        if not isinstance(rp, dict) or "x" not in rp or "y" not in rp:
            raise SpecError(f"points[{i}] needs x and y")
        kind_raw = rp.get("type")
        stab_raw = rp.get("stability")
        if kind_raw is not None and kind_raw not in _KIND_FROM_WIRE:
            raise SpecError(f"points[{i}].type {kind_raw!r} is not one of sink/source/saddle")
        if stab_raw is not None and stab_raw not in _STAB_FROM_WIRE:
            raise SpecError(f"points[{i}].stability {stab_raw!r} is not stable/unstable")
        try:
            x, y = float(rp["x"]), float(rp["y"])
        except (TypeError, ValueError) as exc:
            raise SpecError(f"points[{i}] has non-numeric coordinates") from exc
        points.append(CriticalPointSpec(
            x=x, y=y,
            kind=_KIND_FROM_WIRE.get(kind_raw),
            stability=_STAB_FROM_WIRE.get(stab_raw),
        ))
    overrides = {k: doc[k] for k in ("omega", "t_start", "t_end", "seed") if k in doc}
    return TopologySpec(tuple(points)), overrides


def spec_to_dict(spec: TopologySpec, overrides: dict | None = None) -> dict:
    doc = {
        "points": [
            {
                "x": cp.x,
                "y": cp.y,
                "type": cp.kind.value if cp.kind is not None else None,
                "stability": cp.stability.value if cp.stability is not None else None,
            }
            for cp in spec.points
        ]
    }
    if overrides:
        doc.update(overrides)
    return doc


def load_spec(path) -> tuple[TopologySpec, dict]:
    try:
        doc = json.loads(open(path).read())
    except json.JSONDecodeError as exc:
        raise SpecError(f"invalid JSON in {path}: {exc}") from exc
    return spec_from_dict(doc)
