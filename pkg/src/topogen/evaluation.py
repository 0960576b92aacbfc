"""Quantitative evaluation: alignment against prescriptions, hit-distance
statistics, Fréchet distance between Gaussian latent summaries, topology-count
histograms, and the batch protocols that tie them together."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffusion as df
from . import guidance as gd
from . import latent_fit as lf
from . import topo_extract as tx
from .diffmath import PointKind, Stability

DOMAIN_SIDE = 2.0
DEFAULT_HIT_RADIUS = 0.04  # 2% of the domain side


# ---------------------------------------------------------------------------
# alignment


@dataclass(frozen=True)
class AlignmentReport:
    n_samples: int
    aligned_fraction: float
    hit_distance_avg: float | None  # fraction of the domain side, aligned samples only
    hit_distance_std: float | None

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "aligned_fraction": self.aligned_fraction,
            "hit_distance_avg": self.hit_distance_avg,
            "hit_distance_std": self.hit_distance_std,
        }


def _matches(cp: tx.CriticalPoint, sp: gd.CriticalPointSpec) -> bool:
    if sp.kind is not None and cp.cls.kind is not sp.kind:
        return False
    if sp.stability is not None and cp.cls.stability is not sp.stability:
        return False
    return True


def alignment(results, hit_radius: float = DEFAULT_HIT_RADIUS) -> AlignmentReport:
    """Score (spec, extracted) pairs.

    A sample is aligned iff every prescribed point has an extracted critical
    point within hit_radius whose kind and stability match wherever they are
    specified. Hit distances (to the nearest class-matching point, normalized
    by the domain side) are collected over aligned samples only.
    """
    if hit_radius <= 0:
        raise ValueError("hit_radius must be positive")
    results = list(results)
    if not results:
        raise ValueError("no results to score")
    aligned = 0
    hits: list[float] = []
    for spec, extracted in results:
        sample_hits = []
        ok = True
        for sp in spec.points:
            dists = [math.hypot(cp.x - sp.x, cp.y - sp.y)
                     for cp in extracted if _matches(cp, sp)]
            best = min(dists) if dists else math.inf
            if best > hit_radius:
                ok = False
                break
            sample_hits.append(best / DOMAIN_SIDE)
        if ok:
            aligned += 1
            hits.extend(sample_hits)
    frac = aligned / len(results)
    if hits:
        avg = float(np.mean(hits))
        std = float(np.std(hits))
    else:
        avg = std = None
    return AlignmentReport(len(results), frac, avg, std)


# ---------------------------------------------------------------------------
# Fréchet distance on latent Gaussians


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray
    stats_id: str | None = None


def gaussian_summary(latents, stats_id: str | None = None) -> GaussianSummary:
    """Sample mean and (population) covariance, symmetrized and PSD-clamped."""
    arr = np.asarray(latents, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValueError("need at least two latent vectors")
    mean = arr.mean(axis=0)
    xc = arr - mean
    cov = xc.T @ xc / arr.shape[0]
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    cov = (vecs * np.maximum(vals, 0.0)) @ vecs.T
    cov = 0.5 * (cov + cov.T)
    return GaussianSummary(mean, cov, stats_id)


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (mat + mat.T))
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


def frechet_distance(g1: GaussianSummary, g2: GaussianSummary) -> float:
    """|mu1 - mu2|^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The cross term uses Tr((S1 S2)^(1/2)) = Tr((sqrt(S1) S2 sqrt(S1))^(1/2)),
    a symmetric eigendecomposition with eigenvalues clamped at zero.
    """
    if g1.mean.shape != g2.mean.shape:
        raise ValueError("dimension mismatch between summaries")
    if g1.stats_id is not None and g2.stats_id is not None and g1.stats_id != g2.stats_id:
        raise ValueError(
            f"summaries use different normalizations: {g1.stats_id} vs {g2.stats_id}")
    diff = g1.mean - g2.mean
    s1_half = _psd_sqrt(g1.cov)
    inner = s1_half @ g2.cov @ s1_half
    vals = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    cross = float(np.sum(np.sqrt(np.maximum(vals, 0.0))))
    fd = float(diff @ diff + np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * cross)
    return max(fd, 0.0)


def stats_id_of(stats: lf.LatentStats) -> str:
    import hashlib

    h = hashlib.sha256()
    h.update(np.ascontiguousarray(stats.mean, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(stats.std, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# topology histogram


@dataclass(frozen=True)
class TopologyHistogram:
    class_counts: dict
    totals: dict

    def to_dict(self) -> dict:
        return {"class_counts": dict(self.class_counts),
                "totals": {str(k): v for k, v in sorted(self.totals.items())}}


def topology_histogram(fields) -> TopologyHistogram:
    """Counts per (kind, stability) and the per-field total-count histogram."""
    class_counts: dict = {}
    totals: dict = {}
    for points in fields:
        totals[len(points)] = totals.get(len(points), 0) + 1
        for cp in points:
            key = f"{cp.cls.kind.value}/{cp.cls.stability.value}"
            class_counts[key] = class_counts.get(key, 0) + 1
    return TopologyHistogram(class_counts, totals)


# ---------------------------------------------------------------------------
# protocols


PAIR_DISTANCES = (1.171875, 0.78125, 0.390625)  # 150/100/50 cells of a 256 grid

PROTOCOL_KINDS = ("varied_noise_fixed_specs", "fixed_noise_varied_locations",
                  "combined", "multipoint_distance")

COMBINED_CONFIGS = (
    (PointKind.SINK, Stability.STABLE),
    (PointKind.SOURCE, Stability.STABLE),
    (PointKind.SADDLE, Stability.STABLE),
    (PointKind.SINK, Stability.UNSTABLE),
    (PointKind.SOURCE, Stability.UNSTABLE),
)


@dataclass(frozen=True)
class ProtocolConfig:
    models: gd.ModelBundle
    data_latents: np.ndarray  # raw latents of the training set
    n_locations: int = 10
    seeds_per_location: int = 20
    kind: PointKind | None = None
    stability: Stability | None = None
    guidance: gd.GuidanceConfig = field(default_factory=gd.GuidanceConfig)
    hit_radius: float = DEFAULT_HIT_RADIUS
    extract_cfg: tx.ExtractConfig = field(default_factory=lambda: tx.ExtractConfig(
        grid_res=128, samples_per_cell=128))
    base_seed: int = 0
    pair_distances: tuple = PAIR_DISTANCES
    include_baseline: bool = True


def default_locations(n: int, margin: float = 0.6, seed: int = 1234) -> list[tuple[float, float]]:
    """Deterministic well-spread interior locations."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, n]))
    pts = []
    while len(pts) < n:
        cand = rng.uniform(-margin, margin, size=2)
        if all(math.hypot(cand[0] - x, cand[1] - y) > 0.25 for x, y in pts):
            pts.append((float(cand[0]), float(cand[1])))
    return pts


def protocol_seed(base: int, loc_i: int, noise_i: int) -> int:
    return base * 1_000_003 + loc_i * 1_009 + noise_i


def _sample_and_extract(spec: gd.TopologySpec, models: gd.ModelBundle,
                        gcfg: gd.GuidanceConfig, seed: int, ecfg: tx.ExtractConfig):
    z_raw = gd.guided_sample(spec, models, gcfg, seed)
    return z_raw, tx.extract(models.siren, z_raw, ecfg)


def run_protocol(kind: str, cfg: ProtocolConfig) -> dict:
    if kind not in PROTOCOL_KINDS:
        raise ValueError(f"unknown protocol {kind!r}; choose from {PROTOCOL_KINDS}")
    models = cfg.models
    sid = stats_id_of(models.stats)
    data_norm = np.array([lf.normalize(z, models.stats) for z in cfg.data_latents])
    data_summary = gaussian_summary(data_norm, sid)
    report: dict = {"protocol": kind, "hit_radius": cfg.hit_radius, "rows": []}

    def fd_of(latents_raw: list[np.ndarray]) -> float:
        norm = np.array([lf.normalize(z, models.stats) for z in latents_raw])
        return frechet_distance(gaussian_summary(norm, sid), data_summary)

    if cfg.include_baseline:
        n_base = cfg.n_locations * cfg.seeds_per_location
        base_norm = df.sample_unguided(models.denoiser, models.schedule, n_base,
                                       cfg.base_seed)
        report["baseline_fd"] = frechet_distance(gaussian_summary(base_norm, sid),
                                                 data_summary)

    locations = default_locations(cfg.n_locations)

    if kind == "varied_noise_fixed_specs":
        results, latents = [], []
        for li, (x, y) in enumerate(locations):
            spec = gd.TopologySpec((gd.CriticalPointSpec(x, y, cfg.kind, cfg.stability),))
            for ni in range(cfg.seeds_per_location):
                z_raw, pts = _sample_and_extract(
                    spec, models, cfg.guidance,
                    protocol_seed(cfg.base_seed, li, ni), cfg.extract_cfg)
                results.append((spec, pts))
                latents.append(z_raw)
        rep = alignment(results, cfg.hit_radius)
        report["rows"].append(_row(_label(cfg.kind, cfg.stability), fd_of(latents), rep))

    elif kind == "fixed_noise_varied_locations":
        results, latents = [], []
        for li, (x, y) in enumerate(locations):
            spec = gd.TopologySpec((gd.CriticalPointSpec(x, y, cfg.kind, cfg.stability),))
            z_raw, pts = _sample_and_extract(spec, models, cfg.guidance,
                                             cfg.base_seed, cfg.extract_cfg)
            results.append((spec, pts))
            latents.append(z_raw)
        rep = alignment(results, cfg.hit_radius)
        report["rows"].append(_row(_label(cfg.kind, cfg.stability), fd_of(latents), rep))

    elif kind == "combined":
        for kind_i, stab_i in COMBINED_CONFIGS:
            results, latents = [], []
            for li, (x, y) in enumerate(locations):
                spec = gd.TopologySpec((gd.CriticalPointSpec(x, y, kind_i, stab_i),))
                for ni in range(cfg.seeds_per_location):
                    z_raw, pts = _sample_and_extract(
                        spec, models, cfg.guidance,
                        protocol_seed(cfg.base_seed, li, ni), cfg.extract_cfg)
                    results.append((spec, pts))
                    latents.append(z_raw)
            rep = alignment(results, cfg.hit_radius)
            report["rows"].append(_row(_label(kind_i, stab_i), fd_of(latents), rep))

    elif kind == "multipoint_distance":
        pair_kinds = ((PointKind.SINK, PointKind.SINK), (PointKind.SOURCE, PointKind.SOURCE),
                      (PointKind.SINK, PointKind.SOURCE), (PointKind.SADDLE, PointKind.SADDLE))
        for dist in cfg.pair_distances:
            for k1, k2 in pair_kinds:
                half = dist / 2.0
                spec = gd.TopologySpec((gd.CriticalPointSpec(-half, 0.0, k1),
                                        gd.CriticalPointSpec(half, 0.0, k2)))
                results, latents = [], []
                for ni in range(cfg.seeds_per_location):
                    z_raw, pts = _sample_and_extract(
                        spec, models, cfg.guidance,
                        protocol_seed(cfg.base_seed, 0, ni), cfg.extract_cfg)
                    results.append((spec, pts))
                    latents.append(z_raw)
                rep = alignment(results, cfg.hit_radius)
                label = f"{k1.value}+{k2.value} @ {dist:.3f}"
                report["rows"].append(_row(label, fd_of(latents), rep))

    return report


def _label(kind: PointKind | None, stability: Stability | None) -> str:
    parts = []
    if stability is not None:
        parts.append(stability.value)
    parts.append(kind.value if kind is not None else "presence")
    return " ".join(parts)


def _row(label: str, fd: float, rep: AlignmentReport) -> dict:
    return {
        "specification": label,
        "fd": fd,
        "alignment": rep.aligned_fraction,
        "hit_distance_avg": rep.hit_distance_avg,
        "hit_distance_std": rep.hit_distance_std,
        "n_samples": rep.n_samples,
    }


def format_table(report: dict) -> str:
    """Aligned plain-text table: Specification, FD, Alignment, Hit Distance."""
    headers = ("Specification", "FD", "Alignment", "Hit Distance Avg", "Hit Distance Std")
    rows = []
    if "baseline_fd" in report:
        rows.append(("Baseline", f"{report['baseline_fd']:.3f}", "--", "--", "--"))
    for r in report["rows"]:
        rows.append((
            r["specification"],
            f"{r['fd']:.3f}",
            f"{100.0 * r['alignment']:.1f}%",
            "--" if r["hit_distance_avg"] is None else f"{100.0 * r['hit_distance_avg']:.3f}%",
            "--" if r["hit_distance_std"] is None else f"{100.0 * r['hit_distance_std']:.3f}%",
        ))
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h)
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(row, widths)))
    return "\n".join(lines)
