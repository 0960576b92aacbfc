"""Grid-and-sampling critical point extraction with classification.

The field is sampled on a regular lattice; cells whose corner signs admit a
zero crossing in both components are refined by dense random sampling, and
the minimum-norm point is accepted when its norm is small relative to the
field's RMS norm. Works on any continuously evaluable field: the latent
coordinate network, the analytic synthetic fields, or a bilinear interpolant
of a gridded field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import field_model as fm
from . import kernels
from .diffmath import (
    DEFAULT_EPS_CLASS,
    CriticalClass,
    Jacobian2,
    JacobianAnalysis,
    analyze_jacobian,
    classify,
)


@dataclass(frozen=True)
class CriticalPoint:
    x: float
    y: float
    norm: float
    analysis: JacobianAnalysis
    cls: CriticalClass

    def to_dict(self) -> dict:
        a = self.analysis
        return {
            "x": self.x,
            "y": self.y,
            "norm": self.norm,
            "trace": a.trace,
            "det": a.det,
            "delta": a.delta,
            "lam1_re": a.lam1_re,
            "lam2_re": a.lam2_re,
            "kind": self.cls.kind.value,
            "stability": self.cls.stability.value,
        }

    @staticmethod
    def from_dict(d: dict) -> "CriticalPoint":
        from .diffmath import PointKind, Stability

        analysis = JacobianAnalysis(
            trace=float(d["trace"]),
            det=float(d["det"]),
            delta=float(d["delta"]),
            lam1_re=float(d["lam1_re"]),
            lam2_re=float(d["lam2_re"]),
            is_complex=float(d["delta"]) < 0.0,
        )
        cls = CriticalClass(PointKind(d["kind"]), Stability(d["stability"]))
        return CriticalPoint(float(d["x"]), float(d["y"]), float(d["norm"]), analysis, cls)


@dataclass(frozen=True)
class ExtractConfig:
    grid_res: int = 256
    samples_per_cell: int = 256
    norm_accept_tau: float = 0.02  # fraction of the field's RMS norm
    eps_class: float = DEFAULT_EPS_CLASS
    seed: int = 0

    def __post_init__(self):
        if self.grid_res < 16:
            raise ValueError("grid_res must be >= 16")
        if self.samples_per_cell < 1:
            raise ValueError("samples_per_cell must be >= 1")
        if self.norm_accept_tau <= 0:
            raise ValueError("norm_accept_tau must be positive")
        if self.eps_class <= 0:
            raise ValueError("eps_class must be positive")


def candidate_cells(grid: fm.VectorFieldGrid) -> list[tuple[int, int]]:
    """Cells whose four corners show mixed signs in both components.

    A corner value of exactly zero counts as both signs. Returned row-major.
    """
    u = np.ascontiguousarray(grid.values[:, :, 0])
    v = np.ascontiguousarray(grid.values[:, :, 1])
    mask = kernels.scan_cells(u, v)
    rows, cols = np.nonzero(mask)
    return list(zip(rows.tolist(), cols.tolist()))


def _cell_rng(seed: int, cell_index: int) -> np.random.Generator:
    # per-cell stream so refinement order never changes results
    return np.random.default_rng(np.random.SeedSequence([seed, cell_index]))


def refine_cell_field(field_fn, grid: fm.VectorFieldGrid, cell: tuple[int, int],
                      n_samples: int, rng: np.random.Generator):
    """Minimum-norm point among n_samples uniform draws in the cell interior."""
    r, c = cell
    xs, ys = grid.xs(), grid.ys()
    if not (0 <= r < grid.height - 1 and 0 <= c < grid.width - 1):
        raise ValueError(f"cell {cell} out of bounds for {grid.height}x{grid.width} grid")
    pts = np.column_stack((
        rng.uniform(xs[c], xs[c + 1], size=n_samples),
        rng.uniform(ys[r], ys[r + 1], size=n_samples),
    ))
    vals = field_fn(pts)
    norms = np.hypot(vals[:, 0], vals[:, 1])
    best = int(np.argmin(norms))
    return pts[best], float(norms[best])


def refine_cell(w: fm.SirenWeights, z, grid: fm.VectorFieldGrid, cell,
                cfg: ExtractConfig, rng: np.random.Generator):
    return refine_cell_field(lambda pts: fm.evaluate_batch(w, z, pts), grid, cell,
                             cfg.samples_per_cell, rng)


def _component_minima(accepted):
    """Group accepted cells that lie within Chebyshev distance 2 and keep the
    minimum-norm entry of each group.

    One zero of the field often lights up a run of adjacent cells (all below
    the norm threshold along a weak-gradient valley); without suppression each
    cell would report its own point.
    """
    parent = list(range(len(accepted)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, (cell_i, _, _) in enumerate(accepted):
        for j in range(i + 1, len(accepted)):
            cell_j = accepted[j][0]
            if abs(cell_i[0] - cell_j[0]) <= 2 and abs(cell_i[1] - cell_j[1]) <= 2:
                parent[find(j)] = find(i)
    best: dict[int, int] = {}
    for i, (_, _, norm) in enumerate(accepted):
        root = find(i)
        if root not in best or norm < accepted[best[root]][2]:
            best[root] = i
    return [accepted[i] for i in sorted(best.values())]


def extract_field(field_fn, jac_fn, cfg: ExtractConfig) -> list[CriticalPoint]:
    """Run the full pipeline against arbitrary field/Jacobian evaluators."""
    res = cfg.grid_res
    pts = fm.grid_points(res, res)
    values = field_fn(pts).reshape(res, res, 2)
    grid = fm.VectorFieldGrid(res, res, values)
    rms = float(np.sqrt(np.mean(values[:, :, 0] ** 2 + values[:, :, 1] ** 2)))
    threshold = cfg.norm_accept_tau * rms

    accepted = []
    n_cols = res - 1
    for r, c in candidate_cells(grid):
        if r == 0 or c == 0 or r == res - 2 or c == res - 2:
            continue  # boundary ring excluded
        rng = _cell_rng(cfg.seed, r * n_cols + c)
        point, norm = refine_cell_field(field_fn, grid, (r, c), cfg.samples_per_cell, rng)
        if norm <= threshold:
            accepted.append(((r, c), point, norm))

    found: list[CriticalPoint] = []
    for _, point, norm in _component_minima(accepted):
        jac = jac_fn(point.reshape(1, 2))[0]
        analysis = analyze_jacobian(Jacobian2.from_array(jac))
        cls = classify(analysis, cfg.eps_class)
        found.append(CriticalPoint(float(point[0]), float(point[1]), norm, analysis, cls))
    return found


def extract(w: fm.SirenWeights, z, cfg: ExtractConfig) -> list[CriticalPoint]:
    """Extract critical points of the field represented by (weights, latent)."""
    return extract_field(
        lambda pts: fm.evaluate_batch(w, z, pts),
        lambda pts: fm.jacobian_batch(w, z, pts)[1],
        cfg,
    )


def bilinear_field(grid: fm.VectorFieldGrid):
    """Continuous (field_fn, jac_fn) pair interpolating a gridded field.

    Bilinear over the cell-center lattice, clamped at the outer centers; the
    Jacobian is the exact derivative of the interpolant.
    """
    xs, ys = grid.xs(), grid.ys()
    vals = grid.values
    w_, h_ = grid.width, grid.height
    dx = 2.0 / w_
    dy = 2.0 / h_

    def locate(pts):
        cx = np.clip((pts[:, 0] - xs[0]) / dx, 0.0, w_ - 1 - 1e-12)
        cy = np.clip((pts[:, 1] - ys[0]) / dy, 0.0, h_ - 1 - 1e-12)
        c0 = cx.astype(int)
        r0 = cy.astype(int)
        tx = cx - c0
        ty = cy - r0
        return r0, c0, tx, ty

    def corners(r0, c0):
        return (vals[r0, c0], vals[r0, c0 + 1], vals[r0 + 1, c0], vals[r0 + 1, c0 + 1])

    def field_fn(pts):
        pts = np.asarray(pts, dtype=np.float64)
        r0, c0, tx, ty = locate(pts)
        v00, v01, v10, v11 = corners(r0, c0)
        tx = tx[:, None]
        ty = ty[:, None]
        return (v00 * (1 - tx) * (1 - ty) + v01 * tx * (1 - ty)
                + v10 * (1 - tx) * ty + v11 * tx * ty)

    def jac_fn(pts):
        pts = np.asarray(pts, dtype=np.float64)
        r0, c0, tx, ty = locate(pts)
        v00, v01, v10, v11 = corners(r0, c0)
        tx = tx[:, None]
        ty = ty[:, None]
        ddx = ((v01 - v00) * (1 - ty) + (v11 - v10) * ty) / dx
        ddy = ((v10 - v00) * (1 - tx) + (v11 - v01) * tx) / dy
        return np.stack((ddx, ddy), axis=2)

    return field_fn, jac_fn


def report_json(points: list[CriticalPoint]) -> list[dict]:
    return [p.to_dict() for p in points]
