"""Synthetic 2D vector fields with analytic ground-truth topology, plus
import/export of gridded fields and crop sampling.

Each field component is a random band-limited sine series; optional affine
anchor terms embed known linear critical structures. Zeros of the analytic
form are located by a dense corner-lattice scan followed by Newton polishing
with the exact Jacobian, giving oracle topology for extraction and alignment
tests.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import field_model as fm
from . import kernels
from .diffmath import (DEFAULT_EPS_CLASS, Jacobian2, JacobianAnalysis,
                       analyze_jacobian, classify)
from .topo_extract import CriticalPoint

GT_SCAN_RES = 1024
GT_NORM_TOL = 1e-10

VF2D_MAGIC = b"VF2D"
VF2D_VERSION = 1


class VF2DError(ValueError):
    pass


class VF2DHeaderError(VF2DError):
    pass


class VF2DVersionError(VF2DError):
    pass


class VF2DPayloadError(VF2DError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_fields: int
    resolution: int
    n_modes: int = 4
    amplitude_decay: float = 0.7
    n_linear_anchors: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.n_fields < 1:
            raise ValueError("n_fields must be positive")
        if self.resolution < 16:
            raise ValueError("resolution must be >= 16")
        if self.n_modes < 0 or self.n_linear_anchors < 0:
            raise ValueError("mode and anchor counts must be nonnegative")
        if self.n_modes == 0 and self.n_linear_anchors == 0:
            raise ValueError("need at least one mode or one linear anchor")
        if not (0.0 < self.amplitude_decay <= 1.0):
            raise ValueError("amplitude_decay must be in (0, 1]")


@dataclass(frozen=True)
class SynthFieldParams:
    """Analytic parameters of one synthetic field (post scale-normalization)."""

    omegas: np.ndarray  # (2, K, 2)
    amps: np.ndarray  # (2, K)
    phases: np.ndarray  # (2, K)
    anchor_mats: np.ndarray  # (A, 2, 2)
    anchor_pts: np.ndarray  # (A, 2)

    def field_fn(self, pts):
        return kernels.fourier_eval(self.omegas, self.amps, self.phases,
                                    self.anchor_mats, self.anchor_pts,
                                    np.ascontiguousarray(pts, dtype=np.float64))

    def jac_fn(self, pts):
        return kernels.fourier_jac(self.omegas, self.amps, self.phases,
                                   self.anchor_mats,
                                   np.ascontiguousarray(pts, dtype=np.float64))


@dataclass
class FieldRecord:
    id: str
    grid: fm.VectorFieldGrid
    ground_truth: list[CriticalPoint] | None = None
    synth_params: SynthFieldParams | None = None


def _draw_params(cfg: SynthConfig, rng: np.random.Generator) -> SynthFieldParams:
    k = cfg.n_modes
    omega_max = math.pi * max(k, 1) / 2.0
    omegas = np.zeros((2, k, 2))
    for c in range(2):
        for i in range(k):
            while True:
                cand = rng.uniform(-omega_max, omega_max, size=2)
                if np.hypot(cand[0], cand[1]) >= math.pi / 2.0:
                    omegas[c, i] = cand
                    break
    decay = cfg.amplitude_decay ** np.arange(k)
    amps = rng.normal(size=(2, k)) * decay
    phases = rng.uniform(0.0, 2.0 * math.pi, size=(2, k))
    a = cfg.n_linear_anchors
    anchor_mats = rng.normal(size=(a, 2, 2))
    anchor_pts = rng.uniform(-0.7, 0.7, size=(a, 2))
    return SynthFieldParams(omegas, amps, phases, anchor_mats, anchor_pts)


def _normalize_scale(params: SynthFieldParams, resolution: int) -> SynthFieldParams:
    pts = fm.grid_points(resolution, resolution)
    vals = params.field_fn(pts)
    rms = float(np.sqrt(np.mean(vals[:, 0] ** 2 + vals[:, 1] ** 2)))
    if rms <= 0.0:
        return params
    return SynthFieldParams(params.omegas, params.amps / rms, params.phases,
                            params.anchor_mats / rms, params.anchor_pts)


def _newton_zero(params: SynthFieldParams, start: np.ndarray):
    p = start.copy()
    for _ in range(50):
        val = params.field_fn(p.reshape(1, 2))[0]
        norm = float(np.hypot(val[0], val[1]))
        if norm < 1e-13:
            break
        jac = params.jac_fn(p.reshape(1, 2))[0]
        det = jac[0, 0] * jac[1, 1] - jac[0, 1] * jac[1, 0]
        if abs(det) < 1e-14:
            return None
        step = np.linalg.solve(jac, val)
        step_len = float(np.hypot(step[0], step[1]))
        if step_len > 0.05:  # stay near the seeding cell
            step *= 0.05 / step_len
        p = p - step
        if np.max(np.abs(p)) > 1.5:
            return None
    val = params.field_fn(p.reshape(1, 2))[0]
    if float(np.hypot(val[0], val[1])) >= GT_NORM_TOL:
        return None
    return p


def ground_truth_points(params: SynthFieldParams,
                        eps_class: float = DEFAULT_EPS_CLASS) -> list[CriticalPoint]:
    """Oracle zeros: dense corner-lattice sign scan plus Newton polishing."""
    res = GT_SCAN_RES
    axis = np.linspace(-1.0, 1.0, res + 1)
    gx, gy = np.meshgrid(axis, axis)
    pts = np.stack((gx.reshape(-1), gy.reshape(-1)), axis=1)
    vals = params.field_fn(pts)
    u = np.ascontiguousarray(vals[:, 0].reshape(res + 1, res + 1))
    v = np.ascontiguousarray(vals[:, 1].reshape(res + 1, res + 1))
    mask = kernels.scan_cells(u, v)
    rows, cols = np.nonzero(mask)
    half_cell = 1.0 / res
    margin = 1.0 - half_cell

    found: list[np.ndarray] = []
    for r, c in zip(rows.tolist(), cols.tolist()):
        center = np.array([axis[c] + half_cell, axis[r] + half_cell])
        p = _newton_zero(params, center)
        if p is None or np.max(np.abs(p)) > margin:
            continue
        if any(np.hypot(*(p - q)) < 1e-6 for q in found):
            continue
        found.append(p)

    points = []
    for p in found:
        val = params.field_fn(p.reshape(1, 2))[0]
        jac = params.jac_fn(p.reshape(1, 2))[0]
        analysis = analyze_jacobian(Jacobian2.from_array(jac))
        points.append(CriticalPoint(float(p[0]), float(p[1]),
                                    float(np.hypot(val[0], val[1])),
                                    analysis, classify(analysis, eps_class)))
    points.sort(key=lambda cp: (cp.y, cp.x))
    return points


def synth_field(cfg: SynthConfig, index: int) -> tuple[SynthFieldParams, fm.VectorFieldGrid]:
    """Field number `index` of the configured distribution, without ground truth."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    params = _normalize_scale(_draw_params(cfg, rng), cfg.resolution)
    values = params.field_fn(fm.grid_points(cfg.resolution, cfg.resolution))
    grid = fm.VectorFieldGrid(cfg.resolution, cfg.resolution,
                              values.reshape(cfg.resolution, cfg.resolution, 2))
    return params, grid


def synth_generate(cfg: SynthConfig, with_ground_truth: bool = True) -> list[FieldRecord]:
    records = []
    for i in range(cfg.n_fields):
        params, grid = synth_field(cfg, i)
        truth = ground_truth_points(params) if with_ground_truth else None
        records.append(FieldRecord(id=f"synth-{cfg.seed}-{i:05d}", grid=grid,
                                   ground_truth=truth, synth_params=params))
    return records


def export_grid(record: FieldRecord, path) -> None:
    grid = record.grid
    header = VF2D_MAGIC + struct.pack("<III", VF2D_VERSION, grid.width, grid.height)
    payload = np.ascontiguousarray(grid.values, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def import_grid(path) -> FieldRecord:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 16 or raw[:4] != VF2D_MAGIC:
        raise VF2DHeaderError(f"{path} does not start with a VF2D header")
    version, width, height = struct.unpack("<III", raw[4:16])
    if version != VF2D_VERSION:
        raise VF2DVersionError(f"{path} has format version {version}, expected {VF2D_VERSION}")
    expected = 16 + 4 * width * height * 2
    if len(raw) != expected:
        raise VF2DPayloadError(f"{path} has {len(raw)} bytes, expected {expected}")
    values = np.frombuffer(raw, dtype="<f4", offset=16).reshape(height, width, 2).astype(np.float64)
    return FieldRecord(id=path.stem, grid=fm.VectorFieldGrid(width, height, values))


def crop(record: FieldRecord, x0: int, y0: int, size: int) -> FieldRecord:
    """Square sub-grid re-normalized to [-1, 1]^2, ground truth remapped.

    Under the remap the Jacobian scales by size/W, so eigenvalues scale and
    class labels are preserved.
    """
    grid = record.grid
    if size < 2:
        raise ValueError("crop size must be >= 2")
    if not (0 <= x0 and 0 <= y0 and x0 + size <= grid.width and y0 + size <= grid.height):
        raise ValueError(
            f"crop [{x0}:{x0+size}) x [{y0}:{y0+size}) out of bounds for "
            f"{grid.width}x{grid.height}"
        )
    sub = grid.values[y0:y0 + size, x0:x0 + size].copy()
    new_grid = fm.VectorFieldGrid(size, size, sub)

    truth = None
    if record.ground_truth is not None:
        # old-coordinate extent covered by the cropped cells
        lo_x = -1.0 + 2.0 * x0 / grid.width
        hi_x = -1.0 + 2.0 * (x0 + size) / grid.width
        lo_y = -1.0 + 2.0 * y0 / grid.height
        hi_y = -1.0 + 2.0 * (y0 + size) / grid.height
        scale = size / grid.width
        truth = []
        for cp in record.ground_truth:
            if not (lo_x <= cp.x < hi_x and lo_y <= cp.y < hi_y):
                continue
            nx = -1.0 + 2.0 * (cp.x - lo_x) / (hi_x - lo_x)
            ny = -1.0 + 2.0 * (cp.y - lo_y) / (hi_y - lo_y)
            # the matrix itself is not stored, but trace and det transform
            # as s and s^2 under a uniform coordinate scaling
            a = cp.analysis
            delta = (a.trace * scale) ** 2 - 4.0 * (a.det * scale * scale)
            if delta < 0:
                l1 = l2 = a.trace * scale / 2.0
                is_complex = True
            else:
                root = math.sqrt(delta)
                l1 = (a.trace * scale - root) / 2.0
                l2 = (a.trace * scale + root) / 2.0
                is_complex = False
            scaled = JacobianAnalysis(a.trace * scale, a.det * scale * scale, delta,
                                      l1, l2, is_complex)
            truth.append(CriticalPoint(nx, ny, cp.norm, scaled, cp.cls))
    return FieldRecord(id=f"{record.id}-crop{x0}-{y0}-{size}", grid=new_grid,
                       ground_truth=truth, synth_params=None)


def save_dataset(records: list[FieldRecord], out_dir, cfg: SynthConfig | None = None) -> None:
    out_dir = Path(out_dir)
    (out_dir / "fields").mkdir(parents=True, exist_ok=True)
    (out_dir / "truth").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        field_file = f"fields/{rec.id}.vf2d"
        export_grid(rec, out_dir / field_file)
        entry = {"id": rec.id, "field": field_file}
        if rec.ground_truth is not None:
            truth_file = f"truth/{rec.id}.json"
            (out_dir / truth_file).write_text(
                json.dumps([cp.to_dict() for cp in rec.ground_truth], indent=1,
                           sort_keys=True) + "\n")
            entry["truth"] = truth_file
        entries.append(entry)
    manifest = {"format_version": 1, "records": entries}
    if cfg is not None:
        manifest["generator"] = {
            "n_fields": cfg.n_fields, "resolution": cfg.resolution,
            "n_modes": cfg.n_modes, "amplitude_decay": cfg.amplitude_decay,
            "n_linear_anchors": cfg.n_linear_anchors, "seed": cfg.seed,
        }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_dataset(data_dir) -> list[FieldRecord]:
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    records = []
    for entry in manifest["records"]:
        rec = import_grid(data_dir / entry["field"])
        rec.id = entry["id"]
        if "truth" in entry:
            truth = json.loads((data_dir / entry["truth"]).read_text())
            rec.ground_truth = [CriticalPoint.from_dict(d) for d in truth]
        records.append(rec)
    return records
