"""HTTP/JSON sampling and extraction service consumed by the web UI.

GET  /api/health           liveness probe
GET  /api/model            config and normalization metadata
POST /api/sample           prescription JSON -> guided fields + extractions
POST /api/extract          gridded field JSON -> extraction report

Model state is read-only after load; each request derives its own RNG
streams, so concurrent requests are independent.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import dataset as ds
from . import diffusion as df
from . import field_model as fm
from . import guidance as gd
from . import rundir
from . import topo_extract as tx

MAX_COUNT = 64
MAX_RESOLUTION = 256


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def create_app(run_dir, field_resolution: int = 64) -> FastAPI:
    app = FastAPI(title="topogen service")
    state = {"bundle": None, "error": None, "resolution": field_resolution}
    try:
        bundle, _, _ = rundir.load_bundle(Path(run_dir))
        state["bundle"] = bundle
    except Exception as exc:
        state["error"] = str(exc)

    def bundle_or_none():
        return state["bundle"]

    @app.get("/api/health")
    def health():
        return {"status": "ok"}

    @app.get("/api/model")
    def model_info():
        models = bundle_or_none()
        if models is None:
            return _error(409, f"model incomplete: {state['error']}")
        scfg = models.siren.config
        dcfg = models.denoiser.config
        sch = models.schedule
        return {
            "field_network": {"hidden_width": scfg.hidden_width,
                              "hidden_layers": scfg.hidden_layers,
                              "latent_dim": scfg.latent_dim, "omega0": scfg.omega0},
            "denoiser": {"width": dcfg.width, "blocks": dcfg.blocks,
                         "dropout": dcfg.dropout},
            "schedule": {"T": sch.T, "beta_start": sch.beta_start,
                         "beta_end": sch.beta_end},
            "stats": {"mean": models.stats.mean.tolist(),
                      "std": models.stats.std.tolist()},
            "field_resolution": state["resolution"],
            "defaults": {"omega": 2.0, "t_start": 600, "t_end": 0},
        }

    @app.post("/api/sample")
    async def sample(request: Request):
        models = bundle_or_none()
        if models is None:
            return _error(409, f"model incomplete: {state['error']}")
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return _error(400, "request body is not valid JSON")
        try:
            spec, overrides = gd.spec_from_dict(body)
            gcfg = gd.GuidanceConfig(
                omega=float(overrides.get("omega", 2.0)),
                t_start=int(overrides.get("t_start", min(600, models.schedule.T))),
                t_end=int(overrides.get("t_end", 0)),
            )
        except gd.SpecError as exc:
            return _error(400, str(exc))
        count = int(body.get("count", 1))
        if not (1 <= count <= MAX_COUNT):
            return _error(400, f"count must be in [1, {MAX_COUNT}]")
        seed = int(body.get("seed", 0))
        lock_noise = bool(body.get("lock_noise", False))
        res = int(body.get("resolution", state["resolution"]))
        if not (16 <= res <= MAX_RESOLUTION):
            return _error(400, f"resolution must be in [16, {MAX_RESOLUTION}]")
        ecfg = tx.ExtractConfig(grid_res=128, samples_per_cell=128)

        samples = []
        for i in range(count):
            s_i = rundir.sample_seed(seed, i, spec, lock_noise)
            try:
                z_raw = gd.guided_sample(spec, models, gcfg, s_i)
            except df.TrainingDiverged as exc:
                return _error(500, f"sampling failed: {exc}")
            grid = fm.evaluate_grid(models.siren, z_raw, res, res)
            points = tx.extract(models.siren, z_raw, ecfg)
            samples.append({
                "seed": s_i,
                "field": {"width": grid.width, "height": grid.height,
                          "values": grid.values.tolist()},
                "critical_points": tx.report_json(points),
            })
        return {"samples": samples, "spec": gd.spec_to_dict(spec),
                "omega": gcfg.omega, "t_start": gcfg.t_start, "t_end": gcfg.t_end,
                "lock_noise": lock_noise}

    @app.post("/api/extract")
    async def extract(request: Request):
        try:
            body = await request.json()
        except json.JSONDecodeError:
            return _error(400, "request body is not valid JSON")
        field = body.get("field")
        if not isinstance(field, dict):
            return _error(400, 'request needs a "field" object')
        try:
            width = int(field["width"])
            height = int(field["height"])
            values = np.asarray(field["values"], dtype=np.float64)
            grid = fm.VectorFieldGrid(width, height, values)
        except (KeyError, TypeError, ValueError) as exc:
            return _error(400, f"malformed field: {exc}")
        grid_res = int(body.get("grid_res", 128))
        if not (16 <= grid_res <= 512):
            return _error(400, "grid_res must be in [16, 512]")
        field_fn, jac_fn = tx.bilinear_field(grid)
        cfg = tx.ExtractConfig(grid_res=grid_res,
                               samples_per_cell=int(body.get("samples_per_cell", 128)),
                               seed=int(body.get("seed", 0)))
        points = tx.extract_field(field_fn, jac_fn, cfg)
        return {"critical_points": tx.report_json(points)}

    return app
