"""Command-line pipeline driver.

Subcommands: synth, train-inr, fit-latents, train-ddpm, sample, extract,
eval, serve. Every run writes a config snapshot with the fully resolved
parameters; `--from-config` replays a stage from such a snapshot. Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import diffusion as df
from . import evaluation as ev
from . import field_model as fm
from . import guidance as gd
from . import latent_fit as lf
from . import rundir
from . import topo_extract as tx
from .diffmath import PointKind, Stability


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# stage implementations (resolved-params dicts in, artifacts out)


def run_synth(p: dict) -> None:
    cfg = ds.SynthConfig(n_fields=p["count"], resolution=p["resolution"],
                         n_modes=p["modes"], amplitude_decay=p["decay"],
                         n_linear_anchors=p["anchors"], seed=p["seed"])
    records = ds.synth_generate(cfg, with_ground_truth=not p["no_truth"])
    out = Path(p["out"])
    ds.save_dataset(records, out, cfg)
    rundir.write_snapshot(out, "synth", p)
    _log(f"wrote {len(records)} fields to {out}")


def run_train_inr(p: dict) -> None:
    records = ds.load_dataset(p["data"])
    grids = [r.grid for r in records]
    scfg = fm.SirenConfig(hidden_width=p["width"], hidden_layers=p["layers"],
                          latent_dim=p["latent_dim"], omega0=p["omega0"])
    mcfg = lf.MetaConfig(outer_iterations=p["iterations"],
                         fields_per_batch=p["fields_per_batch"],
                         points_per_field=p["points_per_field"],
                         inner_steps=p["inner_steps"], inner_lr=p["inner_lr"],
                         outer_lr=p["outer_lr"], seed=p["seed"],
                         first_order=p["first_order"])
    losses = []

    def note(it, loss):
        losses.append(loss)
        if it % max(1, p["iterations"] // 20) == 0:
            _log(f"iter {it}: loss {loss:.6f}")

    weights = lf.meta_train(grids, mcfg, scfg, on_iteration=note)
    out = Path(p["run"])
    out.mkdir(parents=True, exist_ok=True)
    fm.save_weights(out / rundir.SIREN_FILE, weights)
    (out / "train_inr_loss.json").write_text(json.dumps(losses) + "\n")
    rundir.write_snapshot(out, "train_inr", p)
    _log(f"wrote field network to {out / rundir.SIREN_FILE}")


def run_fit_latents(p: dict) -> None:
    records = ds.load_dataset(p["data"])
    run = Path(p["run"])
    weights = fm.load_weights(run / rundir.SIREN_FILE)
    latents = np.zeros((len(records), weights.config.latent_dim))
    data_range = lf.data_range_of([r.grid for r in records])
    psnrs = []
    for i, rec in enumerate(records):
        latents[i] = lf.fit_latent(weights, rec.grid, steps=p["steps"], lr=p["lr"],
                                   points_per_step=p["points_per_step"],
                                   seed=p["seed"] + i)
        psnrs.append(lf.reconstruction_psnr(weights, latents[i], rec.grid, data_range))
        if i % max(1, len(records) // 10) == 0:
            _log(f"fit {i + 1}/{len(records)} psnr {psnrs[-1]:.2f} dB")
    stats = lf.latent_stats(latents)
    lf.save_latents(run / rundir.LATENTS_FILE, latents, stats, [r.id for r in records])
    (run / "fit_latents_psnr.json").write_text(
        json.dumps({"data_range": data_range, "psnr": psnrs}) + "\n")
    rundir.write_snapshot(run, "fit_latents", p)
    _log(f"wrote {len(records)} latents, mean psnr {float(np.mean(psnrs)):.2f} dB")


def run_train_ddpm(p: dict) -> None:
    run = Path(p["run"])
    latents, stats, _ = lf.load_latents(run / rundir.LATENTS_FILE)
    normalized = np.array([lf.normalize(z, stats) for z in latents])
    schedule = df.make_schedule(p["timesteps"], p["beta_start"], p["beta_end"])
    net = df.DenoiserConfig(latent_dim=latents.shape[1], width=p["width"],
                            blocks=p["blocks"], dropout=p["dropout"])
    tcfg = df.DiffusionTrainConfig(iterations=p["iterations"], batch_size=p["batch_size"],
                                   lr=p["lr"], seed=p["seed"])
    losses = []

    def note(it, loss):
        losses.append(loss)
        if it % max(1, p["iterations"] // 20) == 0:
            _log(f"iter {it}: loss {loss:.6f}")

    weights = df.train_denoiser(normalized, schedule, tcfg, net, on_iteration=note)
    df.save_denoiser(run / rundir.DENOISER_FILE, weights, schedule, stats)
    (run / "train_ddpm_loss.json").write_text(json.dumps(losses) + "\n")
    rundir.write_snapshot(run, "train_ddpm", p)
    _log(f"wrote denoiser to {run / rundir.DENOISER_FILE}")


def _guidance_config(p: dict, overrides: dict) -> gd.GuidanceConfig:
    # precedence: CLI flag > spec file > built-in default
    def pick(flag_key, over_key, default):
        if p.get(flag_key) is not None:
            return p[flag_key]
        if over_key in overrides:
            return overrides[over_key]
        return default

    return gd.GuidanceConfig(
        omega=float(pick("omega", "omega", 2.0)),
        t_start=int(pick("t_start", "t_start", 600)),
        t_end=int(pick("t_end", "t_end", 0)),
        full_chain=not p.get("stop_gradient", False),
    )


def run_sample(p: dict) -> None:
    models, _, _ = rundir.load_bundle(p["run"])
    spec, overrides = gd.load_spec(p["spec"])
    gcfg = _guidance_config(p, overrides)
    seed = int(p["seed"] if p["seed"] is not None else overrides.get("seed", 0))
    # snapshot the resolved values, not the unset flags
    p.update(seed=seed, omega=gcfg.omega, t_start=gcfg.t_start, t_end=gcfg.t_end)
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    res = p["resolution"]
    ecfg = tx.ExtractConfig(grid_res=p["extract_res"], samples_per_cell=p["extract_samples"])
    summary = {"spec": gd.spec_to_dict(spec), "seed": seed, "count": p["count"],
               "omega": gcfg.omega, "t_start": gcfg.t_start, "t_end": gcfg.t_end,
               "full_chain": gcfg.full_chain, "lock_noise": p["lock_noise"],
               "resolution": res, "samples": []}
    latents = np.zeros((p["count"], models.siren.config.latent_dim))
    for i in range(p["count"]):
        s_i = rundir.sample_seed(seed, i, spec, p["lock_noise"])
        z_raw = gd.guided_sample(spec, models, gcfg, s_i)
        latents[i] = z_raw
        grid = fm.evaluate_grid(models.siren, z_raw, res, res)
        rec = ds.FieldRecord(id=f"sample-{i:04d}", grid=grid)
        ds.export_grid(rec, out / f"{rec.id}.vf2d")
        points = tx.extract(models.siren, z_raw, ecfg)
        (out / f"{rec.id}.extract.json").write_text(
            json.dumps(tx.report_json(points), indent=1, sort_keys=True) + "\n")
        summary["samples"].append({"id": rec.id, "seed": s_i,
                                   "critical_points": len(points)})
        _log(f"sample {i + 1}/{p['count']}: {len(points)} critical points")
    stats = models.stats
    lf.save_latents(out / "latents.json", latents, stats,
                    [s["id"] for s in summary["samples"]])
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    rundir.write_snapshot(out, "sample", p)


def run_extract(p: dict) -> None:
    record = ds.import_grid(p["field"])
    field_fn, jac_fn = tx.bilinear_field(record.grid)
    cfg = tx.ExtractConfig(grid_res=p["grid_res"], samples_per_cell=p["samples_per_cell"],
                           norm_accept_tau=p["tau"], seed=p["seed"])
    points = tx.extract_field(field_fn, jac_fn, cfg)
    doc = tx.report_json(points)
    out = Path(p["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    rundir.write_snapshot(out.parent, "extract", p)
    print(json.dumps(doc, indent=1, sort_keys=True))


def run_eval(p: dict) -> None:
    models, data_latents, _ = rundir.load_bundle(p["run"])
    out = Path(p["out"]) if p["out"] else None
    sid = ev.stats_id_of(models.stats)
    if p["mode"] == "fd":
        sample_latents, _, _ = lf.load_latents(Path(p["samples"]) / "latents.json")
        data_norm = np.array([lf.normalize(z, models.stats) for z in data_latents])
        samp_norm = np.array([lf.normalize(z, models.stats) for z in sample_latents])
        fd = ev.frechet_distance(ev.gaussian_summary(samp_norm, sid),
                                 ev.gaussian_summary(data_norm, sid))
        report = {"mode": "fd", "fd": fd, "n_samples": int(sample_latents.shape[0]),
                  "n_data": int(data_latents.shape[0])}
        print(f"FD = {fd:.4f}")
    elif p["mode"] == "histogram":
        sample_dir = Path(p["samples"])
        fields = []
        for path in sorted(sample_dir.glob("*.extract.json")):
            fields.append([tx.CriticalPoint.from_dict(d)
                           for d in json.loads(path.read_text())])
        hist = ev.topology_histogram(fields)
        report = {"mode": "histogram", **hist.to_dict()}
        print(json.dumps(report, indent=1, sort_keys=True))
    elif p["mode"] == "protocol":
        kind_map = {"sink": PointKind.SINK, "source": PointKind.SOURCE,
                    "saddle": PointKind.SADDLE, None: None}
        stab_map = {"stable": Stability.STABLE, "unstable": Stability.UNSTABLE, None: None}
        pcfg = ev.ProtocolConfig(
            models=models, data_latents=data_latents,
            n_locations=p["n_locations"], seeds_per_location=p["seeds_per_location"],
            kind=kind_map[p["kind"]], stability=stab_map[p["stability"]],
            guidance=gd.GuidanceConfig(omega=p["omega"], t_start=p["t_start"],
                                       t_end=p["t_end"]),
            hit_radius=p["hit_radius"],
            extract_cfg=tx.ExtractConfig(grid_res=p["extract_res"],
                                         samples_per_cell=p["extract_samples"]),
            base_seed=p["seed"])
        report = ev.run_protocol(p["protocol"], pcfg)
        print(ev.format_table(report))
    else:
        raise UsageError(f"unknown eval mode {p['mode']!r}")
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
        rundir.write_snapshot(out.parent, "eval", p)


def run_serve(p: dict) -> None:
    import uvicorn

    from .service import create_app

    app = create_app(p["run"], field_resolution=p["resolution"])
    uvicorn.run(app, host=p["host"], port=p["port"])


# ---------------------------------------------------------------------------
# argument wiring


def _add_from_config(sp):
    sp.add_argument("--from-config", default=None,
                    help="replay the stage from a config snapshot JSON")


def _build_parser() -> _Parser:
    ap = _Parser(prog="topogen", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic field dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=100)
    sp.add_argument("--resolution", type=int, default=64)
    sp.add_argument("--modes", type=int, default=4)
    sp.add_argument("--decay", type=float, default=0.7)
    sp.add_argument("--anchors", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-truth", action="store_true")
    _add_from_config(sp)

    sp = sub.add_parser("train-inr", help="meta-train the field network")
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--width", type=int, default=128)
    sp.add_argument("--layers", type=int, default=3)
    sp.add_argument("--latent-dim", type=int, default=64)
    sp.add_argument("--omega0", type=float, default=30.0)
    sp.add_argument("--iterations", type=int, default=2000)
    sp.add_argument("--fields-per-batch", type=int, default=8)
    sp.add_argument("--points-per-field", type=int, default=256)
    sp.add_argument("--inner-steps", type=int, default=3)
    sp.add_argument("--inner-lr", type=float, default=1e-2)
    sp.add_argument("--outer-lr", type=float, default=1e-4)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--first-order", action="store_true")
    _add_from_config(sp)

    sp = sub.add_parser("fit-latents", help="fit one latent code per field")
    sp.add_argument("--data", required=True)
    sp.add_argument("--run", required=True)
    sp.add_argument("--steps", type=int, default=30)
    sp.add_argument("--lr", type=float, default=1e-2)
    sp.add_argument("--points-per-step", type=int, default=1024)
    sp.add_argument("--seed", type=int, default=0)
    _add_from_config(sp)

    sp = sub.add_parser("train-ddpm", help="train the latent noise predictor")
    sp.add_argument("--run", required=True)
    sp.add_argument("--iterations", type=int, default=4000)
    sp.add_argument("--batch-size", type=int, default=256)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--width", type=int, default=256)
    sp.add_argument("--blocks", type=int, default=4)
    sp.add_argument("--dropout", type=float, default=0.1)
    sp.add_argument("--timesteps", type=int, default=1000)
    sp.add_argument("--beta-start", type=float, default=1e-4)
    sp.add_argument("--beta-end", type=float, default=0.02)
    sp.add_argument("--seed", type=int, default=0)
    _add_from_config(sp)

    sp = sub.add_parser("sample", help="draw topology-guided samples")
    sp.add_argument("--run", required=True)
    sp.add_argument("--spec", required=True, help="prescription JSON file")
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--omega", type=float, default=None)
    sp.add_argument("--t-start", type=int, default=None)
    sp.add_argument("--t-end", type=int, default=None)
    sp.add_argument("--stop-gradient", action="store_true",
                    help="hold the noise prediction constant in the energy gradient")
    sp.add_argument("--lock-noise", action="store_true",
                    help="reuse the same noise streams across differing prescriptions")
    sp.add_argument("--resolution", type=int, default=64)
    sp.add_argument("--extract-res", type=int, default=128)
    sp.add_argument("--extract-samples", type=int, default=128)
    sp.add_argument("--out", required=True)
    _add_from_config(sp)

    sp = sub.add_parser("extract", help="extract critical points from a field file")
    sp.add_argument("--field", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--grid-res", type=int, default=128)
    sp.add_argument("--samples-per-cell", type=int, default=128)
    sp.add_argument("--tau", type=float, default=0.02)
    sp.add_argument("--seed", type=int, default=0)
    _add_from_config(sp)

    sp = sub.add_parser("eval", help="run metrics or a batch protocol")
    sp.add_argument("--run", required=True)
    sp.add_argument("--mode", choices=("fd", "histogram", "protocol"), required=True)
    sp.add_argument("--samples", default=None, help="sample directory (fd, histogram)")
    sp.add_argument("--protocol", choices=ev.PROTOCOL_KINDS,
                    default="varied_noise_fixed_specs")
    sp.add_argument("--n-locations", type=int, default=10)
    sp.add_argument("--seeds-per-location", type=int, default=20)
    sp.add_argument("--kind", choices=("sink", "source", "saddle"), default=None)
    sp.add_argument("--stability", choices=("stable", "unstable"), default=None)
    sp.add_argument("--omega", type=float, default=2.0)
    sp.add_argument("--t-start", type=int, default=600)
    sp.add_argument("--t-end", type=int, default=0)
    sp.add_argument("--hit-radius", type=float, default=ev.DEFAULT_HIT_RADIUS)
    sp.add_argument("--extract-res", type=int, default=128)
    sp.add_argument("--extract-samples", type=int, default=128)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=None)
    _add_from_config(sp)

    sp = sub.add_parser("serve", help="serve the sampling HTTP API")
    sp.add_argument("--run", required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--port", type=int, default=None,
                    help="defaults to $TOPOGEN_PORT or 8765")
    sp.add_argument("--resolution", type=int, default=64)
    _add_from_config(sp)

    return ap


_STAGES = {
    "synth": run_synth,
    "train-inr": run_train_inr,
    "fit-latents": run_fit_latents,
    "train-ddpm": run_train_ddpm,
    "sample": run_sample,
    "extract": run_extract,
    "eval": run_eval,
    "serve": run_serve,
}


def _resolved_params(args: argparse.Namespace) -> dict:
    params = {k: v for k, v in vars(args).items() if k not in ("command", "from_config")}
    if args.from_config:
        stage, loaded = rundir.read_snapshot(args.from_config)
        expect = args.command.replace("-", "_")
        if stage != expect:
            raise UsageError(f"snapshot is for stage {stage!r}, not {expect!r}")
        params.update(loaded)
    if args.command == "serve" and params.get("port") is None:
        import os

        params["port"] = int(os.environ.get("TOPOGEN_PORT", "8765"))
    return params


def cli_dispatch(argv: list[str]) -> int:
    ap = _build_parser()
    try:
        args = ap.parse_args(argv)
        params = _resolved_params(args)
    except UsageError as exc:
        _log(f"usage error: {exc}")
        ap.print_usage(sys.stderr)
        return 1
    try:
        _STAGES[args.command](params)
        return 0
    except (gd.SpecError, ds.VF2DError) as exc:
        _log(f"error: {exc}")
        return 2
    except Exception as exc:  # runtime failure
        _log(f"error: {type(exc).__name__}: {exc}")
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
