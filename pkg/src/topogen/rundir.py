"""Model run-directory layout shared by the CLI and the HTTP service.

A complete run directory holds the field-network checkpoint, the latent store
(with normalization stats), and the denoiser checkpoint (whose manifest also
records the schedule and stats), plus one config snapshot per pipeline stage.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffusion as df
from . import field_model as fm
from . import guidance as gd
from . import latent_fit as lf

SIREN_FILE = "siren.json"
LATENTS_FILE = "latents.json"
DENOISER_FILE = "denoiser.json"


class IncompleteRun(RuntimeError):
    pass


@dataclass
class RunDirectory:
    path: Path

    @property
    def siren_path(self) -> Path:
        return self.path / SIREN_FILE

    @property
    def latents_path(self) -> Path:
        return self.path / LATENTS_FILE

    @property
    def denoiser_path(self) -> Path:
        return self.path / DENOISER_FILE

    def missing(self) -> list[str]:
        return [p.name for p in (self.siren_path, self.latents_path, self.denoiser_path)
                if not p.exists()]


def load_bundle(run_dir) -> tuple[gd.ModelBundle, np.ndarray, list[str]]:
    """Load (models, raw latents, source ids); raises IncompleteRun when
    any stage artifact is absent or stats disagree between files."""
    rd = RunDirectory(Path(run_dir))
    missing = rd.missing()
    if missing:
        raise IncompleteRun(f"run directory {rd.path} is missing {', '.join(missing)}")
    siren = fm.load_weights(rd.siren_path)
    latents, stats, source_ids = lf.load_latents(rd.latents_path)
    denoiser, schedule, stats2 = df.load_denoiser(rd.denoiser_path)
    if not (np.allclose(stats.mean, stats2.mean) and np.allclose(stats.std, stats2.std)):
        raise IncompleteRun("latent store and denoiser carry different normalization stats")
    return gd.ModelBundle(siren, denoiser, schedule, stats), latents, source_ids


def write_snapshot(directory, stage: str, params: dict) -> None:
    """Persist the fully resolved stage parameters; snapshots carry no
    timestamps so a replayed stage reproduces its outputs bit for bit."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    doc = {"stage": stage, "params": params, "format_version": 1}
    (directory / f"{stage}_config.json").write_text(
        json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_snapshot(path) -> tuple[str, dict]:
    doc = json.loads(Path(path).read_text())
    return doc["stage"], doc["params"]


def spec_noise_key(spec: gd.TopologySpec) -> int:
    """Stable 31-bit key of the prescription geometry, used to decouple the
    noise streams of different prescriptions unless noise locking is on."""
    doc = json.dumps(gd.spec_to_dict(spec), sort_keys=True).encode()
    return int.from_bytes(hashlib.sha256(doc).digest()[:4], "big") & 0x7FFFFFFF


def sample_seed(base_seed: int, index: int, spec: gd.TopologySpec, lock_noise: bool) -> int:
    if lock_noise:
        return base_seed + index
    return base_seed + index + spec_noise_key(spec)
