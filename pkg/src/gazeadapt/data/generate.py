"""Two-domain dataset generation driven by a flat key-value config.

Generator config keys (all optional; unknown keys are rejected):

    ==================  =======  ===============================================
    key                 default  meaning
    ==================  =======  ===============================================
    seed                0        master seed for gazes, styles and textures
    polar_range         25.0     max angle between gaze and optical axis (deg)
    azimuth_range       60.0     max in-image gaze direction from horizontal (deg)
    source.train        20000    labelled source training samples
    source.val          2000     labelled source validation samples
    source.test         0        labelled source test samples
    target.train        5000     unlabelled target samples (labels not written)
    target.test         2000     labelled target test samples
    shift.brightness    0.0      additive brightness of the target domain
    shift.contrast      0.6      contrast gain of the target domain
    shift.gamma         1.0      gamma applied on the [0, 1] remap
    shift.blur          1.0      Gaussian blur sigma (px)
    shift.noise         0.05     additive Gaussian noise sigma
    shift.seed          1        seed of the per-sample noise streams
    ==================  =======  ===============================================
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .. import config as cfgmod
from .gaze import sample_gazes
from .io import ManifestRecord, save_png, write_manifest
from .render import generate_synthetic_eye, sample_style
from .shift import DomainShiftConfig, apply_domain_shift

GENERATOR_SCHEMA = {
    "seed": int, "polar_range": float, "azimuth_range": float,
    "source.train": int, "source.val": int, "source.test": int,
    "target.train": int, "target.test": int,
    "shift.brightness": float, "shift.contrast": float, "shift.gamma": float,
    "shift.blur": float, "shift.noise": float, "shift.seed": int,
}
GENERATOR_DEFAULTS = {
    "seed": 0, "polar_range": 25.0, "azimuth_range": 60.0,
    "source.train": 20000, "source.val": 2000, "source.test": 0,
    "target.train": 5000, "target.test": 2000,
    "shift.brightness": 0.0, "shift.contrast": 0.6, "shift.gamma": 1.0,
    "shift.blur": 1.0, "shift.noise": 0.05, "shift.seed": 1,
}
_PARTS = (("source", "train"), ("source", "val"), ("source", "test"),
          ("target", "train"), ("target", "test"))


def generator_config(values=None, path=None) -> dict:
    raw = {}
    if path is not None:
        raw.update(cfgmod.load_file(path))
    raw.update({k: str(v) for k, v in (values or {}).items()})
    return cfgmod.coerce(raw, GENERATOR_SCHEMA, GENERATOR_DEFAULTS)


def shift_from_config(cfg: dict) -> DomainShiftConfig:
    return DomainShiftConfig(cfg["shift.brightness"], cfg["shift.contrast"], cfg["shift.blur"],
                             cfg["shift.noise"], cfg["shift.gamma"], cfg["shift.seed"])


def render_split(n: int, seed, polar_range: float, azimuth_range: float,
                 shift: DomainShiftConfig | None = None):
    """Render ``n`` eyes; returns (images float64 (n, 35, 55), gazes (n, 3))."""
    rng = np.random.default_rng(seed)
    gazes = sample_gazes(rng, n, polar_range, azimuth_range)
    images = np.empty((n, 35, 55))
    for i in range(n):
        style = sample_style(rng)
        tex_seed = int(rng.integers(2**63 - 1))
        img = generate_synthetic_eye(gazes[i], style, tex_seed)
        if shift is not None:
            img = apply_domain_shift(img, shift.for_sample(i))
        images[i] = img
    return images, gazes


def generate_dataset(cfg: dict, out_dir) -> Path:
    """Write PNGs under ``out_dir/images`` and ``out_dir/manifest.csv``."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    shift = shift_from_config(cfg)
    rows = []
    for part_idx, (domain, split) in enumerate(_PARTS):
        n = cfg[f"{domain}.{split}"]
        if n <= 0:
            continue
        part_shift = None
        if domain == "target":
            part_shift = DomainShiftConfig(**{**shift.__dict__, "seed": shift.seed * 1000 + part_idx})
        images, gazes = render_split(n, [cfg["seed"], part_idx], cfg["polar_range"],
                                     cfg["azimuth_range"], part_shift)
        keep_labels = not (domain == "target" and split == "train")
        for i in range(n):
            rel = f"images/{domain}_{split}_{i:06d}.png"
            save_png(images[i], out_dir / rel)
            gaze = tuple(float(v) for v in gazes[i]) if keep_labels else None
            rows.append((ManifestRecord(rel, gaze, domain), split))
    write_manifest(out_dir / "manifest.csv", rows)
    (out_dir / "generator.cfg").write_text(cfgmod.dump_text(cfg))
    return out_dir / "manifest.csv"


