"""Two-domain gaze data: synthetic rendering, domain shift, manifests and batching."""

from .gaze import sample_gaze, sample_gazes
from .generate import generate_dataset, generator_config, render_split
from .io import (Batch, DatasetManifest, GazeDataset, GazeSample, ManifestRecord,
                 convert_external_metadata, iterate_batches, load_dataset, preprocess,
                 read_manifest, write_manifest)
from .render import PROJECTION_C, EyeStyle, generate_synthetic_eye, iris_center, sample_style
from .shift import DomainShiftConfig, apply_domain_shift

__all__ = [
    "Batch", "DatasetManifest", "DomainShiftConfig", "EyeStyle", "GazeDataset", "GazeSample",
    "ManifestRecord", "PROJECTION_C", "apply_domain_shift", "convert_external_metadata",
    "generate_dataset", "generate_synthetic_eye", "generator_config", "iris_center",
    "iterate_batches", "load_dataset", "preprocess", "read_manifest", "render_split",
    "sample_gaze", "sample_gazes", "sample_style", "write_manifest",
]
