"""Composed inference, evaluation reports and summary statistics."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..data.io import DatasetManifest, GazeDataset, load_dataset
from ..errors import CompositionError, EvaluationError, GazeDomainError
from ..nets import FEATURE_LAYERS, GazeRegressor
from ..objectives import angular_error_degrees
from .checkpoint import Checkpoint
from .stages import predict, regressor_from_checkpoint


class Predictor:
    """Feature block of one network followed by the regression block of another."""

    def __init__(self, net: GazeRegressor, fingerprint: str, stage: str):
        self.net = net.eval()
        self.fingerprint = fingerprint
        self.stage = stage

    def __call__(self, images) -> np.ndarray:
        images = images.numpy() if isinstance(images, torch.Tensor) else np.asarray(images)
        if images.ndim == 2:
            images = images[None]
        return predict(self.net, images)


def compose_inference(target_ckpt: Checkpoint, source_ckpt: Checkpoint) -> Predictor:
    """Target feature layers (C1..FC1) + source regression layers (FC2, FC3)."""
    if target_ckpt.fingerprint != source_ckpt.fingerprint:
        raise CompositionError(
            f"architecture mismatch: target {target_ckpt.fingerprint} vs source {source_ckpt.fingerprint}")
    target = target_ckpt.group("target" if target_ckpt.has("target") else "regressor")
    features = {k: v for k, v in target.items() if k.split(".", 1)[0] in FEATURE_LAYERS}
    net = regressor_from_checkpoint(source_ckpt, override=features)
    net.freeze()
    return Predictor(net, source_ckpt.fingerprint, target_ckpt.stage)


def source_predictor(source_ckpt: Checkpoint) -> Predictor:
    return Predictor(regressor_from_checkpoint(source_ckpt).freeze(), source_ckpt.fingerprint,
                     source_ckpt.stage)


@dataclass
class EvalReport:
    mean_error: float
    errors: list[float]
    n: int
    fingerprint: str = ""
    stage: str = ""
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n")
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def report_from_errors(errors, fingerprint="", stage="", **extra) -> EvalReport:
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size == 0:
        raise EvaluationError("no samples to evaluate")
    return EvalReport(float(errors.mean()), errors.tolist(), int(errors.size), fingerprint, stage,
                      extra)


def evaluate(predictor, data, stage: str | None = None) -> EvalReport:
    """Per-sample angular errors of ``predictor`` on labelled ``data``."""
    if isinstance(data, DatasetManifest):
        if not data.labeled:
            raise EvaluationError("evaluation requires a fully labelled manifest")
        data = load_dataset(data)
    if not isinstance(data, GazeDataset) or not data.labeled:
        raise EvaluationError("evaluation requires labelled data")
    errors = angular_error_degrees(predictor(data.images), data.gazes)
    return report_from_errors(errors, getattr(predictor, "fingerprint", ""),
                              stage if stage is not None else getattr(predictor, "stage", ""))


def relative_improvement(pre: float, post: float) -> float:
    """(pre - post) / pre."""
    if not pre > 0:
        raise GazeDomainError(f"pre-adaptation error must be > 0, got {pre}")
    return (pre - post) / pre
