"""Source training, adversarial adaptation, composed inference and checkpoints."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint, tensor_digest
from .inference import (EvalReport, Predictor, compose_inference, evaluate, relative_improvement,
                        source_predictor)
from .stages import (AdaptResult, SourceResult, StageConfig, adapt_target, heldout_domain_accuracy,
                     regressor_from_checkpoint, train_grl, train_source)

__all__ = [
    "AdaptResult", "Checkpoint", "EvalReport", "Predictor", "SourceResult", "StageConfig",
    "adapt_target", "compose_inference", "evaluate", "heldout_domain_accuracy", "load_checkpoint",
    "regressor_from_checkpoint", "relative_improvement", "save_checkpoint", "source_predictor",
    "tensor_digest", "train_grl", "train_source",
]
