from .checkpoint import Checkpoint, capture, load_checkpoint, restore_model, save_checkpoint
from .model import (
    Batch,
    HeadSpec,
    RobertaEncoder,
    TaskModel,
    count_parameters,
    forward,
    head_sequence_classify,
    head_token_classify,
    mlm_logits,
    parameter_manifest,
)

__all__ = [
    "Batch",
    "Checkpoint",
    "HeadSpec",
    "RobertaEncoder",
    "TaskModel",
    "capture",
    "count_parameters",
    "forward",
    "head_sequence_classify",
    "head_token_classify",
    "load_checkpoint",
    "mlm_logits",
    "parameter_manifest",
    "restore_model",
    "save_checkpoint",
]
