from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .functional import attention, attention_tiled, rope_apply
from .model import (
    AttentionMode,
    ModelConfig,
    Precision,
    backward,
    encoder_forward,
    init_params,
    loss_and_grads,
    mlm_loss,
)
from .optim import AdamState, adam_step, lr_at

__all__ = [
    "AdamState", "AttentionMode", "Checkpoint", "ModelConfig", "Precision",
    "adam_step", "attention", "attention_tiled", "backward", "encoder_forward",
    "init_params", "load_checkpoint", "lr_at", "mlm_loss", "rope_apply", "save_checkpoint",
]
