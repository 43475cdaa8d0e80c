from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check, grad_check_params, relative_error
from .optim import EMA, AdamW, cosine_lr
from .tensor import GradTape, Tensor, backward, no_grad, set_finite_checks

__all__ = [
    "AdamW", "EMA", "GradTape", "Tensor", "backward", "grad_check", "grad_check_params", "load_checkpoint",
    "nn", "no_grad", "relative_error", "cosine_lr", "save_checkpoint", "set_finite_checks",
]
