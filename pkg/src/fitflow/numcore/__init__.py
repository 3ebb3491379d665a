"""Minimal float64 tensor numerics with reverse-mode gradients."""

from . import tensor as ops
from .checkpoint import dumps_checkpoint, load_checkpoint, loads_checkpoint, save_checkpoint
from .gradcheck import finite_diff_check
from .params import ParamStore, adam_update
from .train import value_and_grad, warmup_lr
from .tensor import Tape, Tensor, affine, as_tensor

__all__ = [
    "ParamStore",
    "Tape",
    "Tensor",
    "adam_update",
    "affine",
    "as_tensor",
    "dumps_checkpoint",
    "finite_diff_check",
    "load_checkpoint",
    "loads_checkpoint",
    "ops",
    "save_checkpoint",
    "value_and_grad",
    "warmup_lr",
]
