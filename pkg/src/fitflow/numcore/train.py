"""Glue for one optimisation step: loss + gradients for the trainable subset."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from ..errors import TrainingError
from .params import ParamStore
from .tensor import Tape, Tensor


def value_and_grad(
    store: ParamStore, loss_fn: Callable[[], Tensor], names: Sequence[str] | None = None
) -> tuple[float, dict[str, np.ndarray]]:
    names = list(store.trainable()) if names is None else list(names)
    with Tape() as tape:
        loss = loss_fn()
    value = loss.item()
    if not np.isfinite(value):
        raise TrainingError(f"non-finite loss {value}")
    grads = tape.gradient(loss, [store[n] for n in names])
    return value, dict(zip(names, grads))


def warmup_lr(base_lr: float, step: int, warmup: int) -> float:
    """Linear warm-up from ``base_lr / warmup`` to ``base_lr`` over ``warmup`` steps."""
    if warmup <= 0 or step >= warmup:
        return base_lr
    return base_lr * (step + 1) / warmup
