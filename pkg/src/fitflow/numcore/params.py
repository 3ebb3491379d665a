"""Named parameter storage and the Adam(W) update rule."""

from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from ..errors import ContractError, DimensionError, TrainingError
from .tensor import Tensor


class ParamStore:
    """Named trainable tensors plus their per-parameter Adam state.

    Names are dotted paths (``"decoder.l1.weight"``); freezing works on name
    prefixes so whole sub-models can be excluded from an optimisation stage.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}
        self._frozen: set[str] = set()

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        self.steps[name] = 0
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def tensors(self, prefix: str = "") -> list[Tensor]:
        return [self._params[n] for n in self.names(prefix)]

    def freeze(self, prefix: str = "") -> None:
        self._frozen.update(self.names(prefix))

    def unfreeze(self, prefix: str = "") -> None:
        self._frozen.difference_update(self.names(prefix))

    def is_frozen(self, name: str) -> bool:
        return name in self._frozen

    def trainable(self, prefix: str = "") -> list[str]:
        return [n for n in self.names(prefix) if n not in self._frozen]

    def n_values(self) -> int:
        return sum(t.size for t in self._params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._params) - set(state)
            extra = set(state) - set(self._params)
            if missing or extra:
                raise ContractError(f"state mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            if name not in self._params:
                continue
            t = self._params[name]
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def reset_optimizer(self) -> None:
        for name, t in self._params.items():
            self.m[name] = np.zeros_like(t.data)
            self.v[name] = np.zeros_like(t.data)
            self.steps[name] = 0


def adam_update(
    store: ParamStore,
    grads: Mapping[str, np.ndarray],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """Apply one bias-corrected Adam step in place to every non-frozen parameter in ``grads``.

    ``weight_decay`` is decoupled (AdamW); at 0 the update is plain Adam.
    """
    for name, g in grads.items():
        if store.is_frozen(name):
            continue
        p = store[name]
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")
        m = store.m[name] = beta1 * store.m[name] + (1.0 - beta1) * g
        v = store.v[name] = beta2 * store.v[name] + (1.0 - beta2) * g * g
        step = store.steps[name] = store.steps[name] + 1
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        if weight_decay:
            p.data = p.data * (1.0 - lr * weight_decay)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
