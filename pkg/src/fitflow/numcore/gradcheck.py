"""Central-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .params import ParamStore
from .tensor import Tape, Tensor


def finite_diff_check(
    f: Callable[[], Tensor],
    params: ParamStore | Sequence[Tensor],
    h: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error for one entry is ``|analytic - numeric| / max(1, |numeric|)``.
    ``f`` must be deterministic for fixed parameter values. With
    ``max_entries`` set, at most that many randomly chosen entries per
    parameter tensor are probed. Non-finite comparisons return ``inf``.
    """
    tensors = params.tensors() if isinstance(params, ParamStore) else list(params)
    with Tape() as tape:
        loss = f()
    analytic = tape.gradient(loss, tensors)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            err = abs(g.reshape(-1)[i] - num) / max(1.0, abs(num))
            if not np.isfinite(err):
                return float("inf")
            worst = max(worst, float(err))
    return worst
