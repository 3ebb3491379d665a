"""Small layer helpers that register their parameters in a ParamStore."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import Tensor


class Linear:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, rng, *, zero: bool = False):
        w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, np.sqrt(2.0 / (n_in + n_out)), (n_in, n_out))
        self.weight = store.add(f"{name}.weight", w)
        self.bias = store.add(f"{name}.bias", np.zeros(n_out))

    def __call__(self, x) -> Tensor:
        return T.affine(x, self.weight, self.bias)


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int):
        self.gamma = store.add(f"{name}.gamma", np.ones(dim))
        self.beta = store.add(f"{name}.beta", np.zeros(dim))

    def __call__(self, x) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta)


class Conv1d:
    """Strided 1-D convolution over (batch, length, channels), no padding."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, kernel: int, stride: int, rng):
        scale = np.sqrt(2.0 / (kernel * c_in + c_out))
        self.weight = store.add(f"{name}.weight", rng.normal(0.0, scale, (kernel, c_in, c_out)))
        self.bias = store.add(f"{name}.bias", np.zeros(c_out))
        self.kernel, self.stride = kernel, stride

    def __call__(self, x) -> Tensor:
        k, c_in, c_out = self.weight.shape
        win = T.gather_windows(x, k, self.stride)
        flat = T.reshape(win, win.shape[:-2] + (k * c_in,))
        return T.affine(flat, T.reshape(self.weight, (k * c_in, c_out)), self.bias)


class ConvTranspose1d:
    """Adjoint of :class:`Conv1d`: upsamples length by ``stride``."""

    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, kernel: int, stride: int, rng):
        scale = np.sqrt(2.0 / (c_in + kernel * c_out))
        self.weight = store.add(f"{name}.weight", rng.normal(0.0, scale, (kernel, c_in, c_out)))
        self.bias = store.add(f"{name}.bias", np.zeros(c_out))
        self.kernel, self.stride = kernel, stride

    def __call__(self, x) -> Tensor:
        k, c_in, c_out = self.weight.shape
        w = T.reshape(T.transpose(self.weight, (1, 0, 2)), (c_in, k * c_out))
        y = T.matmul(x, w)
        y = T.reshape(y, y.shape[:-1] + (k, c_out))
        return T.add(T.scatter_windows(y, self.stride), self.bias)


class SelfAttention:
    """Single-head scaled dot-product self-attention over the length axis."""

    def __init__(self, store: ParamStore, name: str, dim: int, rng):
        self.q = Linear(store, f"{name}.q", dim, dim, rng)
        self.k = Linear(store, f"{name}.k", dim, dim, rng)
        self.v = Linear(store, f"{name}.v", dim, dim, rng)
        self.o = Linear(store, f"{name}.o", dim, dim, rng)
        self.scale = 1.0 / np.sqrt(dim)

    def __call__(self, x) -> Tensor:
        scores = T.mul(T.matmul(self.q(x), T.swap_last(self.k(x))), self.scale)
        return self.o(T.matmul(T.softmax(scores, axis=-1), self.v(x)))


class TransformerBlock:
    """Pre-norm attention + GELU feed-forward, both residual."""

    def __init__(self, store: ParamStore, name: str, dim: int, hidden: int, rng):
        self.ln1 = LayerNorm(store, f"{name}.ln1", dim)
        self.attn = SelfAttention(store, f"{name}.attn", dim, rng)
        self.ln2 = LayerNorm(store, f"{name}.ln2", dim)
        self.ff1 = Linear(store, f"{name}.ff1", dim, hidden, rng)
        self.ff2 = Linear(store, f"{name}.ff2", hidden, dim, rng)

    def __call__(self, x) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x)))
        return T.add(x, self.ff2(T.gelu(self.ff1(self.ln2(x)))))


def sinusoidal_features(positions: np.ndarray, dim: int, max_period: float = 10_000.0) -> np.ndarray:
    """Fixed sin/cos features of shape ``positions.shape + (dim,)``."""
    positions = np.asarray(positions, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half, 1))
    ang = positions[..., None] * freqs
    feats = np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)
    if dim % 2:
        feats = np.concatenate([feats, np.zeros(feats.shape[:-1] + (1,))], axis=-1)
    return feats
