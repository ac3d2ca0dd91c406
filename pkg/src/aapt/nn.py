"""Small layer primitives shared by the codec and the transformer backbone."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import DTYPE, Tensor


def he_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


def lecun_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)).astype(DTYPE)


class Linear:
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, scale: float | None = None):
        std = scale if scale is not None else np.sqrt(1.0 / d_in)
        self.w = Tensor.param(rng.standard_normal((d_in, d_out)).astype(DTYPE) * DTYPE(std))
        self.b = Tensor.param(np.zeros(d_out, dtype=DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w) + self.b

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNorm:
    def __init__(self, dim: int):
        self.g = Tensor.param(np.ones(dim, dtype=DTYPE))
        self.b = Tensor.param(np.zeros(dim, dtype=DTYPE))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.g, self.b)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.g": self.g, f"{prefix}.b": self.b}


class Conv2d:
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, k: int = 3, stride: int = 1, pad: int | None = None):
        fan_in = c_in * k * k
        self.w = Tensor.param(he_init(rng, (c_out, c_in, k, k), fan_in))
        self.b = Tensor.param(np.zeros(c_out, dtype=DTYPE))
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 1e4) -> np.ndarray:
    """Classic sin/cos features of a [B] scalar array -> [B, dim] constants."""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half).astype(DTYPE)
    args = np.asarray(t, dtype=DTYPE).reshape(-1, 1) * freqs.reshape(1, -1)
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(DTYPE)


def load_params(params: dict[str, Tensor], values: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into an existing parameter dict, shape-checked."""
    missing = set(params) - set(values)
    if missing:
        raise KeyError(f"checkpoint missing parameters: {sorted(missing)[:4]}...")
    for k, p in params.items():
        v = values[k]
        if tuple(v.shape) != tuple(p.shape):
            raise ValueError(f"shape mismatch for {k}: {v.shape} vs {p.shape}")
        p.data = v.astype(DTYPE).copy()


def clone_values(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}
