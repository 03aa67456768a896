"""Small layer helpers built on the tensor ops.

Layers are plain functions over parameter dicts; parameters live in a flat
``dict[str, Tensor]`` keyed by a path like ``"unet.down1.conv.w"`` so the
checkpoint format and the optimizers can address them uniformly.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor

EPS_NORM = 1e-5


def init_conv(rng: np.random.Generator, out_ch: int, in_ch: int, k: int,
              gain: float = 1.0) -> np.ndarray:
    fan_in = in_ch * k * k
    std = gain / np.sqrt(fan_in)
    return rng.normal(0.0, std, size=(out_ch, in_ch, k, k))


def init_linear(rng: np.random.Generator, in_dim: int, out_dim: int,
                gain: float = 1.0) -> np.ndarray:
    std = gain / np.sqrt(in_dim)
    return rng.normal(0.0, std, size=(in_dim, out_dim))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x[B,d_in] @ w[d_in,d_out] + b[d_out]."""
    return T.matmul(x, w) + b


def avgpool2x(x: Tensor) -> Tensor:
    """2x2 average pooling via reshape + mean; halves both spatial dims.

    Used for downsampling everywhere: stride-2 convolution with an odd kernel
    cannot produce an exact-division output size on even inputs.
    """
    B, C, H, W = x.shape
    return T.mean(T.reshape(x, (B, C, H // 2, 2, W // 2, 2)), axis=(3, 5))


def group_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Group normalization with a single group (layer norm over C,H,W).

    gamma and beta are per-channel, shaped [C,1,1]. Composed from primitive
    ops so the backward pass comes from the tape.
    """
    m = T.mean(x, axis=(1, 2, 3), keepdims=True)
    centered = x - m
    var = T.mean(centered * centered, axis=(1, 2, 3), keepdims=True)
    normed = centered / T.sqrt(var + EPS_NORM)
    return normed * gamma + beta


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Standard sin/cos position features for integer timesteps t[B] -> [B,dim]."""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)
