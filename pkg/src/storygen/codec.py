"""Deterministic invertible pixel <-> latent codec.

Space-to-depth with block size 2 turns a [3,H,W] image into a [12,H/2,W/2]
latent, then an affine map x -> 2x - 1 centers values in [-1, 1]. Latent
channel c*4 + dy*2 + dx holds pixel channel c at block offset (dy, dx).
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError

BLOCK = 2
LATENT_CHANNELS = 3 * BLOCK * BLOCK


def encode(img: np.ndarray) -> np.ndarray:
    """[3,H,W] pixels in [0,1] -> [12,H/2,W/2] latent in [-1,1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3 or img.shape[1] % BLOCK or img.shape[2] % BLOCK:
        raise ContractError(f"expected [3,H,W] with even H,W, got {img.shape}")
    _, H, W = img.shape
    h, w = H // BLOCK, W // BLOCK
    lat = img.reshape(3, h, BLOCK, w, BLOCK).transpose(0, 2, 4, 1, 3).reshape(LATENT_CHANNELS, h, w)
    return 2.0 * lat - 1.0


def decode(lat: np.ndarray) -> np.ndarray:
    """[12,h,w] latent -> [3,2h,2w] pixels clamped to [0,1]."""
    lat = np.asarray(lat, dtype=np.float64)
    if lat.ndim != 3 or lat.shape[0] != LATENT_CHANNELS:
        raise ContractError(f"expected [{LATENT_CHANNELS},h,w] latent, got {lat.shape}")
    _, h, w = lat.shape
    img = (lat + 1.0) / 2.0
    img = img.reshape(3, BLOCK, BLOCK, h, w).transpose(0, 3, 1, 4, 2).reshape(3, h * BLOCK, w * BLOCK)
    return np.clip(img, 0.0, 1.0)


def encode_batch(imgs: np.ndarray) -> np.ndarray:
    """[B,3,H,W] -> [B,12,H/2,W/2]."""
    imgs = np.asarray(imgs, dtype=np.float64)
    if imgs.ndim != 4:
        raise ContractError(f"expected [B,3,H,W], got {imgs.shape}")
    B, _, H, W = imgs.shape
    h, w = H // BLOCK, W // BLOCK
    lat = imgs.reshape(B, 3, h, BLOCK, w, BLOCK).transpose(0, 1, 3, 5, 2, 4)
    return 2.0 * lat.reshape(B, LATENT_CHANNELS, h, w) - 1.0


def decode_batch(lats: np.ndarray) -> np.ndarray:
    """[B,12,h,w] -> [B,3,2h,2w] clamped to [0,1]."""
    lats = np.asarray(lats, dtype=np.float64)
    if lats.ndim != 4 or lats.shape[1] != LATENT_CHANNELS:
        raise ContractError(f"expected [B,{LATENT_CHANNELS},h,w], got {lats.shape}")
    B, _, h, w = lats.shape
    img = (lats + 1.0) / 2.0
    img = img.reshape(B, 3, BLOCK, BLOCK, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.clip(img.reshape(B, 3, h * BLOCK, w * BLOCK), 0.0, 1.0)
