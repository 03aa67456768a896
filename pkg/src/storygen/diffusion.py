"""Noise schedule, forward corruption, eps-prediction loss, and DDIM sampling.

The forward closed form is z_t = sqrt(alpha_bar[t]) * z0 + sqrt(1 - alpha_bar[t]) * eps,
the unique choice under which the one-shot clean-latent estimate

    z0_tilde = (z_t - sqrt(1 - alpha_bar[t]) * eps_pred) / sqrt(alpha_bar[t])

is an exact algebraic inverse when eps_pred equals the sampled noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DomainError
from .tensor import Tensor

ALPHA_BAR_FLOOR = 1e-8


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance schedule; arrays are indexed 1..T, index 0 is the
    clean boundary (beta[0]=0, alpha_bar[0]=1, sigma[0]=0)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def check_t(self, t: np.ndarray | int) -> np.ndarray:
        t = np.asarray(t, dtype=np.intp)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ContractError(f"timestep out of range [1,{self.T}]: {t}")
        return t


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with derived alpha, alpha_bar, sigma arrays."""
    if T < 2:
        raise ConfigError(f"schedule needs T >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"betas must satisfy 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.zeros(T + 1)
    beta[1:] = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def _coeffs(sched: NoiseSchedule, t: np.ndarray, ndim: int) -> tuple[np.ndarray, np.ndarray]:
    """Broadcastable sqrt(alpha_bar[t]) and sqrt(1-alpha_bar[t]) for a batch of t."""
    ab = sched.alpha_bar[t]
    shape = (-1,) + (1,) * (ndim - 1)
    return np.sqrt(ab).reshape(shape), np.sqrt(1.0 - ab).reshape(shape)


def q_sample(z0: Union[Tensor, np.ndarray], t: np.ndarray | int,
             eps: Union[Tensor, np.ndarray], sched: NoiseSchedule) -> Tensor:
    """Corrupt clean latents z0[B,...] to timestep t with the given noise."""
    z0 = z0 if isinstance(z0, Tensor) else Tensor(z0)
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if z0.shape != eps.shape:
        raise ContractError(f"z0 shape {z0.shape} != eps shape {eps.shape}")
    t = sched.check_t(np.broadcast_to(np.asarray(t, dtype=np.intp), (z0.shape[0],)))
    a, b = _coeffs(sched, t, z0.data.ndim)
    return z0 * Tensor(a) + eps * Tensor(b)


def estimate_z0(z_t: Union[Tensor, np.ndarray], eps_pred: Union[Tensor, np.ndarray],
                t: np.ndarray | int, sched: NoiseSchedule) -> Tensor:
    """One-shot clean-latent estimate from a noisy latent and predicted noise."""
    z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    eps_pred = eps_pred if isinstance(eps_pred, Tensor) else Tensor(eps_pred)
    if z_t.shape != eps_pred.shape:
        raise ContractError(f"z_t shape {z_t.shape} != eps_pred shape {eps_pred.shape}")
    t = sched.check_t(np.broadcast_to(np.asarray(t, dtype=np.intp), (z_t.shape[0],)))
    ab = sched.alpha_bar[t]
    if np.any(ab < ALPHA_BAR_FLOOR):
        raise DomainError(f"alpha_bar below {ALPHA_BAR_FLOOR} at t={t[np.argmin(ab)]}")
    a, b = _coeffs(sched, t, z_t.data.ndim)
    return (z_t - eps_pred * Tensor(b)) * Tensor(1.0 / a)


def mse_loss(eps_pred: Tensor, eps: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean of squared componentwise differences over every element."""
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if eps_pred.shape != eps.shape:
        raise ContractError(f"shape mismatch: {eps_pred.shape} vs {eps.shape}")
    d = eps_pred - eps
    return T.mean(d * d)


def cfg_combine(eps_uncond: Union[Tensor, np.ndarray], eps_cond: Union[Tensor, np.ndarray],
                scale: float) -> Tensor:
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    eps_uncond = eps_uncond if isinstance(eps_uncond, Tensor) else Tensor(eps_uncond)
    eps_cond = eps_cond if isinstance(eps_cond, Tensor) else Tensor(eps_cond)
    if eps_uncond.shape != eps_cond.shape:
        raise ContractError(
            f"shape mismatch: {eps_uncond.shape} vs {eps_cond.shape}")
    if scale < 1.0:
        raise ContractError(f"guidance scale must be >= 1, got {scale}")
    return eps_uncond + (eps_cond - eps_uncond) * scale


def ddim_timesteps(T_total: int, steps: int) -> np.ndarray:
    """Evenly subsampled descending timesteps in [1, T]."""
    if steps > T_total:
        raise ConfigError(f"steps={steps} exceeds schedule length T={T_total}")
    ts = np.unique(np.linspace(1, T_total, steps).round().astype(np.intp))
    return ts[::-1]


def ddim_sample(denoiser: Callable[[np.ndarray, np.ndarray], np.ndarray],
                sched: NoiseSchedule,
                shape: tuple[int, ...],
                steps: int = 50,
                rng: Optional[np.random.Generator] = None,
                z_init: Optional[np.ndarray] = None,
                clip_z0: bool = True) -> np.ndarray:
    """Deterministic DDIM (eta=0) trajectory from z_T down to a clean latent.

    ``denoiser(z_t, t)`` returns the (already guidance-combined) noise
    prediction for a batch at a shared timestep; guidance and conditioning are
    the caller's business so this loop stays a pure function of its inputs.
    ``clip_z0`` clamps the running clean estimate to the codec's [-1, 1]
    latent range at every step.
    """
    ts = ddim_timesteps(sched.T, steps)
    if z_init is not None:
        z = np.asarray(z_init, dtype=np.float64).copy()
        if z.shape != shape:
            raise ContractError(f"z_init shape {z.shape} != requested {shape}")
    else:
        if rng is None:
            raise ContractError("ddim_sample needs either rng or z_init")
        z = rng.standard_normal(shape)
    B = shape[0]
    for i, t in enumerate(ts):
        tb = np.full(B, t, dtype=np.intp)
        eps = np.asarray(denoiser(z, tb), dtype=np.float64)
        if eps.shape != z.shape:
            raise ContractError(f"denoiser returned shape {eps.shape}, expected {z.shape}")
        z0 = estimate_z0(z, eps, tb, sched).data
        if clip_z0:
            z0 = np.clip(z0, -1.0, 1.0)
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        ab_prev = sched.alpha_bar[t_prev]
        z = np.sqrt(ab_prev) * z0 + np.sqrt(1.0 - ab_prev) * eps
    return z
