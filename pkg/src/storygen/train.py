"""Pretraining: eps-prediction over random (story, frame, t) draws.

Histories are teacher-forced (ground-truth previous frames); with probability
``dropout`` the condition is replaced by the learned null embedding so the
sampler's unconditional branch gets trained.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import codec
from .benchmark import BenchmarkSplits, check_leakage
from .config import PretrainConfig
from .diffusion import mse_loss, q_sample
from .errors import ContractError
from .model import StoryModel
from .optim import Adam
from .story_types import STORY_LEN, Story
from .tensor import Tensor, tape


def stories_to_arrays(stories: list[Story]) -> tuple[np.ndarray, list]:
    frames = np.stack([np.stack(s.frames, axis=0) for s in stories], axis=0)
    captions = [s.captions for s in stories]
    return frames, captions


def smoothed(curve: np.ndarray, window: int = 50) -> np.ndarray:
    curve = np.asarray(curve, dtype=np.float64)
    if curve.size < window:
        window = max(1, curve.size)
    kernel = np.ones(window) / window
    return np.convolve(curve, kernel, mode="valid")


def train_step(model: StoryModel, opt: Adam, frames: np.ndarray, captions: list,
               idx: np.ndarray, fidx: np.ndarray, rng: np.random.Generator,
               dropout: float) -> float:
    B = len(idx)
    t = rng.integers(1, model.sched.T + 1, size=B)
    batch_frames = frames[idx, fidx]
    z0 = codec.encode_batch(batch_frames)
    eps = rng.standard_normal(z0.shape)
    null_mask = rng.random(B) < dropout
    caps = [captions[s] for s in idx]
    histories = [frames[s, :f] for s, f in zip(idx, fidx)]
    with tape() as tp:
        z_t = q_sample(z0, t, eps, model.sched)
        s = model.condition(caps, fidx, histories, null_mask)
        eps_pred = model.denoise(z_t, s, t)
        loss = mse_loss(eps_pred, Tensor(eps))
        tp.backward(loss)
    opt.step()
    opt.zero_grad()
    model.step += 1
    return loss.item()


def pretrain(model: StoryModel, splits: BenchmarkSplits,
             cfg: Optional[PretrainConfig] = None, seed: int = 0,
             opt_state: Optional[dict] = None,
             on_step: Optional[Callable[[int, float], None]] = None) -> np.ndarray:
    """Train on the pretrain split; returns the per-step loss curve.

    Refuses to run if the split leaks any held-out character.
    """
    cfg = cfg or PretrainConfig()
    new_specs = {cid: splits.roster[cid] for cid in splits.new_ids}
    report = check_leakage(splits.pretrain, new_specs)
    if not report.clean:
        raise ContractError(
            f"refusing to pretrain: split leaks held-out characters "
            f"({len(report.violations)} violations)")
    frames, captions = stories_to_arrays(splits.pretrain)
    n_samples = len(splits.pretrain) * STORY_LEN
    opt = Adam(model.params, lr=cfg.lr)
    if opt_state:
        opt.state = opt_state
    rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
    losses: list[float] = []
    steps_per_epoch = max(1, n_samples // cfg.batch)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n_samples)
        for k in range(steps_per_epoch):
            sel = order[k * cfg.batch:(k + 1) * cfg.batch]
            if len(sel) < 1:
                continue
            idx, fidx = sel // STORY_LEN, sel % STORY_LEN
            loss = train_step(model, opt, frames, captions, idx, fidx, rng, cfg.dropout)
            losses.append(loss)
            if on_step is not None:
                on_step(model.step, loss)
    model._last_opt_state = opt.state  # kept for checkpoint resume
    return np.asarray(losses)
