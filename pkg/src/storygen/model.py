"""Story-conditioned noise-prediction model.

Conditioning for the i-th frame fuses (a) the mean encoding of all five
captions, (b) the encoding of caption i, and (c) a mean-pooled conv encoding
of the frames that precede i, so every frame is generated from the whole
prompt set plus its history. The denoiser is a small U-net over the 12x16x16
latent with per-block conditioning biases; an unconditional pathway through a
learned null embedding supports classifier-free guidance.
"""

from __future__ import annotations

import warnings
from typing import Optional, Sequence

import numpy as np

from . import codec, nn
from . import tensor as T
from .checkpoint import load_params, save_params
from .config import DiffusionConfig, ModelConfig
from .diffusion import NoiseSchedule, cfg_combine, ddim_sample, make_schedule
from .errors import ContractError
from .story_types import STORY_LEN, Caption
from .tensor import Tensor

MAX_CHARS_PER_FRAME = 2


def _conv(p: dict, rng, name: str, out_ch: int, in_ch: int, k: int = 3,
          gain: float = 1.0, zero: bool = False) -> None:
    w = np.zeros((out_ch, in_ch, k, k)) if zero else nn.init_conv(rng, out_ch, in_ch, k, gain)
    p[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
    p[f"{name}.b"] = Tensor(np.zeros((out_ch, 1, 1)), requires_grad=True, name=f"{name}.b")


def _linear(p: dict, rng, name: str, d_in: int, d_out: int, gain: float = 1.0,
            zero: bool = False) -> None:
    w = np.zeros((d_in, d_out)) if zero else nn.init_linear(rng, d_in, d_out, gain)
    p[f"{name}.w"] = Tensor(w, requires_grad=True, name=f"{name}.w")
    p[f"{name}.b"] = Tensor(np.zeros(d_out), requires_grad=True, name=f"{name}.b")


def _gn(p: dict, name: str, ch: int) -> None:
    p[f"{name}.gamma"] = Tensor(np.ones((ch, 1, 1)), requires_grad=True, name=f"{name}.gamma")
    p[f"{name}.beta"] = Tensor(np.zeros((ch, 1, 1)), requires_grad=True, name=f"{name}.beta")


def build_params(cfg: ModelConfig, T_steps: int, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, dt = cfg.d_cond, cfg.d_time
    base = cfg.unet_base
    c_lat = cfg.latent_channels
    p: dict[str, Tensor] = {}

    def emb(name: str, rows: int) -> None:
        p[name] = Tensor(rng.normal(0.0, 0.5, size=(rows, d)), requires_grad=True, name=name)

    emb("emb.char_existing", cfg.n_existing)
    emb("emb.char_new", cfg.n_characters - cfg.n_existing)
    emb("emb.action", cfg.n_actions)
    emb("emb.background", cfg.n_backgrounds)
    emb("emb.frame_pos", STORY_LEN)
    emb("emb.start", 1)
    emb("emb.null", 1)

    hw = cfg.history_width
    _conv(p, rng, "hist.conv1", hw, 3)
    _conv(p, rng, "hist.conv2", hw * 2, hw)
    _conv(p, rng, "hist.conv3", hw * 4, hw * 2)
    _linear(p, rng, "hist.proj", hw * 4, d)

    _linear(p, rng, "fuse.l1", 3 * d, 2 * d)
    _linear(p, rng, "fuse.l2", 2 * d, d)

    table = nn.sinusoidal_embedding(np.arange(T_steps + 1), dt)
    p["time.table"] = Tensor(table, requires_grad=True, name="time.table")

    dc = d + dt
    widths = (base, base * 2, base * 4)
    _conv(p, rng, "unet.stem", widths[0], c_lat)
    for name, ch in (("enc1", widths[0]), ("enc2", widths[1]),
                     ("mid1", widths[2]), ("mid2", widths[2]),
                     ("dec1", widths[1]), ("dec2", widths[0])):
        _gn(p, f"unet.{name}.gn", ch)
        _conv(p, rng, f"unet.{name}.conv", ch, ch)
        _linear(p, rng, f"unet.{name}.cond", dc, ch, zero=True)
    _conv(p, rng, "unet.down1", widths[1], widths[0])
    _conv(p, rng, "unet.down2", widths[2], widths[1])
    _conv(p, rng, "unet.up1", widths[1], widths[2] + widths[1], k=1)
    _conv(p, rng, "unet.up2", widths[0], widths[1] + widths[0], k=1)
    _gn(p, "unet.head.gn", widths[0])
    _conv(p, rng, "unet.head", c_lat, widths[0], zero=True)
    return p


class StoryModel:
    """Parameters plus the forward passes for conditioning and denoising."""

    def __init__(self, cfg: ModelConfig, diff: DiffusionConfig, seed: int = 0,
                 params: Optional[dict[str, Tensor]] = None) -> None:
        self.cfg = cfg
        self.diff = diff
        self.sched: NoiseSchedule = make_schedule(diff.timesteps, diff.beta_start, diff.beta_end)
        self.params = params if params is not None else build_params(cfg, diff.timesteps, seed)
        self.step = 0
        self.chunk = 64  # max samples per denoiser forward at sampling time

    # -- persistence -----------------------------------------------------------
    def save(self, path, extra_meta: Optional[dict] = None) -> None:
        meta = {"model": vars(self.cfg), "diffusion": vars(self.diff), "step": self.step}
        if extra_meta:
            meta.update(extra_meta)
        save_params(path, self.params, meta)

    @classmethod
    def load(cls, path) -> "StoryModel":
        arrays, meta = load_params(path)
        cfg = ModelConfig(**meta["model"])
        diff = DiffusionConfig(**meta["diffusion"])
        model = cls(cfg, diff, params={
            k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})
        model.step = int(meta.get("step", 0))
        return model

    def clone_params(self) -> dict[str, Tensor]:
        return {k: Tensor(v.data.copy(), requires_grad=False, name=k)
                for k, v in self.params.items()}

    # -- caption conditioning ----------------------------------------------------
    def _char_table(self, p: Optional[dict] = None) -> Tensor:
        p = p or self.params
        return T.concat([p["emb.char_existing"], p["emb.char_new"]], axis=0)

    def encode_captions(self, captions: Sequence[Sequence[Caption]],
                        p: Optional[dict] = None) -> Tensor:
        """Encode B x 5 captions -> [B, 5, d] (sum of component embeddings)."""
        p = p or self.params
        B = len(captions)
        for caps in captions:
            if len(caps) != STORY_LEN:
                raise ContractError(f"expected {STORY_LEN} captions, got {len(caps)}")
        ids = np.zeros((B, STORY_LEN, MAX_CHARS_PER_FRAME), dtype=np.intp)
        mask = np.zeros((B, STORY_LEN, MAX_CHARS_PER_FRAME, 1))
        action = np.zeros((B, STORY_LEN), dtype=np.intp)
        background = np.zeros((B, STORY_LEN), dtype=np.intp)
        for b, caps in enumerate(captions):
            for k, c in enumerate(caps):
                if c.action_id >= self.cfg.n_actions or c.background_id >= self.cfg.n_backgrounds:
                    raise ContractError(f"caption index out of vocabulary: {c}")
                for j, cid in enumerate(c.character_ids):
                    if cid >= self.cfg.n_characters:
                        raise ContractError(f"unknown character id {cid}")
                    ids[b, k, j] = cid
                    mask[b, k, j, 0] = 1.0
                action[b, k] = c.action_id
                background[b, k] = c.background_id
        table = self._char_table(p)
        chars = T.embed(table, ids) * Tensor(mask)          # [B,5,2,d]
        enc = T.sum_(chars, axis=2)                          # [B,5,d]
        enc = enc + T.embed(p["emb.action"], action)
        enc = enc + T.embed(p["emb.background"], background)
        pos = np.broadcast_to(np.arange(STORY_LEN, dtype=np.intp), (B, STORY_LEN))
        enc = enc + T.embed(p["emb.frame_pos"], pos)
        return enc

    def encode_caption(self, caption: Caption, frame_index: int,
                       p: Optional[dict] = None) -> Tensor:
        """Single-caption encoding [d] at a given frame slot."""
        caps = [caption if k == frame_index else Caption((), 0, 0) for k in range(STORY_LEN)]
        return self.encode_captions([caps], p)[0, frame_index]

    # -- history conditioning -----------------------------------------------------
    def encode_frames(self, frames_px: np.ndarray, p: Optional[dict] = None) -> Tensor:
        """Conv-encode pixel frames [N,3,H,W] -> [N, d]."""
        p = p or self.params
        x = Tensor(frames_px)
        for layer in ("hist.conv1", "hist.conv2", "hist.conv3"):
            x = nn.avgpool2x(x)
            x = T.conv2d(x, p[f"{layer}.w"], stride=1, pad=1) + p[f"{layer}.b"]
            x = T.silu(x)
        x = T.mean(x, axis=(2, 3))
        return nn.linear(x, p["hist.proj.w"], p["hist.proj.b"])

    def encode_history(self, histories: Sequence[np.ndarray],
                       p: Optional[dict] = None) -> Tensor:
        """Mean conv encoding per sample; empty histories use the start row.

        ``histories`` holds one [n_i,3,H,W] array per sample (n_i may be 0).
        """
        p = p or self.params
        B = len(histories)
        counts = [0 if h is None else len(h) for h in histories]
        total = sum(counts)
        if total == 0:
            return T.embed(p["emb.start"], np.zeros(B, dtype=np.intp))
        stacked = np.concatenate([h for h in histories if h is not None and len(h)], axis=0)
        enc = self.encode_frames(stacked, p)                     # [total, d]
        avg = np.zeros((B, total))
        empty = np.zeros((B, 1))
        off = 0
        for b, n in enumerate(counts):
            if n == 0:
                empty[b, 0] = 1.0
            else:
                avg[b, off:off + n] = 1.0 / n
                off += n
        pooled = T.matmul(Tensor(avg), enc)                      # [B, d]
        start = T.embed(p["emb.start"], np.zeros(B, dtype=np.intp))
        return pooled + start * Tensor(empty)

    # -- fusion ------------------------------------------------------------------
    def fuse(self, cap_mean: Tensor, cap_i: Tensor, hist: Tensor,
             p: Optional[dict] = None) -> Tensor:
        p = p or self.params
        x = T.concat([cap_mean, cap_i, hist], axis=1)
        h = T.silu(nn.linear(x, p["fuse.l1.w"], p["fuse.l1.b"]))
        return nn.linear(h, p["fuse.l2.w"], p["fuse.l2.b"])

    def condition(self, captions: Sequence[Sequence[Caption]], frame_index: np.ndarray,
                  histories: Sequence[np.ndarray], null_mask: Optional[np.ndarray] = None,
                  p: Optional[dict] = None) -> Tensor:
        """Conditioning vectors [B,d] for per-sample frame indices.

        ``null_mask`` marks samples whose condition is replaced by the learned
        null embedding (dropout during training, the unconditional branch at
        sampling time).
        """
        p = p or self.params
        B = len(captions)
        enc = self.encode_captions(captions, p)                   # [B,5,d]
        cap_mean = T.mean(enc, axis=1)
        rows = T.reshape(enc, (B * STORY_LEN, self.cfg.d_cond))
        pick = np.asarray(frame_index, dtype=np.intp)
        if pick.shape != (B,) or pick.min() < 0 or pick.max() >= STORY_LEN:
            raise ContractError(f"frame_index must be [B] in [0,{STORY_LEN}), got {pick}")
        sel = np.zeros((B, B * STORY_LEN))
        sel[np.arange(B), np.arange(B) * STORY_LEN + pick] = 1.0
        cap_i = T.matmul(Tensor(sel), rows)
        hist = self.encode_history(histories, p)
        s = self.fuse(cap_mean, cap_i, hist, p)
        if null_mask is not None and null_mask.any():
            m = Tensor(null_mask.astype(np.float64).reshape(B, 1))
            null = T.embed(p["emb.null"], np.zeros(B, dtype=np.intp))
            s = s * (Tensor(np.ones((B, 1))) - m) + null * m
        return s

    def null_condition(self, B: int, p: Optional[dict] = None) -> Tensor:
        p = p or self.params
        return T.embed(p["emb.null"], np.zeros(B, dtype=np.intp))

    # -- denoiser -------------------------------------------------------------
    def denoise(self, z_t: Tensor, s: Tensor, t: np.ndarray,
                p: Optional[dict] = None) -> Tensor:
        """U-net eps prediction shaped like z_t."""
        p = p or self.params
        cfg = self.cfg
        if z_t.shape[1:] != (cfg.latent_channels, cfg.latent_size, cfg.latent_size):
            raise ContractError(f"latent shape {z_t.shape} does not match configuration")
        t = self.sched.check_t(np.broadcast_to(np.asarray(t, dtype=np.intp), (z_t.shape[0],)))
        temb = T.embed(p["time.table"], t)
        cv = T.concat([s, temb], axis=1)

        def block(x: Tensor, name: str) -> Tensor:
            h = nn.group_norm(x, p[f"unet.{name}.gn.gamma"], p[f"unet.{name}.gn.beta"])
            bias = nn.linear(cv, p[f"unet.{name}.cond.w"], p[f"unet.{name}.cond.b"])
            h = h + T.reshape(bias, (x.shape[0], x.shape[1], 1, 1))
            h = T.conv2d(T.silu(h), p[f"unet.{name}.conv.w"], stride=1, pad=1)
            return x + h + p[f"unet.{name}.conv.b"]

        h1 = T.conv2d(z_t, p["unet.stem.w"], stride=1, pad=1) + p["unet.stem.b"]
        h1 = block(h1, "enc1")
        h2 = T.conv2d(T.silu(nn.avgpool2x(h1)), p["unet.down1.w"], stride=1, pad=1) + p["unet.down1.b"]
        h2 = block(h2, "enc2")
        h3 = T.conv2d(T.silu(nn.avgpool2x(h2)), p["unet.down2.w"], stride=1, pad=1) + p["unet.down2.b"]
        h3 = block(h3, "mid1")
        h3 = block(h3, "mid2")
        u1 = T.concat([T.upsample2x(h3), h2], axis=1)
        u1 = T.conv2d(T.silu(u1), p["unet.up1.w"], stride=1, pad=0) + p["unet.up1.b"]
        u1 = block(u1, "dec1")
        u2 = T.concat([T.upsample2x(u1), h1], axis=1)
        u2 = T.conv2d(T.silu(u2), p["unet.up2.w"], stride=1, pad=0) + p["unet.up2.b"]
        u2 = block(u2, "dec2")
        out = nn.group_norm(u2, p["unet.head.gn.gamma"], p["unet.head.gn.beta"])
        out = T.conv2d(T.silu(out), p["unet.head.w"], stride=1, pad=1) + p["unet.head.b"]
        return out

    # -- sampling ------------------------------------------------------------
    def _denoise_np(self, z: np.ndarray, s: np.ndarray, t: np.ndarray) -> np.ndarray:
        outs = []
        for lo in range(0, z.shape[0], self.chunk):
            hi = lo + self.chunk
            outs.append(self.denoise(Tensor(z[lo:hi]), Tensor(s[lo:hi]), t[lo:hi]).data)
        return np.concatenate(outs, axis=0)

    def generate_stories(self, caption_sets: Sequence[Sequence[Caption]],
                         steps: int = 50, guidance_scale: float = 6.0,
                         seed: int = 0) -> list[list[np.ndarray]]:
        """Autoregressively generate frames for each caption set.

        Frame i is sampled with conditioning built from all captions plus the
        frames generated so far; deterministic in (captions, seed).
        """
        S = len(caption_sets)
        cfg = self.cfg
        shape = (S, cfg.latent_channels, cfg.latent_size, cfg.latent_size)
        done: list[list[np.ndarray]] = [[] for _ in range(S)]
        for i in range(STORY_LEN):
            histories = [np.stack(done[b], axis=0) if done[b] else
                         np.zeros((0, 3, cfg.latent_size * 2, cfg.latent_size * 2))
                         for b in range(S)]
            s_cond = self.condition(caption_sets, np.full(S, i, dtype=np.intp),
                                    histories).data
            s_null = self.null_condition(S).data
            z_init = np.stack([
                np.random.default_rng(np.random.SeedSequence([seed, b, i]))
                .standard_normal(shape[1:]) for b in range(S)], axis=0)

            def eps_fn(z: np.ndarray, t: np.ndarray) -> np.ndarray:
                if guidance_scale == 1.0:
                    return self._denoise_np(z, s_cond, t)
                zz = np.concatenate([z, z], axis=0)
                ss = np.concatenate([s_cond, s_null], axis=0)
                tt = np.concatenate([t, t], axis=0)
                eps = self._denoise_np(zz, ss, tt)
                return cfg_combine(eps[S:], eps[:S], guidance_scale).data

            z0 = ddim_sample(eps_fn, self.sched, shape, steps=steps,
                             z_init=z_init, clip_z0=self.diff.clip_latents)
            frames = codec.decode_batch(z0)
            for b in range(S):
                done[b].append(frames[b])
        return done

    def generate_story(self, captions: Sequence[Caption], steps: int = 50,
                       guidance_scale: float = 6.0, seed: int = 0) -> list[np.ndarray]:
        if len(captions) != STORY_LEN:
            raise ContractError(f"a story takes {STORY_LEN} captions")
        return self.generate_stories([list(captions)], steps=steps,
                                     guidance_scale=guidance_scale, seed=seed)[0]

    def warn_if_guidance_untrained(self, guidance_scale: float, dropout: float) -> None:
        if guidance_scale > 1.0 and dropout <= 0.0:
            warnings.warn(
                "guidance scale > 1 but the unconditional branch was never "
                "trained (condition dropout 0); samples may be degenerate")
