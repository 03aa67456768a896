"""Character customization: regularized MSE + adversarial alignment + distillation.

One story per new character fine-tunes the pretrained model. Each step runs a
generator update minimizing

    L = L_mse + lambda1 * L_adv_G + lambda2 * L_distill

followed by a discriminator update. The discriminator judges channel-wise
concatenations of a (generated or ground-truth) latent with a reference latent
of the character, so its gradient pushes the one-shot clean-latent estimate
toward the reference identity. A frozen copy of the pretrained weights serves
as the distillation teacher and is hashed before and after to prove it never
moved.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import codec, nn
from . import tensor as T
from .benchmark import BenchmarkSplits
from .checkpoint import params_hash
from .config import CustomizeConfig
from .diffusion import estimate_z0, mse_loss, q_sample
from .errors import ContractError
from .model import StoryModel
from .optim import Adam
from .story_types import STORY_LEN, Story
from .tensor import Tensor, tape

PROB_CLAMP = 1e-7

# parameter paths trained by the generator step; embeddings for the existing
# vocabulary and the history encoder stay frozen during customization
THETA_PREFIXES = ("unet.", "fuse.", "time.")
NEW_EMBED_KEY = "emb.char_new"


# -- discriminator -------------------------------------------------------------

def build_discriminator(latent_channels: int, latent_size: int, seed: int = 0,
                        base: int = 32) -> dict[str, Tensor]:
    """4 stride-2 conv layers with doubling widths plus 1 linear head."""
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}
    chans = [2 * latent_channels, base, base * 2, base * 4, base * 8]
    size = latent_size
    for i in range(4):
        w = nn.init_conv(rng, chans[i + 1], chans[i], 3, gain=0.5)
        p[f"disc.conv{i + 1}.w"] = Tensor(w, requires_grad=True, name=f"disc.conv{i + 1}.w")
        p[f"disc.conv{i + 1}.b"] = Tensor(np.zeros((chans[i + 1], 1, 1)), requires_grad=True,
                                          name=f"disc.conv{i + 1}.b")
        size //= 2
    flat = chans[4] * size * size
    p["disc.lin.w"] = Tensor(nn.init_linear(rng, flat, 1, gain=0.5), requires_grad=True,
                             name="disc.lin.w")
    p["disc.lin.b"] = Tensor(np.zeros(1), requires_grad=True, name="disc.lin.b")
    return p


def build_disc_input(latent: Tensor, z_r: Tensor) -> Tensor:
    """Channel-axis concatenation of a latent batch with reference latents."""
    if latent.shape != z_r.shape:
        raise ContractError(f"latent shape {latent.shape} != reference shape {z_r.shape}")
    return T.concat([latent, z_r], axis=1)


def disc_forward(x: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Probability in (0,1) that the pair depicts the reference character.

    Each conv is followed by 2x2 average pooling, halving the spatial size
    four times down to 1x1 before the linear head.
    """
    h = x
    for i in range(4):
        h = T.conv2d(h, p[f"disc.conv{i + 1}.w"], stride=1, pad=1) + p[f"disc.conv{i + 1}.b"]
        h = T.relu(h)
        h = nn.avgpool2x(h)
    h = T.reshape(h, (h.shape[0], h.shape[1] * h.shape[2] * h.shape[3]))
    logit = nn.linear(h, p["disc.lin.w"], p["disc.lin.b"])
    return T.sigmoid(logit)


def _detached(p: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: v.detach() for k, v in p.items()}


def _log_prob(prob: Tensor) -> Tensor:
    return T.log(T.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP))


def loss_adv_g(z0_tilde: Tensor, z_r: Tensor, disc: dict[str, Tensor]) -> Tensor:
    """-E[log D(concat(z0_tilde, z_r))]; gradients stop at the discriminator."""
    prob = disc_forward(build_disc_input(z0_tilde, z_r), _detached(disc))
    return -T.mean(_log_prob(prob))


def loss_adv_d(z0: Tensor, z0_tilde: Tensor, z_r: Tensor,
               disc: dict[str, Tensor]) -> Tensor:
    """-(E[log D(real pair)] + E[log(1 - D(estimated pair))]).

    ``z0_tilde`` must already be detached from the generator tape.
    """
    pos = disc_forward(build_disc_input(z0, z_r), disc)
    neg = disc_forward(build_disc_input(z0_tilde, z_r), disc)
    one = Tensor(np.ones_like(neg.data))
    return -(T.mean(_log_prob(pos)) + T.mean(_log_prob(one - neg)))


# -- distillation ---------------------------------------------------------------

def loss_distill(z_t: Tensor, s: Tensor, t: np.ndarray, model: StoryModel,
                 teacher: dict[str, Tensor], eps_student: Optional[Tensor] = None) -> Tensor:
    """Mean squared gap between frozen-teacher and student noise predictions."""
    for k, v in teacher.items():
        if k not in model.params or v.shape != model.params[k].shape:
            raise ContractError(f"teacher/student parameter mismatch at {k!r}")
    eps_t = model.denoise(z_t.detach(), s.detach(), t, p=teacher)
    if eps_t.requires_grad:
        raise ContractError("teacher prediction must not require grad")
    if eps_student is None:
        eps_student = model.denoise(z_t, s, t)
    d = eps_student - eps_t
    return T.mean(d * d)


def loss_mse_reg(eps_pred_new: Tensor, eps_new: Tensor,
                 eps_pred_reg: Optional[Tensor], eps_reg: Optional[Tensor]) -> Tensor:
    """Two-term eps-prediction loss: new-character batch plus regularization batch."""
    loss = mse_loss(eps_pred_new, eps_new)
    if eps_pred_reg is None:
        warnings.warn("empty regularization set; falling back to plain MSE on new data")
        return loss
    return loss + mse_loss(eps_pred_reg, eps_reg)


@dataclass
class LossWeights:
    lambda1: float = 0.75
    lambda2: float = 0.5

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractError("loss weights must be non-negative")


@dataclass
class LossBreakdown:
    step: int
    mse: float
    adv_g: float
    adv_d: float
    distill: float
    total: float


def total_loss(mse: Tensor, adv_g: Optional[Tensor], distill: Optional[Tensor],
               weights: LossWeights) -> Tensor:
    for name, comp in (("mse", mse), ("adv_g", adv_g), ("distill", distill)):
        if comp is not None and not np.all(np.isfinite(comp.data)):
            raise ContractError(f"non-finite loss component {name!r}")
    out = mse
    if adv_g is not None and weights.lambda1 > 0:
        out = out + adv_g * weights.lambda1
    if distill is not None and weights.lambda2 > 0:
        out = out + distill * weights.lambda2
    return out


# -- reference bank ---------------------------------------------------------------

class ReferenceBank:
    """Per-character reference latents with round-robin selection."""

    def __init__(self, refs: dict[int, list[np.ndarray]]) -> None:
        for cid, lats in refs.items():
            if not lats:
                raise ContractError(f"character {cid} has no reference latents")
        self.refs = refs
        self._cursor = {cid: 0 for cid in refs}

    @classmethod
    def from_stories(cls, stories: dict[int, Story], per_character: int = 3) -> "ReferenceBank":
        refs: dict[int, list[np.ndarray]] = {}
        for cid, story in stories.items():
            take = np.linspace(0, STORY_LEN - 1, min(per_character, STORY_LEN)).round().astype(int)
            refs[cid] = [codec.encode(story.frames[k]) for k in take]
        return cls(refs)

    def characters(self) -> set[int]:
        return set(self.refs)

    def next_ref(self, cid: int) -> np.ndarray:
        if cid not in self.refs:
            raise ContractError(f"reference bank has no character {cid}")
        lats = self.refs[cid]
        ref = lats[self._cursor[cid] % len(lats)]
        self._cursor[cid] += 1
        return ref


def select_pairs(captions: list, bank: ReferenceBank) -> list[tuple[int, np.ndarray]]:
    """(sample index, reference latent) for every frame featuring a bank character."""
    pairs = []
    for b, cap in enumerate(captions):
        for cid in cap.character_ids:
            if cid in bank.characters():
                pairs.append((b, bank.next_ref(cid)))
    return pairs


# -- the customization loop ---------------------------------------------------------

def _theta_params(model: StoryModel) -> dict[str, Tensor]:
    return {k: v for k, v in model.params.items() if k.startswith(THETA_PREFIXES)}


def init_new_embeddings(model: StoryModel) -> None:
    """Seed new-character rows from the mean of the existing-character rows."""
    mean = model.params["emb.char_existing"].data.mean(axis=0)
    model.params[NEW_EMBED_KEY].data[:] = mean


@dataclass
class CustomizeResult:
    trace: list[LossBreakdown]
    teacher_hash_before: str
    teacher_hash_after: str
    disc: dict[str, Tensor]


def customize(model: StoryModel, splits: BenchmarkSplits,
              cfg: Optional[CustomizeConfig] = None, seed: int = 0,
              reg_stories: Optional[list[Story]] = None,
              bank: Optional[ReferenceBank] = None) -> CustomizeResult:
    """Fine-tune a pretrained model on one story per new character.

    Alternates a generator step (minimizing the weighted total loss) with a
    discriminator step every training step. Gradient bookkeeping is strict:
    the generator step must leave the discriminator grad-free and vice versa.
    """
    cfg = cfg or CustomizeConfig()
    weights = LossWeights(cfg.lambda1, cfg.lambda2)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))

    new_stories = splits.customization
    for cid, story in new_stories.items():
        mentioned = set()
        for c in story.captions:
            mentioned.update(c.character_ids)
        if mentioned != {cid}:
            raise ContractError(
                f"customization story for character {cid} must depict it alone")
    if reg_stories is None:
        k = min(cfg.reg_stories, len(splits.pretrain))
        pick = rng.choice(len(splits.pretrain), size=k, replace=False) if k else []
        reg_stories = [splits.pretrain[i] for i in pick]
    if bank is None:
        bank = ReferenceBank.from_stories(new_stories, cfg.refs_per_character)
    for cid in new_stories:
        if cid not in bank.characters():
            raise ContractError(f"reference bank missing character {cid}")

    teacher = model.clone_params()
    hash_before = params_hash(teacher)
    init_new_embeddings(model)

    theta = _theta_params(model)
    opt_theta = Adam(theta, lr=cfg.lr)
    opt_embed = Adam({NEW_EMBED_KEY: model.params[NEW_EMBED_KEY]}, lr=cfg.lr_new_embed)
    use_adv = weights.lambda1 > 0
    disc = build_discriminator(model.cfg.latent_channels, model.cfg.latent_size,
                               seed=seed + 31) if use_adv else {}
    opt_disc = Adam(disc, lr=cfg.lr_disc) if use_adv else None

    new_pool = [(cid, k) for cid in sorted(new_stories) for k in range(STORY_LEN)]
    reg_pool = [(i, k) for i in range(len(reg_stories)) for k in range(STORY_LEN)]
    steps_per_epoch = max(
        (len(new_pool) + cfg.batch - 1) // cfg.batch,
        (len(reg_pool) + cfg.batch - 1) // cfg.batch if reg_pool else 0)

    trace: list[LossBreakdown] = []
    step = 0
    for _ in range(cfg.epochs):
        new_order = rng.permutation(len(new_pool))
        reg_order = rng.permutation(len(reg_pool)) if reg_pool else np.array([], dtype=int)
        for k in range(steps_per_epoch):
            new_take = [new_pool[new_order[(k * cfg.batch + j) % len(new_pool)]]
                        for j in range(cfg.batch)]
            reg_take = [reg_pool[reg_order[(k * cfg.batch + j) % len(reg_pool)]]
                        for j in range(cfg.batch)] if reg_pool else []
            step += 1
            row = _customize_step(model, teacher, disc, opt_theta, opt_embed, opt_disc,
                                  new_stories, reg_stories, new_take, reg_take,
                                  bank, weights, rng, step)
            trace.append(row)
    hash_after = params_hash(teacher)
    if hash_after != hash_before:
        raise ContractError("teacher parameters changed during customization")
    return CustomizeResult(trace=trace, teacher_hash_before=hash_before,
                           teacher_hash_after=hash_after, disc=disc)


def _customize_step(model: StoryModel, teacher: dict, disc: dict,
                    opt_theta: Adam, opt_embed: Adam, opt_disc: Optional[Adam],
                    new_stories: dict[int, Story], reg_stories: list[Story],
                    new_take: list, reg_take: list, bank: ReferenceBank,
                    weights: LossWeights, rng: np.random.Generator,
                    step: int) -> LossBreakdown:
    sched = model.sched
    use_adv = weights.lambda1 > 0 and opt_disc is not None
    use_distill = weights.lambda2 > 0

    def batch_inputs(stories, take):
        frames = np.stack([np.stack(stories[i].frames, axis=0) for i, _ in take], axis=0)
        caps = [stories[i].captions for i, _ in take]
        fidx = np.array([k for _, k in take], dtype=np.intp)
        z0 = codec.encode_batch(frames[np.arange(len(take)), fidx])
        t = rng.integers(1, sched.T + 1, size=len(take))
        eps = rng.standard_normal(z0.shape)
        histories = [frames[b, :fidx[b]] for b in range(len(take))]
        return caps, fidx, z0, t, eps, histories

    caps_n, fidx_n, z0_n, t_n, eps_n, hist_n = batch_inputs(new_stories, new_take)
    have_reg = bool(reg_take)
    if have_reg:
        caps_r, fidx_r, z0_r, t_r, eps_r, hist_r = batch_inputs(
            {i: s for i, s in enumerate(reg_stories)}, reg_take)

    pair_caps = [new_stories[i].captions[k] for i, k in new_take]

    # -- generator step
    with tape() as tp:
        z_t_n = q_sample(z0_n, t_n, eps_n, sched)
        s_n = model.condition(caps_n, fidx_n, hist_n)
        eps_pred_n = model.denoise(z_t_n, s_n, t_n)
        if have_reg:
            z_t_r = q_sample(z0_r, t_r, eps_r, sched)
            s_r = model.condition(caps_r, fidx_r, hist_r)
            eps_pred_r = model.denoise(z_t_r, s_r, t_r)
            l_mse = loss_mse_reg(eps_pred_n, Tensor(eps_n), eps_pred_r, Tensor(eps_r))
        else:
            l_mse = loss_mse_reg(eps_pred_n, Tensor(eps_n), None, None)

        l_adv_g = None
        z0_tilde = None
        pair_rows: list[tuple[int, np.ndarray]] = []
        if use_adv:
            z0_tilde = estimate_z0(z_t_n, eps_pred_n, t_n, sched)
            pair_rows = select_pairs(pair_caps, bank)
            if pair_rows:
                sel = np.zeros((len(pair_rows), len(new_take)))
                for r, (b, _) in enumerate(pair_rows):
                    sel[r, b] = 1.0
                flat = T.reshape(z0_tilde, (len(new_take), -1))
                picked = T.matmul(Tensor(sel), flat)
                lat_shape = (len(pair_rows),) + z0_tilde.shape[1:]
                z_gen = T.reshape(picked, lat_shape)
                z_ref = Tensor(np.stack([ref for _, ref in pair_rows], axis=0))
                l_adv_g = loss_adv_g(z_gen, z_ref, disc)

        l_distill = None
        if use_distill:
            if have_reg:
                z_t_all = T.concat([z_t_n, z_t_r], axis=0)
                s_all = T.concat([s_n, s_r], axis=0)
                t_all = np.concatenate([t_n, t_r])
                eps_all = T.concat([eps_pred_n, eps_pred_r], axis=0)
            else:
                z_t_all, s_all, t_all, eps_all = z_t_n, s_n, t_n, eps_pred_n
            l_distill = loss_distill(z_t_all, s_all, t_all, model, teacher,
                                     eps_student=eps_all)

        total = total_loss(l_mse, l_adv_g, l_distill, weights)
        tp.backward(total)

    for name, p in disc.items():
        if p.grad is not None:
            raise ContractError(f"generator step leaked gradient into {name}")
    opt_theta.step()
    opt_embed.step()
    opt_theta.zero_grad()
    opt_embed.zero_grad()
    for p in model.params.values():
        p.zero_grad()

    # -- discriminator step
    adv_d_val = 0.0
    if use_adv and pair_rows:
        z_gen_det = Tensor(np.stack([z0_tilde.data[b] for b, _ in pair_rows], axis=0))
        z_pos = Tensor(np.stack([z0_n[b] for b, _ in pair_rows], axis=0))
        z_ref = Tensor(np.stack([ref for _, ref in pair_rows], axis=0))
        with tape() as tp2:
            l_adv_d = loss_adv_d(z_pos, z_gen_det, z_ref, disc)
            tp2.backward(l_adv_d)
        for name, p in model.params.items():
            if p.grad is not None:
                raise ContractError(f"discriminator step leaked gradient into {name}")
        opt_disc.step()
        opt_disc.zero_grad()
        adv_d_val = l_adv_d.item()

    return LossBreakdown(
        step=step,
        mse=l_mse.item(),
        adv_g=l_adv_g.item() if l_adv_g is not None else 0.0,
        adv_d=adv_d_val,
        distill=l_distill.item() if l_distill is not None else 0.0,
        total=total.item(),
    )
