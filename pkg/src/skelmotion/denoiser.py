"""Text-conditioned transformer denoiser over the skeleto-temporal latent.

Every layer runs temporal self-attention (frames, per joint), skeletal
self-attention (joints, per frame), cross-attention from every
(frame, joint) latent position onto the text tokens, and a feed-forward
block. Each sub-block is pre-LayerNorm, FiLM-modulated by the diffusion
timestep and added back residually. The first half of the stack feeds the
second half through U-Net style skips.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .checkpoint import load_checkpoint, save_checkpoint
from .motion_io import CaptionedClip, MotionSequence, fit_window
from .optim import check_finite, make_optimizer
from .schedule import GuidanceConfig, NoiseSchedule, cfg_combine, ddim_step, ddim_timesteps, make_schedule, q_sample, velocity
from .text import TextEmbedding, make_text_encoder, pad_batch
from .vae import SkeletonVAE

log = logging.getLogger(__name__)

# hook(layer_index, attention_map (B, H, J, N, K)) -> replacement map
AttentionHook = Callable[[int, Tensor], Tensor]


@dataclass
class DenoiserConfig:
    latent_dim: int = 32
    width: int = 256
    layers: int = 6
    heads: int = 4
    ffn_dim: int = 512
    text_encoder: str = "stub"
    text_dim: int = 128
    text_seed: int = 0
    max_tokens: int = 32
    T: int = 1000
    beta_1: float = 0.00085
    beta_T: float = 0.012
    p_uncond: float = 0.1
    window: int = 64
    batch_size: int = 8
    steps: int = 1000
    lr: float = 2e-4
    warmup: int = 2000
    milestones: tuple[int, ...] = (50_000,)
    gamma: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0
    latent_scale: float = 1.0

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "DenoiserConfig":
        d = dict(d)
        d["milestones"] = tuple(d.get("milestones", ()))
        return cls(**d)


def sinusoidal_table(positions: Tensor, dim: int) -> Tensor:
    """Interleaved ``[sin, cos, sin, cos, ...]`` embedding, frequencies ``10000^(-2i/dim)``."""
    if dim % 2:
        raise ValueError("embedding width must be even")
    freqs = torch.exp(-math.log(10000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    ang = positions.to(torch.float64)[:, None] * freqs[None]
    out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).reshape(len(positions), dim)
    return out.to(torch.float32)


def positional_embedding(n_frames: int, n_joints: int, dim: int) -> Tensor:
    """Sinusoidal table over the ``n_frames * n_joints`` flattened positions
    (frame-major) reshaped to ``(n_frames, n_joints, dim)``."""
    return sinusoidal_table(torch.arange(n_frames * n_joints), dim).reshape(n_frames, n_joints, dim)


class FiLM(nn.Module):
    """``scale * h + shift`` with scale and shift predicted from the timestep embedding.

    The scale is parametrized as ``1 + Linear(...)`` so a fresh module starts
    close to the identity modulation.
    """

    def __init__(self, cond_dim: int, dim: int):
        super().__init__()
        self.scale = nn.Linear(cond_dim, dim)
        self.shift = nn.Linear(cond_dim, dim)

    def forward(self, h: Tensor, temb: Tensor) -> Tensor:
        c = F.gelu(temb)
        shape = (c.shape[0],) + (1,) * (h.ndim - 2) + (h.shape[-1],)
        gamma = 1.0 + self.scale(c).reshape(shape)
        beta = self.shift(c).reshape(shape)
        return gamma * h + beta


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int, kv_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError("width must be divisible by the head count")
        self.heads, self.head_dim = heads, dim // heads
        kv_dim = kv_dim or dim
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(kv_dim, dim)
        self.v = nn.Linear(kv_dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: Tensor) -> Tensor:
        return x.reshape(*x.shape[:-1], self.heads, self.head_dim).transpose(-2, -3)

    def scores(self, x: Tensor, ctx: Tensor, key_padding_mask: Tensor | None = None) -> Tensor:
        """Row-stochastic attention ``(B, H, Lq, Lk)``."""
        q, k = self._split(self.q(x)), self._split(self.k(ctx))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_padding_mask is not None:
            logits = logits.masked_fill(key_padding_mask[:, None, None, :], float("-inf"))
        return logits.softmax(-1)

    def apply(self, attn: Tensor, ctx: Tensor) -> Tensor:
        out = attn @ self._split(self.v(ctx))
        return self.out_proj(out.transpose(-2, -3).flatten(-2))

    def forward(self, x: Tensor, ctx: Tensor | None = None, key_padding_mask: Tensor | None = None) -> Tensor:
        ctx = x if ctx is None else ctx
        return self.apply(self.scores(x, ctx, key_padding_mask), ctx)


class TransformerLayer(nn.Module):
    def __init__(self, width: int, heads: int, ffn_dim: int, text_dim: int):
        super().__init__()
        self.norms = nn.ModuleList(nn.LayerNorm(width) for _ in range(4))
        self.temp_attn = Attention(width, heads)
        self.skel_attn = Attention(width, heads)
        self.cross_attn = Attention(width, heads, kv_dim=text_dim)
        self.ffn_in = nn.Linear(width, ffn_dim)
        self.ffn_out = nn.Linear(ffn_dim, width)
        self.films = nn.ModuleList(FiLM(width, width) for _ in range(4))

    def forward(
        self,
        z: Tensor,
        temb: Tensor,
        text: Tensor,
        text_mask: Tensor | None = None,
        hook: Callable[[Tensor], Tensor] | None = None,
    ) -> tuple[Tensor, Tensor]:
        """``z`` is ``(B, N, J, D)``; returns the updated latent and the
        cross-attention map ``(B, H, J, N, K)`` that was actually applied."""
        B, N, J, D = z.shape

        h = self.norms[0](z).transpose(1, 2).reshape(B * J, N, D)
        h = self.temp_attn(h).reshape(B, J, N, D).transpose(1, 2)
        z = z + self.films[0](h, temb)

        h = self.norms[1](z).reshape(B * N, J, D)
        h = self.skel_attn(h).reshape(B, N, J, D)
        z = z + self.films[1](h, temb)

        q = self.norms[2](z).reshape(B, N * J, D)
        attn = self.cross_attn.scores(q, text, text_mask)
        K = attn.shape[-1]
        amap = attn.reshape(B, -1, N, J, K).permute(0, 1, 3, 2, 4)
        if hook is not None:
            new = hook(amap)
            if new.shape != amap.shape:
                raise ValueError(f"attention hook returned {tuple(new.shape)}, expected {tuple(amap.shape)}")
            amap = new
            attn = amap.permute(0, 1, 3, 2, 4).reshape(B, -1, N * J, K)
        h = self.cross_attn.apply(attn, text).reshape(B, N, J, D)
        z = z + self.films[2](h, temb)

        h = self.ffn_out(F.gelu(self.ffn_in(self.norms[3](z))))
        z = z + self.films[3](h, temb)
        return z, amap


class Denoiser(nn.Module):
    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = c = config or DenoiserConfig()
        if c.layers % 2:
            raise ValueError("layer count must be even for the skip pairing")
        self.schedule: NoiseSchedule = make_schedule(c.T, c.beta_1, c.beta_T)
        self.text_encoder = make_text_encoder(c.text_encoder, c.text_dim, c.text_seed, c.max_tokens)
        self.input_mlp = nn.Sequential(nn.Linear(c.latent_dim, c.width), nn.GELU(), nn.Linear(c.width, c.width))
        self.time_mlp = nn.Sequential(nn.Linear(c.width, c.width), nn.GELU(), nn.Linear(c.width, c.width))
        self.layers = nn.ModuleList(
            TransformerLayer(c.width, c.heads, c.ffn_dim, c.text_dim) for _ in range(c.layers)
        )
        self.skip_proj = nn.ModuleList(nn.Linear(2 * c.width, c.width) for _ in range(c.layers // 2))
        self.out_norm = nn.LayerNorm(c.width)
        self.output_mlp = nn.Sequential(nn.Linear(c.width, c.width), nn.GELU(), nn.Linear(c.width, c.latent_dim))
        self._pos_cache: dict[tuple[int, int], Tensor] = {}

    def _pos(self, n: int, j: int) -> Tensor:
        key = (n, j)
        if key not in self._pos_cache:
            self._pos_cache[key] = positional_embedding(n, j, self.config.width)
        return self._pos_cache[key]

    def forward(
        self,
        z_t: Tensor,
        t: Tensor | int,
        text: Tensor,
        text_mask: Tensor | None = None,
        hook: AttentionHook | None = None,
    ) -> tuple[Tensor, list[Tensor]]:
        """Predict the velocity for ``z_t`` ``(B, N', J', latent)`` at timesteps ``t``.

        ``text`` is ``(B, K, text_dim)``. Returns ``v_hat`` and one
        cross-attention map ``(B, H, J', N', K)`` per layer.
        """
        B, N, J, _ = z_t.shape
        t = torch.as_tensor(t).reshape(-1).expand(B)
        if t.min() < 1 or t.max() > self.config.T:
            raise ValueError(f"timestep outside [1, {self.config.T}]")
        if text.shape[-2] == 0:
            raise ValueError("text needs at least one token")
        temb = self.time_mlp(sinusoidal_table(t, self.config.width))
        h = self.input_mlp(z_t) + self._pos(N, J)
        L = len(self.layers)
        skips, maps = [], []
        for l, layer in enumerate(self.layers):
            if l >= L // 2:
                h = self.skip_proj[l - L // 2](torch.cat([h, skips[L - 1 - l]], dim=-1))
            else:
                skips.append(h)
            layer_hook = (lambda m, l=l: hook(l, m)) if hook is not None else None
            h, amap = layer(h, temb, text, text_mask, layer_hook)
            maps.append(amap)
        return self.output_mlp(self.out_norm(h)), maps


def text_batch(embeddings: Sequence[TextEmbedding]) -> tuple[Tensor, Tensor | None]:
    if len({e.n_tokens for e in embeddings}) == 1:
        return torch.stack([e.vectors for e in embeddings]), None
    return pad_batch(list(embeddings))


# -- training ---------------------------------------------------------------------

def _clip_latents(vae: SkeletonVAE, clips: Sequence[CaptionedClip], window: int, starts: Sequence[int]) -> Tensor:
    x = torch.from_numpy(np.stack([fit_window(c.motion.data, window, s) for c, s in zip(clips, starts)]))
    with torch.no_grad():
        return vae.encode(x, noise=torch.zeros(1)).mu


def estimate_latent_scale(vae: SkeletonVAE, clips: Sequence[CaptionedClip], window: int) -> float:
    """``1 / std`` of posterior means over the corpus, so diffusion sees unit-scale latents."""
    mu = _clip_latents(vae, clips, window, [0] * len(clips))
    std = float(mu.std())
    return 1.0 / std if std > 0 else 1.0


def train_denoiser(
    clips: Sequence[CaptionedClip],
    vae: SkeletonVAE,
    config: DenoiserConfig | None = None,
    on_step: Callable[[int, float, float], None] | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
) -> tuple[Denoiser, list[dict[str, float]]]:
    """Velocity-MSE training on posterior-mean latents of a frozen VAE."""
    if not clips:
        raise ValueError("cannot train on an empty corpus")
    if vae is None:
        raise ValueError("denoiser training needs a trained VAE")
    config = config or DenoiserConfig()
    vae.eval()
    for p in vae.parameters():
        p.requires_grad_(False)
    config.latent_scale = estimate_latent_scale(vae, clips, config.window)

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    model = Denoiser(config)
    schedule = model.schedule
    captions = [model.text_encoder.encode(c.caption_text) for c in clips]
    null = model.text_encoder.encode("")
    opt, sched = make_optimizer(
        model.parameters(), config.lr, config.weight_decay, config.warmup, config.milestones, config.gamma
    )
    history = []
    for step in range(config.steps):
        ids = torch.randint(len(clips), (config.batch_size,), generator=gen).tolist()
        starts = []
        for i in ids:
            slack = max(clips[i].motion.n_frames - config.window, 0)
            starts.append(int(torch.randint(slack + 1, (1,), generator=gen)) if slack else 0)
        x = _clip_latents(vae, [clips[i] for i in ids], config.window, starts) * config.latent_scale
        t = torch.randint(1, config.T + 1, (config.batch_size,), generator=gen)
        eps = torch.randn(x.shape, generator=gen)
        drop = torch.rand(config.batch_size, generator=gen) < config.p_uncond
        conds = [null if d else captions[i] for i, d in zip(ids, drop.tolist())]
        text, mask = text_batch(conds)

        z_t = q_sample(x, eps, t, schedule)
        target = velocity(x, eps, t, schedule)
        v_hat, _ = model(z_t, t, text, mask)
        loss = F.mse_loss(v_hat, target)
        check_finite(loss, step, "denoiser")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        lr = sched.get_last_lr()[0]
        sched.step()
        history.append({"step": step, "loss": float(loss.detach()), "lr": lr})
        if on_step:
            on_step(step, float(loss.detach()), lr)
        if checkpoint_path and checkpoint_every and (step + 1) % checkpoint_every == 0:
            save_denoiser(checkpoint_path, model)
    if checkpoint_path:
        save_denoiser(checkpoint_path, model)
    model.eval()
    return model, history


# -- sampling ---------------------------------------------------------------------

@dataclass
class AttentionRecord:
    """Cross-attention maps of the conditional pass: ``maps[step][layer]`` is ``(H, J', N', K)``."""

    tokens: tuple[str, ...]
    timesteps: list[int] = field(default_factory=list)
    maps: list[list[Tensor]] = field(default_factory=list)

    def append(self, t: int, layer_maps: Sequence[Tensor]) -> None:
        self.timesteps.append(int(t))
        self.maps.append([m[0].detach().clone() if m.ndim == 5 else m.detach().clone() for m in layer_maps])

    @property
    def n_layers(self) -> int:
        return len(self.maps[0]) if self.maps else 0

    def mean_map(self) -> Tensor:
        """Average over heads, layers and timesteps: ``(J', N', K)``."""
        return torch.stack([torch.stack(step) for step in self.maps]).mean(dim=(0, 1, 2))


def denoise_step(
    model: Denoiser,
    z: Tensor,
    t: int,
    t_prev: int,
    cond: TextEmbedding,
    null: TextEmbedding,
    w: float,
    hook: AttentionHook | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """One guided DDIM step. The hook only touches the conditional pass."""
    with torch.no_grad():
        v_c, maps = model(z, t, cond.vectors[None], hook=hook)
        v_u, _ = model(z, t, null.vectors[None])
        v = cfg_combine(v_u, v_c, w)
        return ddim_step(z, v, t, t_prev, model.schedule), maps


def initial_noise(model: Denoiser, vae: SkeletonVAE, n_frames: int, seed: int) -> Tensor:
    if n_frames <= 0 or n_frames % vae.frame_factor:
        raise ValueError(f"n_frames must be a positive multiple of {vae.frame_factor}, got {n_frames}")
    gen = torch.Generator().manual_seed(int(seed))
    shape = (1, n_frames // vae.frame_factor, vae.plan.stages[-1].n_groups, model.config.latent_dim)
    return torch.randn(shape, generator=gen)


def step_pairs(model: Denoiser, n_steps: int) -> list[tuple[int, int]]:
    ts = ddim_timesteps(model.config.T, n_steps)
    return list(zip(ts, ts[1:] + [0]))


def decode(model: Denoiser, vae: SkeletonVAE, z0: Tensor, fps: float = 20.0) -> MotionSequence:
    with torch.no_grad():
        x = vae.decode(z0 / model.config.latent_scale)
    return MotionSequence(x[0].numpy(), vae.topology, fps)


def generate(
    model: Denoiser,
    vae: SkeletonVAE,
    text: str,
    n_frames: int,
    seed: int = 0,
    guidance: GuidanceConfig | None = None,
    n_steps: int = 50,
) -> tuple[MotionSequence, AttentionRecord]:
    guidance = guidance or GuidanceConfig()
    cond = model.text_encoder.encode(text)
    null = model.text_encoder.encode(guidance.null_text)
    z = initial_noise(model, vae, n_frames, seed)
    record = AttentionRecord(cond.tokens)
    for t, t_prev in step_pairs(model, n_steps):
        z, maps = denoise_step(model, z, t, t_prev, cond, null, guidance.w)
        record.append(t, maps)
    return decode(model, vae, z), record


def save_denoiser(path: str | Path, model: Denoiser) -> None:
    config = model.config.to_dict()
    config["schedule"] = model.schedule.to_dict()
    config["text_encoder_id"] = model.text_encoder.name
    save_checkpoint(path, "denoiser", config, model.state_dict())


def load_denoiser(path: str | Path) -> Denoiser:
    config, state = load_checkpoint(path, "denoiser")
    config.pop("schedule", None)
    config.pop("text_encoder_id", None)
    model = Denoiser(DenoiserConfig.from_dict(config))
    model.load_state_dict(state)
    model.eval()
    return model
