"""Skeleto-temporal VAE: joint-wise MLPs, STConv stacks and two pooling stages
compress an ``N x J`` motion into an ``N/4 x 7 x 32`` latent."""

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
from .motion_io import CaptionedClip, MotionSequence, fit_window, position_channels, velocity_channels
from .optim import check_finite, make_optimizer
from .skeleton import PoolingPlan, SkeletonTopology, load_skeleton, skeleton_from_dict, skeleton_to_dict
from .st_ops import STConv, STPool, STUnpool

log = logging.getLogger(__name__)


@dataclass
class VAEConfig:
    latent_dim: int = 32
    hidden_dim: int = 32
    blocks_per_stage: int = 2
    lambda_pos: float = 0.5
    lambda_vel: float = 0.5
    lambda_kl: float = 0.02
    window: int = 64
    batch_size: int = 8
    steps: int = 2000
    lr: float = 2e-4
    warmup: int = 2000
    milestones: tuple[int, ...] = (150_000, 250_000)
    gamma: float = 0.1
    weight_decay: float = 0.01
    seed: int = 0
    skeleton: dict[str, Any] | None = field(default=None, repr=False)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "VAEConfig":
        d = dict(d)
        d["milestones"] = tuple(d.get("milestones", ()))
        return cls(**d)


@dataclass
class LatentTensor:
    z: Tensor
    mu: Tensor
    logvar: Tensor


@dataclass
class VAELossBreakdown:
    l_m: Tensor
    l_pos: Tensor
    l_vel: Tensor
    l_kl: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {f: float(getattr(self, f).detach()) for f in ("l_m", "l_pos", "l_vel", "l_kl", "total")}


class JointwiseMLP(nn.Module):
    """Two linear layers with GELU in between, separate weights per joint.

    Joints may have different input/output widths; blocks are zero-padded to
    the widest joint internally.
    """

    def __init__(self, in_dims: Sequence[int], hidden: int, out_dims: Sequence[int]):
        super().__init__()
        J = len(in_dims)
        self.in_dims, self.out_dims = list(in_dims), list(out_dims)
        d_in, d_out = max(in_dims), max(out_dims)
        self.w1 = nn.Parameter(torch.empty(J, d_in, hidden))
        self.b1 = nn.Parameter(torch.empty(J, hidden))
        self.w2 = nn.Parameter(torch.empty(J, hidden, d_out))
        self.b2 = nn.Parameter(torch.empty(J, d_out))
        with torch.no_grad():
            for j in range(J):
                for w, b, fan in ((self.w1, self.b1, in_dims[j]), (self.w2, self.b2, hidden)):
                    bound = 1.0 / math.sqrt(fan)
                    w[j].uniform_(-bound, bound)
                    b[j].uniform_(-bound, bound)
            for j in range(J):
                self.w1[j, in_dims[j]:] = 0.0
                self.w2[j, :, out_dims[j]:] = 0.0
                self.b2[j, out_dims[j]:] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        h = F.gelu(torch.einsum("...jd,jdh->...jh", x, self.w1) + self.b1)
        return torch.einsum("...jh,jhd->...jd", h, self.w2) + self.b2


def _block_index(dims: Sequence[int]) -> tuple[Tensor, Tensor]:
    """Gather index (J, D_max) into a flat pose padded with one zero column, and
    the flat positions of valid entries in the (J * D_max) padded layout."""
    width, d_max = sum(dims), max(dims)
    idx = torch.full((len(dims), d_max), width, dtype=torch.long)
    valid = []
    off = 0
    for j, d in enumerate(dims):
        idx[j, :d] = torch.arange(off, off + d)
        valid.extend(range(j * d_max, j * d_max + d))
        off += d
    return idx, torch.tensor(valid, dtype=torch.long)


class SkeletonVAE(nn.Module):
    def __init__(self, topology: SkeletonTopology, plan: PoolingPlan, config: VAEConfig | None = None):
        super().__init__()
        self.config = config or VAEConfig()
        self.topology, self.plan = topology, plan
        c = self.config
        topos = plan.topologies(topology)
        self.n_stages = len(plan.stages)
        dims = topology.feature_dim
        idx, valid = _block_index(dims)
        self.register_buffer("gather_idx", idx, persistent=False)
        self.register_buffer("valid_idx", valid, persistent=False)

        self.enc_in = JointwiseMLP(dims, c.hidden_dim, [c.hidden_dim] * len(dims))
        self.enc_blocks = nn.ModuleList(
            nn.ModuleList(STConv(topos[s], c.hidden_dim, c.hidden_dim) for _ in range(c.blocks_per_stage))
            for s in range(self.n_stages)
        )
        self.enc_pools = nn.ModuleList(STPool(stage) for stage in plan.stages)
        self.mu_head = nn.Linear(c.hidden_dim, c.latent_dim)
        self.logvar_head = nn.Linear(c.hidden_dim, c.latent_dim)

        self.dec_in = nn.Linear(c.latent_dim, c.hidden_dim)
        # decoder stage s unpools from topology s+1 to s, then convolves at s
        self.dec_unpools = nn.ModuleList(STUnpool(stage) for stage in plan.stages)
        self.dec_blocks = nn.ModuleList(
            nn.ModuleList(STConv(topos[s], c.hidden_dim, c.hidden_dim) for _ in range(c.blocks_per_stage))
            for s in range(self.n_stages)
        )
        self.dec_out = JointwiseMLP([c.hidden_dim] * len(dims), c.hidden_dim, dims)

    @property
    def frame_factor(self) -> int:
        return 2 ** self.n_stages

    def _split(self, x: Tensor) -> Tensor:
        padded = torch.cat([x, x.new_zeros(*x.shape[:-1], 1)], dim=-1)
        return padded[..., self.gather_idx]

    def _merge(self, blocks: Tensor) -> Tensor:
        return blocks.flatten(-2)[..., self.valid_idx]

    def encode(self, x: Tensor, noise: Tensor | None = None, generator: torch.Generator | None = None) -> LatentTensor:
        """``x`` is ``(B, N, sum D_j)``. ``noise=None`` draws a fresh unit normal."""
        if x.shape[-1] != self.topology.total_width:
            raise ValueError(f"pose width {x.shape[-1]} != {self.topology.total_width}")
        if x.shape[-2] % self.frame_factor:
            raise ValueError(f"frame count {x.shape[-2]} not divisible by {self.frame_factor}")
        h = self.enc_in(self._split(x))
        for blocks, pool in zip(self.enc_blocks, self.enc_pools):
            for conv in blocks:
                h = h + F.gelu(conv(h))
            h = pool(h)
        mu, logvar = self.mu_head(h), self.logvar_head(h)
        if noise is None:
            noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        z = mu + torch.exp(0.5 * logvar) * noise
        return LatentTensor(z, mu, logvar)

    def decode(self, z: Tensor) -> Tensor:
        n_atomic = self.plan.stages[-1].n_groups
        if z.shape[-2:] != (n_atomic, self.config.latent_dim):
            raise ValueError(f"latent shape {tuple(z.shape)} does not end in ({n_atomic}, {self.config.latent_dim})")
        h = self.dec_in(z)
        for s in reversed(range(self.n_stages)):
            h = self.dec_unpools[s](h)
            for conv in self.dec_blocks[s]:
                h = h + F.gelu(conv(h))
        return self._merge(self.dec_out(h))

    def forward(self, x: Tensor, noise: Tensor | None = None):
        lat = self.encode(x, noise)
        return self.decode(lat.z), lat


def vae_loss(
    m: Tensor,
    m_hat: Tensor,
    mu: Tensor,
    logvar: Tensor,
    pos_idx: Tensor,
    vel_idx: Tensor,
    lambda_pos: float = 0.5,
    lambda_vel: float = 0.5,
    lambda_kl: float = 0.02,
) -> VAELossBreakdown:
    """L1 on all features, positions and velocities, plus the mean Gaussian KL."""
    if m.shape != m_hat.shape or mu.shape != logvar.shape:
        raise ValueError("vae_loss shape mismatch")
    err = (m_hat - m).abs()
    l_m = err.mean()
    l_pos = err[..., pos_idx].mean()
    l_vel = err[..., vel_idx].mean()
    l_kl = (0.5 * (mu.pow(2) + logvar.exp() - 1.0 - logvar)).mean()
    total = l_m + lambda_pos * l_pos + lambda_vel * l_vel
    if lambda_kl:
        total = total + lambda_kl * l_kl
    return VAELossBreakdown(l_m, l_pos, l_vel, l_kl, total)


def channel_indices(topology: SkeletonTopology) -> tuple[Tensor, Tensor]:
    return (
        torch.from_numpy(position_channels(topology)),
        torch.from_numpy(velocity_channels(topology)),
    )


def sample_windows(
    clips: Sequence[CaptionedClip], batch: int, window: int, gen: torch.Generator
) -> tuple[Tensor, list[int]]:
    """Random clips (with replacement) cropped or loop-padded to ``window`` frames."""
    ids = torch.randint(len(clips), (batch,), generator=gen).tolist()
    out = []
    for i in ids:
        data = clips[i].motion.data
        slack = max(data.shape[0] - window, 0)
        start = int(torch.randint(slack + 1, (1,), generator=gen)) if slack else 0
        out.append(fit_window(data, window, start))
    return torch.from_numpy(np.stack(out)), ids


def train_vae(
    clips: Sequence[CaptionedClip],
    config: VAEConfig | None = None,
    topology: SkeletonTopology | None = None,
    plan: PoolingPlan | None = None,
    on_step: Callable[[int, VAELossBreakdown, float], None] | None = None,
    checkpoint_path: str | Path | None = None,
    checkpoint_every: int = 0,
) -> tuple[SkeletonVAE, list[dict[str, float]]]:
    """AdamW with linear warmup and step decay. Returns the model and a per-step loss history."""
    if not clips:
        raise ValueError("cannot train on an empty corpus")
    config = config or VAEConfig()
    if topology is None:
        topology, plan = load_skeleton()
    if config.skeleton is None:
        config.skeleton = skeleton_to_dict(topology, plan)
    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    model = SkeletonVAE(topology, plan, config)
    pos_idx, vel_idx = channel_indices(topology)
    opt, sched = make_optimizer(
        model.parameters(), config.lr, config.weight_decay, config.warmup, config.milestones, config.gamma
    )
    history = []
    for step in range(config.steps):
        x, _ = sample_windows(clips, config.batch_size, config.window, gen)
        noise = torch.randn(x.shape[0], config.window // model.frame_factor,
                            plan.stages[-1].n_groups, config.latent_dim, generator=gen)
        m_hat, lat = model(x, noise)
        losses = vae_loss(x, m_hat, lat.mu, lat.logvar, pos_idx, vel_idx,
                          config.lambda_pos, config.lambda_vel, config.lambda_kl)
        check_finite(losses.total, step, "VAE")
        opt.zero_grad(set_to_none=True)
        losses.total.backward()
        opt.step()
        lr = sched.get_last_lr()[0]
        sched.step()
        rec = losses.as_floats()
        rec.update(step=step, lr=lr)
        history.append(rec)
        if on_step:
            on_step(step, losses, lr)
        if checkpoint_path and checkpoint_every and (step + 1) % checkpoint_every == 0:
            save_vae(checkpoint_path, model)
    if checkpoint_path:
        save_vae(checkpoint_path, model)
    return model, history


def encode_motion(model: SkeletonVAE, motion: MotionSequence, noise: Tensor | None = None) -> LatentTensor:
    """Encode one motion; pass ``noise=torch.zeros(...)`` (or use ``.mu``) for the posterior mean."""
    x = torch.from_numpy(motion.data)[None]
    with torch.no_grad():
        lat = model.encode(x, None if noise is None else noise[None])
    return LatentTensor(lat.z[0], lat.mu[0], lat.logvar[0])


def decode_latent(model: SkeletonVAE, z: Tensor, fps: float = 20.0) -> MotionSequence:
    with torch.no_grad():
        x = model.decode(z[None] if z.ndim == 3 else z)
    return MotionSequence(x[0].numpy(), model.topology, fps)


def save_vae(path: str | Path, model: SkeletonVAE) -> None:
    config = model.config.to_dict()
    if config["skeleton"] is None:
        config["skeleton"] = skeleton_to_dict(model.topology, model.plan)
    save_checkpoint(path, "vae", config, model.state_dict())


def load_vae(path: str | Path) -> SkeletonVAE:
    config, state = load_checkpoint(path, "vae")
    cfg = VAEConfig.from_dict(config)
    topology, plan = skeleton_from_dict(cfg.skeleton)
    model = SkeletonVAE(topology, plan, cfg)
    model.load_state_dict(state)
    model.eval()
    return model
