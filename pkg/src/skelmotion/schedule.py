"""Scaled-linear noise schedule, v-parametrization algebra, deterministic DDIM
steps and classifier-free guidance.

Timesteps are integers in ``[1, T]``; index 0 is the clean-data convention
(``alpha = 1``, ``sigma = 0``) used as the target of the last DDIM hop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta_1: float
    beta_T: float
    beta: np.ndarray  # (T + 1,), beta[0] = 0
    alpha: np.ndarray  # sqrt(alpha_bar), alpha[0] = 1
    sigma: np.ndarray  # sqrt(1 - alpha_bar), sigma[0] = 0

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return t

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_1": self.beta_1, "beta_T": self.beta_T}


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 7.5
    p_uncond: float = 0.1
    null_text: str = ""

    def __post_init__(self):
        if self.w < 0:
            raise ValueError("guidance weight must be non-negative")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError("p_uncond must lie in [0, 1]")


def make_schedule(T: int = 1000, beta_1: float = 0.00085, beta_T: float = 0.012) -> NoiseSchedule:
    """``beta_t = (sqrt(b1) + (t-1)/(T-1) * (sqrt(bT) - sqrt(b1)))**2`` for t = 1..T."""
    if T < 2:
        raise ValueError("T must be at least 2")
    if not 0.0 < beta_1 < beta_T < 1.0:
        raise ValueError("need 0 < beta_1 < beta_T < 1")
    t = np.arange(1, T + 1, dtype=np.float64)
    beta = (np.sqrt(beta_1) + (t - 1) / (T - 1) * (np.sqrt(beta_T) - np.sqrt(beta_1))) ** 2
    alpha_bar = np.cumprod(1.0 - beta)
    beta = np.concatenate([[0.0], beta])
    alpha_bar = np.concatenate([[1.0], alpha_bar])
    return NoiseSchedule(T, beta_1, beta_T, beta, np.sqrt(alpha_bar), np.sqrt(1.0 - alpha_bar))


def _coeffs(schedule: NoiseSchedule, t, like: Tensor) -> tuple[Tensor, Tensor]:
    """alpha_t, sigma_t as tensors broadcastable against ``like`` (batch-leading)."""
    if isinstance(t, Tensor) and t.ndim > 0:
        idx = t.long()
        if idx.min() < 0 or idx.max() > schedule.T:
            raise ValueError(f"timesteps outside [0, {schedule.T}]")
        shape = (-1,) + (1,) * (like.ndim - 1)
        a = torch.as_tensor(schedule.alpha, dtype=like.dtype)[idx].reshape(shape)
        s = torch.as_tensor(schedule.sigma, dtype=like.dtype)[idx].reshape(shape)
        return a, s
    t = schedule.check_t(t)
    return (
        torch.tensor(schedule.alpha[t], dtype=like.dtype),
        torch.tensor(schedule.sigma[t], dtype=like.dtype),
    )


def q_sample(x: Tensor, eps: Tensor, t, schedule: NoiseSchedule) -> Tensor:
    a, s = _coeffs(schedule, t, x)
    return a * x + s * eps


def velocity(x: Tensor, eps: Tensor, t, schedule: NoiseSchedule) -> Tensor:
    a, s = _coeffs(schedule, t, x)
    return a * eps - s * x


def recover(z_t: Tensor, v: Tensor, t, schedule: NoiseSchedule) -> tuple[Tensor, Tensor]:
    """Clean sample and noise implied by a noisy latent and its velocity."""
    a, s = _coeffs(schedule, t, z_t)
    return a * z_t - s * v, s * z_t + a * v


def ddim_step(z_t: Tensor, v_hat: Tensor, t: int, t_prev: int, schedule: NoiseSchedule) -> Tensor:
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev``."""
    t, t_prev = schedule.check_t(t), schedule.check_t(t_prev)
    if t_prev >= t:
        raise ValueError(f"DDIM needs t_prev < t, got {t_prev} >= {t}")
    x_hat, eps_hat = recover(z_t, v_hat, t, schedule)
    return q_sample(x_hat, eps_hat, t_prev, schedule)


def cfg_combine(v_uncond: Tensor, v_cond: Tensor, w: float) -> Tensor:
    """``v_uncond + w * (v_cond - v_uncond)``.

    Evaluated with ``torch.lerp`` so that w = 0 and w = 1 return the
    respective input exactly.
    """
    if v_uncond.shape != v_cond.shape:
        raise ValueError(f"shape mismatch {tuple(v_uncond.shape)} vs {tuple(v_cond.shape)}")
    return torch.lerp(v_uncond, v_cond, float(w))


def ddim_timesteps(T: int = 1000, n_steps: int = 50) -> list[int]:
    """Descending timesteps ``T, T - k, ...`` with stride ``k = T // n_steps``;
    the sampler takes one more hop from the last entry to 0."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must lie in [1, {T}], got {n_steps}")
    stride = T // n_steps
    return [T - i * stride for i in range(n_steps)]
