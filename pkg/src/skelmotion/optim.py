"""Optimizer and learning-rate schedule shared by both training loops."""

from __future__ import annotations

import bisect
from typing import Sequence

import torch


class TrainingDivergedError(RuntimeError):
    """A training loss became NaN or infinite."""


def warmup_step_lr(step: int, warmup: int, milestones: Sequence[int], gamma: float) -> float:
    """Multiplier on the base rate: linear ramp from 0 over ``warmup`` steps,
    then ``gamma`` applied once per passed milestone."""
    ramp = min(1.0, (step + 1) / warmup) if warmup > 0 else 1.0
    return ramp * gamma ** bisect.bisect_right(sorted(milestones), step)


def make_optimizer(params, lr: float, weight_decay: float, warmup: int, milestones: Sequence[int], gamma: float):
    opt = torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: warmup_step_lr(s, warmup, milestones, gamma)
    )
    return opt, sched


def check_finite(loss: torch.Tensor, step: int, what: str) -> None:
    if not torch.isfinite(loss):
        raise TrainingDivergedError(f"{what} loss is {loss.item()} at step {step}")
