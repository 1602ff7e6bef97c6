"""Skeleto-temporal operators on ``(..., frames, joints, channels)`` tensors."""

from __future__ import annotations

from typing import Callable

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .skeleton import PoolingStage, SkeletonTopology

Linear = Callable[[Tensor], Tensor]


def neighbor_matrix(topology: SkeletonTopology, dtype=torch.float32) -> Tensor:
    """``A[j, n] = 1/|N(j)|`` for tree neighbors; rows of isolated joints stay zero."""
    J = topology.n_joints
    a = torch.zeros(J, J, dtype=dtype)
    for j, nbrs in enumerate(topology.neighbors):
        for n in nbrs:
            a[j, n] = 1.0 / len(nbrs)
    return a


def pool_matrix(stage: PoolingStage, dtype=torch.float32) -> Tensor:
    """``(groups, joints)`` averaging matrix for one pooling stage."""
    p = torch.zeros(stage.n_groups, len(stage.assignment), dtype=dtype)
    for j, g in enumerate(stage.assignment):
        p[g, j] = 1.0
    return p / p.sum(1, keepdim=True)


def unpool_matrix(stage: PoolingStage, dtype=torch.float32) -> Tensor:
    """``(joints, groups)`` 0/1 matrix: each joint sums the pooled joints it derives from."""
    u = torch.zeros(len(stage.assignment), stage.n_groups, dtype=dtype)
    for j, g in enumerate(stage.assignment):
        u[j, g] = 1.0
    return u


def skel_conv(h: Tensor, theta1: Linear, theta2: Linear, neighbors: Tensor) -> Tensor:
    """Graph convolution over joints: own features through ``theta1`` plus the
    neighbor mean of ``theta2`` features."""
    return theta1(h) + torch.einsum("jk,...nkc->...njc", neighbors, theta2(h))


def temp_conv(h: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Width-3, stride-1, zero-padded 1-D convolution over frames, shared by all joints.

    ``weight`` is ``(C_out, C_in, 3)`` in cross-correlation order (previous,
    current, next frame).
    """
    if weight.shape[-1] != 3:
        raise ValueError(f"temporal kernel width must be 3, got {weight.shape[-1]}")
    *lead, n, j, c = h.shape
    x = h.reshape(-1, n, j, c).permute(0, 2, 3, 1).reshape(-1, c, n)
    y = F.conv1d(x, weight, bias, padding=1)
    c_out = y.shape[1]
    return y.reshape(-1, j, c_out, n).permute(0, 3, 1, 2).reshape(*lead, n, j, c_out)


def st_conv(h: Tensor, theta1: Linear, theta2: Linear, neighbors: Tensor, weight: Tensor, bias=None) -> Tensor:
    a = skel_conv(h, theta1, theta2, neighbors)
    b = temp_conv(h, weight, bias)
    if a.shape != b.shape:
        raise ValueError(f"branch shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


def skel_pool(h: Tensor, pool: Tensor) -> Tensor:
    return torch.einsum("gj,...njc->...ngc", pool, h)


def temp_pool(h: Tensor) -> Tensor:
    n = h.shape[-3]
    if n % 2:
        raise ValueError(f"temporal pooling needs an even frame count, got {n}")
    return h.reshape(*h.shape[:-3], n // 2, 2, *h.shape[-2:]).mean(-3)


def st_pool(h: Tensor, pool: Tensor) -> Tensor:
    return temp_pool(skel_pool(h, pool))


def skel_unpool(h: Tensor, unpool: Tensor) -> Tensor:
    return torch.einsum("jg,...ngc->...njc", unpool, h)


def temp_upsample(h: Tensor, target_frames: int) -> Tensor:
    """Linear interpolation to twice the length, pooled samples sitting at the
    centers of their 2-frame windows (edges clamp)."""
    *lead, n, j, c = h.shape
    if target_frames != 2 * n:
        raise ValueError(f"target_frames must be {2 * n}, got {target_frames}")
    x = h.reshape(-1, n, j, c).permute(0, 2, 3, 1).reshape(-1, c, n)
    y = F.interpolate(x, size=target_frames, mode="linear", align_corners=False)
    return y.reshape(-1, j, c, target_frames).permute(0, 3, 1, 2).reshape(*lead, target_frames, j, c)


def st_unpool(h: Tensor, unpool: Tensor, target_frames: int) -> Tensor:
    return temp_upsample(skel_unpool(h, unpool), target_frames)


class SkelConv(nn.Module):
    def __init__(self, topology: SkeletonTopology, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        self.theta1 = nn.Linear(in_dim, out_dim, bias=bias)
        self.theta2 = nn.Linear(in_dim, out_dim, bias=False)
        self.register_buffer("neighbors", neighbor_matrix(topology), persistent=False)

    def forward(self, h: Tensor) -> Tensor:
        return skel_conv(h, self.theta1, self.theta2, self.neighbors)


class TempConv(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        self.conv = nn.Conv1d(in_dim, out_dim, kernel_size=3, padding=1, bias=bias)

    def forward(self, h: Tensor) -> Tensor:
        return temp_conv(h, self.conv.weight, self.conv.bias)


class STConv(nn.Module):
    """SkelConv + TempConv. Activation and residual are left to the caller."""

    def __init__(self, topology: SkeletonTopology, in_dim: int, out_dim: int, bias: bool = True):
        super().__init__()
        self.skel = SkelConv(topology, in_dim, out_dim, bias=bias)
        self.temp = TempConv(in_dim, out_dim, bias=bias)

    def forward(self, h: Tensor) -> Tensor:
        return self.skel(h) + self.temp(h)


class STPool(nn.Module):
    def __init__(self, stage: PoolingStage):
        super().__init__()
        self.register_buffer("pool", pool_matrix(stage), persistent=False)

    def forward(self, h: Tensor) -> Tensor:
        return st_pool(h, self.pool)


class STUnpool(nn.Module):
    def __init__(self, stage: PoolingStage):
        super().__init__()
        self.register_buffer("unpool", unpool_matrix(stage), persistent=False)

    def forward(self, h: Tensor) -> Tensor:
        return st_unpool(h, self.unpool, 2 * h.shape[-3])
