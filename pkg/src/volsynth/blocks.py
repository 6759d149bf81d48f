"""Reusable convolutional building blocks (2D and 3D variants)."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32)
                      / max(half - 1, 1))
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class TimeMLP(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.net = nn.Sequential(nn.Linear(dim, dim * 2), nn.SiLU(),
                                 nn.Linear(dim * 2, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.net(timestep_embedding(t, self.dim))


class ResBlock2d(nn.Module):
    """GroupNorm/SiLU/conv x2 with a skip; optional timestep modulation."""

    def __init__(self, cin: int, cout: int, temb_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout) if temb_dim else None
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None and temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class ResBlock3d(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, cout) if temb_dim else None
        self.skip = nn.Conv3d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None and temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample2d(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv2d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample2d(nn.Module):
    def __init__(self, ch: int, factor: int = 2):
        super().__init__()
        self.factor = factor
        self.conv = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=self.factor, mode="nearest")
        return self.conv(x)


class Downsample3d(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv3d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class DepthUpsample3d(nn.Module):
    """Upsamples the depth axis only; H and W stay untouched."""

    def __init__(self, ch: int, factor: int = 2):
        super().__init__()
        self.factor = factor
        self.conv = nn.Conv3d(ch, ch, 3, padding=1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=(self.factor, 1, 1), mode="nearest")
        return self.conv(x)


class Adaptor3d(nn.Module):
    """Residual 3D mixing over a stack of 2D feature maps.

    Input is a (N, C, h, w) stack of per-slice features; the stack axis is
    reinterpreted as depth for a 3x3x3 convolution. Output is
    ``x + alpha * conv(x)`` with alpha a learnable scalar starting at 0,
    so the untrained adaptor is exactly the identity.
    """

    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv3d(ch, ch, 3, padding=1)
        self.alpha = nn.Parameter(torch.zeros(()))

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        # stack: (N, C, h, w) -> conv over (1, C, N, h, w)
        x = stack.permute(1, 0, 2, 3)[None]
        mixed = self.conv(x)[0].permute(1, 0, 2, 3)
        return stack + self.alpha * mixed

    def forward_batched(self, stacks: torch.Tensor) -> torch.Tensor:
        # stacks: (B, N, C, h, w) -> conv over (B, C, N, h, w)
        x = stacks.permute(0, 2, 1, 3, 4)
        mixed = self.conv(x).permute(0, 2, 1, 3, 4)
        return stacks + self.alpha * mixed


def zero_init(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module
