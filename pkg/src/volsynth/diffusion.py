"""Denoising diffusion machinery shared by both cascade stages.

Covers the noise schedule, the closed-form forward process, the
noise-prediction training objective, ancestral (DDPM) and deterministic
accelerated (DDIM, eta = 0) samplers, the 2D/3D denoiser networks, and
label-condition encoders. Conditioning of any kind enters a denoiser by
channel-axis concatenation with the noisy latent.

Timesteps are 1-indexed: t in [1, T]. Schedule arrays have length T+1
with index 0 holding the identity sentinel (alpha_bar[0] = 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .blocks import (Downsample2d, Downsample3d, ResBlock2d, ResBlock3d,
                     TimeMLP, Upsample2d, _groups, zero_init)
from .errors import ComputeError, ValidationError


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step diffusion coefficients, float64 throughout."""

    T: int
    beta: np.ndarray        # (T+1,), beta[0] = 0 sentinel
    alpha: np.ndarray       # 1 - beta, alpha[0] = 1
    alpha_bar: np.ndarray   # running product, alpha_bar[0] = 1
    kind: str = "linear"

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.T:
            raise ValidationError(f"timestep {t} outside [1, {self.T}]")
        return t


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    if T < 1:
        raise ValidationError(f"schedule needs T >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValidationError(
            f"betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})")
    if kind != "linear":
        raise ValidationError(f"unknown schedule kind {kind!r}")
    beta = np.zeros(T + 1, dtype=np.float64)
    beta[1:] = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, kind=kind)


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor,
             schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward process:
    x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps."""
    if eps.shape != x0.shape:
        raise ValidationError(f"eps shape {tuple(eps.shape)} != x0 {tuple(x0.shape)}")
    if torch.is_tensor(t):
        tl = t.long().reshape(-1)
        if tl.numel() != x0.shape[0]:
            raise ValidationError("per-sample t must match the batch size")
        if int(tl.min()) < 1 or int(tl.max()) > schedule.T:
            raise ValidationError(f"timesteps outside [1, {schedule.T}]")
        ab = torch.from_numpy(schedule.alpha_bar[tl.numpy()]).to(x0.dtype)
        shape = (-1,) + (1,) * (x0.ndim - 1)
        return (ab.sqrt().reshape(shape) * x0
                + (1.0 - ab).sqrt().reshape(shape) * eps)
    t = schedule.check_t(t)
    ab = float(schedule.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def diffusion_loss(model, x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor,
                   schedule: NoiseSchedule, cond: torch.Tensor | None = None
                   ) -> torch.Tensor:
    """Noise-prediction MSE at the given timesteps."""
    x_t = q_sample(x0, t, eps, schedule)
    if not torch.is_tensor(t):
        t = torch.full((x0.shape[0],), int(t), dtype=torch.long)
    pred = model(x_t, t, cond)
    return F.mse_loss(pred, eps)


def train_diffusion_step(model, x0: torch.Tensor, schedule: NoiseSchedule,
                         optimizer=None, cond: torch.Tensor | None = None,
                         generator: torch.Generator | None = None) -> float:
    """One training step: uniform t in [1,T], fresh Gaussian eps, MSE loss.

    With an optimizer, also backprops and steps. Raises ComputeError on a
    non-finite loss.
    """
    B = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    loss = diffusion_loss(model, x0, t, eps, schedule, cond)
    if not torch.isfinite(loss):
        raise ComputeError(f"diffusion loss is non-finite: {float(loss)}")
    if optimizer is not None:
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
    return float(loss.detach())


# ----------------------------------------------------------------------
# Samplers

def ddim_timesteps(T: int, num_steps: int) -> list[int]:
    """Evenly strided ascending subset of [1, T] ending at T."""
    if num_steps > T:
        raise ValidationError(f"num_steps {num_steps} > T {T}")
    if num_steps < 1:
        raise ValidationError("num_steps must be >= 1")
    stride = T // num_steps
    return [T - stride * i for i in reversed(range(num_steps))]


def _prep_noise(shape, seed, noise, generator):
    if noise is not None:
        if noise.ndim != len(shape) + 1:
            raise ValidationError("explicit noise must carry a leading batch axis")
        return noise, True
    g = generator
    if g is None:
        g = torch.Generator()
        g.manual_seed(int(seed) & (2 ** 63 - 1) if seed is not None else 0)
    return torch.randn((1, *shape), generator=g), False


@torch.no_grad()
def ddpm_sample(model, shape, schedule: NoiseSchedule, seed: int | None = None,
                cond: torch.Tensor | None = None, *,
                noise: torch.Tensor | None = None,
                generator: torch.Generator | None = None) -> torch.Tensor:
    """Ancestral sampling from pure noise over all T steps."""
    g = generator
    if g is None:
        g = torch.Generator()
        g.manual_seed(int(seed) & (2 ** 63 - 1) if seed is not None else 0)
    x, batched = _prep_noise(shape, seed, noise, g)
    B = x.shape[0]
    for t in range(schedule.T, 0, -1):
        tt = torch.full((B,), t, dtype=torch.long)
        eps = model(x, tt, cond)
        a, ab, b = (float(schedule.alpha[t]), float(schedule.alpha_bar[t]),
                    float(schedule.beta[t]))
        mean = (x - b / math.sqrt(1.0 - ab) * eps) / math.sqrt(a)
        if t > 1:
            x = mean + math.sqrt(b) * torch.randn(x.shape, generator=g)
        else:
            x = mean
    return x if batched else x[0]


@torch.no_grad()
def ddim_sample(model, shape, schedule: NoiseSchedule, num_steps: int,
                seed: int | None = None, cond: torch.Tensor | None = None, *,
                noise: torch.Tensor | None = None) -> torch.Tensor:
    """Deterministic DDIM (eta = 0) over an evenly strided timestep subset.

    A pure function of (model, shape, schedule, num_steps, seed, cond);
    pass ``noise`` to supply the start point directly (used for per-slice
    seeding), in which case it must carry a leading batch axis.
    """
    ts = ddim_timesteps(schedule.T, num_steps)
    x, batched = _prep_noise(shape, seed, noise, None)
    B = x.shape[0]
    for j in range(len(ts) - 1, -1, -1):
        t = ts[j]
        t_prev = ts[j - 1] if j > 0 else 0
        tt = torch.full((B,), t, dtype=torch.long)
        eps = model(x, tt, cond)
        ab_t = float(schedule.alpha_bar[t])
        ab_p = float(schedule.alpha_bar[t_prev])
        x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
        x = math.sqrt(ab_p) * x0 + math.sqrt(1.0 - ab_p) * eps
    return x if batched else x[0]


# ----------------------------------------------------------------------
# Denoiser networks: small U-shaped residual nets with timestep embedding.
# 3D for the global latent stage, 2D for the slice refiner.

class Denoiser2d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, base: int = 32):
        super().__init__()
        temb = base * 2
        self.time = TimeMLP(temb)
        self.conv_in = nn.Conv2d(in_channels, base, 3, padding=1)
        self.enc1 = ResBlock2d(base, base, temb)
        self.enc2 = ResBlock2d(base, base, temb)
        self.down = Downsample2d(base)
        self.mid1 = ResBlock2d(base, base * 2, temb)
        self.mid2 = ResBlock2d(base * 2, base * 2, temb)
        self.up = Upsample2d(base * 2)
        self.dec1 = ResBlock2d(base * 3, base, temb)
        self.dec2 = ResBlock2d(base, base, temb)
        self.out = nn.Sequential(
            nn.GroupNorm(_groups(base), base), nn.SiLU(),
            zero_init(nn.Conv2d(base, out_channels, 3, padding=1)))

    def forward(self, x, t, cond=None):
        if cond is not None:
            if cond.shape[0] != x.shape[0] or cond.shape[2:] != x.shape[2:]:
                raise ValidationError(
                    f"cond shape {tuple(cond.shape)} incompatible with x {tuple(x.shape)}")
            x = torch.cat([x, cond], dim=1)
        emb = self.time(t)
        h1 = self.enc2(self.enc1(self.conv_in(x), emb), emb)
        h2 = self.mid2(self.mid1(self.down(h1), emb), emb)
        h = self.up(h2)
        h = self.dec2(self.dec1(torch.cat([h, h1], dim=1), emb), emb)
        return self.out(h)


class Denoiser3d(nn.Module):
    def __init__(self, in_channels: int, out_channels: int, base: int = 32):
        super().__init__()
        temb = base * 2
        self.time = TimeMLP(temb)
        self.conv_in = nn.Conv3d(in_channels, base, 3, padding=1)
        self.enc1 = ResBlock3d(base, base, temb)
        self.enc2 = ResBlock3d(base, base, temb)
        self.down = Downsample3d(base)
        self.mid1 = ResBlock3d(base, base * 2, temb)
        self.mid2 = ResBlock3d(base * 2, base * 2, temb)
        self.up_conv = nn.Conv3d(base * 2, base * 2, 3, padding=1)
        self.dec1 = ResBlock3d(base * 3, base, temb)
        self.dec2 = ResBlock3d(base, base, temb)
        self.out = nn.Sequential(
            nn.GroupNorm(_groups(base), base), nn.SiLU(),
            zero_init(nn.Conv3d(base, out_channels, 3, padding=1)))

    def forward(self, x, t, cond=None):
        if cond is not None:
            if cond.shape[0] != x.shape[0] or cond.shape[2:] != x.shape[2:]:
                raise ValidationError(
                    f"cond shape {tuple(cond.shape)} incompatible with x {tuple(x.shape)}")
            x = torch.cat([x, cond], dim=1)
        emb = self.time(t)
        h1 = self.enc2(self.enc1(self.conv_in(x), emb), emb)
        h2 = self.mid2(self.mid1(self.down(h1), emb), emb)
        h = F.interpolate(h2, size=h1.shape[2:], mode="nearest")
        h = self.up_conv(h)
        h = self.dec2(self.dec1(torch.cat([h, h1], dim=1), emb), emb)
        return self.out(h)


# ----------------------------------------------------------------------
# Label conditioning

def one_hot_labels(labels, class_count: int) -> torch.Tensor:
    """Integer label grid -> float one-hot with classes as leading axis."""
    lab = torch.as_tensor(np.asarray(labels)).long()
    if lab.numel() and (int(lab.max()) >= class_count or int(lab.min()) < 0):
        raise ValidationError(
            f"label values outside [0, {class_count})")
    oh = F.one_hot(lab, class_count).float()
    return oh.movedim(-1, 0)


class LabelEncoder3d(nn.Module):
    """Learned downsampler from one-hot labels to conditioning channels at
    the 3D latent resolution."""

    def __init__(self, class_count: int, cond_channels: int, base: int = 16):
        super().__init__()
        self.class_count = class_count
        self.net_in = nn.Conv3d(class_count, base, 3, padding=1)
        self.body = nn.Sequential(
            nn.SiLU(), nn.Conv3d(base, base, 3, stride=2, padding=1),
            nn.SiLU(), nn.Conv3d(base, cond_channels, 3, padding=1))

    def forward(self, onehot: torch.Tensor, target_shape) -> torch.Tensor:
        # pool to 2x the latent grid first; convs then learn the encoding
        pooled = F.adaptive_avg_pool3d(onehot, tuple(2 * s for s in target_shape))
        out = self.body(self.net_in(pooled))
        if out.shape[2:] != tuple(target_shape):
            out = F.adaptive_avg_pool3d(out, tuple(target_shape))
        return out


class LabelEncoder2d(nn.Module):
    def __init__(self, class_count: int, cond_channels: int, base: int = 16):
        super().__init__()
        self.class_count = class_count
        self.net_in = nn.Conv2d(class_count, base, 3, padding=1)
        self.body = nn.Sequential(
            nn.SiLU(), nn.Conv2d(base, base, 3, stride=2, padding=1),
            nn.SiLU(), nn.Conv2d(base, cond_channels, 3, padding=1))

    def forward(self, onehot: torch.Tensor, target_shape) -> torch.Tensor:
        pooled = F.adaptive_avg_pool2d(onehot, tuple(2 * s for s in target_shape))
        out = self.body(self.net_in(pooled))
        if out.shape[2:] != tuple(target_shape):
            out = F.adaptive_avg_pool2d(out, tuple(target_shape))
        return out


def encode_condition(encoder, labels, class_count: int, target_shape,
                     batched: bool = False) -> torch.Tensor:
    """One-hot encode labels and map them to conditioning channels at the
    latent resolution via the learned encoder."""
    oh = one_hot_labels(labels, class_count)
    if not batched:
        oh = oh[None]
    out = encoder(oh, target_shape)
    return out if batched else out[0]


def widen_conv_in(old_conv, extra_channels: int):
    """Clone a conv with extra input channels initialized to zero, so a
    conditional model starts out exactly equal to its unconditional
    parent."""
    cls = type(old_conv)
    new = cls(old_conv.in_channels + extra_channels, old_conv.out_channels,
              old_conv.kernel_size, padding=old_conv.padding)
    with torch.no_grad():
        new.weight.zero_()
        new.weight[:, :old_conv.in_channels] = old_conv.weight
        new.bias.copy_(old_conv.bias)
    return new


def conditionalize(model, extra_channels: int):
    """Build a conditional twin of a denoiser with widened input conv."""
    cls = type(model)
    base = model.conv_in.out_channels
    out_ch = model.out[-1].out_channels
    twin = cls(model.conv_in.in_channels + extra_channels, out_ch, base)
    state = {k: v for k, v in model.state_dict().items()
             if not k.startswith("conv_in.")}
    twin.load_state_dict(state, strict=False)
    twin.conv_in = widen_conv_in(model.conv_in, extra_channels)
    return twin
