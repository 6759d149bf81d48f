"""Non-holistic autoencoder: a 3D thumbnail encoder, a depth-only latent
super-resolver, a 2D slice decoder with residual 3D adaptors for
multi-slice decoding, and an auxiliary high-resolution slice encoder.

The full-resolution volume is never processed as a whole: encoding sees a
downsampled thumbnail, decoding emits one image slice at a time from a
window of k consecutive latent slices. Activation memory during decoding
is therefore independent of the volume depth.

The multi-slice decode path runs its 2D stages slice-by-slice (batch of
one) rather than batched over the window: batched CPU convolutions are
not bitwise identical to single-sample ones, and the adaptor-off identity
(alpha = 0 reproduces plain 2D decoding exactly) is a hard contract.
A separate batched path exists for training, where bitwise parity does
not matter.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .blocks import (Adaptor3d, DepthUpsample3d, Downsample2d, Downsample3d,
                     ResBlock2d, ResBlock3d, Upsample2d, _groups)
from .config import RunConfig
from .errors import ValidationError

LOGVAR_CLAMP = (-30.0, 20.0)


def _factorize(total: int) -> list[int]:
    """Split an integer upsampling factor into x2 stages plus an odd tail."""
    if total < 1:
        raise ValidationError(f"upsampling factor must be >= 1, got {total}")
    factors = []
    while total % 2 == 0:
        factors.append(2)
        total //= 2
    if total > 1:
        factors.append(total)
    return factors


def _per_slice(module: nn.Module, stack: torch.Tensor) -> torch.Tensor:
    """Apply a 2D module to each element of a stack with batch size 1."""
    return torch.cat([module(stack[j:j + 1]) for j in range(stack.shape[0])], dim=0)


class ThumbnailEncoder3d(nn.Module):
    """Fully 3D encoder from a (2D',2H',2W') thumbnail to a Gaussian
    posterior over the (c,D',H',W') latent."""

    def __init__(self, latent_channels: int, base: int):
        super().__init__()
        self.conv_in = nn.Conv3d(1, base, 3, padding=1)
        self.res1 = ResBlock3d(base, base)
        self.down = Downsample3d(base)
        self.res2 = ResBlock3d(base, base * 2)
        self.res3 = ResBlock3d(base * 2, base * 2)
        self.head = nn.Sequential(
            nn.GroupNorm(_groups(base * 2), base * 2), nn.SiLU(),
            nn.Conv3d(base * 2, 2 * latent_channels, 3, padding=1))

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.down(self.res1(self.conv_in(x)))
        h = self.head(self.res3(self.res2(h)))
        mean, logvar = h.chunk(2, dim=1)
        return mean, logvar.clamp(*LOGVAR_CLAMP)


class DepthSuperResolver(nn.Module):
    """Uniaxial super-resolution: upsamples the latent depth axis by an
    integer factor while leaving channels, H' and W' untouched."""

    def __init__(self, channels: int, factor: int, base: int):
        super().__init__()
        self.factor = factor
        self.conv_in = nn.Conv3d(channels, base, 3, padding=1)
        stages = []
        for f in _factorize(factor):
            stages += [ResBlock3d(base, base), DepthUpsample3d(base, f)]
        stages.append(ResBlock3d(base, base))
        self.stages = nn.Sequential(*stages)
        self.head = nn.Sequential(
            nn.GroupNorm(_groups(base), base), nn.SiLU(),
            nn.Conv3d(base, channels, 3, padding=1))

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.head(self.stages(self.conv_in(z)))


class SliceDecoder2d(nn.Module):
    """2D latent-slice decoder with one residual 3D adaptor per resblock.

    The 2D weights are trained once (stage 1) and frozen; adaptors are
    trained later and gate their contribution through a per-adaptor
    scalar alpha initialized at 0.
    """

    def __init__(self, latent_channels: int, plane_factor: int, base: int):
        super().__init__()
        factors = _factorize(plane_factor)
        n_up = len(factors)
        # widest at latent resolution, thinning as spatial size grows
        chans = [base * 2 ** max(0, n_up - 1 - i) for i in range(n_up + 1)]
        self.chans = chans
        self.factors = factors
        self.stem = nn.Conv2d(latent_channels, chans[0], 3, padding=1)
        res_blocks, adaptors, upsamples = [], [], []
        for i in range(n_up + 1):
            cout = chans[min(i + 1, n_up)]
            res_blocks.append(ResBlock2d(chans[i], cout))
            adaptors.append(Adaptor3d(cout))
            upsamples.append(Upsample2d(cout, factors[i]) if i < n_up else nn.Identity())
        self.res_blocks = nn.ModuleList(res_blocks)
        self.adaptors = nn.ModuleList(adaptors)
        self.upsamples = nn.ModuleList(upsamples)
        out_ch = chans[-1]
        self.head = nn.Sequential(
            nn.GroupNorm(_groups(out_ch), out_ch), nn.SiLU(),
            nn.Conv2d(out_ch, 1, 3, padding=1), nn.Tanh())

    # -- parameter partitions -------------------------------------------
    def params_2d(self):
        """Everything except the adaptors (the frozen part after stage 1)."""
        ada = {id(p) for p in self.adaptors.parameters()}
        return [p for p in self.parameters() if id(p) not in ada]

    def set_alpha(self, value: float) -> None:
        with torch.no_grad():
            for a in self.adaptors:
                a.alpha.fill_(value)

    # -- forward paths ----------------------------------------------------
    def forward_2d(self, x: torch.Tensor) -> torch.Tensor:
        """Plain per-slice 2D decoding, (N,c,H',W') -> (N,1,H,W)."""
        h = self.stem(x)
        for res, up in zip(self.res_blocks, self.upsamples):
            h = up(res(h))
        return self.head(h)

    def forward_window(self, window: torch.Tensor) -> torch.Tensor:
        """Adapted decoding of a window, (k,c,H',W') -> (k,1,H,W).

        2D modules run slice-by-slice so that with all alpha = 0 the
        output is bitwise equal to :meth:`forward_2d` on each slice.
        """
        stack = window.contiguous()
        stack = _per_slice(self.stem, stack)
        for res, ada, up in zip(self.res_blocks, self.adaptors, self.upsamples):
            stack = _per_slice(res, stack)
            stack = ada(stack)
            if not isinstance(up, nn.Identity):
                stack = _per_slice(up, stack)
        return _per_slice(self.head, stack)

    def forward_stack_batched(self, stack: torch.Tensor) -> torch.Tensor:
        """Holistic variant: the whole stack is decoded in one batched
        pass, so activations grow linearly with the stack size. Used as
        the memory-profiling counterfactual, not as a correctness path."""
        h = self.stem(stack)
        for res, ada, up in zip(self.res_blocks, self.adaptors, self.upsamples):
            h = ada(res(h))
            h = up(h)
        return self.head(h)

    def forward_windows_batched(self, wins: torch.Tensor) -> torch.Tensor:
        """Training path: (B,k,c,H',W') -> center predictions (B,1,H,W)."""
        B, k = wins.shape[:2]
        h = wins.reshape(B * k, *wins.shape[2:])
        h = self.stem(h)
        for res, ada, up in zip(self.res_blocks, self.adaptors, self.upsamples):
            h = res(h)
            h = ada.forward_batched(h.reshape(B, k, *h.shape[1:]))
            h = up(h.reshape(B * k, *h.shape[2:]))
        h = h.reshape(B, k, *h.shape[1:])[:, k // 2]
        return self.head(h)


class SliceEncoder2d(nn.Module):
    """2D slice encoder mirroring the decoder; used both as the disposable
    stage-1 training encoder (posterior out) and as the high-resolution
    auxiliary encoder (deterministic out)."""

    def __init__(self, latent_channels: int, plane_factor: int, base: int,
                 posterior: bool):
        super().__init__()
        factors = _factorize(plane_factor)
        n_down = len(factors)
        chans = [base * 2 ** max(0, n_down - 1 - i) for i in range(n_down + 1)][::-1]
        self.posterior = posterior
        self.stem = nn.Conv2d(1, chans[0], 3, padding=1)
        blocks = []
        for i in range(n_down):
            blocks += [ResBlock2d(chans[i], chans[i + 1]), Downsample2d(chans[i + 1])]
        blocks.append(ResBlock2d(chans[-1], chans[-1]))
        self.blocks = nn.Sequential(*blocks)
        out_ch = 2 * latent_channels if posterior else latent_channels
        self.head = nn.Sequential(
            nn.GroupNorm(_groups(chans[-1]), chans[-1]), nn.SiLU(),
            nn.Conv2d(chans[-1], out_ch, 3, padding=1))
        self._target_factor = plane_factor

    def forward(self, x: torch.Tensor):
        h = self.blocks(self.stem(x))
        want = (x.shape[-2] // self._target_factor, x.shape[-1] // self._target_factor)
        if h.shape[-2:] != want:
            h = F.adaptive_avg_pool2d(h, want)
        out = self.head(h)
        if self.posterior:
            mean, logvar = out.chunk(2, dim=1)
            return mean, logvar.clamp(*LOGVAR_CLAMP)
        return out


class NHAE(nn.Module):
    """The assembled non-holistic autoencoder.

    Single-sample tensor conventions (no batch axis on the public ops):
    volumes (D,H,W), thumbnails (tD,tH,tW), latents (c,D',H',W'),
    latent slices (c,H',W'), image slices (H,W).
    """

    def __init__(self, cfg: RunConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.latent_channels
        self.encoder3d = ThumbnailEncoder3d(c, cfg.enc_base)
        self.depth_sr = DepthSuperResolver(c, cfg.depth_factor, cfg.sr_base)
        self.decoder2d = SliceDecoder2d(c, cfg.plane_factor, cfg.dec_base)
        self.hr_encoder = SliceEncoder2d(c, cfg.plane_factor, cfg.dec_base,
                                         posterior=False)
        self.train_encoder2d = SliceEncoder2d(c, cfg.plane_factor, cfg.dec_base,
                                              posterior=True)

    # ------------------------------------------------------------------
    def _check(self, tensor, shape, what):
        if tuple(tensor.shape) != tuple(shape):
            raise ValidationError(f"{what}: expected shape {tuple(shape)}, "
                                  f"got {tuple(tensor.shape)}")

    def encode_thumbnail(self, thumb: torch.Tensor):
        """Thumbnail volume -> (mean, logvar) of the latent posterior."""
        self._check(thumb, self.cfg.thumbnail_shape, "encode_thumbnail")
        mean, logvar = self.encoder3d(thumb[None, None])
        return mean[0], logvar[0]

    @staticmethod
    def sample_latent(mean, logvar, generator=None):
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        return mean + torch.exp(0.5 * logvar) * eps

    def uniaxial_superres(self, z: torch.Tensor) -> torch.Tensor:
        """(c,D',H',W') -> (c,D,H',W'); only the depth axis changes."""
        self._check(z, self.cfg.latent_shape, "uniaxial_superres")
        return self.depth_sr(z[None])[0]

    def decode_slice_2d(self, s: torch.Tensor) -> torch.Tensor:
        """(c,H',W') -> (H,W) via the pure 2D path, output in [-1,1]."""
        c = self.cfg.latent_channels
        self._check(s, (c, self.cfg.latent_height, self.cfg.latent_width),
                    "decode_slice_2d")
        return self.decoder2d.forward_2d(s[None])[0, 0]

    def decode_multislice(self, window: torch.Tensor) -> torch.Tensor:
        """(k,c,H',W') window -> the center slice's decoded image (H,W)."""
        k = self.cfg.window
        c = self.cfg.latent_channels
        self._check(window, (k, c, self.cfg.latent_height, self.cfg.latent_width),
                    "decode_multislice")
        return self.decoder2d.forward_window(window)[k // 2, 0]

    def window_indices(self, i: int, depth: int) -> list[int]:
        """Replicate-padded window of k slice indices centered at i."""
        half = self.cfg.window // 2
        return [min(max(j, 0), depth - 1) for j in range(i - half, i + half + 1)]

    @torch.no_grad()
    def decode_volume(self, z_seq: torch.Tensor, sink):
        """Stream-decode an upsampled latent (c,D,H',W') slice by slice.

        Each output slice is written to the sink as soon as it is
        computed; only one k-window of latent slices is live at a time.
        """
        c, D = z_seq.shape[0], z_seq.shape[1]
        if c != self.cfg.latent_channels:
            raise ValidationError(f"decode_volume: expected {self.cfg.latent_channels} "
                                  f"channels, got {c}")
        if D < self.cfg.window:
            raise ValidationError(f"decode_volume: depth {D} < window {self.cfg.window}")
        for i in range(D):
            idx = self.window_indices(i, D)
            window = z_seq[:, idx].permute(1, 0, 2, 3)
            image = self.decode_multislice(window)
            sink.write(i, image.numpy())
        return sink.result()

    @torch.no_grad()
    def decode_volume_holistic(self, z_seq: torch.Tensor, sink):
        """Decode the whole latent sequence in one batched pass (memory
        comparison strategy; activations scale with D)."""
        D = z_seq.shape[1]
        stack = z_seq.permute(1, 0, 2, 3).contiguous()
        images = self.decoder2d.forward_stack_batched(stack)
        for i in range(D):
            sink.write(i, images[i, 0].numpy())
        return sink.result()

    def encode_slice_hr(self, x: torch.Tensor) -> torch.Tensor:
        """(H,W) image slice -> (c,H',W') latent slice, decoder frozen."""
        self._check(x, (self.cfg.height, self.cfg.width), "encode_slice_hr")
        return self.hr_encoder(x[None, None])[0]
