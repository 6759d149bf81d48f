"""Staged training for the autoencoder and the two diffusion stages.

Stage order (enforced by checkpoint fingerprints, see checkpoint.py):

1. ``nhae-2d``     — 2D slice autoencoder: the slice decoder plus a
                     disposable 2D training encoder, on random slices.
2. ``nhae-3d``     — freeze the 2D decoder; train the thumbnail 3D
                     encoder, the depth super-resolver, and the adaptors
                     by reconstructing one randomly chosen slice per
                     sample per step.
3. ``nhae-hr``     — freeze everything; train the high-resolution slice
                     encoder against the frozen decoder.
4. ``diff3d``      — global 3D diffusion on thumbnail-path latents.
5. ``diffslice``   — 2D slice refiner: generates hr-encoder latents
                     conditioned on the depth-upsampled latent slice.
6. ``conditional`` — widen both denoisers with label-condition channels
                     and fine-tune, starting from the unconditional
                     weights (extra input channels zero-initialized).

Loss everywhere in the autoencoder stages is L1 reconstruction plus a
small KL penalty on the relevant posterior; adversarial/perceptual terms
are deliberately not implemented (see ``extension hooks`` in README).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import diffusion as dm
from .config import RunConfig
from .errors import ComputeError, DependencyError, ValidationError
from .nhae import NHAE
from .volume import LabelVolume, Volume, resample_volume
from .volume_io import load_labels, load_volume


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    def save_csv(self, path) -> None:
        lines = ["step,loss"]
        lines += [f"{i},{l:.6g}" for i, l in enumerate(self.losses)]
        Path(path).write_text("\n".join(lines) + "\n")


def _check_finite(loss, step):
    if not torch.isfinite(loss):
        raise ComputeError(f"non-finite loss at step {step}: {float(loss)}")


def kl_divergence(mean: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """KL(q || N(0,1)), summed over latent dims, averaged over the batch."""
    per_sample = -0.5 * (1 + logvar - mean.pow(2) - logvar.exp()).flatten(1).sum(1)
    return per_sample.mean()


# ----------------------------------------------------------------------
# dataset plumbing

def load_dataset(dataset_dir: str | Path,
                 with_labels: bool = False):
    """Load every phantom pair written by ``volsynth gen-phantoms``."""
    dataset_dir = Path(dataset_dir)
    vols = sorted(p for p in dataset_dir.glob("sample_*.raw")
                  if not p.stem.endswith("_labels"))
    if not vols:
        raise DependencyError(f"no sample_*.raw volumes in {dataset_dir}")
    volumes = [load_volume(p) for p in vols]
    if not with_labels:
        return volumes, None
    labels = []
    for p in vols:
        lp = p.with_name(p.stem + "_labels.raw")
        if not lp.is_file():
            raise DependencyError(f"missing labels for {p}: {lp}")
        labels.append(load_labels(lp))
    return volumes, labels


def volumes_to_tensor(volumes: list[Volume]) -> torch.Tensor:
    return torch.stack([torch.from_numpy(v.voxels) for v in volumes])[:, None]


def make_thumbnails(volumes: list[Volume], cfg: RunConfig) -> torch.Tensor:
    thumbs = [resample_volume(v, cfg.thumbnail_shape).voxels for v in volumes]
    return torch.from_numpy(np.stack(thumbs))[:, None]


# ----------------------------------------------------------------------
# NHAE stages

def train_nhae_2d(nhae: NHAE, vols: torch.Tensor, cfg: RunConfig,
                  steps: int | None = None, seed: int = 0,
                  log_every: int = 100) -> TrainLog:
    steps = cfg.steps_nhae_2d if steps is None else steps
    g = torch.Generator().manual_seed(seed)
    trained = list(nhae.decoder2d.params_2d()) + list(nhae.train_encoder2d.parameters())
    for p in trained:
        p.requires_grad_(True)
    opt = torch.optim.Adam(trained, lr=cfg.lr)
    N, _, D = vols.shape[:3]
    log = TrainLog()
    t0 = time.time()
    for step in range(steps):
        vi = torch.randint(N, (cfg.batch_slices,), generator=g)
        si = torch.randint(D, (cfg.batch_slices,), generator=g)
        x = vols[vi, :, si]  # (B,1,H,W)
        mean, logvar = nhae.train_encoder2d(x)
        z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=g)
        recon = nhae.decoder2d.forward_2d(z)
        loss = (recon - x).abs().mean() + cfg.kl_weight * kl_divergence(mean, logvar)
        _check_finite(loss, step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log.losses.append(float(loss.detach()))
    log.seconds = time.time() - t0
    return log


def gather_windows(z_sr: torch.Tensor, centers: torch.Tensor, k: int) -> torch.Tensor:
    """(B,c,D,H',W') + per-sample center index -> (B,k,c,H',W') windows
    with replicate padding at the volume boundaries."""
    B, c, D = z_sr.shape[:3]
    half = k // 2
    offs = torch.arange(-half, half + 1)
    idx = (centers[:, None] + offs[None, :]).clamp_(0, D - 1)  # (B,k)
    wins = z_sr[torch.arange(B)[:, None], :, idx]  # (B,k,c,H',W')
    return wins


def train_nhae_3d(nhae: NHAE, vols: torch.Tensor, thumbs: torch.Tensor,
                  cfg: RunConfig, steps: int | None = None, seed: int = 0
                  ) -> TrainLog:
    steps = cfg.steps_nhae_3d if steps is None else steps
    g = torch.Generator().manual_seed(seed + 1)
    for p in nhae.decoder2d.params_2d():
        p.requires_grad_(False)
    params = (list(nhae.encoder3d.parameters())
              + list(nhae.depth_sr.parameters())
              + list(nhae.decoder2d.adaptors.parameters()))
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=cfg.lr)
    N, _, D = vols.shape[:3]
    k = cfg.window
    log = TrainLog(extra={"slice_indices": []})
    t0 = time.time()
    for step in range(steps):
        vi = torch.randint(N, (cfg.batch_volumes,), generator=g)
        mean, logvar = nhae.encoder3d(thumbs[vi])
        z = mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=g)
        z_sr = nhae.depth_sr(z)  # (B,c,D,H',W')
        # exactly one reconstructed slice per sample per step
        si = torch.randint(D, (cfg.batch_volumes,), generator=g)
        log.extra["slice_indices"].append(si.tolist())
        wins = gather_windows(z_sr, si, k)
        pred = nhae.decoder2d.forward_windows_batched(wins)
        target = vols[vi, :, si]
        loss = (pred - target).abs().mean() + cfg.kl_weight * kl_divergence(mean, logvar)
        _check_finite(loss, step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log.losses.append(float(loss.detach()))
    log.seconds = time.time() - t0
    return log


def train_nhae_hr(nhae: NHAE, vols: torch.Tensor, cfg: RunConfig,
                  steps: int | None = None, seed: int = 0) -> TrainLog:
    steps = cfg.steps_nhae_hr if steps is None else steps
    g = torch.Generator().manual_seed(seed + 2)
    for name, p in nhae.named_parameters():
        p.requires_grad_(name.startswith("hr_encoder."))
    opt = torch.optim.Adam(nhae.hr_encoder.parameters(), lr=cfg.lr)
    N, _, D = vols.shape[:3]
    log = TrainLog()
    t0 = time.time()
    for step in range(steps):
        vi = torch.randint(N, (cfg.batch_slices,), generator=g)
        si = torch.randint(D, (cfg.batch_slices,), generator=g)
        x = vols[vi, :, si]
        z = nhae.hr_encoder(x)
        recon = nhae.decoder2d.forward_2d(z)
        loss = (recon - x).abs().mean()
        _check_finite(loss, step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log.losses.append(float(loss.detach()))
    log.seconds = time.time() - t0
    return log


# ----------------------------------------------------------------------
# latent datasets for the diffusion stages

@torch.no_grad()
def thumbnail_latents(nhae: NHAE, thumbs: torch.Tensor, seed: int = 0,
                      sample: bool = True) -> torch.Tensor:
    """Posterior latents (N,c,D',H',W') from the thumbnail path."""
    g = torch.Generator().manual_seed(seed + 3)
    mean, logvar = nhae.encoder3d(thumbs)
    if not sample:
        return mean
    return mean + torch.exp(0.5 * logvar) * torch.randn(mean.shape, generator=g)


@torch.no_grad()
def superres_latents(nhae: NHAE, thumbs: torch.Tensor) -> torch.Tensor:
    """Depth-upsampled latents (N,c,D,H',W') from the posterior mean."""
    mean, _ = nhae.encoder3d(thumbs)
    return nhae.depth_sr(mean)


@torch.no_grad()
def hr_latents(nhae: NHAE, vols: torch.Tensor, batch: int = 64) -> torch.Tensor:
    """HR-encoder latents for every slice: (N,D,c,H',W')."""
    N, _, D = vols.shape[:3]
    out = []
    for n in range(N):
        zs = []
        for start in range(0, D, batch):
            xs = vols[n, 0, start:start + batch][:, None]
            zs.append(nhae.hr_encoder(xs))
        out.append(torch.cat(zs))
    return torch.stack(out)


def train_diff3d(nhae: NHAE, thumbs: torch.Tensor, cfg: RunConfig,
                 steps: int | None = None, seed: int = 0
                 ) -> tuple[dm.Denoiser3d, float, TrainLog]:
    steps = cfg.steps_diff3d if steps is None else steps
    schedule = dm.make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    z = thumbnail_latents(nhae, thumbs, seed=seed)
    scale = float(1.0 / max(z.std().item(), 1e-8))
    data = z * scale
    torch.manual_seed(seed + 4)
    model = dm.Denoiser3d(cfg.latent_channels, cfg.latent_channels, cfg.unet_base)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    g = torch.Generator().manual_seed(seed + 4)
    N = data.shape[0]
    B = min(N, 10)
    log = TrainLog()
    t0 = time.time()
    for step in range(steps):
        vi = torch.randint(N, (B,), generator=g)
        loss = dm.train_diffusion_step(model, data[vi], schedule, opt, generator=g)
        log.losses.append(loss)
    log.seconds = time.time() - t0
    return model, scale, log


def train_diffslice(nhae: NHAE, vols: torch.Tensor, thumbs: torch.Tensor,
                    cfg: RunConfig, steps: int | None = None, seed: int = 0
                    ) -> tuple[dm.Denoiser2d, float, TrainLog]:
    steps = cfg.steps_diffslice if steps is None else steps
    schedule = dm.make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    z_sr = superres_latents(nhae, thumbs)          # (N,c,D,H',W')
    z_hr = hr_latents(nhae, vols)                  # (N,D,c,H',W')
    scale = float(1.0 / max(z_hr.std().item(), 1e-8))
    torch.manual_seed(seed + 5)
    c = cfg.latent_channels
    model = dm.Denoiser2d(2 * c, c, cfg.unet_base)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    g = torch.Generator().manual_seed(seed + 5)
    N, D = z_hr.shape[:2]
    B = 16
    log = TrainLog()
    t0 = time.time()
    for step in range(steps):
        vi = torch.randint(N, (B,), generator=g)
        si = torch.randint(D, (B,), generator=g)
        x0 = z_hr[vi, si] * scale
        cond = z_sr[vi, :, si] * scale
        loss = dm.train_diffusion_step(model, x0, schedule, opt, cond=cond,
                                       generator=g)
        log.losses.append(loss)
    log.seconds = time.time() - t0
    return model, scale, log


# ----------------------------------------------------------------------
# conditional fine-tuning

@dataclass
class ConditionalHead:
    diff3d: dm.Denoiser3d
    diffslice: dm.Denoiser2d
    label_enc3d: dm.LabelEncoder3d
    label_enc2d: dm.LabelEncoder2d


def train_conditional(nhae: NHAE, diff3d: dm.Denoiser3d, scale3d: float,
                      diffslice: dm.Denoiser2d, scale_slice: float,
                      vols: torch.Tensor, thumbs: torch.Tensor,
                      labels: list[LabelVolume], cfg: RunConfig,
                      steps: int | None = None, seed: int = 0
                      ) -> tuple[ConditionalHead, TrainLog]:
    steps = cfg.steps_finetune if steps is None else steps
    schedule = dm.make_schedule(cfg.timesteps, cfg.beta_start, cfg.beta_end)
    K = cfg.label_classes
    for lv in labels:
        if lv.class_count != K:
            raise ValidationError(
                f"label volume has {lv.class_count} classes, config says {K}")

    z = thumbnail_latents(nhae, thumbs, seed=seed) * scale3d
    z_sr = superres_latents(nhae, thumbs) * scale_slice
    z_hr = hr_latents(nhae, vols) * scale_slice
    onehots = torch.stack([dm.one_hot_labels(lv.labels, K) for lv in labels])

    torch.manual_seed(seed + 6)
    head = ConditionalHead(
        diff3d=dm.conditionalize(diff3d, cfg.cond_channels),
        diffslice=dm.conditionalize(diffslice, cfg.cond_channels),
        label_enc3d=dm.LabelEncoder3d(K, cfg.cond_channels),
        label_enc2d=dm.LabelEncoder2d(K, cfg.cond_channels),
    )
    params = (list(head.diff3d.parameters()) + list(head.diffslice.parameters())
              + list(head.label_enc3d.parameters())
              + list(head.label_enc2d.parameters()))
    opt = torch.optim.Adam(params, lr=cfg.lr)
    g = torch.Generator().manual_seed(seed + 6)
    N, D = z_hr.shape[:2]
    lat3 = (cfg.latent_depth, cfg.latent_height, cfg.latent_width)
    lat2 = (cfg.latent_height, cfg.latent_width)
    B3 = min(N, 6)
    B2 = 12
    log = TrainLog()
    t0 = time.time()
    for step in range(steps):
        vi = torch.randint(N, (B3,), generator=g)
        cond3 = head.label_enc3d(onehots[vi], lat3)
        t3 = torch.randint(1, schedule.T + 1, (B3,), generator=g)
        eps3 = torch.randn(z[vi].shape, generator=g)
        loss3 = dm.diffusion_loss(head.diff3d, z[vi], t3, eps3, schedule, cond3)

        vj = torch.randint(N, (B2,), generator=g)
        sj = torch.randint(D, (B2,), generator=g)
        lab_slices = onehots[vj][torch.arange(B2), :, sj]  # (B2,K,H,W)
        cond2 = torch.cat([z_sr[vj, :, sj],
                           head.label_enc2d(lab_slices, lat2)], dim=1)
        t2 = torch.randint(1, schedule.T + 1, (B2,), generator=g)
        eps2 = torch.randn((B2, cfg.latent_channels, *lat2), generator=g)
        loss2 = dm.diffusion_loss(head.diffslice, z_hr[vj, sj], t2, eps2,
                                  schedule, cond2)

        loss = loss3 + loss2
        _check_finite(loss, step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log.losses.append(float(loss.detach()))
    log.seconds = time.time() - t0
    return head, log
