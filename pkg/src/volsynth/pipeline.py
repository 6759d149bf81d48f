"""End-to-end cascade orchestration: global latent synthesis, depth
super-resolution, per-slice diffusion refinement, and streamed decoding.

A CascadeBundle groups the trained components plus the schedule and shape
config. Bundles are described on disk by a plain-text manifest listing
the checkpoint paths and the shape/schedule keys; all checkpoints must
carry the same config fingerprint.

Seeding: the master seed is split with numpy SeedSequence spawn keys —
(0,) for the global 3D sample, (1, i) for refinement of slice i — so
refinement is order-independent and reruns are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import diffusion as dm
from .checkpoint import load_checkpoint, save_checkpoint, stage_path
from .config import FINGERPRINT_KEYS, RunConfig, read_kv_file
from .errors import ComputeError, DependencyError, ValidationError
from .nhae import NHAE
from .training import ConditionalHead
from .volume import LabelVolume, Volume, resample_volume
from .volume_io import VolumeAssembler


def _derived_seed(master: int, *key: int) -> int:
    ss = np.random.SeedSequence(entropy=int(master) & (2 ** 63 - 1),
                                spawn_key=tuple(key))
    return int(ss.generate_state(1, np.uint64)[0]) & (2 ** 63 - 1)


def shape_plan(cfg: RunConfig) -> dict[str, tuple]:
    """Every intermediate shape of the cascade, from config alone."""
    cfg.validate()
    c = cfg.latent_channels
    return {
        "volume": (cfg.depth, cfg.height, cfg.width),
        "thumbnail": cfg.thumbnail_shape,
        "latent": (c, cfg.latent_depth, cfg.latent_height, cfg.latent_width),
        "latent_sr": (c, cfg.depth, cfg.latent_height, cfg.latent_width),
        "latent_slice": (c, cfg.latent_height, cfg.latent_width),
        "image_slice": (cfg.height, cfg.width),
        "window": (cfg.window, c, cfg.latent_height, cfg.latent_width),
    }


@dataclass
class CascadeBundle:
    config: RunConfig
    nhae: NHAE
    diff3d: dm.Denoiser3d
    diffslice: dm.Denoiser2d
    scale3d: float = 1.0
    scale_slice: float = 1.0
    conditional: ConditionalHead | None = None

    def __post_init__(self):
        self.config.validate()
        self.schedule = dm.make_schedule(self.config.timesteps,
                                         self.config.beta_start,
                                         self.config.beta_end)
        self.nhae.eval()
        self.diff3d.eval()
        self.diffslice.eval()
        if self.conditional is not None:
            for m in (self.conditional.diff3d, self.conditional.diffslice,
                      self.conditional.label_enc3d, self.conditional.label_enc2d):
                m.eval()

    @classmethod
    def initialize(cls, cfg: RunConfig, seed: int = 0,
                   conditional: bool = False) -> "CascadeBundle":
        """Freshly initialized bundle (untrained weights); useful for shape
        dry-runs, determinism tests and memory profiling."""
        torch.manual_seed(seed)
        nhae = NHAE(cfg)
        c = cfg.latent_channels
        diff3d = dm.Denoiser3d(c, c, cfg.unet_base)
        diffslice = dm.Denoiser2d(2 * c, c, cfg.unet_base)
        head = None
        if conditional:
            head = ConditionalHead(
                diff3d=dm.conditionalize(diff3d, cfg.cond_channels),
                diffslice=dm.conditionalize(diffslice, cfg.cond_channels),
                label_enc3d=dm.LabelEncoder3d(cfg.label_classes, cfg.cond_channels),
                label_enc2d=dm.LabelEncoder2d(cfg.label_classes, cfg.cond_channels))
        return cls(cfg, nhae, diff3d, diffslice, conditional=head)


# ----------------------------------------------------------------------
# manifest I/O

def save_bundle(bundle: CascadeBundle, out_dir: str | Path,
                manifest_name: str = "bundle.txt") -> Path:
    """Write the component checkpoints plus the manifest that ties them
    together. Mainly used by tests and by cmd_train's assembly step."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = bundle.config
    save_checkpoint(stage_path(out_dir, "nhae-hr"), "nhae-hr", cfg,
                    {"nhae": bundle.nhae.state_dict()})
    save_checkpoint(stage_path(out_dir, "diff3d"), "diff3d", cfg,
                    {"model": bundle.diff3d.state_dict()},
                    meta={"latent_scale": bundle.scale3d})
    save_checkpoint(stage_path(out_dir, "diffslice"), "diffslice", cfg,
                    {"model": bundle.diffslice.state_dict()},
                    meta={"latent_scale": bundle.scale_slice})
    if bundle.conditional is not None:
        h = bundle.conditional
        save_checkpoint(stage_path(out_dir, "conditional"), "conditional", cfg,
                        {"diff3d": h.diff3d.state_dict(),
                         "diffslice": h.diffslice.state_dict(),
                         "label_enc3d": h.label_enc3d.state_dict(),
                         "label_enc2d": h.label_enc2d.state_dict()})
    return write_manifest(out_dir, cfg, manifest_name)


def write_manifest(ckpt_dir: str | Path, cfg: RunConfig,
                   manifest_name: str = "bundle.txt") -> Path:
    ckpt_dir = Path(ckpt_dir)
    lines = [f"nhae = {stage_path(ckpt_dir, 'nhae-hr').name}",
             f"diff3d = {stage_path(ckpt_dir, 'diff3d').name}",
             f"diffslice = {stage_path(ckpt_dir, 'diffslice').name}"]
    if stage_path(ckpt_dir, "conditional").is_file():
        lines.append(f"conditional = {stage_path(ckpt_dir, 'conditional').name}")
    lines += [f"{k} = {getattr(cfg, k)}" for k in FINGERPRINT_KEYS]
    path = ckpt_dir / manifest_name
    path.write_text("\n".join(lines) + "\n")
    return path


def load_bundle(manifest_path: str | Path) -> CascadeBundle:
    manifest_path = Path(manifest_path)
    kv = read_kv_file(manifest_path)
    paths = {}
    for key in ("nhae", "diff3d", "diffslice", "conditional"):
        if key in kv:
            paths[key] = (manifest_path.parent / kv.pop(key)).resolve()
    for key in ("nhae", "diff3d", "diffslice"):
        if key not in paths:
            raise ValidationError(f"manifest {manifest_path}: missing {key} entry")
    cfg = RunConfig.from_dict(kv)

    nck = load_checkpoint(paths["nhae"], expect_stage="nhae-hr", config=cfg)
    nhae = NHAE(cfg)
    nhae.load_state_dict(nck["blocks"]["nhae"])

    d3 = load_checkpoint(paths["diff3d"], expect_stage="diff3d", config=cfg)
    diff3d = dm.Denoiser3d(cfg.latent_channels, cfg.latent_channels, cfg.unet_base)
    diff3d.load_state_dict(d3["blocks"]["model"])

    ds = load_checkpoint(paths["diffslice"], expect_stage="diffslice", config=cfg)
    diffslice = dm.Denoiser2d(2 * cfg.latent_channels, cfg.latent_channels,
                              cfg.unet_base)
    diffslice.load_state_dict(ds["blocks"]["model"])

    head = None
    if "conditional" in paths:
        cc = load_checkpoint(paths["conditional"], expect_stage="conditional",
                             config=cfg)
        head = ConditionalHead(
            diff3d=dm.conditionalize(diff3d, cfg.cond_channels),
            diffslice=dm.conditionalize(diffslice, cfg.cond_channels),
            label_enc3d=dm.LabelEncoder3d(cfg.label_classes, cfg.cond_channels),
            label_enc2d=dm.LabelEncoder2d(cfg.label_classes, cfg.cond_channels))
        head.diff3d.load_state_dict(cc["blocks"]["diff3d"])
        head.diffslice.load_state_dict(cc["blocks"]["diffslice"])
        head.label_enc3d.load_state_dict(cc["blocks"]["label_enc3d"])
        head.label_enc2d.load_state_dict(cc["blocks"]["label_enc2d"])

    return CascadeBundle(cfg, nhae, diff3d, diffslice,
                         scale3d=float(d3["meta"].get("latent_scale", 1.0)),
                         scale_slice=float(ds["meta"].get("latent_scale", 1.0)),
                         conditional=head)


# ----------------------------------------------------------------------
# cascade stages

def _stage(name):
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, etype, err, tb):
            if err is not None and not isinstance(err, (ValidationError,
                                                        DependencyError)):
                raise ComputeError(f"stage {name!r} failed: {err}") from err
            return False
    return _Ctx()


def _require_labels(bundle, label):
    cfg = bundle.config
    if not isinstance(label, LabelVolume):
        raise ValidationError("conditional synthesis needs a LabelVolume")
    if label.shape != cfg.volume_shape:
        raise ValidationError(
            f"label shape {label.shape} != volume shape {cfg.volume_shape}")
    if label.class_count != cfg.label_classes:
        raise ValidationError(
            f"label class_count {label.class_count} != config {cfg.label_classes}")
    if bundle.conditional is None:
        raise DependencyError(
            "bundle has no conditional checkpoint; run the conditional "
            "fine-tune stage or drop --label")


@torch.no_grad()
def synthesize_global_latent(bundle: CascadeBundle, seed: int,
                             label: LabelVolume | None = None) -> torch.Tensor:
    """Diffusion-sample a global latent (c,D',H',W') via DDIM at T/5."""
    cfg = bundle.config
    shape = (cfg.latent_channels, cfg.latent_depth, cfg.latent_height,
             cfg.latent_width)
    cond = None
    model = bundle.diff3d
    if label is not None:
        _require_labels(bundle, label)
        model = bundle.conditional.diff3d
        cond = dm.encode_condition(bundle.conditional.label_enc3d, label.labels,
                                   cfg.label_classes, shape[1:])[None]
    with _stage("global-diffusion"):
        z = dm.ddim_sample(model, shape, bundle.schedule, cfg.ddim_steps,
                           seed=_derived_seed(seed, 0), cond=cond)
    return z / bundle.scale3d


@torch.no_grad()
def refine_latent_slices(bundle: CascadeBundle, z_sr: torch.Tensor, seed: int,
                         label: LabelVolume | None = None,
                         chunk: int = 32) -> torch.Tensor:
    """Per-slice diffusion refinement of an upsampled latent.

    Returns refined latent slices stacked as (D,c,H',W'). Slices are
    independent given z_sr: each gets its own derived seed, so any
    chunking or ordering produces the same result.
    """
    cfg = bundle.config
    c = cfg.latent_channels
    if z_sr.shape != (c, cfg.depth, cfg.latent_height, cfg.latent_width):
        raise ValidationError(
            f"refine: z_sr shape {tuple(z_sr.shape)} does not match config")
    model = bundle.diffslice
    label_cond = None
    if label is not None:
        _require_labels(bundle, label)
        model = bundle.conditional.diffslice
        oh = dm.one_hot_labels(label.labels, cfg.label_classes)  # (K,D,H,W)
    D = cfg.depth
    out = []
    with _stage("slice-refinement"):
        for start in range(0, D, chunk):
            idx = list(range(start, min(start + chunk, D)))
            noise = torch.stack([
                torch.randn((c, cfg.latent_height, cfg.latent_width),
                            generator=torch.Generator().manual_seed(
                                _derived_seed(seed, 1, i)))
                for i in idx])
            cond = z_sr[:, idx].permute(1, 0, 2, 3) * bundle.scale_slice
            if label is not None:
                lab = oh[:, idx].permute(1, 0, 2, 3)  # (n,K,H,W)
                label_cond = bundle.conditional.label_enc2d(
                    lab, (cfg.latent_height, cfg.latent_width))
                cond = torch.cat([cond, label_cond], dim=1)
            ref = dm.ddim_sample(model, noise.shape[1:], bundle.schedule,
                                 cfg.ddim_steps, cond=cond, noise=noise)
            out.append(ref / bundle.scale_slice)
    return torch.cat(out)


@torch.no_grad()
def synthesize_volume(bundle: CascadeBundle, seed: int,
                      label: LabelVolume | None = None, refine: bool = True,
                      sink=None):
    """Full cascade: global latent -> depth SR -> (optional) slice
    refinement -> streamed multi-slice decoding into the sink."""
    cfg = bundle.config
    if sink is None:
        sink = VolumeAssembler(cfg.volume_shape)
    z = synthesize_global_latent(bundle, seed, label)
    with _stage("uniaxial-superres"):
        z_sr = bundle.nhae.uniaxial_superres(z)
    if refine:
        refined = refine_latent_slices(bundle, z_sr, seed, label)
        z_seq = refined.permute(1, 0, 2, 3)
    else:
        z_seq = z_sr
    with _stage("decode"):
        return bundle.nhae.decode_volume(z_seq.contiguous(), sink)


@torch.no_grad()
def reconstruct_volume(bundle: CascadeBundle, v: Volume, sink=None):
    """Autoencoding fidelity path: thumbnail -> posterior mean -> depth SR
    -> streamed decode. No diffusion involved."""
    cfg = bundle.config
    if v.shape != cfg.volume_shape:
        raise ValidationError(
            f"reconstruct: volume shape {v.shape} != config {cfg.volume_shape}")
    if sink is None:
        sink = VolumeAssembler(cfg.volume_shape)
    thumb = resample_volume(v, cfg.thumbnail_shape)
    with _stage("encode"):
        mean, _ = bundle.nhae.encode_thumbnail(torch.from_numpy(thumb.voxels))
        z_sr = bundle.nhae.uniaxial_superres(mean)
    with _stage("decode"):
        return bundle.nhae.decode_volume(z_sr, sink)
