"""Quality metrics: total variation, PSNR, and slice-direction Fréchet
distance with a pluggable feature extractor.

The default feature extractor is a fixed, seed-pinned random
convolutional network ("proxy FID"): deterministic, dependency-free, and
valid for relative comparisons within this artifact. Any callable
mapping a list of 2D arrays to an (N, F) feature matrix can be plugged
in instead (e.g. a pretrained inception wrapper) to match external FID
conventions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError
from .volume import Volume

FEATURE_SEED = 0x0F1D  # pins the proxy feature weights


def _as_array(v) -> np.ndarray:
    return v.voxels if isinstance(v, Volume) else np.asarray(v, dtype=np.float32)


def total_variation(v) -> float:
    """Sum over the three axes of the mean absolute adjacent-voxel
    difference (anisotropic TV, normalized per voxel pair)."""
    arr = _as_array(v)
    if arr.ndim != 3:
        raise ValidationError(f"total_variation expects a 3D grid, got {arr.shape}")
    total = 0.0
    for ax in range(3):
        d = np.diff(arr, axis=ax)
        if d.size:
            total += float(np.abs(d).mean())
    return total


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB; +inf for identical inputs.

    Peak is the width of the value range (2 for [-1,1] data).
    """
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise ValidationError(f"psnr: shape mismatch {x.shape} vs {y.shape}")
    if isinstance(a, Volume):
        rng = a.value_range[1] - a.value_range[0]
    else:
        rng = 2.0
    mse = float(np.mean((x.astype(np.float64) - y.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(rng * rng / mse)


# ----------------------------------------------------------------------
# Fréchet distance

@dataclass(frozen=True)
class FidResult:
    value: float
    eps: float
    regularized: bool

    def __float__(self):
        return self.value


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Matrix square root of a symmetric PSD matrix via eigendecomposition;
    tiny negative eigenvalues from roundoff are clipped."""
    sym = (m + m.T) / 2.0
    w, v = np.linalg.eigh(sym)
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(mu1: np.ndarray, cov1: np.ndarray,
                     mu2: np.ndarray, cov2: np.ndarray,
                     eps: float = 1e-10) -> FidResult:
    """||mu1-mu2||^2 + tr(C1 + C2 - 2 (C1 C2)^(1/2)).

    Covariances get a symmetric eps*I jitter before the square root; the
    result records whether extra regularization beyond the default was
    needed (repeatedly boosted jitter on numerical failure).
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    cov1 = np.atleast_2d(np.asarray(cov1, dtype=np.float64))
    cov2 = np.atleast_2d(np.asarray(cov2, dtype=np.float64))
    if mu1.shape != mu2.shape or cov1.shape != cov2.shape:
        raise ValidationError("frechet_distance: mismatched moment shapes")
    diff = float(np.sum((mu1 - mu2) ** 2))
    used_eps, boosted = eps, False
    eye = np.eye(cov1.shape[0])
    for _ in range(6):
        c1 = cov1 + used_eps * eye
        c2 = cov2 + used_eps * eye
        try:
            a = _sqrtm_psd(c1)
            inner = _sqrtm_psd(a @ c2 @ a)
            tr_sqrt = float(np.trace(inner))
            value = diff + float(np.trace(c1) + np.trace(c2)) - 2.0 * tr_sqrt
            return FidResult(value, used_eps, boosted)
        except np.linalg.LinAlgError:
            used_eps *= 1e3
            boosted = True
    raise ValidationError("frechet_distance: covariance square root failed")


class RandomConvFeatures(nn.Module):
    """Fixed random convolutional feature map for proxy FID.

    Slices are resized to 64x64, passed through three strided random
    convolutions with tanh nonlinearities, and pooled to per-channel
    mean and standard deviation (F = 64 features). Weights are generated
    from a pinned seed: identical inputs always yield identical features.
    """

    def __init__(self, seed: int = FEATURE_SEED):
        super().__init__()
        rng = np.random.default_rng(seed)
        chans = [(1, 8), (8, 16), (16, 32)]
        convs = []
        for cin, cout in chans:
            conv = nn.Conv2d(cin, cout, 3, stride=2, padding=1)
            with torch.no_grad():
                w = rng.normal(0.0, math.sqrt(2.0 / (cin * 9)), conv.weight.shape)
                conv.weight.copy_(torch.from_numpy(w).float())
                conv.bias.zero_()
            convs.append(conv)
        self.convs = nn.ModuleList(convs)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    @torch.no_grad()
    def forward(self, slices: Sequence[np.ndarray]) -> np.ndarray:
        feats = []
        for arr in slices:
            x = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
            x = x[None, None]
            if x.shape[-2:] != (64, 64):
                x = F.interpolate(x, size=(64, 64), mode="bilinear",
                                  align_corners=False)
            for conv in self.convs:
                x = torch.tanh(conv(x))
            mean = x.mean(dim=(2, 3))
            std = x.std(dim=(2, 3))
            feats.append(torch.cat([mean, std], dim=1)[0].numpy())
        return np.stack(feats)


_default_fx: RandomConvFeatures | None = None


def default_feature_extractor() -> RandomConvFeatures:
    global _default_fx
    if _default_fx is None:
        _default_fx = RandomConvFeatures()
    return _default_fx


def extract_slices(volumes: Iterable, axis: str) -> list[np.ndarray]:
    """All 2D cuts of each volume along the requested direction.

    ``intra`` cuts along D (native slice plane, H x W images);
    ``inter`` cuts across D in both orthogonal orientations.
    """
    if axis not in ("intra", "inter"):
        raise ValidationError(f"axis must be 'intra' or 'inter', got {axis!r}")
    out: list[np.ndarray] = []
    for v in volumes:
        arr = _as_array(v)
        if arr.ndim != 3:
            raise ValidationError(f"expected 3D volumes, got {arr.shape}")
        if axis == "intra":
            out.extend(arr[d] for d in range(arr.shape[0]))
        else:
            out.extend(arr[:, h, :] for h in range(arr.shape[1]))
            out.extend(arr[:, :, w] for w in range(arr.shape[2]))
    return out


def slice_fid(real: Sequence, synthetic: Sequence, axis: str = "intra",
              fx: Callable | None = None) -> FidResult:
    """Fréchet distance between feature Gaussians of all 2D slices taken
    from two volume sets along the given direction."""
    fx = fx or default_feature_extractor()
    real_slices = extract_slices(real, axis)
    syn_slices = extract_slices(synthetic, axis)
    if len(real_slices) < 2 or len(syn_slices) < 2:
        raise ValidationError("slice_fid needs at least 2 slices per set")
    fr = np.asarray(fx(real_slices), dtype=np.float64)
    fs = np.asarray(fx(syn_slices), dtype=np.float64)
    mu_r, mu_s = fr.mean(0), fs.mean(0)
    cov_r = np.cov(fr, rowvar=False)
    cov_s = np.cov(fs, rowvar=False)
    return frechet_distance(mu_r, cov_r, mu_s, cov_s)
