"""Core volumetric data types plus resampling and intensity normalization.

A Volume is a dense (D, H, W) float32 grid. D indexes the native slice
axis; H, W are the in-slice axes. Canonical intensities live in [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError

CANONICAL_RANGE = (-1.0, 1.0)


@dataclass(frozen=True)
class Volume:
    """Dense 3D scalar grid. Treated as immutable after construction."""

    voxels: np.ndarray
    value_range: tuple[float, float] = CANONICAL_RANGE

    def __post_init__(self):
        v = np.asarray(self.voxels, dtype=np.float32)
        object.__setattr__(self, "voxels", v)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValidationError(f"volume must be 3D with dims >= 1, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValidationError("volume contains non-finite voxels")
        lo, hi = self.value_range
        if not (hi > lo):
            raise ValidationError(f"degenerate value_range {self.value_range}")
        # float32 slack: values written as f32 may sit a ulp outside the range
        eps = 1e-5 * (hi - lo)
        if v.min() < lo - eps or v.max() > hi + eps:
            raise ValidationError(
                f"voxels [{v.min():.4g}, {v.max():.4g}] exceed value_range {self.value_range}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)


@dataclass(frozen=True)
class LabelVolume:
    """Dense 3D grid of semantic class indices in [0, class_count)."""

    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if not np.issubdtype(lab.dtype, np.integer):
            raise ValidationError(f"labels must be integers, got {lab.dtype}")
        lab = lab.astype(np.uint8, casting="unsafe") if lab.dtype != np.uint8 else lab
        object.__setattr__(self, "labels", lab)
        if lab.ndim != 3 or min(lab.shape) < 1:
            raise ValidationError(f"labels must be 3D with dims >= 1, got {lab.shape}")
        if self.class_count < 1:
            raise ValidationError("class_count must be positive")
        if lab.size and (int(lab.max()) >= self.class_count or int(lab.min()) < 0):
            raise ValidationError(
                f"label values [{lab.min()}, {lab.max()}] outside [0, {self.class_count})")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)


def normalize(data, in_range: tuple[float, float]) -> Volume:
    """Affinely map intensities from ``in_range`` onto [-1, 1], clamping
    anything outside. Accepts a raw array or a Volume."""
    lo, hi = float(in_range[0]), float(in_range[1])
    if not hi > lo:
        raise ValidationError(f"normalize: degenerate in_range ({lo}, {hi})")
    arr = data.voxels if isinstance(data, Volume) else np.asarray(data, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise ValidationError("normalize: non-finite input")
    out = (arr.astype(np.float32) - lo) / (hi - lo) * 2.0 - 1.0
    np.clip(out, -1.0, 1.0, out=out)
    return Volume(out, CANONICAL_RANGE)


def resample_volume(v: Volume, target_shape: tuple[int, int, int]) -> Volume:
    """Trilinear resample to ``target_shape``; output clamped to v's range."""
    ts = tuple(int(s) for s in target_shape)
    if len(ts) != 3 or min(ts) < 1:
        raise ValidationError(f"resample: bad target shape {target_shape}")
    if ts == v.shape:
        return Volume(v.voxels.copy(), v.value_range)
    t = torch.from_numpy(np.ascontiguousarray(v.voxels))[None, None]
    out = F.interpolate(t, size=ts, mode="trilinear", align_corners=False)
    arr = out[0, 0].numpy()
    np.clip(arr, v.value_range[0], v.value_range[1], out=arr)
    return Volume(arr, v.value_range)
