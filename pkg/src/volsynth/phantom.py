"""Procedural layered-tissue phantoms with embedded vessel structures.

The generator is a pure function of its spec: identical specs produce
bit-identical volume/label pairs. Geometry mimics retinal OCT anatomy —
smooth stacked layer surfaces along the in-slice vertical axis (H),
bright curvilinear vessels running through the en-face (D, W) plane, and
optional additive speckle noise. Labels carry one class per layer plus a
dedicated vessel class (class_count = layer_count + 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .volume import LabelVolume, Volume

VESSEL_INTENSITY = 0.85


@dataclass(frozen=True)
class PhantomSpec:
    size: tuple[int, int, int] = (64, 64, 64)
    layer_count: int = 6
    vessel_count: int = 4
    noise_level: float = 0.03
    seed: int = 0

    def __post_init__(self):
        if len(self.size) != 3 or min(self.size) < 1:
            raise ValidationError(f"phantom size must be 3 positive dims, got {self.size}")
        if self.layer_count < 2:
            raise ValidationError("layer_count must be >= 2")
        if self.vessel_count < 0:
            raise ValidationError("vessel_count must be >= 0")
        if self.noise_level < 0:
            raise ValidationError("noise_level must be >= 0")

    @property
    def class_count(self) -> int:
        return self.layer_count + 1


def _layer_boundaries(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """(L-1, D, W) array of smooth surfaces h = f(d, w), strictly ordered."""
    D, H, W = spec.size
    L = spec.layer_count
    u = np.arange(D, dtype=np.float64)[:, None] / max(D, 1)
    x = np.arange(W, dtype=np.float64)[None, :] / max(W, 1)

    # One curvature field shared by all boundaries keeps them ordered.
    amp_c = 0.08 * H
    f1, f2 = rng.uniform(0.4, 1.2, 2)
    p1, p2 = rng.uniform(0, 2 * np.pi, 2)
    curvature = 0.5 * amp_c * (np.sin(2 * np.pi * f1 * u + p1)
                               + np.sin(2 * np.pi * f2 * x + p2))

    gap = H / L
    bounds = np.empty((L - 1, D, W), dtype=np.float64)
    for b in range(L - 1):
        wig = np.zeros((D, W))
        amps = rng.uniform(0.05, 0.175, 2) * gap  # total wiggle < gap/2
        for a in amps:
            fd, fw = rng.uniform(0.3, 1.5, 2)
            ph = rng.uniform(0, 2 * np.pi)
            wig += a * np.sin(2 * np.pi * (fd * u + fw * x) + ph)
        bounds[b] = (b + 1) * gap + curvature + wig
    return np.clip(bounds, 1.0, H - 1.0)


def _layer_means(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Per-layer intensities, interleaved dark/bright for adjacent contrast."""
    L = spec.layer_count
    ladder = np.linspace(-0.8, 0.55, L)
    order = np.empty(L, dtype=int)
    order[0::2] = np.arange((L + 1) // 2)
    order[1::2] = np.arange(L - 1, (L + 1) // 2 - 1, -1)
    means = ladder[order] + rng.uniform(-0.05, 0.05, L)
    return np.clip(means, -0.9, 0.62)


def _vessel_mask(spec: PhantomSpec, bounds: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    D, H, W = spec.size
    mask = np.zeros(spec.size, dtype=bool)
    if spec.vessel_count == 0:
        return mask
    radius = max(1.5, min(H, W) / 24.0)
    r_int = int(np.ceil(radius))
    og = np.arange(-r_int, r_int + 1)
    odz, ohz, owz = np.meshgrid(og, og, og, indexing="ij")
    ball = np.stack([odz, ohz, owz], -1)[odz**2 + ohz**2 + owz**2 <= radius**2]

    n_samples = 3 * max(D, W)
    t = np.linspace(0.0, 1.0, n_samples)
    gap = H / spec.layer_count
    for _ in range(spec.vessel_count):
        b_idx = int(rng.integers(0, max(1, spec.layer_count - 1)))
        along_d = bool(rng.integers(0, 2))
        a0, a1 = rng.uniform(0.1, 0.9, 2) * (W if along_d else D)
        amp = rng.uniform(0.05, 0.18) * (W if along_d else D)
        freq = rng.uniform(0.5, 1.5)
        ph = rng.uniform(0, 2 * np.pi)
        wobble = a0 + (a1 - a0) * t + amp * np.sin(2 * np.pi * freq * t + ph)
        if along_d:
            dd = t * (D - 1)
            ww = np.clip(wobble, 0, W - 1)
        else:
            ww = t * (W - 1)
            dd = np.clip(wobble, 0, D - 1)
        di = np.clip(np.rint(dd).astype(int), 0, D - 1)
        wi = np.clip(np.rint(ww).astype(int), 0, W - 1)
        depth_off = rng.uniform(0.3, 0.7) * gap
        if bounds.shape[0]:
            hh = bounds[min(b_idx, bounds.shape[0] - 1), di, wi] + depth_off
        else:
            hh = np.full(n_samples, H / 2.0)
        hi = np.clip(np.rint(hh).astype(int), 0, H - 1)
        centers = np.stack([di, hi, wi], -1)
        pts = (centers[:, None, :] + ball[None, :, :]).reshape(-1, 3)
        ok = ((pts >= 0) & (pts < np.array(spec.size))).all(1)
        pts = pts[ok]
        mask[pts[:, 0], pts[:, 1], pts[:, 2]] = True
    return mask


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    """Build one layered phantom and its voxel-aligned label volume."""
    if not isinstance(spec, PhantomSpec):
        spec = PhantomSpec(**spec)
    rng = np.random.default_rng(spec.seed)
    D, H, W = spec.size
    bounds = _layer_boundaries(spec, rng)
    means = _layer_means(spec, rng)

    hh = np.arange(H)[None, :, None]
    labels = np.zeros(spec.size, dtype=np.uint8)
    for b in range(spec.layer_count - 1):
        labels += (hh >= bounds[b][:, None, :]).astype(np.uint8)

    intensity = means.astype(np.float32)[labels]

    vessels = _vessel_mask(spec, bounds, rng)
    labels[vessels] = spec.layer_count
    intensity[vessels] = VESSEL_INTENSITY

    if spec.noise_level > 0:
        intensity = intensity + spec.noise_level * rng.standard_normal(
            spec.size).astype(np.float32)
    np.clip(intensity, -1.0, 1.0, out=intensity)

    return Volume(intensity), LabelVolume(labels, spec.class_count)
