"""Run configuration: shape/schedule/training hyperparameters.

Configs live in plain-text ``key = value`` files. Every key can be
overridden on the command line by a flag of the same name
(``--timesteps 500``). The shape and schedule subset is hashed into a
fingerprint that checkpoints and bundle manifests carry, so stage
ordering is enforced by content rather than trust.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError

# Keys whose values must agree across every checkpoint in a cascade.
FINGERPRINT_KEYS = (
    "depth", "height", "width",
    "latent_channels", "latent_depth", "latent_height", "latent_width",
    "window",
    "timesteps", "beta_start", "beta_end", "ddim_steps",
    "dec_base", "enc_base", "sr_base", "unet_base",
    "cond_channels", "label_classes",
)


@dataclass
class RunConfig:
    # volume / latent geometry
    depth: int = 64
    height: int = 64
    width: int = 64
    latent_channels: int = 4
    latent_depth: int = 8
    latent_height: int = 8
    latent_width: int = 8
    window: int = 5  # k consecutive latent slices per decoded image slice

    # diffusion schedule
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 200

    # network widths
    dec_base: int = 16
    enc_base: int = 16
    sr_base: int = 32
    unet_base: int = 32

    # conditioning
    cond_channels: int = 4
    label_classes: int = 7

    # training
    lr: float = 2e-3
    batch_slices: int = 8
    batch_volumes: int = 3
    kl_weight: float = 1e-6
    steps_nhae_2d: int = 1200
    steps_nhae_3d: int = 900
    steps_nhae_hr: int = 600
    steps_diff3d: int = 2000
    steps_diffslice: int = 2000
    steps_finetune: int = 1500

    # phantom dataset knobs
    phantom_layers: int = 6
    phantom_vessels: int = 4
    phantom_noise: float = 0.03

    # bookkeeping
    seed: int = 0
    dataset_dir: str = "data/phantoms"
    ckpt_dir: str = "checkpoints"
    out_dir: str = "outputs"

    # ------------------------------------------------------------------
    @property
    def volume_shape(self) -> tuple[int, int, int]:
        return (self.depth, self.height, self.width)

    @property
    def latent_shape(self) -> tuple[int, int, int, int]:
        return (self.latent_channels, self.latent_depth,
                self.latent_height, self.latent_width)

    @property
    def thumbnail_shape(self) -> tuple[int, int, int]:
        # the 3D encoder halves each axis once
        return (2 * self.latent_depth, 2 * self.latent_height,
                2 * self.latent_width)

    @property
    def depth_factor(self) -> int:
        return self.depth // self.latent_depth

    @property
    def plane_factor(self) -> int:
        return self.height // self.latent_height

    def validate(self) -> "RunConfig":
        def bad(msg):
            raise ValidationError(f"config: {msg}")

        for name in ("depth", "height", "width", "latent_channels",
                     "latent_depth", "latent_height", "latent_width"):
            if getattr(self, name) < 1:
                bad(f"{name} must be >= 1")
        if self.depth % self.latent_depth:
            bad("depth must be an integer multiple of latent_depth")
        if self.height % self.latent_height:
            bad("height must be an integer multiple of latent_height")
        if self.width % self.latent_width:
            bad("width must be an integer multiple of latent_width")
        if self.height // self.latent_height != self.width // self.latent_width:
            bad("in-plane upsampling factors must match (H/H' == W/W')")
        if self.window < 1 or self.window % 2 == 0:
            bad("window must be a positive odd integer")
        if self.timesteps < 1:
            bad("timesteps must be >= 1")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            bad("betas must satisfy 0 < beta_start <= beta_end < 1")
        if not (1 <= self.ddim_steps <= self.timesteps):
            bad("ddim_steps must lie in [1, timesteps]")
        if self.label_classes < 1:
            bad("label_classes must be >= 1")
        return self

    # ------------------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def fingerprint(self) -> str:
        canon = "\n".join(f"{k}={getattr(self, k)!r}" for k in FINGERPRINT_KEYS)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    # ------------------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(d) - set(fields)
        if unknown:
            raise ValidationError(f"config: unknown keys {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            kw[k] = _coerce(fields[k].type, v, k)
        return cls(**kw).validate()

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(read_kv_file(path))

    def save(self, path: str | Path) -> None:
        lines = [f"{k} = {v}" for k, v in self.to_dict().items()]
        Path(path).write_text("\n".join(lines) + "\n")


def _coerce(ftype, value, key):
    if not isinstance(value, str):
        return value
    ftype = str(ftype)
    try:
        if "int" in ftype:
            return int(value)
        if "float" in ftype:
            return float(value)
        return value
    except ValueError:
        raise ValidationError(f"config: cannot parse {key}={value!r}") from None


def read_kv_file(path: str | Path) -> dict[str, str]:
    """Parse a ``key = value`` text file; '#' starts a comment."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for ln, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{ln}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def desk_profile(**overrides) -> RunConfig:
    """64^3 volume, (4,8,8,8) latent, k=5 — the tractable default."""
    return RunConfig(**overrides).validate()


def paper_profile(**overrides) -> RunConfig:
    """512^3 volume, (4,64,64,64) latent — used for shape dry-runs only."""
    base = dict(depth=512, height=512, width=512,
                latent_depth=64, latent_height=64, latent_width=64)
    base.update(overrides)
    return RunConfig(**base).validate()


def micro_profile(**overrides) -> RunConfig:
    """16^3 volume, (2,4,4,4) latent, k=3 — for fast tests."""
    base = dict(depth=16, height=16, width=16,
                latent_channels=2, latent_depth=4, latent_height=4,
                latent_width=4, window=3,
                dec_base=8, enc_base=8, sr_base=12, unet_base=16,
                cond_channels=2, label_classes=4,
                timesteps=50, ddim_steps=10,
                batch_slices=4, batch_volumes=2)
    base.update(overrides)
    return RunConfig(**base).validate()
