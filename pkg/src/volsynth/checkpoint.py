"""Self-describing checkpoint container.

Each file records its training stage, the shape/schedule config it was
built for, and that config's fingerprint. Loading verifies both, so a
stale or mismatched checkpoint fails loudly instead of silently decoding
garbage.
"""

from __future__ import annotations

from pathlib import Path

import torch

from .config import FINGERPRINT_KEYS, RunConfig
from .errors import DependencyError, VolumeIOError

FORMAT = "volsynth-ckpt-v1"

STAGES = ("nhae-2d", "nhae-3d", "nhae-hr", "diff3d", "diffslice", "conditional")

# prerequisite stages, in the order cmd_train enforces
STAGE_DEPS = {
    "nhae-2d": (),
    "nhae-3d": ("nhae-2d",),
    "nhae-hr": ("nhae-3d",),
    "diff3d": ("nhae-3d",),
    "diffslice": ("nhae-hr",),
    "conditional": ("diff3d", "diffslice"),
}


def stage_path(ckpt_dir: str | Path, stage: str) -> Path:
    return Path(ckpt_dir) / f"{stage}.pt"


def save_checkpoint(path: str | Path, stage: str, config: RunConfig,
                    blocks: dict, meta: dict | None = None) -> Path:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "stage": stage,
        "fingerprint": config.fingerprint(),
        "config": {k: getattr(config, k) for k in FINGERPRINT_KEYS},
        "blocks": blocks,
        "meta": meta or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path: str | Path, expect_stage: str | None = None,
                    config: RunConfig | None = None) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DependencyError(f"missing checkpoint: {path}")
    data = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(data, dict) or data.get("format") != FORMAT:
        raise VolumeIOError(f"{path}: not a {FORMAT} checkpoint")
    if expect_stage is not None and data.get("stage") != expect_stage:
        raise DependencyError(
            f"{path}: holds stage {data.get('stage')!r}, expected {expect_stage!r}")
    if config is not None and data.get("fingerprint") != config.fingerprint():
        raise DependencyError(
            f"{path}: config fingerprint {data.get('fingerprint')} does not match "
            f"the active config ({config.fingerprint()}); retrain or fix the config")
    return data


def require_stage(ckpt_dir: str | Path, stage: str, config: RunConfig) -> dict:
    """Load a prerequisite stage checkpoint or raise a DependencyError
    naming exactly what is missing."""
    path = stage_path(ckpt_dir, stage)
    if not path.is_file():
        raise DependencyError(
            f"stage {stage!r} has not been trained yet (missing {path})")
    return load_checkpoint(path, expect_stage=stage, config=config)
