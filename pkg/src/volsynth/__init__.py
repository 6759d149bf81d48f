"""volsynth: memory-amortized cascaded latent diffusion for 3D volumes.

A compact, fully trainable implementation of the cascade: a non-holistic
autoencoder (thumbnail 3D encoding, depth-only latent super-resolution,
windowed 2D/3D hybrid slice decoding), a global 3D latent diffusion
stage, a per-slice 2D diffusion refiner, label-conditional synthesis,
quality metrics, and a peak-memory profiling harness.
"""

from .config import RunConfig, desk_profile, micro_profile, paper_profile
from .errors import (ComputeError, DependencyError, ValidationError,
                     VolsynthError, VolumeIOError)
from .phantom import PhantomSpec, generate_phantom
from .volume import LabelVolume, Volume, normalize, resample_volume
from .volume_io import (RawStreamSink, VolumeAssembler, load_labels,
                        load_volume, save_labels, save_volume)

__version__ = "0.1.0"

__all__ = [
    "RunConfig", "desk_profile", "micro_profile", "paper_profile",
    "VolsynthError", "ValidationError", "DependencyError", "ComputeError",
    "VolumeIOError",
    "PhantomSpec", "generate_phantom",
    "Volume", "LabelVolume", "normalize", "resample_volume",
    "load_volume", "save_volume", "load_labels", "save_labels",
    "VolumeAssembler", "RawStreamSink",
    "__version__",
]
