"""Volume file I/O and streaming slice sinks.

Two layouts:

* ``raw``      — little-endian float32 payload ``name.raw`` with a
                 plain-text sidecar ``name.hdr``::

                     shape=D,H,W
                     dtype=f32
                     range=lo,hi

                 Payload is row-major with D outermost. Bit-exact.
* ``slices``   — a directory of 16-bit grayscale PNGs
                 ``slice_0000.png .. slice_{D-1:04d}.png`` ordered along D.
                 Quantized to 1/65535 of the value range.

Label volumes reuse the raw container with ``dtype=u8`` and a
``classes=K`` header line.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ValidationError, VolumeIOError
from .volume import CANONICAL_RANGE, LabelVolume, Volume, normalize

_LAYOUTS = ("raw", "slices")


def _header_path(path: Path) -> Path:
    return path.with_suffix(".hdr")


def _parse_header(path: Path) -> dict[str, str]:
    if not path.is_file():
        raise VolumeIOError(f"missing header file {path}")
    out = {}
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise VolumeIOError(f"{path}: malformed header line {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_volume(v: Volume, path: str | Path, layout: str = "raw") -> None:
    """Write a volume so that :func:`load_volume` round-trips it."""
    if layout not in _LAYOUTS:
        raise ValidationError(f"unknown layout {layout!r}, expected one of {_LAYOUTS}")
    if not np.isfinite(v.voxels).all():
        raise ValidationError("refusing to write non-finite voxels")
    path = Path(path)
    if layout == "raw":
        lo, hi = v.value_range
        path.parent.mkdir(parents=True, exist_ok=True)
        _header_path(path).write_text(
            f"shape={v.shape[0]},{v.shape[1]},{v.shape[2]}\n"
            f"dtype=f32\nrange={lo:.9g},{hi:.9g}\n")
        path.write_bytes(v.voxels.astype("<f4").tobytes(order="C"))
    else:
        path.mkdir(parents=True, exist_ok=True)
        lo, hi = v.value_range
        scaled = np.round((v.voxels - lo) / (hi - lo) * 65535.0)
        u16 = np.clip(scaled, 0, 65535).astype(np.uint16)
        for i in range(v.shape[0]):
            Image.fromarray(u16[i]).save(path / f"slice_{i:04d}.png")


def load_volume(path: str | Path, layout: str | None = None) -> Volume:
    """Load a volume; values are mapped to the canonical [-1, 1] range."""
    path = Path(path)
    if layout is None:
        layout = "slices" if path.is_dir() else "raw"
    if layout not in _LAYOUTS:
        raise ValidationError(f"unknown layout {layout!r}, expected one of {_LAYOUTS}")
    if layout == "raw":
        hdr = _parse_header(_header_path(path))
        try:
            shape = tuple(int(s) for s in hdr["shape"].split(","))
            lo, hi = (float(x) for x in hdr["range"].split(","))
            dtype = hdr.get("dtype", "f32")
        except (KeyError, ValueError) as e:
            raise VolumeIOError(f"{path}: bad header ({e})") from e
        if dtype != "f32":
            raise VolumeIOError(f"{path}: expected dtype=f32, got {dtype}")
        if not path.is_file():
            raise VolumeIOError(f"missing payload file {path}")
        payload = np.frombuffer(path.read_bytes(), dtype="<f4")
        if payload.size != int(np.prod(shape)):
            raise VolumeIOError(
                f"{path}: payload holds {payload.size} voxels, header declares {shape}")
        arr = payload.reshape(shape).astype(np.float32)
        if not np.isfinite(arr).all():
            raise ValidationError(f"{path}: non-finite voxels")
        if (lo, hi) == CANONICAL_RANGE:
            return Volume(arr)
        return normalize(arr, (lo, hi))
    # slice directory
    if not path.is_dir():
        raise VolumeIOError(f"slice directory not found: {path}")
    files = sorted(path.glob("slice_*.png"))
    if not files:
        raise VolumeIOError(f"no slice_*.png files in {path}")
    slices = []
    for f in files:
        arr = np.asarray(Image.open(f))
        if arr.ndim != 2:
            raise VolumeIOError(f"{f}: expected a grayscale slice, got shape {arr.shape}")
        slices.append(arr.astype(np.float32))
    stack = np.stack(slices)
    if len({s.shape for s in slices}) != 1:
        raise VolumeIOError(f"{path}: slices disagree on shape")
    return normalize(stack, (0.0, 65535.0))


def save_labels(lv: LabelVolume, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    _header_path(path).write_text(
        f"shape={lv.shape[0]},{lv.shape[1]},{lv.shape[2]}\n"
        f"dtype=u8\nclasses={lv.class_count}\n")
    path.write_bytes(lv.labels.astype(np.uint8).tobytes(order="C"))


def load_labels(path: str | Path) -> LabelVolume:
    path = Path(path)
    hdr = _parse_header(_header_path(path))
    try:
        shape = tuple(int(s) for s in hdr["shape"].split(","))
        classes = int(hdr["classes"])
        dtype = hdr.get("dtype", "u8")
    except (KeyError, ValueError) as e:
        raise VolumeIOError(f"{path}: bad label header ({e})") from e
    if dtype != "u8":
        raise VolumeIOError(f"{path}: expected dtype=u8, got {dtype}")
    payload = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if payload.size != int(np.prod(shape)):
        raise VolumeIOError(f"{path}: label payload size mismatch vs header {shape}")
    return LabelVolume(payload.reshape(shape).copy(), classes)


# ----------------------------------------------------------------------
# Streaming sinks: decode emits one image slice at a time; the sink is the
# only place the full-resolution volume ever accumulates.

class VolumeAssembler:
    """In-memory sink collecting decoded slices into a Volume."""

    def __init__(self, shape: tuple[int, int, int],
                 value_range=CANONICAL_RANGE):
        self._data = np.zeros(shape, dtype=np.float32)
        self._seen = np.zeros(shape[0], dtype=bool)
        self.value_range = value_range

    def write(self, index: int, image: np.ndarray) -> None:
        if image.shape != self._data.shape[1:]:
            raise ValidationError(
                f"sink: slice {index} has shape {image.shape}, "
                f"expected {self._data.shape[1:]}")
        self._data[index] = image
        self._seen[index] = True

    def result(self) -> Volume:
        if not self._seen.all():
            missing = int((~self._seen).sum())
            raise VolumeIOError(f"assembler missing {missing} slices")
        return Volume(self._data, self.value_range)


class RawStreamSink:
    """Streams slices straight to a raw file.

    The payload is written to ``<path>.part`` and only renamed (and the
    header written) once every slice has arrived, so an interrupted run
    never leaves something load_volume would accept.
    """

    def __init__(self, path: str | Path, shape: tuple[int, int, int],
                 value_range=CANONICAL_RANGE):
        self.path = Path(path)
        self.shape = shape
        self.value_range = value_range
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._tmp = self.path.with_name(self.path.name + ".part")
        self._fh = open(self._tmp, "wb")
        self._next = 0

    def write(self, index: int, image: np.ndarray) -> None:
        if index != self._next:
            raise VolumeIOError(
                f"raw sink requires slices in order; got {index}, expected {self._next}")
        if image.shape != self.shape[1:]:
            raise ValidationError(
                f"sink: slice {index} has shape {image.shape}, expected {self.shape[1:]}")
        self._fh.write(np.asarray(image, dtype="<f4").tobytes(order="C"))
        self._next += 1

    def result(self) -> Path:
        self._fh.close()
        if self._next != self.shape[0]:
            raise VolumeIOError(
                f"raw sink got {self._next}/{self.shape[0]} slices; "
                f"partial output left at {self._tmp}")
        os.replace(self._tmp, self.path)
        lo, hi = self.value_range
        _header_path(self.path).write_text(
            f"shape={self.shape[0]},{self.shape[1]},{self.shape[2]}\n"
            f"dtype=f32\nrange={lo:.9g},{hi:.9g}\n")
        return self.path

    def abort(self) -> None:
        try:
            self._fh.close()
        finally:
            if self._tmp.exists():
                self._tmp.unlink()
