"""Dense 3D volumes, observation masks, and the portable MIV1 file format.

A volume is a dense scalar grid with per-axis voxel spacing in mm.  Data is
held as float32 (the storage precision); all learning code converts to
float64 on extraction.  Axis order convention throughout the package: the
first axis varies fastest, both in file payloads and in vectorized patches.

MIV1 layout (little-endian):

    bytes 0-3    magic "MIV1"
    bytes 4-15   dims, three uint32
    bytes 16-39  spacing, three float64 (mm per voxel)
    bytes 40-43  dtype code, uint32: 0 = float32 payload, 1 = uint8 payload
    bytes 44-    payload, fastest-first axis order

Round-tripping through save/load is bit-exact; this is relied on for
reproducibility checks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ParameterError, ShapeError, ValidationError

_MAGIC = b"MIV1"
_HEADER = struct.Struct("<4s3I3dI")
_DTYPE_F32 = 0
_DTYPE_U8 = 1


@dataclass(frozen=True)
class Volume:
    """Dense 3D scalar grid with voxel spacing in mm."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    dims: tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"volume data must be 3D and non-empty, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError("volume contains NaN or Inf values")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValidationError(f"spacing must be three positive reals, got {self.spacing}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "dims", tuple(int(n) for n in arr.shape))


@dataclass(frozen=True)
class ObservationMask:
    """Per-voxel observed/missing flags aligned to a volume (True = observed)."""

    flags: np.ndarray
    dims: tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        arr = np.ascontiguousarray(self.flags, dtype=bool)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValidationError(f"mask flags must be 3D and non-empty, got shape {arr.shape}")
        if not arr.any():
            raise ValidationError("mask has no observed voxels")
        arr.flags.writeable = False
        object.__setattr__(self, "flags", arr)
        object.__setattr__(self, "dims", tuple(int(n) for n in arr.shape))

    @property
    def observed_count(self) -> int:
        return int(self.flags.sum())


def check_dims(v: Volume, m: ObservationMask) -> None:
    if v.dims != m.dims:
        raise ShapeError(f"volume dims {v.dims} != mask dims {m.dims}")


def save_volume(v: Volume, path) -> None:
    """Write a volume to `path` in MIV1 format."""
    payload = v.data.ravel(order="F").tobytes()
    _write(path, v.dims, v.spacing, _DTYPE_F32, payload)


def load_volume(path) -> Volume:
    """Read an MIV1 float32 volume; inverse of save_volume, bit-exactly."""
    dims, spacing, code, payload = _read(path)
    if code != _DTYPE_F32:
        raise FormatError(f"{path}: expected float32 payload (code 0), got code {code}")
    n = dims[0] * dims[1] * dims[2]
    data = np.frombuffer(payload, dtype="<f4", count=n).reshape(dims, order="F")
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{path}: payload contains NaN or Inf")
    return Volume(data, spacing)


def save_mask(m: ObservationMask, path) -> None:
    """Write a mask to `path` as an MIV1 uint8 payload (1 = observed)."""
    payload = m.flags.astype(np.uint8).ravel(order="F").tobytes()
    _write(path, m.dims, (1.0, 1.0, 1.0), _DTYPE_U8, payload)


def load_mask(path) -> ObservationMask:
    """Read an MIV1 uint8 mask written by save_mask."""
    dims, _, code, payload = _read(path)
    if code != _DTYPE_U8:
        raise FormatError(f"{path}: expected uint8 payload (code 1), got code {code}")
    n = dims[0] * dims[1] * dims[2]
    flags = np.frombuffer(payload, dtype=np.uint8, count=n).reshape(dims, order="F")
    return ObservationMask(flags != 0)


def _write(path, dims, spacing, code, payload: bytes) -> None:
    header = _HEADER.pack(_MAGIC, *dims, *spacing, code)
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def _read(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, d0, d1, d2, s0, s1, s2, code = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    dims = (int(d0), int(d1), int(d2))
    if min(dims) < 1:
        raise FormatError(f"{path}: non-positive dims {dims}")
    if any(not np.isfinite(s) or s <= 0 for s in (s0, s1, s2)):
        raise FormatError(f"{path}: invalid spacing {(s0, s1, s2)}")
    itemsize = 4 if code == _DTYPE_F32 else 1
    need = dims[0] * dims[1] * dims[2] * itemsize
    payload = raw[_HEADER.size:]
    if len(payload) < need:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    return dims, (s0, s1, s2), code, payload


def mask_from_weights(
    weights: np.ndarray,
    gradient_magnitude: np.ndarray,
    low_thresh: float = 0.5,
    high_thresh: float = 0.75,
    gradient_cut: float | None = None,
) -> ObservationMask:
    """Threshold interpolation weights into an observed/missing mask.

    A voxel counts as observed when its weight reaches the applicable
    threshold: `high_thresh` where the gradient magnitude exceeds
    `gradient_cut`, `low_thresh` elsewhere.  When `gradient_cut` is None it
    defaults to the 75th percentile of the gradient magnitude.
    """
    w = np.asarray(weights, dtype=np.float64)
    g = np.asarray(gradient_magnitude, dtype=np.float64)
    if w.shape != g.shape:
        raise ShapeError(f"weights shape {w.shape} != gradient shape {g.shape}")
    if not (0.0 <= low_thresh <= high_thresh <= 1.0):
        raise ParameterError(
            f"need 0 <= low_thresh <= high_thresh <= 1, got {low_thresh}, {high_thresh}"
        )
    if gradient_cut is None:
        gradient_cut = float(np.percentile(g, 75.0))
    thresh = np.where(g > gradient_cut, high_thresh, low_thresh)
    return ObservationMask(w >= thresh)
