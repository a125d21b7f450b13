"""Tiling volumes into subvolumes, extracting vectorized patches, and
stitching restored patches back together.

Patches are vectorized fastest-first (first axis varies fastest), the same
convention the file format uses.  A patch records which of its entries were
observed; entries at missing positions are NaN and must never be read by
learning code.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CoverageError, ParameterError, ShapeError, ValidationError
from .volume import ObservationMask, Volume, check_dims


@dataclass(frozen=True)
class SubvolumeGrid:
    """Regular grid of overlapping subvolumes covering a volume.

    Subvolume corners advance by `stride` and the last corner along each axis
    is clamped flush with the volume boundary, so every voxel is covered.
    One local model is trained per grid center from all patches inside the
    subvolume.
    """

    volume_dims: tuple[int, int, int]
    subvolume_size: tuple[int, int, int] = (21, 21, 21)
    stride: tuple[int, int, int] = (11, 11, 11)
    patch_size: tuple[int, int, int] = (11, 11, 11)

    def __post_init__(self):
        object.__setattr__(self, "volume_dims", tuple(int(x) for x in self.volume_dims))
        object.__setattr__(self, "subvolume_size", tuple(int(x) for x in self.subvolume_size))
        object.__setattr__(self, "stride", tuple(int(x) for x in self.stride))
        object.__setattr__(self, "patch_size", tuple(int(x) for x in self.patch_size))
        if any(p < 1 for p in self.patch_size) or any(s < 1 for s in self.stride):
            raise ParameterError("patch_size and stride entries must be >= 1")
        if any(p > s for p, s in zip(self.patch_size, self.subvolume_size)):
            raise ParameterError(
                f"patch_size {self.patch_size} exceeds subvolume_size {self.subvolume_size}"
            )

    @property
    def patch_dim(self) -> int:
        a, b, c = self.patch_size
        return a * b * c

    def corners_along(self, axis: int) -> list[int]:
        dim = self.volume_dims[axis]
        size = self.subvolume_size[axis]
        step = self.stride[axis]
        if dim <= size:
            return [0]
        last = dim - size
        corners = list(range(0, last, step)) + [last]
        return corners

    def centers(self) -> list[tuple[int, int, int]]:
        """Grid centers in fixed scan order (first axis fastest)."""
        half = tuple(s // 2 for s in self.subvolume_size)
        axes = [self.corners_along(a) for a in range(3)]
        out = []
        for c2 in axes[2]:
            for c1 in axes[1]:
                for c0 in axes[0]:
                    out.append((c0 + half[0], c1 + half[1], c2 + half[2]))
        return out

    def subvolume_bounds(self, center) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
        """Clamped [lo, hi) bounds of the subvolume at `center`."""
        lo = []
        hi = []
        for a in range(3):
            corner = int(center[a]) - self.subvolume_size[a] // 2
            lo_a = max(0, corner)
            hi_a = min(self.volume_dims[a], corner + self.subvolume_size[a])
            if hi_a <= lo_a:
                raise ParameterError(f"subvolume at center {tuple(center)} misses the volume")
            lo.append(lo_a)
            hi.append(hi_a)
        return tuple(lo), tuple(hi)


@dataclass(frozen=True)
class PatchSample:
    """One vectorized patch with its observed-index subset.

    `values` has length patch_dim; entries at unobserved positions are NaN.
    `observed` is strictly increasing.  `source` identifies the originating
    volume and the patch corner within it.
    """

    values: np.ndarray
    observed: np.ndarray
    source: tuple[int, tuple[int, int, int]] = (0, (0, 0, 0))

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        obs = np.ascontiguousarray(self.observed, dtype=np.int64)
        if vals.ndim != 1 or obs.ndim != 1:
            raise ValidationError("patch values and observed indices must be 1D")
        if obs.size < 1:
            raise ValidationError("patch has no observed voxels")
        if np.any(np.diff(obs) <= 0) or obs[0] < 0 or obs[-1] >= vals.size:
            raise ValidationError("observed indices must be strictly increasing and in range")
        if not np.all(np.isfinite(vals[obs])):
            raise ValidationError("observed patch values must be finite")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "observed", obs)

    @property
    def observed_values(self) -> np.ndarray:
        return self.values[self.observed]


def extract_patches(
    v: Volume,
    m: ObservationMask,
    grid: SubvolumeGrid,
    center,
    volume_id: int = 0,
) -> list[PatchSample]:
    """All patches whose support lies inside the clamped subvolume at `center`.

    One PatchSample per patch corner; patches with zero observed voxels are
    dropped.  Patch values are float64, NaN at missing positions.
    """
    check_dims(v, m)
    if tuple(v.dims) != grid.volume_dims:
        raise ShapeError(f"volume dims {v.dims} != grid dims {grid.volume_dims}")
    lo, hi = grid.subvolume_bounds(center)
    p = grid.patch_size
    out: list[PatchSample] = []
    ranges = [range(lo[a], hi[a] - p[a] + 1) for a in range(3)]
    if any(len(r) == 0 for r in ranges):
        return out
    data = v.data
    flags = m.flags
    for c2 in ranges[2]:
        for c1 in ranges[1]:
            for c0 in ranges[0]:
                block = data[c0:c0 + p[0], c1:c1 + p[1], c2:c2 + p[2]]
                fblock = flags[c0:c0 + p[0], c1:c1 + p[1], c2:c2 + p[2]]
                obs = np.flatnonzero(fblock.ravel(order="F"))
                if obs.size == 0:
                    continue
                vals = block.ravel(order="F").astype(np.float64)
                vals[~fblock.ravel(order="F")] = np.nan
                out.append(PatchSample(vals, obs, (volume_id, (c0, c1, c2))))
    return out


@dataclass(frozen=True)
class PackedPatches:
    """Batch layout consumed by the numeric kernels.

    Observed values and indices are concatenated across patches; `ptr` holds
    the per-patch offsets (length n_patches + 1).
    """

    values: np.ndarray
    indices: np.ndarray
    ptr: np.ndarray
    patch_dim: int

    @property
    def n_patches(self) -> int:
        return self.ptr.size - 1


def pack_patches(patches: list[PatchSample], patch_dim: int) -> PackedPatches:
    if not patches:
        raise ValidationError("cannot pack an empty patch list")
    counts = np.array([p.observed.size for p in patches], dtype=np.int64)
    ptr = np.zeros(len(patches) + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    values = np.concatenate([p.observed_values for p in patches])
    indices = np.concatenate([p.observed for p in patches])
    if indices.size and indices.max() >= patch_dim:
        raise ValidationError("observed index exceeds patch dimension")
    return PackedPatches(values, indices, ptr, patch_dim)


def stitch(
    patches: list[tuple[np.ndarray, tuple[int, int, int]]],
    dims,
    patch_size,
    weighting: str = "uniform",
    spacing=(1.0, 1.0, 1.0),
) -> Volume:
    """Average overlapping restored patches into a volume.

    Each entry is a (patch_dim vector, corner) pair; every voxel must be
    covered by at least one patch.  Uniform weighting takes the arithmetic
    mean of all covering patch values.
    """
    if weighting != "uniform":
        raise ParameterError(f"unsupported weighting {weighting!r}")
    dims = tuple(int(x) for x in dims)
    p = tuple(int(x) for x in patch_size)
    acc = np.zeros(dims, dtype=np.float64)
    cnt = np.zeros(dims, dtype=np.float64)
    for vec, corner in patches:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != p[0] * p[1] * p[2]:
            raise ShapeError(f"patch vector length {vec.size} != patch size {p}")
        c0, c1, c2 = (int(x) for x in corner)
        if c0 < 0 or c1 < 0 or c2 < 0 or c0 + p[0] > dims[0] or c1 + p[1] > dims[1] or c2 + p[2] > dims[2]:
            raise ShapeError(f"patch at corner {corner} exceeds volume dims {dims}")
        block = vec.reshape(p, order="F")
        acc[c0:c0 + p[0], c1:c1 + p[1], c2:c2 + p[2]] += block
        cnt[c0:c0 + p[0], c1:c1 + p[1], c2:c2 + p[2]] += 1.0
    uncovered = cnt == 0
    if uncovered.any():
        first = np.argwhere(uncovered)[0]
        raise CoverageError(f"voxel {tuple(int(x) for x in first)} is covered by no patch")
    return Volume((acc / cnt).astype(np.float32), spacing)
