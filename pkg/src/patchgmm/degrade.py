"""Acquisition simulators: slice-plane masks, rotated planes, random masks,
and slice-thickness blur.

All generators are pure functions of their arguments; anything stochastic
takes an explicit seed.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import convolve1d

from .errors import ParameterError
from .volume import ObservationMask, Volume


def axial_slice_mask(dims, spacing_factor: int, offset: int = 0) -> ObservationMask:
    """Observe every `spacing_factor`-th plane along the third axis.

    Voxel (i, j, k) is observed iff k == offset (mod spacing_factor).
    """
    if spacing_factor < 1:
        raise ParameterError(f"spacing_factor must be >= 1, got {spacing_factor}")
    if not (0 <= offset < spacing_factor):
        raise ParameterError(f"need 0 <= offset < spacing_factor, got offset {offset}")
    k = np.arange(dims[2])
    plane = (k % spacing_factor) == offset
    flags = np.broadcast_to(plane[None, None, :], tuple(dims))
    return ObservationMask(flags.copy())


def rotated_plane_mask(dims, spacing_factor: int, rotation, seed: int) -> ObservationMask:
    """Observe parallel planes whose normal is the rotated z-axis.

    `rotation` is a triple of Euler angles in radians, applied as
    Rz @ Ry @ Rx to the z unit vector.  Planes are spaced `spacing_factor`
    voxels apart along the normal, with an integer offset drawn from `seed`;
    a voxel is observed when its signed distance to the nearest plane is
    strictly below half a voxel.  With zero rotation this reproduces
    axial_slice_mask exactly.
    """
    if spacing_factor < 1:
        raise ParameterError(f"spacing_factor must be >= 1, got {spacing_factor}")
    rng = np.random.default_rng(seed)
    offset = int(rng.integers(0, spacing_factor))
    normal = _rotation_matrix(*rotation) @ np.array([0.0, 0.0, 1.0])

    ii, jj, kk = np.meshgrid(
        np.arange(dims[0]), np.arange(dims[1]), np.arange(dims[2]), indexing="ij"
    )
    t = normal[0] * ii + normal[1] * jj + normal[2] * kk - offset
    frac = np.mod(t, spacing_factor)
    dist = np.minimum(frac, spacing_factor - frac)
    return ObservationMask(dist < 0.5)


def _rotation_matrix(ax: float, ay: float, az: float) -> np.ndarray:
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def random_mask(dims, fraction: float, seed: int) -> ObservationMask:
    """Observe exactly round(fraction * total) voxels, uniformly without replacement."""
    if fraction <= 0:
        raise ParameterError(f"fraction must be positive, got {fraction}")
    total = int(dims[0]) * int(dims[1]) * int(dims[2])
    count = int(round(fraction * total))
    if count < 1:
        raise ParameterError(f"fraction {fraction} selects no voxels out of {total}")
    count = min(count, total)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(total, size=count, replace=False)
    flags = np.zeros(total, dtype=bool)
    flags[chosen] = True
    return ObservationMask(flags.reshape(tuple(dims)))


def thickness_blur(v: Volume, sigma_mm: float, axis: int) -> Volume:
    """1D Gaussian blur along one axis, simulating finite slice thickness.

    The kernel standard deviation is sigma_mm / spacing[axis] voxels,
    truncated at 3 sigma and renormalized to sum 1.  Boundaries use reflect
    padding, which preserves the volume mean.  sigma_mm = 0 is the identity.
    """
    if sigma_mm < 0:
        raise ParameterError(f"sigma_mm must be >= 0, got {sigma_mm}")
    if axis not in (0, 1, 2):
        raise ParameterError(f"axis must be 0, 1 or 2, got {axis}")
    if sigma_mm == 0:
        return v
    sigma_vox = sigma_mm / v.spacing[axis]
    kernel = gaussian_kernel(sigma_vox)
    blurred = convolve1d(v.data.astype(np.float64), kernel, axis=axis, mode="reflect")
    return Volume(blurred.astype(np.float32), v.spacing)


def gaussian_kernel(sigma_vox: float) -> np.ndarray:
    """Normalized Gaussian taps at integer offsets within 3 sigma."""
    radius = max(1, int(np.floor(3.0 * sigma_vox)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (t / sigma_vox) ** 2)
    return k / k.sum()
