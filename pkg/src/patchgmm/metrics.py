"""Restoration quality metrics and interpolation baselines.

psnr follows the convention used throughout this project's evaluation:
log10(max(reference) / mse) — note the plain ratio of peak intensity to
mean squared error inside a single log10.  The more common
10 log10(peak^2 / mse) is available behind the `conventional` flag.
"""

from __future__ import annotations

import numpy as np

from .errors import InfinitePsnrError, ShapeError, ValidationError
from .volume import ObservationMask, Volume, check_dims


def mse(z: Volume, z0: Volume, region: ObservationMask | None = None) -> float:
    """Mean squared difference, over `region` voxels if given, else all."""
    if z.dims != z0.dims:
        raise ShapeError(f"volume dims {z.dims} != {z0.dims}")
    a = z.data.astype(np.float64)
    b = z0.data.astype(np.float64)
    if region is not None:
        if region.dims != z.dims:
            raise ShapeError(f"region dims {region.dims} != {z.dims}")
        a = a[region.flags]
        b = b[region.flags]
        if a.size == 0:
            raise ValidationError("region selects no voxels")
    return float(np.mean((a - b) ** 2))


def psnr(z: Volume, z0: Volume, conventional: bool = False) -> float:
    """Peak signal-to-noise of z against reference z0.

    Default: log10(max(z0) / mse).  conventional=True instead returns
    10 log10(max(z0)^2 / mse)."""
    err = mse(z, z0)
    if err == 0.0:
        raise InfinitePsnrError("volumes are identical; psnr is infinite")
    peak = float(z0.data.max())
    if conventional:
        return float(10.0 * np.log10(peak * peak / err))
    return float(np.log10(peak / err))


def improvement_over_baseline(method_mse: float, baseline_mse: float) -> float:
    """Positive iff the method beats the baseline."""
    return baseline_mse - method_mse


def baseline_nearest(v: Volume, m: ObservationMask) -> Volume:
    """Fill every missing voxel with the value of the nearest observed voxel.

    Distances are Euclidean in voxel index units; ties go to the observed
    voxel with the lexicographically lowest coordinate.
    """
    check_dims(v, m)
    flags = m.flags
    if flags.all():
        return Volume(v.data, v.spacing)
    obs = np.argwhere(flags).astype(np.int64)  # C order: lexicographically ascending
    miss = np.argwhere(~flags).astype(np.int64)
    obs_vals = v.data[flags]
    out = v.data.copy()
    chunk = max(1, 50_000_000 // (8 * obs.shape[0] * 3))
    fill = np.empty(miss.shape[0], dtype=np.float32)
    for s in range(0, miss.shape[0], chunk):
        block = miss[s:s + chunk]
        d2 = np.sum((block[:, None, :] - obs[None, :, :]) ** 2, axis=2)
        nearest = np.argmin(d2, axis=1)  # first minimum = lowest coordinate
        fill[s:s + chunk] = obs_vals[nearest]
    out[~flags] = fill
    return Volume(out, v.spacing)


def _planar_axis(flags: np.ndarray) -> tuple[int, np.ndarray]:
    """Axis along which the mask consists of whole observed planes."""
    for axis in range(3):
        others = tuple(a for a in range(3) if a != axis)
        full = flags.all(axis=others)
        empty = (~flags).all(axis=others)
        if np.all(full | empty):
            return axis, full
    raise ValidationError("mask has no planar structure along any axis")


def baseline_linear(v: Volume, m: ObservationMask) -> Volume:
    """Linear interpolation between bracketing observed planes along the
    sparse axis; positions beyond the outermost planes copy the nearest
    plane.  The mask must consist of whole planes along one axis.
    """
    check_dims(v, m)
    if m.flags.all():
        return Volume(v.data, v.spacing)
    axis, full = _planar_axis(m.flags)
    ks = np.flatnonzero(full)
    if ks.size == 0:
        raise ValidationError("no observed planes along the sparse axis")
    data = np.moveaxis(v.data.astype(np.float64), axis, 0)
    T = data.shape[0]
    pos = np.arange(T)
    hi = np.searchsorted(ks, pos, side="left")
    hi = np.clip(hi, 0, ks.size - 1)
    lo = np.clip(hi - 1, 0, ks.size - 1)
    exact = ks[hi] == pos
    lo[exact] = hi[exact]
    below = pos < ks[0]
    lo[below] = 0
    hi[below] = 0
    k_lo = ks[lo]
    k_hi = ks[hi]
    span = np.where(k_hi > k_lo, (k_hi - k_lo).astype(np.float64), 1.0)
    w = (pos - k_lo) / span
    w = np.clip(w, 0.0, 1.0)
    out = (1.0 - w)[:, None, None] * data[k_lo] + w[:, None, None] * data[k_hi]
    out = np.moveaxis(out, 0, axis)
    return Volume(out.astype(np.float32), v.spacing)


def write_report(path, rows: list[dict]) -> None:
    """Tab-separated evaluation table: subject, method, mse, psnr, improvement.

    Floats are rendered with %.17g so a rerun writes identical bytes.
    """
    cols = ("subject", "method", "mse", "psnr", "improvement")
    lines = ["\t".join(cols)]
    for row in rows:
        vals = []
        for c in cols:
            x = row[c]
            vals.append(format(x, ".17g") if isinstance(x, float) else str(x))
        lines.append("\t".join(vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")
