"""Deterministic synthetic volume collections with known ground truth.

Two families:

"model"      - the volume is a grid of non-overlapping tiles; each tile has
               its own planted low-rank mixture and every subject draws one
               component per tile.  The planted parameters are returned so
               recovery can be measured directly.
"structured" - shared ellipsoidal shapes with per-subject jitter on top of
               a smooth random field; nothing is drawn from the model class,
               which exercises the pipeline under misspecification.

All intensities are clipped to [0, 1].  Same seed, same collection.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import ParameterError
from .volume import Volume

_MODEL_DEFAULTS = {
    "tile": None,  # defaults to dims (single tile)
    "K": 2,
    "d": 2,
    "basis_scale": 0.08,
    "noise": 1e-4,
    "mean_lo": 0.25,
    "mean_hi": 0.75,
}

_STRUCTURED_DEFAULTS = {
    "n_blobs": 4,
    "field_scale": 0.05,
    "jitter": 0.03,
    "base": 0.15,
    "coarse": 6,
}


def _gen_spec(gen) -> dict:
    if isinstance(gen, str):
        spec = {"kind": gen}
    elif isinstance(gen, dict):
        spec = dict(gen)
    else:
        raise ParameterError(f"generator spec must be a name or mapping, got {type(gen).__name__}")
    kind = spec.get("kind")
    if kind == "model":
        base = dict(_MODEL_DEFAULTS)
    elif kind == "structured":
        base = dict(_STRUCTURED_DEFAULTS)
    else:
        raise ParameterError(f"unknown generator kind {kind!r}")
    unknown = set(spec) - set(base) - {"kind"}
    if unknown:
        raise ParameterError(f"unknown generator options {sorted(unknown)}")
    base.update(spec)
    return base


def _generate_model(n_subjects, dims, spec, rng):
    tile = spec["tile"] or dims
    tile = tuple(int(t) for t in tile)
    if any(t < 1 for t in tile) or any(D % t for D, t in zip(dims, tile)):
        raise ParameterError(f"tile {tile} must divide dims {dims}")
    K = int(spec["K"])
    d = int(spec["d"])
    P = tile[0] * tile[1] * tile[2]
    if K < 1 or d < 1 or d >= P:
        raise ParameterError(f"need K >= 1 and 1 <= d < {P}")
    n_tiles = tuple(D // t for D, t in zip(dims, tile))
    corners = [
        (t0 * tile[0], t1 * tile[1], t2 * tile[2])
        for t2 in range(n_tiles[2])
        for t1 in range(n_tiles[1])
        for t0 in range(n_tiles[0])
    ]
    tiles = []
    for corner in corners:
        weights = rng.dirichlet(np.full(K, 5.0))
        means = rng.uniform(spec["mean_lo"], spec["mean_hi"], size=(K, P))
        bases = rng.normal(0.0, 1.0, size=(K, P, d)) * spec["basis_scale"]
        tiles.append({
            "corner": corner,
            "weights": weights,
            "means": means,
            "bases": bases,
            "noise": float(spec["noise"]),
        })
    sigma = np.sqrt(float(spec["noise"]))
    assignments = np.empty((n_subjects, len(corners)), dtype=np.int64)
    volumes = []
    for s in range(n_subjects):
        vol = np.empty(dims, dtype=np.float64)
        for t, info in enumerate(tiles):
            z = int(rng.choice(K, p=info["weights"]))
            assignments[s, t] = z
            x = rng.standard_normal(d)
            y = info["means"][z] + info["bases"][z] @ x
            if sigma > 0:
                y = y + sigma * rng.standard_normal(P)
            c0, c1, c2 = info["corner"]
            vol[c0:c0 + tile[0], c1:c1 + tile[1], c2:c2 + tile[2]] = y.reshape(tile, order="F")
        np.clip(vol, 0.0, 1.0, out=vol)
        volumes.append(Volume(vol.astype(np.float32)))
    truth = {"kind": "model", "tile": tile, "tiles": tiles, "assignments": assignments}
    return volumes, truth


def _smooth_field(dims, coarse, rng):
    shape = tuple(max(2, D // coarse + 2) for D in dims)
    noise = rng.standard_normal(shape)
    axes = [np.linspace(0, s - 1, D) for s, D in zip(shape, dims)]
    coords = np.meshgrid(*axes, indexing="ij")
    return map_coordinates(noise, coords, order=1, mode="nearest")


def _generate_structured(n_subjects, dims, spec, rng):
    n_blobs = int(spec["n_blobs"])
    if n_blobs < 1:
        raise ParameterError("need at least one shape")
    dims_f = np.asarray(dims, dtype=np.float64)
    centers = rng.uniform(0.25, 0.75, size=(n_blobs, 3))
    radii = rng.uniform(0.12, 0.28, size=(n_blobs, 3))
    values = rng.uniform(0.45, 0.9, size=n_blobs)
    idx = np.stack(np.meshgrid(*[np.arange(D) for D in dims], indexing="ij"), axis=-1).astype(np.float64)
    volumes = []
    for _ in range(n_subjects):
        vol = np.full(dims, float(spec["base"]))
        c_s = centers + rng.normal(0.0, spec["jitter"], size=centers.shape)
        r_s = radii * (1.0 + rng.normal(0.0, 0.08, size=radii.shape))
        v_s = values * (1.0 + rng.normal(0.0, 0.04, size=values.shape))
        vol += spec["field_scale"] * _smooth_field(dims, int(spec["coarse"]), rng)
        for bi in range(n_blobs):
            c_vox = c_s[bi] * dims_f
            r_vox = np.maximum(r_s[bi] * dims_f, 0.75)
            inside = np.sum(((idx - c_vox) / r_vox) ** 2, axis=-1) <= 1.0
            vol[inside] = v_s[bi]
        np.clip(vol, 0.0, 1.0, out=vol)
        volumes.append(Volume(vol.astype(np.float32)))
    return volumes, {"kind": "structured"}


def generate_collection(n_subjects: int, dims, gen, seed: int):
    """Generate `n_subjects` ground-truth volumes; returns (volumes, truth).

    `gen` is a generator name ("model" or "structured") or a mapping with a
    "kind" key plus options.  `truth` always carries the kind; the planted
    mixture parameters are included for "model" collections.
    """
    if n_subjects < 1:
        raise ParameterError("n_subjects must be >= 1")
    dims = tuple(int(x) for x in dims)
    if len(dims) != 3 or any(D < 1 for D in dims):
        raise ParameterError(f"dims must be three positive ints, got {dims}")
    spec = _gen_spec(gen)
    rng = np.random.default_rng(seed)
    if spec["kind"] == "model":
        return _generate_model(n_subjects, dims, spec, rng)
    return _generate_structured(n_subjects, dims, spec, rng)
