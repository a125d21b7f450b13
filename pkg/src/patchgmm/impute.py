"""Patch and volume restoration from trained mixtures.

MAP restoration picks the most responsible component, computes the latent
posterior mean from the observed entries, and reconstructs the entire patch
from the component mean and basis (observed positions included, which
smooths the output).  Sampling mode draws around that reconstruction with
covariance sigma2 I + W (S + xhat xhat^T) W^T, factored in latent space so
nothing D x D is built.

Whole volumes are restored by imputing every patch of every subvolume with
that location's model and averaging the overlaps; keep_observed optionally
copies the originally observed voxels back afterwards.
"""

from __future__ import annotations

import logging

import numpy as np

from . import _accel
from .ecm import FullCovModel, ecm_e_step
from .errors import ManifestError, NumericalError, ValidationError
from .model import MixtureModel, latent_posterior, responsibilities
from .patches import PatchSample, SubvolumeGrid, extract_patches, pack_patches, stitch
from .volume import ObservationMask, Volume, check_dims

logger = logging.getLogger("patchgmm.impute")


def impute_patch_map(p: PatchSample, model: MixtureModel):
    """MAP reconstruction of one patch: (yhat (D,), k_hat).

    k_hat is the argmax responsibility (ties to the lowest index); all D
    entries of yhat are rebuilt from the winning component.
    """
    gamma = responsibilities(model, p)
    k_hat = int(np.argmax(gamma))
    xhat, _ = latent_posterior(model, p, k_hat)
    yhat = model.means[k_hat] + model.bases[k_hat] @ xhat
    return yhat, k_hat


def sample_reconstruction(mean, W, sigma2, xhat, S, rng) -> np.ndarray:
    """One draw from N(mean, sigma2 I + W (S + xhat xhat^T) W^T).

    The covariance is factored through the d x d matrix S + xhat xhat^T, so
    the draw is mean + sqrt(sigma2) e0 + W L e1 with L its Cholesky factor.
    Draw order is fixed: e0 (length D) first, then e1 (length d).
    """
    B = S + np.outer(xhat, xhat)
    try:
        L = np.linalg.cholesky(B)
    except np.linalg.LinAlgError:
        if np.max(np.abs(B)) == 0.0:
            L = np.zeros_like(B)
        else:
            raise NumericalError("posterior latent covariance not factorizable") from None
    e0 = rng.standard_normal(mean.size)
    e1 = rng.standard_normal(W.shape[1])
    return mean + np.sqrt(sigma2) * e0 + W @ (L @ e1)


def impute_patch_sample(p: PatchSample, model: MixtureModel, seed: int) -> np.ndarray:
    """Posterior sample around the MAP reconstruction; deterministic in seed."""
    gamma = responsibilities(model, p)
    k_hat = int(np.argmax(gamma))
    xhat, S = latent_posterior(model, p, k_hat)
    mean = model.means[k_hat] + model.bases[k_hat] @ xhat
    rng = np.random.default_rng(seed)
    return sample_reconstruction(mean, model.bases[k_hat], float(model.noise_vars[k_hat]), xhat, S, rng)


def _fullcov_map(p: PatchSample, model: FullCovModel):
    gamma, yhat, Shat = ecm_e_step(p, model)
    k_hat = int(np.argmax(gamma))
    return yhat[k_hat], Shat[k_hat], k_hat


def _impute_location_factored(patches, model: MixtureModel, mode: str, rng):
    """Reconstruction vectors for all patches of one location."""
    packed = pack_patches(patches, model.data_dim)
    gamma, xhat, S, _ = _accel.estep_batch(
        packed.values, packed.indices, packed.ptr,
        model.weights, model.means, model.bases, model.noise_vars,
    )
    out = []
    for i, p in enumerate(patches):
        k_hat = int(np.argmax(gamma[i]))
        mean = model.means[k_hat] + model.bases[k_hat] @ xhat[i, k_hat]
        if mode == "map":
            vec = mean
        else:
            vec = sample_reconstruction(
                mean, model.bases[k_hat], float(model.noise_vars[k_hat]),
                xhat[i, k_hat], S[i, k_hat], rng)
        out.append((vec, p.source[1]))
    return out


def _impute_location_fullcov(patches, model: FullCovModel, mode: str, rng):
    out = []
    for p in patches:
        yhat, Shat, _ = _fullcov_map(p, model)
        if mode == "sample":
            miss = np.flatnonzero(~np.isin(np.arange(model.data_dim), p.observed))
            if miss.size:
                C = Shat[np.ix_(miss, miss)]
                try:
                    L = np.linalg.cholesky(C)
                except np.linalg.LinAlgError:
                    jitter = 1e-12 * max(np.trace(C) / miss.size, 1.0)
                    try:
                        L = np.linalg.cholesky(C + jitter * np.eye(miss.size))
                    except np.linalg.LinAlgError as exc:
                        raise NumericalError("conditional covariance not factorizable") from exc
                yhat = yhat.copy()
                yhat[miss] += L @ rng.standard_normal(miss.size)
        out.append((yhat, p.source[1]))
    return out


def restore_volume(
    v: Volume,
    m: ObservationMask,
    grid: SubvolumeGrid,
    models: dict,
    mode: str = "map",
    keep_observed: bool = False,
    seed: int = 0,
) -> Volume:
    """Impute every patch of every subvolume and stitch with uniform weights.

    `models` maps each grid center to its trained model (factored or full
    covariance).  In sample mode the draw sequence is fixed by `seed` and
    the scan order of locations and patches.
    """
    check_dims(v, m)
    if mode not in ("map", "sample"):
        raise ValidationError(f"unknown restoration mode {mode!r}")
    centers = grid.centers()
    missing = [c for c in centers if c not in models]
    if missing:
        raise ManifestError(f"manifest lacks models for {len(missing)} grid centers, "
                            f"first {missing[0]}")
    rng = np.random.default_rng(seed)
    pieces = []
    for center in centers:
        patches = extract_patches(v, m, grid, center)
        if not patches:
            continue
        model = models[center]
        if isinstance(model, MixtureModel):
            pieces.extend(_impute_location_factored(patches, model, mode, rng))
        elif isinstance(model, FullCovModel):
            pieces.extend(_impute_location_fullcov(patches, model, mode, rng))
        else:
            raise ManifestError(f"unsupported model type {type(model).__name__} at {center}")
    out = stitch(pieces, v.dims, grid.patch_size, spacing=v.spacing)
    if keep_observed:
        data = out.data.copy()
        data[m.flags] = v.data[m.flags]
        out = Volume(data, v.spacing)
    return out
