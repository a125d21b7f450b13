"""EM training of the low-rank mixture from partially observed patches.

The M step works voxel-wise: for voxel j and component k, the update runs
over the set P_j of patches that observe j, with per-patch weights
delta_ik = gamma_ik / sum_{i' in P_j} gamma_i'k.  Writing b = sum delta xhat,
A = sum delta (xhat xhat^T + S), c = sum delta y xhat, ybar = sum delta y and
h = A^-1 b, the stationary point is

    mu_k^j = (ybar - c^T h) / (1 - b^T h)
    w_k^j  = A^-1 (c - mu_k^j b)        (row j of the new basis)

with the mean updated first and the basis row computed from the new mean.
The noise variance then averages squared residuals plus the posterior
uncertainty term over all observed entries, and is floored.  Mixture weights
are responsibility fractions over patches.

The latent dimension starts small and grows by a fixed amount per iteration
up to the target; new basis columns get small seeded noise.  The observed
log-likelihood is non-decreasing between iterations at fixed dimension.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import InitializationError, ParameterError, ShapeError
from .model import LatentStats, MixtureModel
from .patches import PackedPatches, PatchSample, pack_patches

logger = logging.getLogger("patchgmm.em")

_DENOM_GUARD = 1e-12


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for one location's fit."""

    K: int = 5
    d_target: int = 30
    d_init: int = 1
    d_growth_per_iter: int = 1
    max_iters: int = 50
    loglik_rel_tol: float = 1e-6
    sigma2_floor: float = 1e-6
    min_cluster_weight: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.K < 1:
            raise ParameterError("K must be >= 1")
        if not (1 <= self.d_init <= self.d_target):
            raise ParameterError("need 1 <= d_init <= d_target")
        if self.d_growth_per_iter < 0:
            raise ParameterError("d_growth_per_iter must be >= 0")
        if self.max_iters < 1:
            raise ParameterError("max_iters must be >= 1")
        if self.loglik_rel_tol < 0 or self.sigma2_floor <= 0 or self.min_cluster_weight < 0:
            raise ParameterError("tolerances must be positive")

    def d_at(self, iteration: int) -> int:
        """Latent dimension used at 1-based iteration t."""
        return min(self.d_init + (iteration - 1) * self.d_growth_per_iter, self.d_target)


def _kmeans_pp(Y: np.ndarray, K: int, rng: np.random.Generator, iters: int = 50):
    """Seeded k-means++ plus Lloyd refinement; returns (centers, labels)."""
    N = Y.shape[0]
    centers = np.empty((K, Y.shape[1]))
    first = int(rng.integers(N))
    centers[0] = Y[first]
    d2 = np.sum((Y - centers[0]) ** 2, axis=1)
    for k in range(1, K):
        tot = d2.sum()
        if tot <= 0:
            centers[k] = Y[int(rng.integers(N))]
        else:
            centers[k] = Y[int(rng.choice(N, p=d2 / tot))]
        d2 = np.minimum(d2, np.sum((Y - centers[k]) ** 2, axis=1))
    labels = np.zeros(N, dtype=np.int64)
    for _ in range(iters):
        dist = np.sum((Y[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(dist, axis=1)
        for k in range(K):
            sel = new_labels == k
            if not sel.any():
                # revive an empty cluster at the point farthest from its center
                far = int(np.argmax(np.min(dist, axis=1)))
                centers[k] = Y[far]
                new_labels[far] = k
                sel = new_labels == k
            centers[k] = Y[sel].mean(axis=0)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    return centers, labels


def init_from_interpolation(patches_interp, cfg: TrainConfig) -> MixtureModel:
    """Initial model from fully valued (interpolated) patch vectors.

    Clusters the vectors with seeded k-means++, forms each cluster's
    diagonal-variance surrogate, and takes the top-d_init variance
    coordinates as scaled basis directions; the residual variance over the
    remaining coordinates becomes the isotropic noise.
    """
    Y = np.asarray(patches_interp, dtype=np.float64)
    if Y.ndim != 2:
        raise InitializationError("interpolated patches must form an N x D array")
    N, D = Y.shape
    if N < cfg.K:
        raise InitializationError(f"{N} patches cannot seed {cfg.K} clusters")
    if cfg.d_target >= D:
        raise ParameterError(f"d_target {cfg.d_target} must be < patch dimension {D}")
    if not np.all(np.isfinite(Y)):
        raise InitializationError("interpolated patches must be fully valued")
    rng = np.random.default_rng(cfg.seed)
    centers, labels = _kmeans_pp(Y, cfg.K, rng)
    d = cfg.d_init
    means = centers
    bases = np.zeros((cfg.K, D, d))
    noise = np.empty(cfg.K)
    weights = np.empty(cfg.K)
    for k in range(cfg.K):
        sel = labels == k
        nk = int(sel.sum())
        weights[k] = nk / N
        var = np.zeros(D) if nk < 2 else Y[sel].var(axis=0)
        order = np.argsort(-var, kind="stable")
        top = order[:d]
        rest = order[d:]
        s2 = max(float(var[rest].mean()) if rest.size else 0.0, cfg.sigma2_floor)
        noise[k] = s2
        scale = np.sqrt(np.maximum(var[top] - s2, 0.0))
        for col, (j, sc) in enumerate(zip(top, scale)):
            bases[k, j, col] = sc if sc > 0 else np.sqrt(cfg.sigma2_floor)
        weights[k] = max(weights[k], cfg.min_cluster_weight)
    weights /= weights.sum()
    return MixtureModel(weights, means, bases, noise)


def _e_step_packed(packed: PackedPatches, model: MixtureModel) -> LatentStats:
    gamma, xhat, S, loglik = _accel.estep_batch(
        packed.values, packed.indices, packed.ptr,
        model.weights, model.means, model.bases, model.noise_vars,
    )
    return LatentStats(gamma, xhat, S, loglik)


def e_step(patches: list[PatchSample], model: MixtureModel) -> LatentStats:
    """Responsibilities and latent posteriors for every patch, plus the
    per-patch observed log-likelihood."""
    return _e_step_packed(pack_patches(patches, model.data_dim), model)


def _m_step_packed(
    packed: PackedPatches,
    stats: LatentStats,
    model_prev: MixtureModel,
    sigma2_floor: float,
) -> MixtureModel:
    D = model_prev.data_dim
    K = model_prev.n_components
    d = model_prev.latent_dim
    if stats.xhat.shape[2] != d or stats.gamma.shape[1] != K:
        raise ShapeError("latent stats do not match the model dimensions")
    N = packed.n_patches
    if stats.gamma.shape[0] != N:
        raise ShapeError("latent stats do not match the patch batch")

    G, ybar_r, b_r, c_r, A_r = _accel.mstep_moments(
        packed.values, packed.indices, packed.ptr,
        stats.gamma, stats.xhat, stats.S, D,
    )

    covered = G > _DENOM_GUARD
    Gs = np.where(covered, G, 1.0)
    ybar = ybar_r / Gs
    b = b_r / Gs[:, :, None]
    c = c_r / Gs[:, :, None]
    A = A_r / Gs[:, :, None, None]
    A[~covered] = np.eye(d)  # placeholder; these entries keep previous parameters

    rhs = np.stack([b, c], axis=-1)
    try:
        sol = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError:
        sol = np.empty_like(rhs)
        n_ridge = 0
        eye = np.eye(d)
        for j in range(D):
            for k in range(K):
                if not covered[j, k]:
                    sol[j, k] = 0.0
                    continue
                try:
                    sol[j, k] = np.linalg.solve(A[j, k], rhs[j, k])
                except np.linalg.LinAlgError:
                    ridge = 1e-8 * np.trace(A[j, k]) / d
                    sol[j, k] = np.linalg.solve(A[j, k] + ridge * eye, rhs[j, k])
                    n_ridge += 1
        if n_ridge:
            logger.warning("regularized %d singular voxel systems with ridge", n_ridge)
    h = sol[..., 0]
    Ainv_c = sol[..., 1]

    denom = 1.0 - np.einsum("jkd,jkd->jk", b, h)
    numer = ybar - np.einsum("jkd,jkd->jk", c, h)
    ok = covered & (np.abs(denom) > _DENOM_GUARD)
    mu = np.where(ok, numer / np.where(ok, denom, 1.0), model_prev.means.T)
    W = np.where(ok[:, :, None], Ainv_c - mu[:, :, None] * h, np.transpose(model_prev.bases, (1, 0, 2)))

    means_new = np.ascontiguousarray(mu.T)
    bases_new = np.ascontiguousarray(np.transpose(W, (1, 0, 2)))

    num, den = _accel.mstep_sigma2(
        packed.values, packed.indices, packed.ptr,
        stats.gamma, stats.xhat, stats.S, means_new, bases_new,
    )
    noise_new = np.empty(K)
    for k in range(K):
        if den[k] > _DENOM_GUARD:
            noise_new[k] = max(num[k] / den[k], sigma2_floor)
        else:
            noise_new[k] = model_prev.noise_vars[k]

    weights_new = stats.gamma.sum(axis=0) / N
    weights_new = np.maximum(weights_new, 0.0)
    weights_new /= weights_new.sum()
    return MixtureModel(weights_new, means_new, bases_new, noise_new)


def m_step(
    patches: list[PatchSample],
    stats: LatentStats,
    model_prev: MixtureModel,
    sigma2_floor: float = 1e-6,
) -> MixtureModel:
    """One maximization pass; see the module docstring for the updates."""
    return _m_step_packed(pack_patches(patches, model_prev.data_dim), stats, model_prev, sigma2_floor)


def _grow_model(model: MixtureModel, d_new: int, rng: np.random.Generator) -> MixtureModel:
    """Append noise columns (scale 1e-3) to every basis up to d_new."""
    K, D, d = model.bases.shape
    if d_new <= d:
        return model
    extra = rng.normal(0.0, 1e-3, size=(K, D, d_new - d))
    bases = np.concatenate([model.bases, extra], axis=2)
    return MixtureModel(model.weights, model.means, bases, model.noise_vars)


def _reseed_cluster(
    model: MixtureModel,
    k: int,
    packed: PackedPatches,
    worst: int,
    rng: np.random.Generator,
) -> MixtureModel:
    """Re-center a collapsed cluster on the worst-explained patch."""
    weights = model.weights.copy()
    means = model.means.copy()
    bases = model.bases.copy()
    lo, hi = packed.ptr[worst], packed.ptr[worst + 1]
    means[k, packed.indices[lo:hi]] = packed.values[lo:hi]
    bases[k] = rng.normal(0.0, 1e-3, size=bases[k].shape)
    weights[k] = 1.0 / weights.size
    weights /= weights.sum()
    return MixtureModel(weights, means, bases, model.noise_vars)


def fit(
    patches: list[PatchSample],
    cfg: TrainConfig,
    init: MixtureModel,
    log_stream=None,
) -> tuple[MixtureModel, list[float]]:
    """Alternate E and M passes with the growing-dimension schedule.

    Stops when the relative observed-log-likelihood change between two
    iterations at the same latent dimension drops below loglik_rel_tol, or
    at max_iters.  Returns the final model and the log-likelihood trace
    (one entry per iteration, evaluated before that iteration's M pass).
    `log_stream` optionally receives one JSON record per iteration.
    """
    if len(patches) < cfg.K:
        raise InitializationError(f"{len(patches)} patches cannot support K={cfg.K}")
    D = init.data_dim
    if cfg.d_target >= D:
        raise ParameterError(f"d_target {cfg.d_target} must be < patch dimension {D}")
    if init.latent_dim != cfg.d_init:
        raise ParameterError(
            f"init model has d={init.latent_dim}, config says d_init={cfg.d_init}")
    packed = pack_patches(patches, D)
    seen = np.bincount(packed.indices, minlength=D)
    if (seen == 0).any():
        logger.warning(
            "%d of %d voxel positions are never observed; their parameters keep "
            "the initialization", int((seen == 0).sum()), D)
    rng = np.random.default_rng(cfg.seed)
    model = init
    trace: list[float] = []
    prev_ll = None
    prev_d = None
    for it in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        d_now = cfg.d_at(it)
        if d_now > model.latent_dim:
            model = _grow_model(model, d_now, rng)
        stats = _e_step_packed(packed, model)
        ll = stats.total_loglik
        trace.append(ll)
        model = _m_step_packed(packed, stats, model, cfg.sigma2_floor)
        low = np.flatnonzero(model.weights < cfg.min_cluster_weight)
        if low.size:
            worst = int(np.argmin(stats.loglik))
            for k in low:
                logger.warning("cluster %d collapsed (weight %.3g); reseeding", k, model.weights[k])
                model = _reseed_cluster(model, int(k), packed, worst, rng)
        if log_stream is not None:
            rec = {
                "iter": it,
                "d": d_now,
                "loglik": ll,
                "pi": [float(x) for x in model.weights],
                "sigma2": [float(x) for x in model.noise_vars],
                "wall_time_s": round(time.perf_counter() - t0, 6),
            }
            log_stream.write(json.dumps(rec) + "\n")
        if prev_ll is not None and prev_d == d_now and abs(ll - prev_ll) <= cfg.loglik_rel_tol * abs(prev_ll):
            break
        prev_ll = ll
        prev_d = d_now
    return model, trace
