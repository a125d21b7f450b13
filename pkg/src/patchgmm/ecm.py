"""Full-covariance mixture trained by expectation conditional maximization,
treating missing voxels as latent variables.

Slower than the factored trainer and intended for small patch dimensions
(D up to a few hundred): every step manipulates dense D x D covariances.
Serves as a comparison method and as an independent cross-check of the
factored model's conditional-mean imputation.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import NumericalError, ParameterError, ShapeError, ValidationError
from .patches import PatchSample

logger = logging.getLogger("patchgmm.ecm")

_LOG_2PI = float(np.log(2.0 * np.pi))
_DENOM_GUARD = 1e-12


@dataclass(frozen=True)
class FullCovModel:
    """Mixture with unconstrained symmetric covariances.

    weights: (K,), sums to 1.  means: (K, D).  covariances: (K, D, D),
    each symmetric.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        mu = np.ascontiguousarray(self.means, dtype=np.float64)
        cov = np.ascontiguousarray(self.covariances, dtype=np.float64)
        if w.ndim != 1 or mu.ndim != 2 or cov.ndim != 3:
            raise ValidationError("model arrays have wrong rank")
        K, D = mu.shape
        if w.size != K or cov.shape != (K, D, D):
            raise ValidationError("component counts disagree across model arrays")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise ValidationError("model parameters must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-8:
            raise ValidationError("mixture weights must be nonnegative and sum to 1")
        for k in range(K):
            if not np.allclose(cov[k], cov[k].T, atol=1e-8, rtol=1e-8):
                raise ValidationError(f"covariance {k} is not symmetric")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def data_dim(self) -> int:
        return self.means.shape[1]


@dataclass(frozen=True)
class EcmStats:
    """Stacked per-patch E-pass results: gamma (N,K), yhat (N,K,D),
    Shat (N,K,D,D), loglik (N,)."""

    gamma: np.ndarray
    yhat: np.ndarray
    Shat: np.ndarray
    loglik: np.ndarray

    @property
    def total_loglik(self) -> float:
        return float(self.loglik.sum())


def _chol_obs(Sigma_oo: np.ndarray, where: str):
    """Cholesky of the observed-block covariance, with one ridge retry."""
    try:
        return cho_factor(Sigma_oo, lower=True)
    except np.linalg.LinAlgError:
        n = Sigma_oo.shape[0]
        ridge = 1e-8 * np.trace(Sigma_oo) / n
        logger.warning("observed covariance block near singular (%s); adding ridge %.3g",
                       where, ridge)
        try:
            return cho_factor(Sigma_oo + ridge * np.eye(n), lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"observed covariance block not factorizable ({where})") from exc


def _component_pass(p: PatchSample, model: FullCovModel, k: int):
    """(loglik, yhat, Shat) of component k for one patch."""
    obs = p.observed
    D = model.data_dim
    miss = np.setdiff1d(np.arange(D), obs, assume_unique=True)
    mu = model.means[k]
    Sigma = model.covariances[k]
    y_o = p.observed_values
    r = y_o - mu[obs]
    Soo = Sigma[np.ix_(obs, obs)]
    fac = _chol_obs(Soo, f"component {k}")
    alpha = cho_solve(fac, r)
    n = obs.size
    logdet = 2.0 * float(np.sum(np.log(np.diag(fac[0]))))
    ll = -0.5 * (n * _LOG_2PI + logdet + float(r @ alpha))
    yhat = np.empty(D)
    yhat[obs] = y_o
    Shat = np.zeros((D, D))
    if miss.size:
        Smo = Sigma[np.ix_(miss, obs)]
        yhat[miss] = mu[miss] + Smo @ alpha
        Smm = Sigma[np.ix_(miss, miss)]
        Shat[np.ix_(miss, miss)] = Smm - Smo @ cho_solve(fac, Smo.T)
    return ll, yhat, Shat


def ecm_e_step(p: PatchSample, model: FullCovModel):
    """Responsibilities plus per-component completed data for one patch.

    Returns (gamma (K,), yhat (K,D), Shat (K,D,D)).  yhat copies observed
    entries and fills missing ones with the conditional mean; Shat is the
    conditional covariance on the missing block, zero elsewhere.
    """
    K = model.n_components
    D = model.data_dim
    lls = np.empty(K)
    yhat = np.empty((K, D))
    Shat = np.empty((K, D, D))
    for k in range(K):
        lls[k], yhat[k], Shat[k] = _component_pass(p, model, k)
    a = np.log(model.weights) + lls
    a -= a.max()
    z = np.exp(a)
    return z / z.sum(), yhat, Shat


def ecm_observed_loglik(p: PatchSample, model: FullCovModel) -> float:
    """log sum_k pi_k N(y^O; mu_k^O, Sigma_k^OO)."""
    K = model.n_components
    lls = np.empty(K)
    for k in range(K):
        lls[k] = _component_pass(p, model, k)[0]
    a = np.log(model.weights) + lls
    m = a.max()
    return float(m + np.log(np.exp(a - m).sum()))


def _e_pass_all(patches: list[PatchSample], model: FullCovModel) -> EcmStats:
    N = len(patches)
    K = model.n_components
    D = model.data_dim
    gamma = np.empty((N, K))
    yhat = np.empty((N, K, D))
    Shat = np.empty((N, K, D, D))
    loglik = np.empty(N)
    for i, p in enumerate(patches):
        lls = np.empty(K)
        for k in range(K):
            lls[k], yhat[i, k], Shat[i, k] = _component_pass(p, model, k)
        a = np.log(model.weights) + lls
        m = a.max()
        z = np.exp(a - m)
        gamma[i] = z / z.sum()
        loglik[i] = m + np.log(z.sum())
    return EcmStats(gamma, yhat, Shat, loglik)


def ecm_m_step(patches: list[PatchSample], stats: EcmStats, sigma2_floor: float = 1e-6) -> FullCovModel:
    """Standard weighted mixture update on the completed data, with the
    conditional-covariance correction added to each scatter matrix and an
    eigenvalue floor keeping every covariance positive definite."""
    gamma = stats.gamma
    N, K = gamma.shape
    D = stats.yhat.shape[2]
    if len(patches) != N:
        raise ShapeError("stats do not match the patch list")
    Nk = gamma.sum(axis=0)
    means = np.empty((K, D))
    covs = np.empty((K, D, D))
    for k in range(K):
        nk = max(Nk[k], _DENOM_GUARD)
        mu = gamma[:, k] @ stats.yhat[:, k] / nk
        diff = stats.yhat[:, k] - mu
        cov = (gamma[:, k] * diff.T) @ diff
        cov += np.einsum("i,ijl->jl", gamma[:, k], stats.Shat[:, k])
        cov /= nk
        cov = 0.5 * (cov + cov.T)
        vals, vecs = np.linalg.eigh(cov)
        vals = np.maximum(vals, sigma2_floor)
        means[k] = mu
        covs[k] = (vecs * vals) @ vecs.T
        covs[k] = 0.5 * (covs[k] + covs[k].T)
    weights = Nk / N
    weights = np.maximum(weights, 0.0)
    weights /= weights.sum()
    return FullCovModel(weights, means, covs)


def low_rank_project(Sigma: np.ndarray, d: int) -> tuple[np.ndarray, float]:
    """Best rank-d + isotropic factors of a symmetric covariance.

    sigma2 is the mean of the trailing D-d eigenvalues; W spans the leading
    d eigenvectors scaled by sqrt(eigenvalue - sigma2), clamped at zero if
    an eigenvalue falls below sigma2.
    """
    Sigma = np.asarray(Sigma, dtype=np.float64)
    if Sigma.ndim != 2 or Sigma.shape[0] != Sigma.shape[1]:
        raise ShapeError("covariance must be square")
    D = Sigma.shape[0]
    if not (1 <= d < D):
        raise ParameterError(f"need 1 <= d < D, got d={d}, D={D}")
    vals, vecs = np.linalg.eigh(Sigma)
    vals = vals[::-1]
    vecs = vecs[:, ::-1]
    sigma2 = float(vals[d:].mean())
    lead = vals[:d] - sigma2
    if np.any(lead < 0):
        logger.warning("clamped %d negative basis scales in low-rank projection",
                       int((lead < 0).sum()))
        lead = np.maximum(lead, 0.0)
    W = vecs[:, :d] * np.sqrt(lead)
    return W, sigma2


def init_fullcov(patches_interp, cfg) -> FullCovModel:
    """Initial full-covariance model from fully valued patch vectors:
    seeded k-means centers with per-cluster diagonal covariances."""
    from .em import _kmeans_pp
    from .errors import InitializationError
    Y = np.asarray(patches_interp, dtype=np.float64)
    if Y.ndim != 2:
        raise InitializationError("interpolated patches must form an N x D array")
    N, D = Y.shape
    if N < cfg.K:
        raise InitializationError(f"{N} patches cannot seed {cfg.K} clusters")
    rng = np.random.default_rng(cfg.seed)
    centers, labels = _kmeans_pp(Y, cfg.K, rng)
    covs = np.empty((cfg.K, D, D))
    weights = np.empty(cfg.K)
    for k in range(cfg.K):
        sel = labels == k
        nk = int(sel.sum())
        weights[k] = max(nk / N, cfg.min_cluster_weight)
        var = np.zeros(D) if nk < 2 else Y[sel].var(axis=0)
        covs[k] = np.diag(np.maximum(var, cfg.sigma2_floor))
    weights /= weights.sum()
    return FullCovModel(weights, centers, covs)


def ecm_fit(
    patches: list[PatchSample],
    cfg,
    init: FullCovModel,
    log_stream=None,
) -> tuple[FullCovModel, list[float]]:
    """Alternate E and M passes at fixed full covariance until the observed
    log-likelihood stalls or max_iters; mirrors the factored fit driver."""
    import json
    import time
    model = init
    trace: list[float] = []
    prev_ll = None
    for it in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        stats = _e_pass_all(patches, model)
        ll = stats.total_loglik
        trace.append(ll)
        model = ecm_m_step(patches, stats, cfg.sigma2_floor)
        low = np.flatnonzero(model.weights < cfg.min_cluster_weight)
        if low.size:
            worst = int(np.argmin(stats.loglik))
            weights = model.weights.copy()
            means = model.means.copy()
            for k in low:
                logger.warning("cluster %d collapsed (weight %.3g); reseeding",
                               k, model.weights[k])
                p = patches[worst]
                means[int(k), p.observed] = p.observed_values
                weights[int(k)] = 1.0 / weights.size
            weights /= weights.sum()
            model = FullCovModel(weights, means, model.covariances)
        if log_stream is not None:
            rec = {
                "iter": it,
                "loglik": ll,
                "pi": [float(x) for x in model.weights],
                "wall_time_s": round(time.perf_counter() - t0, 6),
            }
            log_stream.write(json.dumps(rec) + "\n")
        if prev_ll is not None and abs(ll - prev_ll) <= cfg.loglik_rel_tol * abs(prev_ll):
            break
        prev_ll = ll
    return model, trace
