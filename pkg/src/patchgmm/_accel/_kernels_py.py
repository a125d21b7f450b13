"""NumPy fallback for the batch EM kernels.

Works on packed patch batches: observed values and indices concatenated
across patches with a ptr offset array (see patches.PackedPatches).  All
per-component linear algebra goes through the d x d factored system
M = W_o^T W_o + sigma2 I; nothing D x D is ever formed.
"""

import numpy as np

from ..errors import NumericalError

_LOG_2PI = float(np.log(2.0 * np.pi))


def estep_batch(values, indices, ptr, weights, means, bases, noise_vars):
    """Responsibilities, latent posteriors, and per-patch log-likelihood.

    Returns (gamma (N,K), xhat (N,K,d), S (N,K,d,d), loglik (N,)).
    """
    N = ptr.size - 1
    K = weights.size
    d = bases.shape[2]
    gamma = np.empty((N, K))
    xhat = np.empty((N, K, d))
    S = np.empty((N, K, d, d))
    loglik = np.empty(N)
    logw = np.log(weights)
    eye = np.eye(d)
    a = np.empty(K)
    for i in range(N):
        lo, hi = ptr[i], ptr[i + 1]
        obs = indices[lo:hi]
        y = values[lo:hi]
        n = obs.size
        for k in range(K):
            W_o = bases[k][obs]
            s2 = noise_vars[k]
            r = y - means[k][obs]
            M = W_o.T @ W_o + s2 * eye
            try:
                L = np.linalg.cholesky(M)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(
                    f"factored system not positive definite (patch {i}, component {k})"
                ) from exc
            t = np.linalg.solve(L, W_o.T @ r)
            xk = np.linalg.solve(L.T, t)
            quad = (r @ r - t @ t) / s2
            logdet = (n - d) * np.log(s2) + 2.0 * np.sum(np.log(np.diag(L)))
            a[k] = logw[k] - 0.5 * (n * _LOG_2PI + logdet + quad)
            Linv = np.linalg.solve(L, eye)
            xhat[i, k] = xk
            S[i, k] = s2 * (Linv.T @ Linv)
        m = a.max()
        z = np.exp(a - m)
        tot = z.sum()
        gamma[i] = z / tot
        loglik[i] = m + np.log(tot)
    return gamma, xhat, S, loglik


def mstep_moments(values, indices, ptr, gamma, xhat, S, data_dim):
    """Responsibility-weighted raw sums over the patches observing each voxel.

    Returns (G, ybar, b, c, A):
      G (D,K)      sum of gamma,
      ybar (D,K)   sum of gamma * y,
      b (D,K,d)    sum of gamma * xhat,
      c (D,K,d)    sum of gamma * y * xhat,
      A (D,K,d,d)  sum of gamma * (xhat xhat^T + S).
    Normalization by G is the caller's job.
    """
    N = ptr.size - 1
    K = gamma.shape[1]
    d = xhat.shape[2]
    G = np.zeros((data_dim, K))
    ybar = np.zeros((data_dim, K))
    b = np.zeros((data_dim, K, d))
    c = np.zeros((data_dim, K, d))
    A = np.zeros((data_dim, K, d, d))
    for i in range(N):
        lo, hi = ptr[i], ptr[i + 1]
        obs = indices[lo:hi]
        y = values[lo:hi]
        g = gamma[i]
        gx = g[:, None] * xhat[i]
        gxxS = g[:, None, None] * (xhat[i][:, :, None] * xhat[i][:, None, :] + S[i])
        # indices within one patch are unique, so fancy-indexed += is safe
        G[obs] += g
        ybar[obs] += y[:, None] * g
        b[obs] += gx
        c[obs] += y[:, None, None] * gx
        A[obs] += gxxS
    return G, ybar, b, c, A


def mstep_sigma2(values, indices, ptr, gamma, xhat, S, means, bases):
    """Numerator and denominator of the per-component noise variance update.

    num_k = sum_i gamma_ik (||y - mu - W xhat||^2 + tr(W_o S W_o^T)),
    den_k = sum_i gamma_ik |O_i|.  Returns (num (K,), den (K,)).
    """
    N = ptr.size - 1
    K = gamma.shape[1]
    num = np.zeros(K)
    den = np.zeros(K)
    for i in range(N):
        lo, hi = ptr[i], ptr[i + 1]
        obs = indices[lo:hi]
        y = values[lo:hi]
        n = obs.size
        for k in range(K):
            W_o = bases[k][obs]
            r = y - means[k][obs] - W_o @ xhat[i, k]
            tr = float(np.sum((W_o @ S[i, k]) * W_o))
            num[k] += gamma[i, k] * (r @ r + tr)
            den[k] += gamma[i, k] * n
    return num, den
