# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Compiled batch EM kernels.

Same contract as _kernels_py: packed patch batches, d x d factored linear
algebra, no D x D intermediates.  The Cholesky and triangular solves are
hand-rolled so the extension only needs the NumPy C headers.
"""

import numpy as np

cimport numpy as cnp

from libc.math cimport exp, log, sqrt

from ..errors import NumericalError

cnp.import_array()

cdef double _LOG_2PI = log(2.0 * 3.14159265358979323846)


cdef int _chol_lower(double[:, ::1] M, int d) noexcept:
    """In-place lower Cholesky of the symmetric matrix in M.
    Returns 0 on success, 1 if a pivot is not positive."""
    cdef int i, j, k
    cdef double s
    for j in range(d):
        s = M[j, j]
        for k in range(j):
            s -= M[j, k] * M[j, k]
        if s <= 0.0:
            return 1
        M[j, j] = sqrt(s)
        for i in range(j + 1, d):
            s = M[i, j]
            for k in range(j):
                s -= M[i, k] * M[j, k]
            M[i, j] = s / M[j, j]
    return 0


def estep_batch(double[::1] values, cnp.int64_t[::1] indices, cnp.int64_t[::1] ptr,
                double[::1] weights, double[:, ::1] means,
                double[:, :, ::1] bases, double[::1] noise_vars):
    """Responsibilities, latent posteriors, and per-patch log-likelihood.

    Returns (gamma (N,K), xhat (N,K,d), S (N,K,d,d), loglik (N,)).
    """
    cdef Py_ssize_t N = ptr.shape[0] - 1
    cdef int K = weights.shape[0]
    cdef int d = bases.shape[2]
    cdef cnp.ndarray gamma_arr = np.empty((N, K), dtype=np.float64)
    cdef cnp.ndarray xhat_arr = np.empty((N, K, d), dtype=np.float64)
    cdef cnp.ndarray S_arr = np.empty((N, K, d, d), dtype=np.float64)
    cdef cnp.ndarray loglik_arr = np.empty(N, dtype=np.float64)
    cdef double[:, ::1] gamma = gamma_arr
    cdef double[:, :, ::1] xhat = xhat_arr
    cdef double[:, :, :, ::1] S = S_arr
    cdef double[::1] loglik = loglik_arr

    cdef cnp.ndarray M_arr = np.empty((d, d), dtype=np.float64)
    cdef cnp.ndarray Linv_arr = np.empty((d, d), dtype=np.float64)
    cdef cnp.ndarray t_arr = np.empty(d, dtype=np.float64)
    cdef cnp.ndarray x_arr = np.empty(d, dtype=np.float64)
    cdef cnp.ndarray a_arr = np.empty(K, dtype=np.float64)
    cdef double[:, ::1] M = M_arr
    cdef double[:, ::1] Linv = Linv_arr
    cdef double[::1] t = t_arr
    cdef double[::1] x = x_arr
    cdef double[::1] a = a_arr

    cdef Py_ssize_t i, lo, hi, jj
    cdef int k, p, q, m, n
    cdef cnp.int64_t j
    cdef double s2, s, rr, rj, quad, logdet, amax, tot

    for i in range(N):
        lo = ptr[i]
        hi = ptr[i + 1]
        n = <int>(hi - lo)
        for k in range(K):
            s2 = noise_vars[k]
            # M = W_o^T W_o + s2 I, t = W_o^T r, rr = r^T r
            for p in range(d):
                for q in range(p + 1):
                    s = 0.0
                    for jj in range(lo, hi):
                        j = indices[jj]
                        s += bases[k, j, p] * bases[k, j, q]
                    M[p, q] = s
                    M[q, p] = s
                M[p, p] = M[p, p] + s2
            rr = 0.0
            for p in range(d):
                t[p] = 0.0
            for jj in range(lo, hi):
                j = indices[jj]
                rj = values[jj] - means[k, j]
                rr += rj * rj
                for p in range(d):
                    t[p] += bases[k, j, p] * rj
            if _chol_lower(M, d) != 0:
                raise NumericalError(
                    "factored system not positive definite "
                    f"(patch {i}, component {k})")
            # forward solve L u = t (overwrite t), then back solve L^T x = u
            for p in range(d):
                s = t[p]
                for q in range(p):
                    s -= M[p, q] * t[q]
                t[p] = s / M[p, p]
            quad = rr
            for p in range(d):
                quad -= t[p] * t[p]
            quad /= s2
            for p in range(d - 1, -1, -1):
                s = t[p]
                for q in range(p + 1, d):
                    s -= M[q, p] * x[q]
                x[p] = s / M[p, p]
            logdet = (n - d) * log(s2)
            for p in range(d):
                logdet += 2.0 * log(M[p, p])
            a[k] = log(weights[k]) - 0.5 * (n * _LOG_2PI + logdet + quad)
            for p in range(d):
                xhat[i, k, p] = x[p]
            # Linv by forward substitution, then S = s2 * Linv^T Linv
            for q in range(d):
                for p in range(q):
                    Linv[p, q] = 0.0
                Linv[q, q] = 1.0 / M[q, q]
                for p in range(q + 1, d):
                    s = 0.0
                    for m in range(q, p):
                        s -= M[p, m] * Linv[m, q]
                    Linv[p, q] = s / M[p, p]
            for p in range(d):
                for q in range(p + 1):
                    s = 0.0
                    for m in range(p, d):
                        s += Linv[m, p] * Linv[m, q]
                    S[i, k, p, q] = s2 * s
                    S[i, k, q, p] = s2 * s
        amax = a[0]
        for k in range(1, K):
            if a[k] > amax:
                amax = a[k]
        tot = 0.0
        for k in range(K):
            tot += exp(a[k] - amax)
        for k in range(K):
            gamma[i, k] = exp(a[k] - amax) / tot
        loglik[i] = amax + log(tot)
    return gamma_arr, xhat_arr, S_arr, loglik_arr


def mstep_moments(double[::1] values, cnp.int64_t[::1] indices, cnp.int64_t[::1] ptr,
                  double[:, ::1] gamma, double[:, :, ::1] xhat,
                  double[:, :, :, ::1] S, Py_ssize_t data_dim):
    """Responsibility-weighted raw sums over the patches observing each voxel.

    Returns (G (D,K), ybar (D,K), b (D,K,d), c (D,K,d), A (D,K,d,d)); see the
    fallback implementation for definitions.
    """
    cdef Py_ssize_t N = ptr.shape[0] - 1
    cdef int K = gamma.shape[1]
    cdef int d = xhat.shape[2]
    cdef cnp.ndarray G_arr = np.zeros((data_dim, K), dtype=np.float64)
    cdef cnp.ndarray ybar_arr = np.zeros((data_dim, K), dtype=np.float64)
    cdef cnp.ndarray b_arr = np.zeros((data_dim, K, d), dtype=np.float64)
    cdef cnp.ndarray c_arr = np.zeros((data_dim, K, d), dtype=np.float64)
    cdef cnp.ndarray A_arr = np.zeros((data_dim, K, d, d), dtype=np.float64)
    cdef double[:, ::1] G = G_arr
    cdef double[:, ::1] ybar = ybar_arr
    cdef double[:, :, ::1] b = b_arr
    cdef double[:, :, ::1] c = c_arr
    cdef double[:, :, :, ::1] A = A_arr

    cdef Py_ssize_t i, lo, hi, jj
    cdef int k, p, q
    cdef cnp.int64_t j
    cdef double g, y, gx

    for i in range(N):
        lo = ptr[i]
        hi = ptr[i + 1]
        for jj in range(lo, hi):
            j = indices[jj]
            y = values[jj]
            for k in range(K):
                g = gamma[i, k]
                G[j, k] += g
                ybar[j, k] += g * y
                for p in range(d):
                    gx = g * xhat[i, k, p]
                    b[j, k, p] += gx
                    c[j, k, p] += y * gx
                    for q in range(d):
                        A[j, k, p, q] += g * (xhat[i, k, p] * xhat[i, k, q] + S[i, k, p, q])
    return G_arr, ybar_arr, b_arr, c_arr, A_arr


def mstep_sigma2(double[::1] values, cnp.int64_t[::1] indices, cnp.int64_t[::1] ptr,
                 double[:, ::1] gamma, double[:, :, ::1] xhat,
                 double[:, :, :, ::1] S, double[:, ::1] means,
                 double[:, :, ::1] bases):
    """Numerator and denominator sums of the noise variance update.

    Returns (num (K,), den (K,)); see the fallback implementation."""
    cdef Py_ssize_t N = ptr.shape[0] - 1
    cdef int K = gamma.shape[1]
    cdef int d = xhat.shape[2]
    cdef cnp.ndarray num_arr = np.zeros(K, dtype=np.float64)
    cdef cnp.ndarray den_arr = np.zeros(K, dtype=np.float64)
    cdef double[::1] num = num_arr
    cdef double[::1] den = den_arr

    cdef Py_ssize_t i, lo, hi, jj
    cdef int k, p, q, n
    cdef cnp.int64_t j
    cdef double r, s, tr, acc

    for i in range(N):
        lo = ptr[i]
        hi = ptr[i + 1]
        n = <int>(hi - lo)
        for k in range(K):
            acc = 0.0
            tr = 0.0
            for jj in range(lo, hi):
                j = indices[jj]
                r = values[jj] - means[k, j]
                for p in range(d):
                    r -= bases[k, j, p] * xhat[i, k, p]
                acc += r * r
                # row_j(W) S row_j(W)^T
                for p in range(d):
                    s = 0.0
                    for q in range(d):
                        s += S[i, k, p, q] * bases[k, j, q]
                    tr += bases[k, j, p] * s
            num[k] += gamma[i, k] * (acc + tr)
            den[k] += gamma[i, k] * n
    return num_arr, den_arr
