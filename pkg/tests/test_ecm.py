"""Full-covariance ECM variant: conditional completion of missing voxels,
standard mixture updates with the uncertainty correction, and the low-rank
projection back to factored form."""

import numpy as np
import pytest

from _oracles import dense_conditional_mean
from patchgmm.ecm import (
    EcmStats,
    FullCovModel,
    ecm_e_step,
    ecm_fit,
    ecm_m_step,
    ecm_observed_loglik,
    init_fullcov,
    low_rank_project,
)
from patchgmm.em import TrainConfig
from patchgmm.errors import ParameterError, ValidationError
from patchgmm.model import MixtureModel, observed_loglik, responsibilities
from patchgmm.patches import PatchSample


def random_fullcov(rng, K, D, spread=0.3):
    w = rng.dirichlet(np.full(K, 2.0))
    mu = rng.uniform(0, 1, (K, D))
    covs = np.empty((K, D, D))
    for k in range(K):
        A = rng.normal(0, spread, (D, D))
        covs[k] = A @ A.T / D + 0.02 * np.eye(D)
    return FullCovModel(w, mu, covs)


def sparse_patch(rng, y, n_obs):
    obs = np.sort(rng.choice(y.size, size=n_obs, replace=False))
    vals = np.full(y.size, np.nan)
    vals[obs] = y[obs]
    return PatchSample(vals, obs)


class TestContainer:
    def test_symmetry_enforced(self):
        cov = np.eye(3)
        cov[0, 1] = 0.5  # asymmetric
        with pytest.raises(ValidationError):
            FullCovModel(np.array([1.0]), np.zeros((1, 3)), cov[None])

    def test_valid(self):
        rng = np.random.default_rng(0)
        m = random_fullcov(rng, 2, 4)
        assert m.n_components == 2 and m.data_dim == 4


class TestEcmEStep:
    def test_diagonal_covariance_means_fill_missing(self):
        D = 5
        mu = np.linspace(0.1, 0.9, D)
        m = FullCovModel(np.array([1.0]), mu[None], np.diag(np.full(D, 0.04))[None])
        vals = np.full(D, np.nan)
        obs = np.array([0, 3])
        vals[obs] = [0.7, 0.2]
        p = PatchSample(vals, obs)
        gamma, yhat, Shat = ecm_e_step(p, m)
        np.testing.assert_allclose(gamma, [1.0])
        np.testing.assert_array_equal(yhat[0][obs], [0.7, 0.2])
        np.testing.assert_allclose(yhat[0][[1, 2, 4]], mu[[1, 2, 4]], rtol=1e-12)
        # conditional variance of missing equals the prior diagonal there
        np.testing.assert_allclose(np.diag(Shat[0])[[1, 2, 4]], 0.04, rtol=1e-12)

    def test_fully_observed_patch(self):
        rng = np.random.default_rng(1)
        m = random_fullcov(rng, 2, 4)
        y = rng.uniform(0, 1, 4)
        p = PatchSample(y, np.arange(4))
        gamma, yhat, Shat = ecm_e_step(p, m)
        for k in range(2):
            np.testing.assert_array_equal(yhat[k], y)
            np.testing.assert_array_equal(Shat[k], np.zeros((4, 4)))

    def test_matches_dense_conditional_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(25):
            D = 7
            m = random_fullcov(rng, 2, D)
            p = sparse_patch(rng, rng.uniform(0, 1, D), int(rng.integers(1, D)))
            gamma, yhat, Shat = ecm_e_step(p, m)
            for k in range(2):
                cond, miss = dense_conditional_mean(
                    p.observed_values, p.observed, m.means[k], m.covariances[k])
                np.testing.assert_allclose(yhat[k][miss], cond, rtol=1e-9, atol=1e-12)
                # Shat on the missing block is the Schur complement
                Sigma = m.covariances[k]
                obs = p.observed
                Smo = Sigma[np.ix_(miss, obs)]
                Soo = Sigma[np.ix_(obs, obs)]
                Smm = Sigma[np.ix_(miss, miss)]
                schur = Smm - Smo @ np.linalg.solve(Soo, Smo.T)
                np.testing.assert_allclose(Shat[k][np.ix_(miss, miss)], schur,
                                           rtol=1e-9, atol=1e-12)
                # rows and columns touching observed indices are zero
                assert np.all(Shat[k][obs] == 0)
                assert np.all(Shat[k][:, obs] == 0)

    def test_three_voxel_one_missing(self):
        Sigma = np.array([[0.05, 0.02, 0.01],
                          [0.02, 0.06, 0.03],
                          [0.01, 0.03, 0.07]])
        mu = np.array([0.4, 0.5, 0.6])
        m = FullCovModel(np.array([1.0]), mu[None], Sigma[None])
        vals = np.array([0.45, np.nan, 0.55])
        p = PatchSample(vals, np.array([0, 2]))
        _, yhat, _ = ecm_e_step(p, m)
        obs = np.array([0, 2])
        r = vals[obs] - mu[obs]
        expect = mu[1] + Sigma[1, obs] @ np.linalg.solve(Sigma[np.ix_(obs, obs)], r)
        np.testing.assert_allclose(yhat[0][1], expect, rtol=1e-12)


class TestEcmMStep:
    def test_fully_observed_reduces_to_standard_gmm(self):
        rng = np.random.default_rng(3)
        D, K, N = 5, 2, 40
        Y = rng.uniform(0, 1, (N, D))
        patches = [PatchSample(y, np.arange(D)) for y in Y]
        model = random_fullcov(rng, K, D)
        gamma = np.empty((N, K))
        yhat = np.empty((N, K, D))
        Shat = np.zeros((N, K, D, D))
        for i, p in enumerate(patches):
            gamma[i], yhat[i], Shat[i] = ecm_e_step(p, model)
        stats = EcmStats(gamma, yhat, Shat, np.zeros(N))
        new = ecm_m_step(patches, stats)
        for k in range(K):
            nk = gamma[:, k].sum()
            mu = gamma[:, k] @ Y / nk
            diff = Y - mu
            cov = (gamma[:, k] * diff.T) @ diff / nk
            np.testing.assert_allclose(new.means[k], mu, rtol=1e-10)
            np.testing.assert_allclose(new.covariances[k], cov, rtol=1e-8, atol=1e-12)
        np.testing.assert_allclose(new.weights, gamma.sum(axis=0) / N, rtol=1e-12)

    def test_single_patch_single_cluster(self):
        D = 4
        rng = np.random.default_rng(4)
        m = random_fullcov(rng, 1, D)
        p = sparse_patch(rng, rng.uniform(0, 1, D), 2)
        gamma, yhat, Shat = ecm_e_step(p, m)
        stats = EcmStats(gamma[None], yhat[None], Shat[None], np.zeros(1))
        new = ecm_m_step([p], stats, sigma2_floor=1e-6)
        np.testing.assert_allclose(new.means[0], yhat[0], rtol=1e-12)
        # scatter of one point is zero, so the covariance is Shat floored
        vals_new = np.linalg.eigvalsh(new.covariances[0])
        vals_old = np.linalg.eigvalsh(Shat[0])
        np.testing.assert_allclose(vals_new, np.maximum(vals_old, 1e-6), atol=1e-9)

    def test_covariances_symmetric_psd(self):
        rng = np.random.default_rng(5)
        D, K, N = 6, 3, 30
        model = random_fullcov(rng, K, D)
        patches = [sparse_patch(rng, rng.uniform(0, 1, D), int(rng.integers(2, D + 1)))
                   for _ in range(N)]
        gamma = np.empty((N, K))
        yhat = np.empty((N, K, D))
        Shat = np.empty((N, K, D, D))
        for i, p in enumerate(patches):
            gamma[i], yhat[i], Shat[i] = ecm_e_step(p, model)
        new = ecm_m_step(patches, EcmStats(gamma, yhat, Shat, np.zeros(N)))
        for k in range(K):
            C = new.covariances[k]
            np.testing.assert_allclose(C, C.T, atol=1e-12)
            assert np.linalg.eigvalsh(C).min() >= 1e-6 - 1e-12


class TestLowRankProject:
    def test_isotropic(self):
        W, s2 = low_rank_project(0.3 * np.eye(6), 2)
        np.testing.assert_allclose(s2, 0.3, rtol=1e-12)
        np.testing.assert_allclose(W, 0.0, atol=1e-6)

    def test_construct_then_decompose(self):
        rng = np.random.default_rng(6)
        D = 8
        w = rng.normal(0, 1, D)
        s2 = 0.05
        Sigma = np.outer(w, w) + s2 * np.eye(D)
        W, s2_hat = low_rank_project(Sigma, 1)
        np.testing.assert_allclose(s2_hat, s2, rtol=1e-8)
        # recovered up to sign
        err = min(np.abs(W[:, 0] - w).max(), np.abs(W[:, 0] + w).max())
        assert err < 1e-8

    def test_roundtrip_higher_rank(self):
        rng = np.random.default_rng(7)
        D, d = 10, 3
        Wt = rng.normal(0, 0.5, (D, d))
        s2 = 0.02
        Sigma = Wt @ Wt.T + s2 * np.eye(D)
        W, s2_hat = low_rank_project(Sigma, d)
        np.testing.assert_allclose(W @ W.T + s2_hat * np.eye(D), Sigma,
                                   rtol=1e-8, atol=1e-10)

    def test_reconstruction_eigenvalues_floor_at_sigma2(self):
        rng = np.random.default_rng(8)
        A = rng.normal(size=(7, 7))
        Sigma = A @ A.T / 7 + 0.01 * np.eye(7)
        W, s2 = low_rank_project(Sigma, 2)
        ev = np.linalg.eigvalsh(W @ W.T + s2 * np.eye(7))
        assert ev.min() >= s2 - 1e-12

    def test_clamps_negative_scales(self, caplog, monkeypatch):
        """Defensive branch: a leading eigenvalue under the trailing mean is
        clamped instead of feeding sqrt a negative.  Sorted eigh output can
        only hit this through rounding, so force a degenerate spectrum."""
        import logging
        fake_vals = np.array([0.3, 0.2, 0.01, 0.5])  # deliberately unsorted
        monkeypatch.setattr(np.linalg, "eigh", lambda a: (fake_vals, np.eye(4)))
        with caplog.at_level(logging.WARNING, logger="patchgmm.ecm"):
            W, s2 = low_rank_project(np.eye(4), 2)
        assert any("clamped" in r.message for r in caplog.records)
        assert np.all(np.isfinite(W))

    def test_d_out_of_range(self):
        with pytest.raises(ParameterError):
            low_rank_project(np.eye(4), 4)


class TestAgainstFactoredModel:
    def test_conditional_means_agree_when_covariance_factored(self):
        """With Sigma = W W^T + s2 I both formulations give the same missing
        conditional mean."""
        rng = np.random.default_rng(9)
        for _ in range(10):
            D, d = 8, 2
            W = rng.normal(0, 0.3, (D, d))
            s2 = 0.02
            mu = rng.uniform(0, 1, D)
            fm = FullCovModel(np.array([1.0]), mu[None],
                              (W @ W.T + s2 * np.eye(D))[None])
            mm = MixtureModel(np.array([1.0]), mu[None], W[None], np.array([s2]))
            p = sparse_patch(rng, rng.uniform(0, 1, D), 4)
            _, yhat, _ = ecm_e_step(p, fm)
            from patchgmm.impute import impute_patch_map
            ymap, _ = impute_patch_map(p, mm)
            miss = np.setdiff1d(np.arange(D), p.observed)
            np.testing.assert_allclose(yhat[0][miss], ymap[miss], rtol=1e-8, atol=1e-10)

    def test_observed_loglik_agrees_when_covariance_factored(self):
        rng = np.random.default_rng(10)
        D, d = 7, 2
        W = rng.normal(0, 0.25, (2, D, d))
        s2 = np.array([0.03, 0.05])
        mu = rng.uniform(0, 1, (2, D))
        w = np.array([0.4, 0.6])
        covs = np.stack([W[k] @ W[k].T + s2[k] * np.eye(D) for k in range(2)])
        fm = FullCovModel(w, mu, covs)
        mm = MixtureModel(w, mu, W, s2)
        for _ in range(5):
            p = sparse_patch(rng, rng.uniform(0, 1, D), 4)
            np.testing.assert_allclose(ecm_observed_loglik(p, fm),
                                       observed_loglik(mm, p), rtol=1e-10)
            g, _, _ = ecm_e_step(p, fm)
            np.testing.assert_allclose(g, responsibilities(mm, p), rtol=1e-9)


class TestEcmFit:
    def test_monotone_loglik(self):
        rng = np.random.default_rng(11)
        D, K, N = 6, 2, 50
        gen = random_fullcov(rng, K, D)
        Y = np.empty((N, D))
        for i in range(N):
            k = rng.choice(K, p=gen.weights)
            Y[i] = rng.multivariate_normal(gen.means[k], gen.covariances[k])
        patches = [sparse_patch(rng, y, int(rng.integers(2, D + 1))) for y in Y]
        cfg = TrainConfig(K=K, d_target=2, d_init=1, max_iters=15,
                          loglik_rel_tol=0.0, seed=12)
        init = init_fullcov(Y, cfg)
        model, trace = ecm_fit(patches, cfg, init)
        t = np.array(trace)
        assert len(t) == 15
        assert np.all(np.diff(t) >= -1e-8 * np.abs(t[:-1])), np.diff(t).min()

    def test_fully_observed_matches_textbook_gmm_trajectory(self):
        """On complete data ECM is exactly the classic GMM EM; iterate both
        side by side and compare every parameter."""
        rng = np.random.default_rng(12)
        D, K, N = 4, 2, 60
        Y = np.vstack([rng.normal(0.3, 0.05, (30, D)), rng.normal(0.7, 0.05, (30, D))])
        patches = [PatchSample(y, np.arange(D)) for y in Y]
        cfg = TrainConfig(K=K, d_target=2, d_init=1, max_iters=6,
                          loglik_rel_tol=0.0, sigma2_floor=1e-9, seed=13)
        init = init_fullcov(Y, cfg)

        # textbook GMM EM with dense densities, eigenvalue floor applied the same way
        def textbook_iterate(model, iters):
            w, mu, cov = model.weights.copy(), model.means.copy(), model.covariances.copy()
            for _ in range(iters):
                logp = np.empty((N, K))
                for k in range(K):
                    sign, logdet = np.linalg.slogdet(cov[k])
                    diff = Y - mu[k]
                    sol = np.linalg.solve(cov[k], diff.T).T
                    quad = np.einsum("ij,ij->i", diff, sol)
                    logp[:, k] = -0.5 * (D * np.log(2 * np.pi) + logdet + quad)
                a = np.log(w)[None] + logp
                a -= a.max(axis=1, keepdims=True)
                g = np.exp(a)
                g /= g.sum(axis=1, keepdims=True)
                nk = g.sum(axis=0)
                for k in range(K):
                    mu[k] = g[:, k] @ Y / nk[k]
                    diff = Y - mu[k]
                    c = (g[:, k] * diff.T) @ diff / nk[k]
                    c = 0.5 * (c + c.T)
                    vals, vecs = np.linalg.eigh(c)
                    vals = np.maximum(vals, 1e-9)
                    cov[k] = (vecs * vals) @ vecs.T
                    cov[k] = 0.5 * (cov[k] + cov[k].T)
                w = nk / N
                w /= w.sum()
            return w, mu, cov

        model, _ = ecm_fit(patches, cfg, init)
        w_ref, mu_ref, cov_ref = textbook_iterate(init, 6)
        np.testing.assert_allclose(model.weights, w_ref, atol=1e-10)
        np.testing.assert_allclose(model.means, mu_ref, atol=1e-10)
        np.testing.assert_allclose(model.covariances, cov_ref, atol=1e-10)

    def test_deterministic(self):
        rng = np.random.default_rng(14)
        D = 5
        Y = rng.uniform(0, 1, (30, D))
        patches = [sparse_patch(rng, y, 3) for y in Y]
        cfg = TrainConfig(K=2, d_target=2, d_init=1, max_iters=5, seed=15)
        init = init_fullcov(Y, cfg)
        m1, t1 = ecm_fit(patches, cfg, init)
        m2, t2 = ecm_fit(patches, cfg, init)
        assert t1 == t2
        np.testing.assert_array_equal(m1.covariances, m2.covariances)
