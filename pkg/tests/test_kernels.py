"""Batch kernel equivalence: compiled extension vs pure NumPy vs the
per-patch reference implementation.

Both backends must agree with e_step_reference to near machine precision;
this is what licenses swapping them freely at import time.
"""

import numpy as np
import pytest

from patchgmm import _accel
from patchgmm._accel import _kernels_py
from patchgmm.model import MixtureModel, e_step_reference
from patchgmm.patches import PatchSample, pack_patches

try:
    from patchgmm._accel import _kernels as _kernels_c
    HAVE_COMPILED = True
except ImportError:
    _kernels_c = None
    HAVE_COMPILED = False

BACKENDS = [("python", _kernels_py)] + ([("compiled", _kernels_c)] if HAVE_COMPILED else [])


def make_case(seed, N=30, K=3, D=27, d=3, noise_lo=0.003):
    rng = np.random.default_rng(seed)
    model = MixtureModel(
        rng.dirichlet(np.full(K, 3.0)),
        rng.uniform(0, 1, (K, D)),
        rng.normal(0, 0.25, (K, D, d)),
        rng.uniform(noise_lo, 0.05, K),
    )
    patches = []
    for _ in range(N):
        n = int(rng.integers(1, D + 1))
        obs = np.sort(rng.choice(D, size=n, replace=False))
        vals = np.full(D, np.nan)
        vals[obs] = rng.uniform(0, 1, n)
        patches.append(PatchSample(vals, obs))
    return model, patches, pack_patches(patches, D)


def test_backend_selection_exposes_api():
    assert _accel.BACKEND in ("cython", "python")
    assert callable(_accel.estep_batch)
    assert callable(_accel.mstep_moments)
    assert callable(_accel.mstep_sigma2)


def test_compiled_backend_is_present():
    """The build ships a compiled extension; if this fails the install is
    running on the fallback only."""
    assert HAVE_COMPILED


@pytest.mark.parametrize("name,mod", BACKENDS)
def test_estep_matches_reference(name, mod):
    for seed in (0, 1, 2, 3):
        model, patches, packed = make_case(seed)
        ref = e_step_reference(model, patches)
        gamma, xhat, S, loglik = mod.estep_batch(
            packed.values, packed.indices, packed.ptr,
            model.weights, model.means, model.bases, model.noise_vars,
        )
        np.testing.assert_allclose(gamma, ref.gamma, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(xhat, ref.xhat, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(S, ref.S, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(loglik, ref.loglik, rtol=1e-12)


@pytest.mark.parametrize("name,mod", BACKENDS)
def test_estep_edge_shapes(name, mod):
    # single observed voxel per patch, K=1, d=1
    model, patches, packed = make_case(7, N=5, K=1, D=9, d=1)
    sparse = []
    for p in patches:
        keep = p.observed[:1]
        vals = np.full(9, np.nan)
        vals[keep] = p.values[keep]
        sparse.append(PatchSample(vals, keep))
    packed = pack_patches(sparse, 9)
    ref = e_step_reference(model, sparse)
    gamma, xhat, S, loglik = mod.estep_batch(
        packed.values, packed.indices, packed.ptr,
        model.weights, model.means, model.bases, model.noise_vars,
    )
    np.testing.assert_allclose(gamma, ref.gamma, rtol=1e-12)
    np.testing.assert_allclose(xhat, ref.xhat, rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(loglik, ref.loglik, rtol=1e-12)


@pytest.mark.skipif(not HAVE_COMPILED, reason="compiled extension unavailable")
def test_backends_agree_with_each_other():
    for seed in (11, 12, 13):
        model, patches, packed = make_case(seed, N=40, K=4, D=30, d=4)
        outs = []
        for _, mod in BACKENDS:
            outs.append(mod.estep_batch(
                packed.values, packed.indices, packed.ptr,
                model.weights, model.means, model.bases, model.noise_vars,
            ))
        for a, b in zip(outs[0], outs[1]):
            np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


@pytest.mark.skipif(not HAVE_COMPILED, reason="compiled extension unavailable")
def test_moment_kernels_agree():
    for seed in (21, 22):
        model, patches, packed = make_case(seed, N=35, K=3, D=24, d=3)
        ref = e_step_reference(model, patches)
        m_py = _kernels_py.mstep_moments(packed.values, packed.indices, packed.ptr,
                                         ref.gamma, ref.xhat, ref.S, 24)
        m_c = _kernels_c.mstep_moments(packed.values, packed.indices, packed.ptr,
                                       ref.gamma, ref.xhat, ref.S, 24)
        for a, b in zip(m_py, m_c):
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)
        s_py = _kernels_py.mstep_sigma2(packed.values, packed.indices, packed.ptr,
                                        ref.gamma, ref.xhat, ref.S,
                                        model.means, model.bases)
        s_c = _kernels_c.mstep_sigma2(packed.values, packed.indices, packed.ptr,
                                      ref.gamma, ref.xhat, ref.S,
                                      model.means, model.bases)
        np.testing.assert_allclose(s_py[0], s_c[0], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(s_py[1], s_c[1], rtol=1e-12)


def test_moment_sums_scalar_oracle():
    """G, ybar, b, c, A recomputed by direct per-patch loops."""
    model, patches, packed = make_case(31, N=12, K=2, D=10, d=2)
    ref = e_step_reference(model, patches)
    D, K, d = 10, 2, 2
    G = np.zeros((D, K))
    ybar = np.zeros((D, K))
    b = np.zeros((D, K, d))
    c = np.zeros((D, K, d))
    A = np.zeros((D, K, d, d))
    for i, p in enumerate(patches):
        for k in range(K):
            g = ref.gamma[i, k]
            x = ref.xhat[i, k]
            xx = ref.S[i, k] + np.outer(x, x)
            for j, y in zip(p.observed, p.observed_values):
                G[j, k] += g
                ybar[j, k] += g * y
                b[j, k] += g * x
                c[j, k] += g * y * x
                A[j, k] += g * xx
    got = _accel.mstep_moments(packed.values, packed.indices, packed.ptr,
                               ref.gamma, ref.xhat, ref.S, D)
    for name, a, bb in zip(("G", "ybar", "b", "c", "A"), got, (G, ybar, b, c, A)):
        np.testing.assert_allclose(a, bb, rtol=1e-12, atol=1e-15, err_msg=name)


def test_sigma2_sums_scalar_oracle():
    model, patches, packed = make_case(32, N=10, K=2, D=9, d=2)
    ref = e_step_reference(model, patches)
    num = np.zeros(2)
    den = np.zeros(2)
    for i, p in enumerate(patches):
        obs = p.observed
        for k in range(2):
            g = ref.gamma[i, k]
            W_o = model.bases[k][obs]
            r = p.observed_values - model.means[k][obs] - W_o @ ref.xhat[i, k]
            tr = np.trace(W_o @ ref.S[i, k] @ W_o.T)
            num[k] += g * (r @ r + tr)
            den[k] += g * obs.size
    got_num, got_den = _accel.mstep_sigma2(packed.values, packed.indices, packed.ptr,
                                           ref.gamma, ref.xhat, ref.S,
                                           model.means, model.bases)
    np.testing.assert_allclose(got_num, num, rtol=1e-12)
    np.testing.assert_allclose(got_den, den, rtol=1e-14)


def test_pure_python_env_override(tmp_path):
    """PATCHGMM_PURE_PYTHON forces the fallback backend in a fresh process."""
    import subprocess
    import sys
    code = "import patchgmm; print(patchgmm.BACKEND)"
    out = subprocess.run(
        [sys.executable, "-c", code],
        capture_output=True, text=True,
        env={"PATH": "/usr/bin:/bin", "PATCHGMM_PURE_PYTHON": "1"},
    )
    assert out.returncode == 0, out.stderr
    assert out.stdout.strip() == "python"
