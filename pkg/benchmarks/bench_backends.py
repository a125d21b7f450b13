"""Compare the compiled EM kernels against the NumPy fallback.

Both backends are imported directly (bypassing the env-var selection), fed
the same packed patch batch, and timed per kernel.  An optional end-to-end
fit comparison re-invokes this script in a subprocess with
PATCHGMM_PURE_PYTHON=1, since the library picks its backend at import.

Usage:
    python3 benchmarks/bench_backends.py
    python3 benchmarks/bench_backends.py --patches 4000 --dim 343 --repeats 5
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from patchgmm._accel import _kernels_py


def make_workload(rng, n_patches, D, K, d, observed_frac=0.5):
    weights = rng.dirichlet(np.full(K, 5.0))
    means = rng.uniform(0, 1, (K, D))
    bases = rng.normal(0, 0.1, (K, D, d))
    noise = rng.uniform(0.005, 0.02, K)
    counts = rng.integers(max(1, int(0.5 * observed_frac * D)),
                          max(2, int(1.5 * observed_frac * D)), n_patches)
    ptr = np.zeros(n_patches + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    indices = np.concatenate([
        np.sort(rng.choice(D, size=c, replace=False)) for c in counts
    ]).astype(np.int64)
    values = rng.uniform(0, 1, indices.size)
    return values, indices, ptr, weights, means, bases, noise


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def bench_kernels(args):
    try:
        from patchgmm._accel import _kernels
    except ImportError:
        print("compiled extension not built; only the fallback is available")
        return
    rng = np.random.default_rng(args.seed)
    values, indices, ptr, weights, means, bases, noise = make_workload(
        rng, args.patches, args.dim, args.components, args.latent)
    print(f"workload: {args.patches} patches, D={args.dim}, "
          f"K={args.components}, d={args.latent}, "
          f"{indices.size} observed entries")

    t_c, (gamma, xhat, S, ll) = best_of(
        lambda: _kernels.estep_batch(values, indices, ptr, weights, means,
                                     bases, noise), args.repeats)
    t_p, ref = best_of(
        lambda: _kernels_py.estep_batch(values, indices, ptr, weights, means,
                                        bases, noise), args.repeats)
    agree = max(float(np.abs(gamma - ref[0]).max()),
                float(np.abs(ll - ref[3]).max()))
    rows = [("estep_batch", t_c, t_p, agree)]

    t_c, mom = best_of(
        lambda: _kernels.mstep_moments(values, indices, ptr, gamma, xhat, S,
                                       args.dim), args.repeats)
    t_p, mom_p = best_of(
        lambda: _kernels_py.mstep_moments(values, indices, ptr, gamma, xhat,
                                          S, args.dim), args.repeats)
    agree = max(float(np.abs(a - b).max()) for a, b in zip(mom, mom_p))
    rows.append(("mstep_moments", t_c, t_p, agree))

    t_c, sg = best_of(
        lambda: _kernels.mstep_sigma2(values, indices, ptr, gamma, xhat, S,
                                      means, bases), args.repeats)
    t_p, sg_p = best_of(
        lambda: _kernels_py.mstep_sigma2(values, indices, ptr, gamma, xhat,
                                         S, means, bases), args.repeats)
    agree = max(float(np.abs(a - b).max()) for a, b in zip(sg, sg_p))
    rows.append(("mstep_sigma2", t_c, t_p, agree))

    print(f"{'kernel':<15} {'cython':>10} {'python':>10} {'speedup':>8} "
          f"{'max |diff|':>11}")
    for name, tc, tp, diff in rows:
        print(f"{name:<15} {tc * 1e3:>8.2f}ms {tp * 1e3:>8.2f}ms "
              f"{tp / tc:>7.1f}x {diff:>11.2e}")


def fit_once(args):
    """Worker mode: time em.fit with whatever backend the env selected."""
    from patchgmm import em, _accel
    from patchgmm.patches import PatchSample

    rng = np.random.default_rng(args.seed)
    D, d = args.dim, args.latent
    patches = []
    for _ in range(args.patches):
        c = int(rng.integers(D // 3, 2 * D // 3))
        obs = np.sort(rng.choice(D, size=c, replace=False))
        vals = np.full(D, np.nan)
        vals[obs] = rng.uniform(0, 1, c)
        patches.append(PatchSample(vals, obs))
    cfg = em.TrainConfig(K=args.components, d_target=d, d_init=1,
                         d_growth_per_iter=1, max_iters=10,
                         loglik_rel_tol=0.0, seed=0)
    rows = rng.uniform(0, 1, (args.patches, D))
    init = em.init_from_interpolation(rows, cfg)
    t0 = time.perf_counter()
    _, trace = em.fit(patches, cfg, init)
    dt = time.perf_counter() - t0
    print(f"backend={_accel.BACKEND}: fit 10 iters in {dt:.2f}s, "
          f"final loglik {trace[-1]:.4f}")


def bench_fit(args):
    print("\nend-to-end em.fit (subprocess per backend):")
    base = [sys.executable, os.path.abspath(__file__), "--fit-worker",
            "--patches", str(args.patches), "--dim", str(args.dim),
            "--components", str(args.components), "--latent", str(args.latent),
            "--seed", str(args.seed)]
    for env_val in ("0", "1"):
        env = dict(os.environ, PATCHGMM_PURE_PYTHON=env_val)
        out = subprocess.run(base, env=env, capture_output=True, text=True)
        sys.stdout.write(out.stdout)
        if out.returncode != 0:
            sys.stderr.write(out.stderr)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--patches", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=343, help="patch dimension")
    ap.add_argument("--components", type=int, default=5)
    ap.add_argument("--latent", type=int, default=12)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--skip-fit", action="store_true")
    ap.add_argument("--fit-worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.fit_worker:
        fit_once(args)
        return
    bench_kernels(args)
    if not args.skip_fit:
        bench_fit(args)


if __name__ == "__main__":
    main()
