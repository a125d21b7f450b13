"""Mixture-of-low-rank-Gaussians model: containers, posterior math, and
serialization.

Component k has mean mu_k, basis W_k (D x d), and isotropic residual
variance sigma2_k, so its covariance is W_k W_k^T + sigma2_k I.  All
likelihood and posterior computations against a patch observed on index set
O go through the d x d system M = W^O^T W^O + sigma2 I; the D x D (or
|O| x |O|) covariance is never materialized.

Model files ("MIM1", little-endian) hold either this factored form
(variant 0) or full covariances (variant 1, produced by the full-covariance
trainer).  A manifest JSON maps grid centers to per-location model files.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ManifestError, NumericalError, ValidationError
from .patches import PatchSample, SubvolumeGrid

_LOG_2PI = float(np.log(2.0 * np.pi))

_MODEL_HEADER = struct.Struct("<4sIIIII")  # magic, version, variant, K, D, d
_MODEL_MAGIC = b"MIM1"
VARIANT_FACTORED = 0
VARIANT_FULLCOV = 1

MANIFEST_FORMAT = "patchgmm-manifest"
MANIFEST_VERSION = 1


@dataclass(frozen=True)
class MixtureModel:
    """Parameters of one location's mixture.

    weights: (K,), sums to 1.  means: (K, D).  bases: (K, D, d).
    noise_vars: (K,), strictly positive.
    """

    weights: np.ndarray
    means: np.ndarray
    bases: np.ndarray
    noise_vars: np.ndarray

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        mu = np.ascontiguousarray(self.means, dtype=np.float64)
        W = np.ascontiguousarray(self.bases, dtype=np.float64)
        s2 = np.ascontiguousarray(self.noise_vars, dtype=np.float64)
        if w.ndim != 1 or mu.ndim != 2 or W.ndim != 3 or s2.ndim != 1:
            raise ValidationError("model arrays have wrong rank")
        K = w.size
        if mu.shape[0] != K or W.shape[0] != K or s2.size != K:
            raise ValidationError("component counts disagree across model arrays")
        if W.shape[1] != mu.shape[1]:
            raise ValidationError("basis row count must match mean dimension")
        if K < 1 or mu.shape[1] < 1 or W.shape[2] < 1:
            raise ValidationError("model dimensions must be >= 1")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(mu))
                and np.all(np.isfinite(W)) and np.all(np.isfinite(s2))):
            raise ValidationError("model parameters must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-8:
            raise ValidationError("mixture weights must be nonnegative and sum to 1")
        if np.any(s2 <= 0):
            raise ValidationError("noise variances must be strictly positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "bases", W)
        object.__setattr__(self, "noise_vars", s2)

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def data_dim(self) -> int:
        return self.means.shape[1]

    @property
    def latent_dim(self) -> int:
        return self.bases.shape[2]

    def component_covariance(self, k: int) -> np.ndarray:
        """Dense D x D covariance of component k (small-D paths only)."""
        W = self.bases[k]
        return W @ W.T + self.noise_vars[k] * np.eye(self.data_dim)


@dataclass(frozen=True)
class LatentStats:
    """Per-patch posterior quantities from one E pass.

    gamma: (N, K) responsibilities.  xhat: (N, K, d) posterior latent means.
    S: (N, K, d, d) posterior latent covariances.  loglik: (N,) per-patch
    observed-data log-likelihood under the full mixture.
    """

    gamma: np.ndarray
    xhat: np.ndarray
    S: np.ndarray
    loglik: np.ndarray

    @property
    def total_loglik(self) -> float:
        return float(self.loglik.sum())


def _solve_factored(W_o: np.ndarray, sigma2: float, r: np.ndarray):
    """Cholesky pieces of M = W_o^T W_o + sigma2 I and M^-1 W_o^T r.

    Returns (xhat, quad, logdet_M, Minv) where quad = r^T C_oo^-1 r and
    logdet_M feeds the observed covariance determinant.
    """
    d = W_o.shape[1]
    M = W_o.T @ W_o + sigma2 * np.eye(d)
    try:
        L = np.linalg.cholesky(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"factored system not positive definite: {exc}") from exc
    Wtr = W_o.T @ r
    t = np.linalg.solve(L, Wtr)
    xhat = np.linalg.solve(L.T, t)
    quad = (r @ r - t @ t) / sigma2
    logdet_M = 2.0 * float(np.sum(np.log(np.diag(L))))
    Linv = np.linalg.solve(L, np.eye(d))
    Minv = Linv.T @ Linv
    return xhat, quad, logdet_M, Minv


def component_loglik(model: MixtureModel, patch: PatchSample) -> np.ndarray:
    """log N(y^O; mu_k^O, C_k^OO) for every component, shape (K,)."""
    obs = patch.observed
    y = patch.observed_values
    n = obs.size
    out = np.empty(model.n_components)
    for k in range(model.n_components):
        W_o = model.bases[k][obs]
        s2 = float(model.noise_vars[k])
        r = y - model.means[k][obs]
        _, quad, logdet_M, _ = _solve_factored(W_o, s2, r)
        logdet = (n - model.latent_dim) * np.log(s2) + logdet_M
        out[k] = -0.5 * (n * _LOG_2PI + logdet + quad)
    return out


def observed_loglik(model: MixtureModel, patch: PatchSample) -> float:
    """log sum_k pi_k N(y^O; mu_k^O, C_k^OO), via log-sum-exp."""
    lk = component_loglik(model, patch)
    a = np.log(model.weights) + lk
    m = a.max()
    return float(m + np.log(np.exp(a - m).sum()))


def responsibilities(model: MixtureModel, patch: PatchSample) -> np.ndarray:
    """Posterior component probabilities gamma_k for one patch."""
    a = np.log(model.weights) + component_loglik(model, patch)
    a -= a.max()
    e = np.exp(a)
    return e / e.sum()


def latent_posterior(model: MixtureModel, patch: PatchSample, k: int):
    """Posterior mean and covariance of the latent coordinate under
    component k given the observed entries: (xhat, S)."""
    obs = patch.observed
    W_o = model.bases[k][obs]
    s2 = float(model.noise_vars[k])
    r = patch.observed_values - model.means[k][obs]
    xhat, _, _, Minv = _solve_factored(W_o, s2, r)
    return xhat, s2 * Minv


def e_step_reference(model: MixtureModel, patches: list[PatchSample]) -> LatentStats:
    """Plain per-patch E pass; the batch kernels must reproduce this."""
    N = len(patches)
    K = model.n_components
    d = model.latent_dim
    gamma = np.empty((N, K))
    xhat = np.empty((N, K, d))
    S = np.empty((N, K, d, d))
    loglik = np.empty(N)
    for i, patch in enumerate(patches):
        lk = component_loglik(model, patch)
        a = np.log(model.weights) + lk
        m = a.max()
        z = np.exp(a - m)
        gamma[i] = z / z.sum()
        loglik[i] = m + np.log(z.sum())
        for k in range(K):
            xk, Sk = latent_posterior(model, patch, k)
            xhat[i, k] = xk
            S[i, k] = Sk
    return LatentStats(gamma, xhat, S, loglik)


def save_model(model, path) -> None:
    """Write a model file.  Accepts a MixtureModel (factored variant) or any
    object with weights/means/covariances (full-covariance variant)."""
    path = Path(path)
    if isinstance(model, MixtureModel):
        K, D, d = model.n_components, model.data_dim, model.latent_dim
        header = _MODEL_HEADER.pack(_MODEL_MAGIC, 1, VARIANT_FACTORED, K, D, d)
        payload = (model.weights.tobytes() + model.means.tobytes()
                   + model.bases.tobytes() + model.noise_vars.tobytes())
    else:
        w = np.ascontiguousarray(model.weights, dtype=np.float64)
        mu = np.ascontiguousarray(model.means, dtype=np.float64)
        cov = np.ascontiguousarray(model.covariances, dtype=np.float64)
        K, D = mu.shape
        header = _MODEL_HEADER.pack(_MODEL_MAGIC, 1, VARIANT_FULLCOV, K, D, 0)
        payload = w.tobytes() + mu.tobytes() + cov.tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)


def load_model(path):
    """Read a model file; returns MixtureModel or FullCovModel by variant."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _MODEL_HEADER.size:
        raise FormatError(f"{path}: truncated model header")
    magic, version, variant, K, D, d = _MODEL_HEADER.unpack_from(raw)
    if magic != _MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != 1:
        raise FormatError(f"{path}: unsupported model version {version}")
    # writable buffer: the compiled kernels reject read-only views
    body = bytearray(raw[_MODEL_HEADER.size:])
    if variant == VARIANT_FACTORED:
        need = 8 * (K + K * D + K * D * d + K)
        if len(body) != need:
            raise FormatError(f"{path}: payload is {len(body)} bytes, expected {need}")
        off = 0
        w = np.frombuffer(body, np.float64, K, off); off += 8 * K
        mu = np.frombuffer(body, np.float64, K * D, off).reshape(K, D); off += 8 * K * D
        W = np.frombuffer(body, np.float64, K * D * d, off).reshape(K, D, d); off += 8 * K * D * d
        s2 = np.frombuffer(body, np.float64, K, off)
        try:
            return MixtureModel(w, mu, W, s2)
        except ValidationError as exc:
            raise FormatError(f"{path}: invalid model contents: {exc}") from exc
    if variant == VARIANT_FULLCOV:
        need = 8 * (K + K * D + K * D * D)
        if len(body) != need:
            raise FormatError(f"{path}: payload is {len(body)} bytes, expected {need}")
        off = 0
        w = np.frombuffer(body, np.float64, K, off); off += 8 * K
        mu = np.frombuffer(body, np.float64, K * D, off).reshape(K, D); off += 8 * K * D
        cov = np.frombuffer(body, np.float64, K * D * D, off).reshape(K, D, D)
        from .ecm import FullCovModel
        try:
            return FullCovModel(w, mu, cov)
        except ValidationError as exc:
            raise FormatError(f"{path}: invalid model contents: {exc}") from exc
    raise FormatError(f"{path}: unknown model variant {variant}")


def _center_key(center) -> str:
    return ",".join(str(int(c)) for c in center)


def _parse_center(key: str) -> tuple[int, int, int]:
    parts = key.split(",")
    if len(parts) != 3:
        raise ManifestError(f"bad center key {key!r}")
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ManifestError(f"bad center key {key!r}") from exc


def save_manifest(grid: SubvolumeGrid, entries: dict, path) -> None:
    """Write the manifest mapping grid centers to model filenames.

    `entries` maps center tuples to paths relative to the manifest directory.
    Keys are serialized in fixed scan order so repeated saves are identical.
    """
    path = Path(path)
    models = {_center_key(c): str(entries[c]) for c in sorted(entries, key=lambda c: c[::-1])}
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "volume_dims": list(grid.volume_dims),
        "subvolume_size": list(grid.subvolume_size),
        "stride": list(grid.stride),
        "patch_size": list(grid.patch_size),
        "models": models,
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_manifest(path):
    """Read a manifest; returns (grid, {center: absolute model path})."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: unreadable manifest: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MANIFEST_FORMAT:
        raise ManifestError(f"{path}: not a model manifest")
    if doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    for key in ("volume_dims", "subvolume_size", "stride", "patch_size", "models"):
        if key not in doc:
            raise ManifestError(f"{path}: manifest missing {key!r}")
    grid = SubvolumeGrid(
        tuple(doc["volume_dims"]),
        tuple(doc["subvolume_size"]),
        tuple(doc["stride"]),
        tuple(doc["patch_size"]),
    )
    base = path.parent
    models = {}
    for key, rel in doc["models"].items():
        models[_parse_center(key)] = base / rel
    return grid, models
