"""Feature-space models: PCA decorrelation and a diagonal-covariance GMM
visual vocabulary trained with seeded EM.

Vocabulary file format (little-endian): magic "NRPV", u32 version (=1),
u32 K, u32 D, then f64 arrays weights (K), means (K*D), deviations (K*D),
then the PCA block: u8 present flag and, when present, u32 input-dim,
u32 output-dim, u8 whiten, f64 mean / components / explained-variance.
"""

from __future__ import annotations

import hashlib
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .errors import FormatError, StageError

MAGIC = b"NRPV"
VERSION = 1

VARIANCE_FLOOR = 1e-4  # floor on the per-dimension deviations sigma_k
_DEAD_FRACTION = 1e-10


@dataclass
class PcaModel:
    """Orthonormal linear projection y = components @ (x - mean)."""

    mean: np.ndarray
    components: np.ndarray  # (output_dim, input_dim), rows orthonormal
    explained_variance: np.ndarray  # non-increasing
    whiten: bool = False

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.components = np.asarray(self.components, dtype=np.float64)
        self.explained_variance = np.asarray(self.explained_variance, dtype=np.float64).ravel()

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]

    @property
    def output_dim(self) -> int:
        return self.components.shape[0]


def fit_pca(descriptors: np.ndarray, output_dim: int, whiten: bool = False) -> PcaModel:
    """Top-`output_dim` eigenvectors of the sample covariance."""
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2:
        raise StageError("vocab", "expected a 2-d sample matrix")
    n, d0 = x.shape
    if output_dim < 1 or output_dim > d0:
        raise StageError("vocab", f"invalid output dim {output_dim} for input dim {d0}")
    if n <= output_dim:
        raise StageError("vocab", "insufficient samples")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = (xc.T @ xc) / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:output_dim]
    components = vecs[:, order].T.copy()
    # Deterministic sign: largest-magnitude coefficient of each row positive.
    for row in components:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return PcaModel(
        mean=mean,
        components=components,
        explained_variance=np.maximum(vals[order], 0.0),
        whiten=whiten,
    )


def project(model: PcaModel, x: np.ndarray) -> np.ndarray:
    """Project one vector or a row-stacked batch into the PCA subspace."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.shape[1] != model.input_dim:
        raise StageError("vocab", f"dimension mismatch: expected {model.input_dim}, got {arr.shape[1]}")
    y = (arr - model.mean) @ model.components.T
    if model.whiten:
        y = y / np.sqrt(np.maximum(model.explained_variance, 1e-12))
    return y[0] if single else y


@dataclass
class GmmVocabulary:
    """Diagonal-covariance Gaussian mixture: weights, means, deviations."""

    weights: np.ndarray  # (K,), positive, sums to 1
    means: np.ndarray  # (K, D)
    deviations: np.ndarray  # (K, D), >= VARIANCE_FLOOR
    trained_log_likelihood: float = 0.0
    ll_history: list[float] = field(default_factory=list, repr=False)
    pca: PcaModel | None = None

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64).ravel()
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.deviations = np.atleast_2d(np.asarray(self.deviations, dtype=np.float64))
        if not math.isclose(float(self.weights.sum()), 1.0, abs_tol=1e-9):
            raise ValueError("component weights must sum to 1")
        if np.any(self.weights <= 0):
            raise ValueError("component weights must be positive")
        if np.any(self.deviations <= 0):
            raise ValueError("deviations must be positive")

    @property
    def K(self) -> int:  # noqa: N802 - component count, conventional name
        return self.means.shape[0]

    @property
    def D(self) -> int:  # noqa: N802 - feature dim, conventional name
        return self.means.shape[1]

    def id_bytes(self) -> bytes:
        """16-byte content hash identifying this vocabulary."""
        return hashlib.md5(serialize_vocabulary(self)).digest()

    def id_hex(self) -> str:
        return self.id_bytes().hex()


def _log_joint(gmm: GmmVocabulary, x: np.ndarray) -> np.ndarray:
    """log(w_k u_k(x)) for each sample/component pair, shape (N, K)."""
    sig = gmm.deviations
    inv_var = 1.0 / (sig * sig)
    log_norm = np.log(gmm.weights) - 0.5 * gmm.D * math.log(2.0 * math.pi) - np.sum(np.log(sig), axis=1)
    maha = (x * x) @ inv_var.T - 2.0 * (x @ (gmm.means * inv_var).T) + np.sum(gmm.means**2 * inv_var, axis=1)
    return log_norm - 0.5 * maha


def _check_dim(gmm: GmmVocabulary, arr: np.ndarray) -> None:
    if arr.shape[-1] != gmm.D:
        raise StageError("vocab", f"dimension mismatch: expected {gmm.D}, got {arr.shape[-1]}")


def posterior(gmm: GmmVocabulary, x: np.ndarray) -> np.ndarray:
    """Soft assignments γ(x): responsibilities of each component, log-space.

    Accepts a single D-vector or an (N, D) batch; rows sum to exactly 1.
    """
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    _check_dim(gmm, arr)
    lj = _log_joint(gmm, arr)
    gamma = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    gamma /= gamma.sum(axis=1, keepdims=True)
    return gamma[0] if single else gamma


def log_density(gmm: GmmVocabulary, x: np.ndarray) -> np.ndarray:
    """log u_lambda(x), the mixture log-density, per sample."""
    arr = np.atleast_2d(np.asarray(x, dtype=np.float64))
    _check_dim(gmm, arr)
    return logsumexp(_log_joint(gmm, arr), axis=1)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[i] = x[idx]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))
    return centers


def fit_gmm(
    descriptors: np.ndarray,
    k: int,
    seed: int,
    max_iters: int = 200,
    tol: float = 1e-5,
    variance_floor: float = VARIANCE_FLOOR,
) -> GmmVocabulary:
    """EM with seeded k-means++ initialization.

    Stops when the per-sample log-likelihood improves by less than `tol` or
    after `max_iters` iterations; the log-likelihood trace is kept on the
    returned vocabulary.  Components whose responsibility mass collapses are
    reinitialized from the worst-fit sample.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2:
        raise StageError("vocab", "expected a 2-d sample matrix")
    n, d = x.shape
    if k < 1:
        raise StageError("vocab", "K must be at least 1")
    if n < 10 * k:
        raise StageError("vocab", "insufficient samples")

    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    dist2 = np.sum((x[:, None, :] - centers[None]) ** 2, axis=2) if n * k * d <= 2e7 else None
    if dist2 is None:
        dist2 = (x * x).sum(1)[:, None] - 2.0 * x @ centers.T + (centers * centers).sum(1)
    labels = np.argmin(dist2, axis=1)
    global_var = np.maximum(x.var(axis=0), variance_floor**2)
    weights = np.empty(k)
    means = np.empty((k, d))
    variances = np.empty((k, d))
    for i in range(k):
        members = x[labels == i]
        if members.shape[0] == 0:
            weights[i] = 1.0
            means[i] = centers[i]
            variances[i] = global_var
        else:
            weights[i] = members.shape[0]
            means[i] = members.mean(axis=0)
            variances[i] = members.var(axis=0)
    weights /= weights.sum()
    deviations = np.maximum(np.sqrt(np.maximum(variances, 0.0)), variance_floor)

    gmm = GmmVocabulary(weights=weights, means=means, deviations=deviations)
    history: list[float] = []
    for _ in range(max_iters):
        lj = _log_joint(gmm, x)
        lse = logsumexp(lj, axis=1, keepdims=True)
        ll = float(lse.mean())
        history.append(ll)
        if len(history) > 1 and ll - history[-2] < tol:
            break
        gamma = np.exp(lj - lse)
        nk = gamma.sum(axis=0)
        dead = nk < _DEAD_FRACTION * n
        nk = np.maximum(nk, 1e-300)
        weights = nk / n
        means = (gamma.T @ x) / nk[:, None]
        second = (gamma.T @ (x * x)) / nk[:, None]
        variances = np.maximum(second - means**2, 0.0)
        if dead.any():
            worst = int(np.argmin(lse[:, 0]))
            for i in np.nonzero(dead)[0]:
                means[i] = x[worst]
                variances[i] = global_var
                weights[i] = 1.0 / n
        weights = weights / weights.sum()
        deviations = np.maximum(np.sqrt(variances), variance_floor)
        gmm = GmmVocabulary(weights=weights, means=means, deviations=deviations)

    gmm.trained_log_likelihood = history[-1] if history else 0.0
    gmm.ll_history = history
    return gmm


# -- persistence -------------------------------------------------------------


def serialize_vocabulary(gmm: GmmVocabulary) -> bytes:
    parts = [
        MAGIC,
        np.array([VERSION, gmm.K, gmm.D], dtype="<u4").tobytes(),
        gmm.weights.astype("<f8").tobytes(),
        gmm.means.astype("<f8").tobytes(),
        gmm.deviations.astype("<f8").tobytes(),
    ]
    if gmm.pca is None:
        parts.append(b"\x00")
    else:
        p = gmm.pca
        parts.append(b"\x01")
        parts.append(np.array([p.input_dim, p.output_dim], dtype="<u4").tobytes())
        parts.append(bytes([1 if p.whiten else 0]))
        parts.append(p.mean.astype("<f8").tobytes())
        parts.append(p.components.astype("<f8").tobytes())
        parts.append(p.explained_variance.astype("<f8").tobytes())
    return b"".join(parts)


def save_vocabulary(gmm: GmmVocabulary, path: str | Path) -> None:
    path = Path(path)
    blob = serialize_vocabulary(gmm)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_vocabulary(path: str | Path) -> GmmVocabulary:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise FormatError("unsupported format: bad magic")
    version, k, d = (int(v) for v in np.frombuffer(blob[4:16], dtype="<u4"))
    if version != VERSION:
        raise FormatError(f"unsupported format version: {version}")
    off = 16

    def take(count: int) -> np.ndarray:
        nonlocal off
        end = off + 8 * count
        if end > len(blob):
            raise FormatError("corrupt vocabulary file: truncated payload")
        out = np.frombuffer(blob[off:end], dtype="<f8").copy()
        off = end
        return out

    weights = take(k)
    means = take(k * d).reshape(k, d)
    deviations = take(k * d).reshape(k, d)
    if off >= len(blob):
        raise FormatError("corrupt vocabulary file: truncated payload")
    has_pca = blob[off]
    off += 1
    pca = None
    if has_pca:
        if off + 9 > len(blob):
            raise FormatError("corrupt vocabulary file: truncated payload")
        d0, dout = (int(v) for v in np.frombuffer(blob[off : off + 8], dtype="<u4"))
        whiten = bool(blob[off + 8])
        off += 9
        pca = PcaModel(
            mean=take(d0),
            components=take(dout * d0).reshape(dout, d0),
            explained_variance=take(dout),
            whiten=whiten,
        )
    try:
        return GmmVocabulary(weights=weights, means=means, deviations=deviations, pca=pca)
    except ValueError as exc:
        raise FormatError(f"corrupt vocabulary file: {exc}") from exc
