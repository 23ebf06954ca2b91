"""Fisher Vector encoding of projected descriptor sets, normalization,
Fisher-kernel similarity, and optional Kernel-PCA compression.

Embedding file format (little-endian): magic "NRPF", u32 version (=1),
u32 length, u8 state (0=raw, 1=power-normalized, 2=final), 16-byte
vocabulary id, then f32 values.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import FormatError, StageError
from .features.types import DescriptorSet
from .vocab import GmmVocabulary, posterior

MAGIC = b"NRPF"
VERSION = 1

STATE_RAW = "raw"
STATE_POWER = "power-normalized"
STATE_FINAL = "final"
_STATE_CODES = {STATE_RAW: 0, STATE_POWER: 1, STATE_FINAL: 2}
_STATE_NAMES = {v: k for k, v in _STATE_CODES.items()}


@dataclass
class FisherVector:
    """A 2DK gradient embedding tagged with its normalization state."""

    values: np.ndarray
    state: str
    vocab_id: bytes
    image_ids: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.state not in _STATE_CODES:
            raise ValueError(f"unknown state: {self.state}")
        if len(self.vocab_id) != 16:
            raise ValueError("vocab id must be a 16-byte hash")

    @property
    def length(self) -> int:
        return self.values.shape[0]


def encode(gmm: GmmVocabulary, dset: DescriptorSet | np.ndarray, image_id: str | None = None) -> FisherVector:
    """Raw Fisher Vector of a projected descriptor set.

    Mean blocks are (1/sqrt(w_k)) sum_t gamma_t(k) (x_t - mu_k)/sigma_k and
    deviation blocks (1/sqrt(2 w_k)) sum_t gamma_t(k) [(x_t - mu_k)^2/sigma_k^2 - 1],
    concatenated component-major (all mu blocks, then all sigma blocks) with
    no 1/T averaging.
    """
    if isinstance(dset, DescriptorSet):
        if dset.empty:
            raise StageError("encode", "no features")
        x = dset.matrix()
        ids = [dset.image_id]
    else:
        x = np.atleast_2d(np.asarray(dset, dtype=np.float64))
        if x.size == 0:
            raise StageError("encode", "no features")
        ids = [image_id] if image_id else []
    if x.shape[1] != gmm.D:
        raise StageError("encode", f"dimension mismatch: vocabulary D={gmm.D}, descriptors {x.shape[1]}")

    gamma = posterior(gmm, x)  # (T, K)
    s0 = gamma.sum(axis=0)  # (K,)
    s1 = gamma.T @ x  # (K, D)
    s2 = gamma.T @ (x * x)  # (K, D)
    mu, sig, w = gmm.means, gmm.deviations, gmm.weights
    g_mu = (s1 - s0[:, None] * mu) / sig / np.sqrt(w)[:, None]
    g_sig = ((s2 - 2.0 * mu * s1 + mu * mu * s0[:, None]) / (sig * sig) - s0[:, None]) / np.sqrt(2.0 * w)[:, None]
    values = np.concatenate([g_mu.ravel(), g_sig.ravel()])
    return FisherVector(values=values, state=STATE_RAW, vocab_id=gmm.id_bytes(), image_ids=ids)


def aggregate(parts: list[FisherVector]) -> FisherVector:
    """Elementwise sum of raw encodings; image ids are concatenated."""
    if not parts:
        raise StageError("encode", "no features")
    vocab_id = parts[0].vocab_id
    for p in parts:
        if p.vocab_id != vocab_id:
            raise StageError("encode", "vocabulary mismatch")
        if p.state != STATE_RAW:
            raise StageError("encode", "already normalized")
        if p.length != parts[0].length:
            raise StageError("encode", "embedding length mismatch")
    values = np.sum([p.values for p in parts], axis=0)
    ids = [i for p in parts for i in p.image_ids]
    return FisherVector(values=values, state=STATE_RAW, vocab_id=vocab_id, image_ids=ids)


def power_normalize(fv: FisherVector, alpha: float = 0.5) -> FisherVector:
    """Signed power map z -> sign(z) |z|^alpha."""
    if fv.state != STATE_RAW:
        raise StageError("encode", f"wrong state: expected raw, got {fv.state}")
    if not 0.0 < alpha <= 1.0:
        raise StageError("encode", f"alpha must be in (0, 1], got {alpha}")
    values = np.sign(fv.values) * np.abs(fv.values) ** alpha
    return replace(fv, values=values, state=STATE_POWER)


def l2_normalize(fv: FisherVector) -> FisherVector:
    if fv.state == STATE_FINAL:
        raise StageError("encode", "wrong state: already final")
    norm = float(np.linalg.norm(fv.values))
    if norm < 1e-12:
        raise StageError("encode", "degenerate embedding")
    return replace(fv, values=fv.values / norm, state=STATE_FINAL)


def fisher_kernel(a: FisherVector, b: FisherVector) -> float:
    """Dot product of final embeddings (the normalized-gradient kernel)."""
    if a.vocab_id != b.vocab_id:
        raise StageError("encode", "vocabulary mismatch")
    if a.state != STATE_FINAL or b.state != STATE_FINAL:
        raise StageError("encode", "wrong state: expected final")
    if a.length != b.length:
        raise StageError("encode", "embedding length mismatch")
    return float(np.dot(a.values, b.values))


# -- Kernel PCA compression ---------------------------------------------------


@dataclass
class KpcaModel:
    """Kernel-PCA projection learned on a set of final anchor embeddings."""

    anchors: np.ndarray  # (N, L) training embedding matrix
    kernel: str  # "linear" | "rbf"
    rbf_gamma: float
    coefficients: np.ndarray  # (N, output_dim), columns v_a / sqrt(lambda_a)
    row_means: np.ndarray  # (N,) row means of the training kernel matrix
    grand_mean: float
    vocab_id: bytes

    @property
    def output_dim(self) -> int:
        return self.coefficients.shape[1]


def _kernel_matrix(kernel: str, gamma: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if kernel == "linear":
        return a @ b.T
    if kernel == "rbf":
        sq = np.sum(a * a, axis=1)[:, None] - 2.0 * (a @ b.T) + np.sum(b * b, axis=1)
    else:
        raise StageError("encode", f"unknown kernel: {kernel}")
    return np.exp(-gamma * np.maximum(sq, 0.0))


def fit_kpca(
    training: list[FisherVector],
    output_dim: int,
    kernel: str = "linear",
    rbf_gamma: float = 1.0,
) -> KpcaModel:
    """Eigendecompose the double-centered kernel matrix of the training set."""
    if len(training) <= output_dim:
        raise StageError("encode", "insufficient training vectors")
    vocab_id = training[0].vocab_id
    for fv in training:
        if fv.vocab_id != vocab_id:
            raise StageError("encode", "vocabulary mismatch")
        if fv.state != STATE_FINAL:
            raise StageError("encode", "wrong state: expected final")
    anchors = np.stack([fv.values for fv in training])
    n = anchors.shape[0]
    k = _kernel_matrix(kernel, rbf_gamma, anchors, anchors)
    row_means = k.mean(axis=1)
    grand_mean = float(k.mean())
    centered = k - row_means[:, None] - row_means[None, :] + grand_mean
    vals, vecs = np.linalg.eigh(centered)
    order = np.argsort(vals)[::-1][:output_dim]
    lams = np.maximum(vals[order], 1e-12)
    v = vecs[:, order]
    for col in v.T:
        j = int(np.argmax(np.abs(col)))
        if col[j] < 0:
            col *= -1.0
    coefficients = v / np.sqrt(lams)[None, :]
    return KpcaModel(
        anchors=anchors,
        kernel=kernel,
        rbf_gamma=rbf_gamma,
        coefficients=coefficients,
        row_means=row_means,
        grand_mean=grand_mean,
        vocab_id=vocab_id,
    )


def project_kpca(model: KpcaModel, fv: FisherVector, renormalize: bool = True) -> np.ndarray:
    """Project a final embedding onto the KPCA axes; unit norm by default."""
    if fv.vocab_id != model.vocab_id:
        raise StageError("encode", "vocabulary mismatch")
    if fv.state != STATE_FINAL:
        raise StageError("encode", "wrong state: expected final")
    k = _kernel_matrix(model.kernel, model.rbf_gamma, fv.values[None, :], model.anchors)[0]
    centered = k - model.row_means - k.mean() + model.grand_mean
    y = model.coefficients.T @ centered
    if not renormalize:
        return y
    norm = float(np.linalg.norm(y))
    if norm < 1e-12:
        raise StageError("encode", "degenerate embedding")
    return y / norm


# -- persistence --------------------------------------------------------------


def save_embedding(fv: FisherVector, path: str | Path) -> None:
    path = Path(path)
    header = (
        MAGIC
        + np.array([VERSION, fv.length], dtype="<u4").tobytes()
        + bytes([_STATE_CODES[fv.state]])
        + fv.vocab_id
    )
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(fv.values.astype("<f4").tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_embedding(path: str | Path) -> FisherVector:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < 29 or blob[:4] != MAGIC:
        raise FormatError("unsupported format: bad magic")
    version, length = (int(v) for v in np.frombuffer(blob[4:12], dtype="<u4"))
    if version != VERSION:
        raise FormatError(f"unsupported format version: {version}")
    state_code = blob[12]
    if state_code not in _STATE_NAMES:
        raise FormatError(f"corrupt embedding file: unknown state {state_code}")
    vocab_id = blob[13:29]
    expected = 29 + 4 * length
    if len(blob) < expected:
        raise FormatError("corrupt embedding file: truncated payload")
    values = np.frombuffer(blob[29:expected], dtype="<f4").astype(np.float64)
    return FisherVector(
        values=values,
        state=_STATE_NAMES[state_code],
        vocab_id=vocab_id,
        image_ids=[path.stem],
    )
