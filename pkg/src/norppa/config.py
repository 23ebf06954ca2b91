"""Pipeline configuration.

All tunable parameters live here, are serialized to a canonical JSON form,
and the MD5 of that form stamps every index and report so artifacts built
under different settings cannot be mixed silently.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path


@dataclass(frozen=True)
class PipelineConfig:
    # preprocess
    target_stroke_width: float = 8.0
    clahe_tile: int = 64
    clahe_clip: float = 2.0
    close_radius: int = 2
    open_radius: int = 1
    sharpen_amount: float = 1.0

    # features
    n_octaves: int = 5
    scales_per_octave: int = 3
    base_sigma: float = 1.6
    response_threshold_rel: float = 1e-4
    max_regions: int = 2000
    patch_size: int = 32
    measurement_scale: float = 3.0

    # vocab
    pca_dim: int = 64
    pca_whiten: bool = False
    gmm_k: int = 256
    gmm_max_iters: int = 200
    gmm_tol: float = 1e-5
    variance_floor: float = 1e-4

    # encoder
    power_alpha: float = 0.5
    kpca_enabled: bool = False
    kpca_dim: int = 128
    kpca_kernel: str = "linear"
    kpca_rbf_gamma: float = 1.0

    # geoverify
    match_percentile: float = 10.0
    ransac_iterations: int = 2000
    ransac_inlier_threshold: float = 5.0

    # retrieval
    top_k: int = 5

    seed: int = 42
    version: str = "1"

    def canonical_json(self) -> str:
        """Key-sorted, whitespace-free JSON; the hashable identity of a run."""
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def hash_hex(self) -> str:
        return hashlib.md5(self.canonical_json().encode("utf-8")).hexdigest()

    def hash_bytes(self) -> bytes:
        return hashlib.md5(self.canonical_json().encode("utf-8")).digest()

    def with_overrides(self, **kwargs) -> "PipelineConfig":
        return replace(self, **kwargs)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)
