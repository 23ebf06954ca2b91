"""End-to-end orchestration: pattern → features → embedding → retrieval →
geometric verification, plus vocabulary training, manifest-driven evaluation,
and the expert confirm loop with a write-ahead journal.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .encoder import (
    FisherVector,
    KpcaModel,
    encode,
    fit_kpca,
    l2_normalize,
    power_normalize,
    project_kpca,
)
from .errors import StageError
from .features import compute_descriptors, detect_regions, load_descriptors
from .features.types import DescriptorSet
from .geoverify import (
    match_features,
    overlay_to_json,
    percentile_filter,
    ransac_homography,
    render_hotspots,
)
from .image_io import load_pattern_mask
from .index import (
    DatabaseEntry,
    IdentityIndex,
    PROVENANCE_CONFIRMED,
    PROVENANCE_INITIAL,
)
from .preprocess import PatternImage, clean_pattern, normalize_scale, postprocess_mask
from .vocab import GmmVocabulary, fit_gmm, fit_pca, project

STATUS_VERIFIED = "verified"
STATUS_UNVERIFIED = "unverified"
STATUS_GEOMETRY_FAILED = "geometry-failed"


@dataclass
class VerifiedMatch:
    individual_id: str
    image_id: str
    distance: float
    rank: int
    status: str
    homography: list[float] | None = None
    overlay: dict | None = None

    def to_dict(self) -> dict:
        return {
            "individual-id": self.individual_id,
            "image-id": self.image_id,
            "distance": self.distance,
            "rank": self.rank,
            "status": self.status,
            "homography": self.homography,
            "overlay": self.overlay,
        }


@dataclass
class QueryResult:
    query_image_id: str
    matches: list[VerifiedMatch]
    config_hash: str

    def to_dict(self) -> dict:
        return {
            "query-image-id": self.query_image_id,
            "matches": [m.to_dict() for m in self.matches],
            "config-hash": self.config_hash,
        }


@dataclass
class ManifestEntry:
    image_id: str
    individual_id: str
    split: str  # "database" | "query"
    pattern_path: str | None = None
    descriptor_path: str | None = None


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    """Parse a dataset manifest: a JSON list of image records."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, list):
        raise StageError("index", "manifest must be a JSON list")
    entries = []
    for i, item in enumerate(raw):
        split = item.get("split")
        if split not in ("database", "query"):
            raise StageError("index", f"manifest entry {i}: unknown split {split!r}")
        if not item.get("image-id") or not item.get("individual-id"):
            raise StageError("index", f"manifest entry {i}: image-id and individual-id are required")
        entries.append(
            ManifestEntry(
                image_id=item["image-id"],
                individual_id=item["individual-id"],
                split=split,
                pattern_path=item.get("pattern-path"),
                descriptor_path=item.get("descriptor-path"),
            )
        )
    return entries


def config_snapshot(config: PipelineConfig) -> dict:
    return {"hash": config.hash_hex(), "config": json.loads(config.canonical_json())}


class ReidPipeline:
    """Deterministic composition of the stages behind one config."""

    def __init__(
        self,
        config: PipelineConfig,
        vocab: GmmVocabulary | None = None,
        kpca: KpcaModel | None = None,
        index: IdentityIndex | None = None,
        journal_path: str | Path | None = None,
    ):
        self.config = config
        self.vocab = vocab
        self.kpca = kpca
        self.index = index
        self.journal_path = Path(journal_path) if journal_path else None

    # -- per-image stages ------------------------------------------------

    def prepare_pattern(self, pattern: PatternImage) -> PatternImage:
        cfg = self.config
        cleaned = clean_pattern(pattern, open_radius=cfg.open_radius, sharpen_amount=cfg.sharpen_amount)
        closed = postprocess_mask(cleaned, close_radius=cfg.close_radius, open_radius=cfg.open_radius)
        return normalize_scale(closed, target_width=cfg.target_stroke_width)

    def extract_features(self, pattern: PatternImage, image_id: str | None = None) -> DescriptorSet:
        cfg = self.config
        prepared = self.prepare_pattern(pattern)
        regions = detect_regions(
            prepared,
            n_octaves=cfg.n_octaves,
            scales_per_octave=cfg.scales_per_octave,
            base_sigma=cfg.base_sigma,
            response_threshold_rel=cfg.response_threshold_rel,
            max_regions=cfg.max_regions,
        )
        return compute_descriptors(
            prepared,
            regions,
            image_id=image_id or pattern.source_id,
            patch_size=cfg.patch_size,
            measurement_scale=cfg.measurement_scale,
        )

    def embed(self, dset: DescriptorSet) -> FisherVector:
        """PCA-project, encode, power- and L2-normalize one descriptor set."""
        if self.vocab is None:
            raise StageError("encode", "no vocabulary loaded")
        if dset.empty:
            raise StageError("encode", "no features")
        x = dset.matrix()
        if self.vocab.pca is not None:
            x = project(self.vocab.pca, x)
        raw = encode(self.vocab, x, image_id=dset.image_id)
        return l2_normalize(power_normalize(raw, self.config.power_alpha))

    def embedding_vector(self, fv: FisherVector) -> np.ndarray:
        if self.kpca is not None:
            return project_kpca(self.kpca, fv)
        return fv.values

    def run(self, source) -> tuple[np.ndarray, DescriptorSet]:
        """Full single-image pipeline; returns (embedding, descriptors).

        `source` may be a PatternImage, a DescriptorSet (skips preprocessing
        and detection), or a path to a pattern image / "NRPD" descriptor file.
        """
        dset = self._descriptor_set_for(source)
        fv = self.embed(dset)
        return self.embedding_vector(fv), dset

    def _descriptor_set_for(self, source) -> DescriptorSet:
        if isinstance(source, DescriptorSet):
            return source
        if isinstance(source, PatternImage):
            return self.extract_features(source)
        path = Path(source)
        with open(path, "rb") as fh:
            magic = fh.read(4)
        if magic == b"NRPD":
            return load_descriptors(path)
        return self.extract_features(load_pattern_mask(path), image_id=path.stem)

    # -- retrieval and verification ---------------------------------------

    def query_and_verify(self, source, k: int | None = None) -> QueryResult:
        if self.index is None or len(self.index) == 0:
            raise StageError("index", "empty database")
        k = k or self.config.top_k
        embedding, dset = self.run(source)
        ranked = self.index.query_top_individuals(embedding, k)
        matches = []
        for match in ranked:
            verified = self._verify(dset, match.entry)
            matches.append(
                VerifiedMatch(
                    individual_id=match.entry.individual_id,
                    image_id=match.entry.image_id,
                    distance=match.distance,
                    rank=match.rank,
                    status=verified[0],
                    homography=verified[1],
                    overlay=verified[2],
                )
            )
        return QueryResult(
            query_image_id=dset.image_id,
            matches=matches,
            config_hash=self.config.hash_hex(),
        )

    def _verify(self, query: DescriptorSet, entry: DatabaseEntry):
        if not entry.descriptor_ref or query.empty:
            return STATUS_UNVERIFIED, None, None
        ref = Path(entry.descriptor_ref)
        if not ref.exists():
            return STATUS_UNVERIFIED, None, None
        cfg = self.config
        try:
            db_dset = load_descriptors(ref)
            pairs = percentile_filter(match_features(query, db_dset), cfg.match_percentile)
            homography, inliers = ransac_homography(
                pairs,
                iterations=cfg.ransac_iterations,
                inlier_threshold=cfg.ransac_inlier_threshold,
                seed=cfg.seed,
            )
        except StageError:
            return STATUS_GEOMETRY_FAILED, None, None
        overlay = render_hotspots(inliers, query_image_id=query.image_id, db_image_id=entry.image_id)
        payload = overlay_to_json(overlay, homography)
        return STATUS_VERIFIED, payload.pop("homography"), payload

    # -- confirm loop -----------------------------------------------------

    def confirm_match(
        self,
        query_image_id: str,
        individual_id: str | None,
        embedding: np.ndarray,
        descriptor_ref: str | None = None,
        new_individual: bool = False,
    ) -> str:
        """Append an expert-confirmed entry; returns the individual id used.

        The confirmation is journaled (write-ahead) before the index mutates.
        """
        if self.index is None:
            raise StageError("index", "empty database")
        known = set(self.index.individuals())
        if new_individual:
            if not individual_id:
                n = 1
                while f"ind-{len(known) + n:04d}" in known:
                    n += 1
                individual_id = f"ind-{len(known) + n:04d}"
            elif individual_id in known:
                raise StageError("index", f"individual already exists: {individual_id}")
        else:
            if individual_id not in known:
                raise StageError("index", f"unknown individual: {individual_id}")
        if any(e.image_id == query_image_id for e in self.index.entries()):
            raise StageError("index", f"duplicate image id: {query_image_id}")
        self._journal(
            {
                "ts": time.time(),
                "query-image-id": query_image_id,
                "individual-id": individual_id,
                "new": bool(new_individual),
            }
        )
        self.index.add_entry(
            DatabaseEntry(
                individual_id=individual_id,
                image_id=query_image_id,
                embedding=embedding,
                descriptor_ref=descriptor_ref,
                added_at=time.time(),
                provenance=PROVENANCE_CONFIRMED,
            )
        )
        return individual_id

    def _journal(self, record: dict) -> None:
        if self.journal_path is None:
            return
        line = json.dumps(record, sort_keys=True) + "\n"
        with open(self.journal_path, "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
            os.fsync(fh.fileno())


# -- training and evaluation ---------------------------------------------


def train_vocabulary(config: PipelineConfig, descriptor_sets: list[DescriptorSet]) -> GmmVocabulary:
    """Fit PCA on the pooled database descriptors, then the GMM vocabulary."""
    nonempty = [d for d in descriptor_sets if not d.empty]
    if not nonempty:
        raise StageError("vocab", "insufficient samples")
    stacked = np.vstack([d.matrix() for d in nonempty])
    pca = fit_pca(stacked, config.pca_dim, whiten=config.pca_whiten)
    projected = project(pca, stacked)
    gmm = fit_gmm(
        projected,
        config.gmm_k,
        seed=config.seed,
        max_iters=config.gmm_max_iters,
        tol=config.gmm_tol,
        variance_floor=config.variance_floor,
    )
    gmm.pca = pca
    return gmm


def build_index(
    config: PipelineConfig,
    pipeline: ReidPipeline,
    items: list[tuple[ManifestEntry, DescriptorSet]],
) -> IdentityIndex:
    """Index the database split; entries carry added_at=0 for reproducibility."""
    index = IdentityIndex(config=config_snapshot(config))
    finals = [(entry, pipeline.embed(dset)) for entry, dset in items]
    if config.kpca_enabled:
        pipeline.kpca = fit_kpca(
            [fv for _, fv in finals],
            output_dim=min(config.kpca_dim, len(finals) - 1),
            kernel=config.kpca_kernel,
            rbf_gamma=config.kpca_rbf_gamma,
        )
    for entry, fv in finals:
        index.add_entry(
            DatabaseEntry(
                individual_id=entry.individual_id,
                image_id=entry.image_id,
                embedding=pipeline.embedding_vector(fv),
                descriptor_ref=entry.descriptor_path,
                added_at=0.0,
                provenance=PROVENANCE_INITIAL,
            )
        )
    return index


def _manifest_descriptors(pipeline: ReidPipeline, entry: ManifestEntry) -> DescriptorSet:
    if entry.descriptor_path:
        dset = load_descriptors(entry.descriptor_path)
        dset.image_id = entry.image_id
        return dset
    if entry.pattern_path:
        mask = load_pattern_mask(entry.pattern_path)
        return pipeline.extract_features(mask, image_id=entry.image_id)
    raise StageError("index", f"manifest entry {entry.image_id} has no pattern or descriptor path")


def run_eval(config: PipelineConfig, manifest, k_max: int = 5):
    """Train on the database split, evaluate the query split, return the report.

    `manifest` is a path to a manifest JSON or a pre-parsed entry list.
    """
    entries = load_manifest(manifest) if isinstance(manifest, (str, Path)) else manifest
    db = [e for e in entries if e.split == "database"]
    queries = [e for e in entries if e.split == "query"]
    if not db or not queries:
        raise StageError("index", "manifest needs non-empty database and query splits")
    overlap = {e.image_id for e in db} & {e.image_id for e in queries}
    if overlap:
        raise StageError("index", f"overlapping splits: {sorted(overlap)[:3]}")

    pipeline = ReidPipeline(config)
    db_sets = [(e, _manifest_descriptors(pipeline, e)) for e in db]
    pipeline.vocab = train_vocabulary(config, [d for _, d in db_sets])
    pipeline.index = build_index(config, pipeline, db_sets)

    query_pairs = []
    for e in queries:
        dset = _manifest_descriptors(pipeline, e)
        embedding, _ = pipeline.run(dset)
        query_pairs.append((embedding, e.individual_id))
    report = pipeline.index.evaluate_topk(query_pairs, k_max)
    return report, pipeline
