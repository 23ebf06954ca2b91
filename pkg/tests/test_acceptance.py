"""Acceptance gate: one test per primary system criterion, each printing a
pass/fail line with the achieved figure."""

import math
import time

import numpy as np
import pytest

from norppa.config import PipelineConfig
from norppa.encoder import aggregate, encode
from norppa.features.types import AffineRegion
from norppa.geoverify import (
    FeatureMatch,
    estimate_homography_dlt,
    percentile_filter,
    ransac_homography,
)
from norppa.image_io import save_pattern_mask
from norppa.index import DatabaseEntry, IdentityIndex
from norppa.pipeline import ManifestEntry, run_eval
from norppa.preprocess import PatternImage, estimate_stroke_width, normalize_scale
from norppa.vocab import GmmVocabulary, fit_gmm, log_density, posterior
from tests.conftest import render_ring_pattern

# Exact top-1 figure of the synthetic end-to-end run below, recorded once as
# the regression baseline for this corpus, config, and seed.
E2E_BASELINE_TOP1 = 0.73
E2E_CONFIG = dict(pca_dim=32, gmm_k=64, max_regions=800)


def report(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def random_gmm(rng, k, d):
    return GmmVocabulary(
        weights=rng.dirichlet(np.full(k, 5.0)),
        means=rng.uniform(-1.0, 1.0, size=(k, d)),
        deviations=rng.uniform(0.5, 1.5, size=(k, d)),
    )


def total_ll(weights, means, deviations, x):
    gmm = GmmVocabulary(weights=weights, means=means, deviations=deviations)
    return float(log_density(gmm, x).sum())


class TestFisherVectorCriteria:
    def test_gradient_oracle(self):
        """Encoding equals the finite-difference log-likelihood gradient under
        the per-block normalizers on 100 random instances in under 30 s."""
        rng = np.random.default_rng(2024)
        h = 1e-6
        worst = 0.0
        started = time.perf_counter()
        for _ in range(100):
            k = int(rng.integers(1, 4))
            d = int(rng.integers(1, 5))
            t = int(rng.integers(1, 51))
            w = rng.dirichlet(np.full(k, 5.0))
            mu = rng.uniform(-1.0, 1.0, size=(k, d))
            sig = rng.uniform(0.5, 1.5, size=(k, d))
            x = rng.normal(size=(t, d))
            fv = encode(GmmVocabulary(weights=w, means=mu, deviations=sig), x).values
            oracle = np.zeros(2 * k * d)
            for a in range(k):
                for b in range(d):
                    mp, mm = mu.copy(), mu.copy()
                    mp[a, b] += h
                    mm[a, b] -= h
                    dmu = (total_ll(w, mp, sig, x) - total_ll(w, mm, sig, x)) / (2 * h)
                    oracle[a * d + b] = sig[a, b] / math.sqrt(w[a]) * dmu
                    sp, sm = sig.copy(), sig.copy()
                    sp[a, b] += h
                    sm[a, b] -= h
                    dsig = (total_ll(w, mu, sp, x) - total_ll(w, mu, sm, x)) / (2 * h)
                    oracle[k * d + a * d + b] = sig[a, b] / math.sqrt(2.0 * w[a]) * dsig
            rel = np.abs(fv - oracle) / np.maximum(np.abs(oracle), 1.0)
            worst = max(worst, float(rel.max()))
        elapsed = time.perf_counter() - started
        report(
            "fisher-vector gradient oracle",
            worst < 1e-4 and elapsed < 30.0,
            f"max relative error {worst:.3e} over 100 instances in {elapsed:.1f} s",
        )

    def test_additivity(self):
        """Encoding a set equals the elementwise sum over any partition."""
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(100):
            k = int(rng.integers(1, 5))
            d = int(rng.integers(1, 6))
            t = int(rng.integers(2, 101))
            gmm = random_gmm(rng, k, d)
            x = rng.normal(size=(t, d))
            cut = int(rng.integers(1, t))
            summed = aggregate([encode(gmm, x[:cut]), encode(gmm, x[cut:])])
            worst = max(worst, float(np.abs(summed.values - encode(gmm, x).values).max()))
        report("encoding additivity", worst <= 1e-10, f"max elementwise gap {worst:.3e}")

    def test_posterior_normalization(self):
        """Soft assignments sum to 1 +/- 1e-12 over 1e5 evaluations including
        inputs out to 1e3 sigma, with no NaN or Inf."""
        rng = np.random.default_rng(11)
        worst = 0.0
        finite = True
        total = 0
        for scale in (1.0, 10.0, 100.0, 1000.0):
            for _ in range(5):
                k = int(rng.integers(1, 6))
                d = int(rng.integers(1, 5))
                gmm = random_gmm(rng, k, d)
                x = rng.normal(size=(5000, d)) * scale
                gamma = posterior(gmm, x)
                finite = finite and bool(np.isfinite(gamma).all())
                worst = max(worst, float(np.abs(gamma.sum(axis=1) - 1.0).max()))
                total += x.shape[0]
        report(
            "posterior normalization",
            finite and worst <= 1e-12 and total >= 100_000,
            f"max |sum-1| {worst:.3e} over {total} evaluations, finite={finite}",
        )

    def test_em_contract(self):
        """Log-likelihood never decreases; a two-cluster mixture is recovered
        to 0.1 in means and 0.05 in weights over five seeds, n=2000."""
        worst_step = 0.0
        worst_mean = 0.0
        worst_weight = 0.0
        for seed in range(5):
            rng = np.random.default_rng(seed)
            a = rng.normal(loc=(-2.0, 0.0), scale=0.5, size=(1000, 2))
            b = rng.normal(loc=(2.0, 1.0), scale=0.5, size=(1000, 2))
            gmm = fit_gmm(np.vstack([a, b]), k=2, seed=seed)
            steps = np.diff(gmm.ll_history)
            worst_step = min(worst_step, float(steps.min())) if steps.size else worst_step
            means = gmm.means[np.argsort(gmm.means[:, 0])]
            worst_mean = max(
                worst_mean,
                float(np.abs(means - np.array([[-2.0, 0.0], [2.0, 1.0]])).max()),
            )
            worst_weight = max(worst_weight, float(np.abs(gmm.weights - 0.5).max()))
        for rng_seed, k in ((10, 3), (11, 5)):
            rng = np.random.default_rng(rng_seed)
            x = rng.normal(size=(800, 4)) + rng.integers(0, k, size=(800, 1)) * 2.0
            gmm = fit_gmm(x, k=k, seed=rng_seed)
            steps = np.diff(gmm.ll_history)
            worst_step = min(worst_step, float(steps.min())) if steps.size else worst_step
        ok = worst_step >= -1e-9 and worst_mean <= 0.1 and worst_weight <= 0.05
        report(
            "EM fitting contract",
            ok,
            f"worst step {worst_step:.3e}, mean error {worst_mean:.3f}, "
            f"weight error {worst_weight:.3f}",
        )

    def test_dimension_sweep(self):
        """Every encoding has length exactly 2DK across the config sweep."""
        rng = np.random.default_rng(3)
        checked = []
        for d in (2, 16, 64):
            for k in (1, 16, 256):
                gmm = random_gmm(rng, k, d)
                fv = encode(gmm, rng.normal(size=(5, d)))
                checked.append(fv.length == 2 * d * k)
        report(
            "embedding dimension 2DK",
            all(checked),
            f"{sum(checked)}/9 combinations of D in (2,16,64), K in (1,16,256)",
        )


class TestGeometryCriteria:
    def test_dlt_and_ransac(self):
        """Noise-free DLT below 1e-6 px; RANSAC with 30% outliers and 1 px
        noise keeps >= 95% of true inliers at < 1 px mean error, 20 trials."""
        started = time.perf_counter()
        rng = np.random.default_rng(0)
        worst_dlt = 0.0
        for _ in range(20):
            h = np.eye(3)
            h[:2, :2] += 0.2 * rng.normal(size=(2, 2))
            h[:2, 2] = rng.uniform(-10, 10, size=2)
            h[2, :2] = 0.001 * rng.normal(size=2)
            if np.linalg.cond(h) > 1e3:
                continue
            src = rng.uniform(0, 200, size=(8, 2))
            pts = np.hstack([src, np.ones((8, 1))]) @ h.T
            dst = pts[:, :2] / pts[:, [2]]
            model = estimate_homography_dlt(src, dst)
            worst_dlt = max(worst_dlt, model.mean_reprojection_error)

        worst_recall = 1.0
        worst_error = 0.0
        for trial in range(20):
            rng = np.random.default_rng(1000 + trial)
            h = np.eye(3)
            h[:2, :2] += 0.15 * rng.normal(size=(2, 2))
            h[:2, 2] = rng.uniform(-20, 20, size=2)
            src = rng.uniform(20, 300, size=(50, 2))
            pts = np.hstack([src, np.ones((50, 1))]) @ h.T
            dst = pts[:, :2] / pts[:, [2]]
            dst[:35] += rng.uniform(-0.5, 0.5, size=(35, 2))  # 1 px noise band
            dst[35:] += rng.uniform(60, 200, size=(15, 2)) * rng.choice((-1, 1), size=(15, 2))
            matches = [
                FeatureMatch(
                    query_region=AffineRegion(cx=s[0], cy=s[1], shape=np.eye(2), scale=1.0, response=1.0),
                    db_region=AffineRegion(cx=d[0], cy=d[1], shape=np.eye(2), scale=1.0, response=1.0),
                    distance=0.1,
                )
                for s, d in zip(src, dst)
            ]
            model, inliers = ransac_homography(matches, iterations=600, inlier_threshold=3.0, seed=trial)
            true_inliers = set(map(id, matches[:35]))
            kept_true = [m for m in inliers if id(m) in true_inliers]
            worst_recall = min(worst_recall, len(kept_true) / 35.0)
            kept_src = np.array([[m.query_region.cx, m.query_region.cy] for m in kept_true])
            kept_dst = np.array([[m.db_region.cx, m.db_region.cy] for m in kept_true])
            proj = np.hstack([kept_src, np.ones((len(kept_src), 1))]) @ model.h.T
            errors = np.linalg.norm(proj[:, :2] / proj[:, [2]] - kept_dst, axis=1)
            worst_error = max(worst_error, float(errors.mean()))
        elapsed = time.perf_counter() - started
        ok = worst_dlt < 1e-6 and worst_recall >= 0.95 and worst_error < 1.0 and elapsed < 10.0
        report(
            "DLT and RANSAC recovery",
            ok,
            f"DLT max error {worst_dlt:.2e} px, min true-inlier recall {worst_recall:.2f}, "
            f"max mean inlier error {worst_error:.2f} px in {elapsed:.1f} s",
        )

    def test_percentile_filter_reference(self):
        """On distances 1..10 the 10th percentile keeps exactly distance 1."""
        matches = [
            FeatureMatch(
                query_region=AffineRegion(cx=i, cy=0, shape=np.eye(2), scale=1.0, response=1.0),
                db_region=AffineRegion(cx=i, cy=0, shape=np.eye(2), scale=1.0, response=1.0),
                distance=float(i),
            )
            for i in range(1, 11)
        ]
        kept = [m.distance for m in percentile_filter(matches, 10.0)]
        report("percentile filter", kept == [1.0], f"kept distances {kept}")


class TestRetrievalCriteria:
    def test_retrieval_sanity(self):
        """Database entries queried against themselves hit rank 1 always; a
        random-embedding baseline lands within 3 standard errors of 1/N for
        N=50; every accuracy curve is monotone in k."""
        rng = np.random.default_rng(5)
        dim, n = 64, 50
        db = rng.normal(size=(n, dim))
        db /= np.linalg.norm(db, axis=1, keepdims=True)
        index = IdentityIndex()
        for i, v in enumerate(db):
            index.add_entry(
                DatabaseEntry(individual_id=f"ind-{i:02d}", image_id=f"img-{i:02d}", embedding=v)
            )
        self_report = index.evaluate_topk(
            [(v, f"ind-{i:02d}") for i, v in enumerate(db)], k_max=10
        )

        q = 1000
        queries = rng.normal(size=(q, dim))
        queries /= np.linalg.norm(queries, axis=1, keepdims=True)
        random_report = index.evaluate_topk(
            [(v, f"ind-{i % n:02d}") for i, v in enumerate(queries)], k_max=10
        )
        p = 1.0 / n
        se = math.sqrt(p * (1 - p) / q)
        chance_gap = abs(random_report.accuracy(1) - p)
        monotone = all(
            a <= b + 1e-12
            for rep in (self_report, random_report)
            for a, b in zip(rep.accuracies, rep.accuracies[1:])
        )
        ok = self_report.accuracy(1) == 1.0 and chance_gap <= 3 * se and monotone
        report(
            "retrieval sanity",
            ok,
            f"self accuracy(1) {self_report.accuracy(1):.2f}, random baseline "
            f"{random_report.accuracy(1):.4f} vs 1/N {p:.4f} (3 SE = {3 * se:.4f}), "
            f"monotone={monotone}",
        )

    def test_synthetic_end_to_end(self, tmp_path):
        """20 ring-patterned individuals, 1 database image and 5 warped query
        views each (<= 20 degrees, <= 1.3x scale, 5% pixel noise): top-1 must
        reach 50%, ten times the 5% chance level, and match the pinned
        regression baseline."""
        started = time.perf_counter()
        entries = []
        for i in range(20):
            path = tmp_path / f"ind{i}-v0.png"
            save_pattern_mask(render_ring_pattern(i, 0), path)
            entries.append(
                ManifestEntry(
                    image_id=f"ind{i}-v0",
                    individual_id=f"ind-{i:02d}",
                    split="database",
                    pattern_path=str(path),
                )
            )
            for v in range(1, 6):
                path = tmp_path / f"ind{i}-v{v}.png"
                save_pattern_mask(
                    render_ring_pattern(
                        i, v, max_rotation=math.radians(20.0), max_scale=1.3, noise=0.05
                    ),
                    path,
                )
                entries.append(
                    ManifestEntry(
                        image_id=f"ind{i}-v{v}",
                        individual_id=f"ind-{i:02d}",
                        split="query",
                        pattern_path=str(path),
                    )
                )
        config = PipelineConfig().with_overrides(**E2E_CONFIG)
        result, _ = run_eval(config, entries, k_max=5)
        elapsed = time.perf_counter() - started
        top1 = result.accuracy(1)
        ok = top1 >= 0.5 and top1 == E2E_BASELINE_TOP1 and elapsed < 300.0
        report(
            "synthetic end-to-end retrieval",
            ok,
            f"top-1 {top1:.2f} (chance 0.05, floor 0.50, pinned {E2E_BASELINE_TOP1}), "
            f"curve {[round(a, 2) for a in result.accuracies]}, {elapsed:.0f} s",
        )

    def test_eval_determinism(self, tmp_path):
        """Two full evaluation runs with the same config and seed produce
        identical rankings and identical reports."""
        entries = []
        for i in range(6):
            for v, split in ((0, "database"), (1, "query")):
                path = tmp_path / f"ind{i}-v{v}.png"
                save_pattern_mask(render_ring_pattern(i, v), path)
                entries.append(
                    ManifestEntry(
                        image_id=f"ind{i}-v{v}",
                        individual_id=f"ind-{i:02d}",
                        split=split,
                        pattern_path=str(path),
                    )
                )
        config = PipelineConfig().with_overrides(pca_dim=16, gmm_k=8, max_regions=300)
        outputs = []
        for _ in range(2):
            rep, pipeline = run_eval(config, entries, k_max=3)
            probe, _ = pipeline.run(render_ring_pattern(0, 1))
            ranking = [
                (m.entry.individual_id, m.entry.image_id, m.distance)
                for m in pipeline.index.query_topk(probe, k=6)
            ]
            outputs.append((rep.to_dict(), ranking))
        ok = outputs[0] == outputs[1]
        report("evaluation determinism", ok, f"reports and rankings identical = {ok}")


class TestNormalizationCriteria:
    def test_stroke_width_normalization(self):
        """Bars of widths 4, 8, and 16 all normalize to 8 +/- 15%."""
        results = {}
        for width in (4, 8, 16):
            mask = np.zeros((160, 160), dtype=bool)
            for start in range(16, 144, 4 * width):
                mask[start : start + width, 16:144] = True
            normalized = normalize_scale(
                PatternImage(mask=mask, source_id=f"bars-{width}"), target_width=8.0
            )
            results[width] = estimate_stroke_width(normalized)
        ok = all(abs(v - 8.0) <= 0.15 * 8.0 for v in results.values())
        report(
            "stroke-width normalization",
            ok,
            ", ".join(f"{k}px -> {v:.2f}px" for k, v in results.items()),
        )
