"""Fisher-vector encoding, normalization states, the kernel, KPCA
compression, and embedding persistence."""

import math

import numpy as np
import pytest

from norppa.encoder import (
    STATE_FINAL,
    STATE_POWER,
    STATE_RAW,
    FisherVector,
    aggregate,
    encode,
    fisher_kernel,
    fit_kpca,
    l2_normalize,
    load_embedding,
    power_normalize,
    project_kpca,
    save_embedding,
)
from norppa.errors import FormatError, StageError
from norppa.features.types import AffineRegion, Descriptor, DescriptorSet
from norppa.vocab import GmmVocabulary, log_density


def small_gmm(k=2, d=3, seed=0):
    rng = np.random.default_rng(seed)
    return GmmVocabulary(
        weights=rng.dirichlet(np.full(k, 5.0)),
        means=rng.uniform(-1.0, 1.0, size=(k, d)),
        deviations=rng.uniform(0.5, 1.5, size=(k, d)),
    )


def total_ll(weights, means, deviations, x):
    gmm = GmmVocabulary(weights=weights, means=means, deviations=deviations)
    return float(log_density(gmm, x).sum())


class TestEncode:
    def test_standard_normal_single_component(self):
        """K=1, mu=0, sigma=1: x=0 contributes (0, -1/sqrt(2)); x=1 gives (1, 0)."""
        gmm = GmmVocabulary(weights=[1.0], means=[[0.0]], deviations=[[1.0]])
        np.testing.assert_allclose(
            encode(gmm, np.array([[0.0]])).values, [0.0, -1.0 / math.sqrt(2.0)], atol=1e-12
        )
        np.testing.assert_allclose(
            encode(gmm, np.array([[1.0]])).values, [1.0, 0.0], atol=1e-12
        )

    def test_length_is_2dk_and_state_raw(self):
        for k, d in [(1, 2), (3, 4), (5, 7)]:
            gmm = small_gmm(k=k, d=d, seed=k * 10 + d)
            fv = encode(gmm, np.zeros((4, d)))
            assert fv.length == 2 * d * k
            assert fv.state == STATE_RAW
            assert fv.vocab_id == gmm.id_bytes()

    def test_matches_finite_difference_gradient(self):
        """Mean blocks equal (sigma_k/sqrt(w_k)) d/dmu of the total log
        density; deviation blocks (sigma_k/sqrt(2 w_k)) d/dsigma."""
        rng = np.random.default_rng(100)
        h = 1e-6
        for _ in range(10):
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
            np.testing.assert_allclose(fv, oracle, rtol=1e-4, atol=1e-6)

    def test_additive_over_descriptor_partitions(self, rng):
        gmm = small_gmm(k=3, d=4, seed=1)
        x = rng.normal(size=(60, 4))
        whole = encode(gmm, x)
        summed = aggregate([encode(gmm, x[:25]), encode(gmm, x[25:])])
        np.testing.assert_allclose(summed.values, whole.values, atol=1e-10)

    def test_descriptor_set_input_and_image_ids(self, rng):
        gmm = small_gmm(k=2, d=3, seed=2)
        values = rng.random(3)
        region = AffineRegion(cx=0, cy=0, shape=np.eye(2), scale=1.0, response=1.0)
        dset = DescriptorSet(
            image_id="img-7", descriptors=[Descriptor(values=values, region=region)]
        )
        fv = encode(gmm, dset)
        assert fv.image_ids == ["img-7"]

    def test_empty_input_rejected(self):
        gmm = small_gmm()
        with pytest.raises(StageError, match="no features"):
            encode(gmm, DescriptorSet(image_id="x"))
        with pytest.raises(StageError, match="no features"):
            encode(gmm, np.zeros((0, 3)))

    def test_dimension_mismatch_rejected(self):
        gmm = small_gmm(k=2, d=3)
        with pytest.raises(StageError, match="dimension mismatch"):
            encode(gmm, np.zeros((4, 5)))


class TestAggregate:
    def test_mismatched_vocabularies_rejected(self, rng):
        a = encode(small_gmm(seed=0), rng.normal(size=(5, 3)))
        b = encode(small_gmm(seed=1), rng.normal(size=(5, 3)))
        with pytest.raises(StageError, match="vocabulary mismatch"):
            aggregate([a, b])

    def test_normalized_parts_rejected(self, rng):
        gmm = small_gmm()
        fv = power_normalize(encode(gmm, rng.normal(size=(5, 3))))
        with pytest.raises(StageError, match="already normalized"):
            aggregate([fv])

    def test_empty_list_rejected(self):
        with pytest.raises(StageError, match="no features"):
            aggregate([])


class TestNormalization:
    def _raw(self, values):
        return FisherVector(values=np.asarray(values, dtype=float), state=STATE_RAW, vocab_id=bytes(16))

    def test_power_normalize_square_roots(self):
        fv = power_normalize(self._raw([4.0, -9.0, 0.0]))
        np.testing.assert_allclose(fv.values, [2.0, -3.0, 0.0], atol=1e-12)
        assert fv.state == STATE_POWER

    def test_power_alpha_one_is_identity(self):
        fv = power_normalize(self._raw([4.0, -9.0, 0.25]), alpha=1.0)
        np.testing.assert_allclose(fv.values, [4.0, -9.0, 0.25])

    def test_power_preserves_sign_and_order(self, rng):
        values = rng.normal(size=50) * 10.0
        out = power_normalize(self._raw(values)).values
        np.testing.assert_array_equal(np.sign(out), np.sign(values))
        order = np.argsort(values)
        np.testing.assert_array_equal(np.argsort(out), order)

    def test_power_rejects_wrong_state_and_alpha(self):
        done = power_normalize(self._raw([1.0]))
        with pytest.raises(StageError, match="wrong state"):
            power_normalize(done)
        with pytest.raises(StageError, match="alpha"):
            power_normalize(self._raw([1.0]), alpha=0.0)
        with pytest.raises(StageError, match="alpha"):
            power_normalize(self._raw([1.0]), alpha=1.5)

    def test_l2_normalize_unit_result(self):
        fv = l2_normalize(power_normalize(self._raw([9.0, 16.0, 0.0])))
        np.testing.assert_allclose(fv.values, [0.6, 0.8, 0.0], atol=1e-12)
        assert fv.state == STATE_FINAL
        assert np.linalg.norm(fv.values) == pytest.approx(1.0)

    def test_l2_scale_invariance(self, rng):
        values = rng.normal(size=20)
        a = l2_normalize(self._raw(values))
        b = l2_normalize(self._raw(7.5 * values))
        np.testing.assert_allclose(a.values, b.values, atol=1e-12)

    def test_l2_rejects_final_and_zero(self):
        final = l2_normalize(self._raw([1.0, 2.0]))
        with pytest.raises(StageError, match="already final"):
            l2_normalize(final)
        with pytest.raises(StageError, match="degenerate"):
            l2_normalize(self._raw([0.0, 0.0]))


class TestFisherKernel:
    def _final(self, values, vocab_id=bytes(16)):
        return FisherVector(
            values=np.asarray(values, dtype=float), state=STATE_FINAL, vocab_id=vocab_id
        )

    def test_self_similarity_is_one(self, rng):
        gmm = small_gmm(k=2, d=3, seed=3)
        fv = l2_normalize(power_normalize(encode(gmm, rng.normal(size=(20, 3)))))
        assert fisher_kernel(fv, fv) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal_vectors_score_zero_and_symmetry(self):
        a = self._final([1.0, 0.0])
        b = self._final([0.0, 1.0])
        assert fisher_kernel(a, b) == 0.0
        c = self._final([0.6, 0.8])
        assert fisher_kernel(a, c) == fisher_kernel(c, a)

    def test_state_and_vocabulary_checks(self):
        a = self._final([1.0, 0.0])
        raw = FisherVector(values=np.array([1.0, 0.0]), state=STATE_RAW, vocab_id=bytes(16))
        with pytest.raises(StageError, match="wrong state"):
            fisher_kernel(a, raw)
        other = self._final([1.0, 0.0], vocab_id=b"\x01" * 16)
        with pytest.raises(StageError, match="vocabulary mismatch"):
            fisher_kernel(a, other)


class TestKpca:
    def _training(self, rng, n=12, k=2, d=3):
        gmm = small_gmm(k=k, d=d, seed=8)
        return gmm, [
            l2_normalize(power_normalize(encode(gmm, rng.normal(size=(15, d)))))
            for _ in range(n)
        ]

    def test_linear_full_rank_preserves_distances(self, rng):
        _, train = self._training(rng, n=10)
        model = fit_kpca(train, output_dim=9)
        coords = np.stack([project_kpca(model, fv, renormalize=False) for fv in train])
        raw = np.stack([fv.values for fv in train])
        for i in range(10):
            for j in range(i + 1, 10):
                expected = np.linalg.norm(raw[i] - raw[j])
                got = np.linalg.norm(coords[i] - coords[j])
                assert got == pytest.approx(expected, abs=1e-8)

    def test_duplicate_inputs_map_identically(self, rng):
        _, train = self._training(rng, n=8)
        model = fit_kpca(train, output_dim=5)
        a = project_kpca(model, train[3])
        b = project_kpca(model, train[3])
        np.testing.assert_array_equal(a, b)

    def test_projection_unit_norm_by_default(self, rng):
        gmm, train = self._training(rng, n=8)
        model = fit_kpca(train, output_dim=4)
        fresh = l2_normalize(power_normalize(encode(gmm, rng.normal(size=(10, 3)))))
        y = project_kpca(model, fresh)
        assert y.shape == (4,)
        assert np.linalg.norm(y) == pytest.approx(1.0, abs=1e-9)

    def test_neighborhood_ranking_survives_compression(self, rng):
        _, train = self._training(rng, n=14)
        model = fit_kpca(train, output_dim=13)
        coords = np.stack([project_kpca(model, fv, renormalize=False) for fv in train])
        raw = np.stack([fv.values for fv in train])
        agree = 0
        total = 0
        for _ in range(200):
            i, j, k = rng.choice(14, size=3, replace=False)
            before = np.linalg.norm(raw[i] - raw[j]) < np.linalg.norm(raw[i] - raw[k])
            after = np.linalg.norm(coords[i] - coords[j]) < np.linalg.norm(coords[i] - coords[k])
            agree += before == after
            total += 1
        assert agree / total >= 0.9

    def test_rbf_kernel_supported(self, rng):
        _, train = self._training(rng, n=8)
        model = fit_kpca(train, output_dim=3, kernel="rbf", rbf_gamma=0.5)
        y = project_kpca(model, train[0])
        assert y.shape == (3,)
        assert np.isfinite(y).all()

    def test_bad_inputs_rejected(self, rng):
        gmm, train = self._training(rng, n=6)
        with pytest.raises(StageError, match="insufficient training vectors"):
            fit_kpca(train, output_dim=6)
        with pytest.raises(StageError, match="unknown kernel"):
            fit_kpca(train, output_dim=3, kernel="poly")
        raw = encode(gmm, rng.normal(size=(5, 3)))
        with pytest.raises(StageError, match="wrong state"):
            fit_kpca([raw] * 6, output_dim=2)


class TestEmbeddingFiles:
    def _final_fv(self, rng, gmm):
        return l2_normalize(power_normalize(encode(gmm, rng.normal(size=(12, 3)))))

    def test_round_trip_preserves_state_and_values(self, rng, tmp_path):
        gmm = small_gmm(k=2, d=3, seed=5)
        for fv in (
            encode(gmm, rng.normal(size=(6, 3))),
            power_normalize(encode(gmm, rng.normal(size=(6, 3)))),
            self._final_fv(rng, gmm),
        ):
            path = tmp_path / f"{fv.state}.nrpf"
            save_embedding(fv, path)
            loaded = load_embedding(path)
            assert loaded.state == fv.state
            assert loaded.vocab_id == fv.vocab_id
            np.testing.assert_array_equal(
                loaded.values.astype(np.float32), fv.values.astype(np.float32)
            )
            assert loaded.image_ids == [path.stem]

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.nrpf"
        path.write_bytes(b"QQQQ" + b"\0" * 40)
        with pytest.raises(FormatError, match="magic"):
            load_embedding(path)

    def test_bad_version_rejected(self, rng, tmp_path):
        path = tmp_path / "v.nrpf"
        save_embedding(self._final_fv(rng, small_gmm(seed=6)), path)
        blob = bytearray(path.read_bytes())
        blob[4] = 3
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            load_embedding(path)

    def test_unknown_state_rejected(self, rng, tmp_path):
        path = tmp_path / "s.nrpf"
        save_embedding(self._final_fv(rng, small_gmm(seed=6)), path)
        blob = bytearray(path.read_bytes())
        blob[12] = 7
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="unknown state"):
            load_embedding(path)

    def test_truncated_payload_rejected(self, rng, tmp_path):
        path = tmp_path / "t.nrpf"
        save_embedding(self._final_fv(rng, small_gmm(seed=6)), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-8])
        with pytest.raises(FormatError, match="truncated"):
            load_embedding(path)
