"""k-means pseudo-labels, layer dictionary arithmetic, teacher oracle."""

import numpy as np
import pytest

from jooci.labels import (Codebook, KMeansError, TeacherOracle, assign_labels,
                          build_label_store, kmeans_fit, ladder_cluster_counts,
                          layers_for_sets, spectral_frame_features)


class TestKMeans:
    def test_four_distinct_points_k4_zero_inertia(self):
        pts = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [5.0, 5.0]])
        cb = kmeans_fit(pts, k=4, seed=0)
        assert cb.inertia == pytest.approx(0.0, abs=1e-12)

    def test_identical_points_k1(self):
        pts = np.tile([2.0, -1.0, 0.5], (10, 1))
        cb = kmeans_fit(pts, k=1, seed=3)
        np.testing.assert_allclose(cb.centers[0], [2.0, -1.0, 0.5])

    def test_two_blob_centers_near_true_means(self):
        rng = np.random.default_rng(0)
        sigma, n = 0.5, 400
        blob_a = rng.normal([0.0, 0.0], sigma, size=(n, 2))
        blob_b = rng.normal([8.0, 8.0], sigma, size=(n, 2))
        cb = kmeans_fit(np.vstack([blob_a, blob_b]), k=2, seed=1)
        tol = 3.0 * sigma / np.sqrt(n)
        order = np.argsort(cb.centers[:, 0])
        # sample-mean oracle: centers recover each blob's empirical mean
        np.testing.assert_allclose(cb.centers[order[0]], blob_a.mean(axis=0), atol=tol)
        np.testing.assert_allclose(cb.centers[order[1]], blob_b.mean(axis=0), atol=tol)

    def test_n_less_than_k_rejected(self):
        with pytest.raises(KMeansError):
            kmeans_fit(np.zeros((3, 2)), k=4, seed=0)

    def test_deterministic_refit(self):
        rng = np.random.default_rng(5)
        pts = rng.normal(size=(60, 4))
        a = kmeans_fit(pts, k=8, seed=9)
        b = kmeans_fit(pts, k=8, seed=9)
        np.testing.assert_array_equal(a.centers, b.centers)
        assert a.inertia == b.inertia

    def test_no_empty_cluster(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(40, 3))
        cb = kmeans_fit(pts, k=10, seed=4)
        counts = np.bincount(assign_labels(pts, cb), minlength=10)
        assert np.all(counts > 0)


class TestAssignLabels:
    def test_feature_equal_to_center(self):
        cb = Codebook(centers=np.array([[0.0, 0.0], [3.0, 3.0]]), inertia=0.0, seed=0)
        assert assign_labels(np.array([[3.0, 3.0]]), cb)[0] == 1

    def test_equidistant_breaks_to_lower_index(self):
        cb = Codebook(centers=np.array([[-1.0], [1.0]]), inertia=0.0, seed=0)
        assert assign_labels(np.array([[0.0]]), cb)[0] == 0

    def test_matches_brute_force_scan(self):
        rng = np.random.default_rng(7)
        feats = rng.normal(size=(50, 5))
        cb = Codebook(centers=rng.normal(size=(9, 5)), inertia=0.0, seed=0)
        got = assign_labels(feats, cb)
        brute = np.array([
            min(range(9), key=lambda c: float(np.sum((f - cb.centers[c]) ** 2)))
            for f in feats])
        np.testing.assert_array_equal(got, brute)


class TestLayerPlacement:
    def test_twelve_layers_six_sets(self):
        assert layers_for_sets(12, 6) == [7, 8, 9, 10, 11, 12]

    def test_six_layers_six_sets_forced(self):
        assert layers_for_sets(6, 6) == [1, 2, 3, 4, 5, 6]

    def test_single_set_last_layer(self):
        assert layers_for_sets(12, 1) == [12]

    def test_too_few_layers_rejected(self):
        with pytest.raises(ValueError):
            layers_for_sets(4, 6)

    def test_strictly_increasing_includes_last(self):
        for layers_n, sets_n in [(12, 3), (8, 4), (4, 4), (10, 2)]:
            layers = layers_for_sets(layers_n, sets_n)
            assert layers[-1] == layers_n
            assert all(a < b for a, b in zip(layers, layers[1:]))

    def test_ladder_counts(self):
        assert ladder_cluster_counts(1005, 6) == [31, 62, 125, 251, 502, 1005]
        assert ladder_cluster_counts(32, 4) == [4, 8, 16, 32]


class TestTeacherOracle:
    def _utt(self, speaker_id, utt_id):
        from jooci.data import Utterance
        return Utterance(waveform=np.zeros(320, dtype=np.float32),
                         speaker_id=speaker_id,
                         phone_seq=np.zeros(1, dtype=np.int64), utt_id=utt_id)

    def test_zero_noise_same_speaker_identical(self):
        oracle = TeacherOracle(noise_scale=0.0, seed=1)
        a = oracle.embed(self._utt(3, "u1"))
        b = oracle.embed(self._utt(3, "u2"))
        np.testing.assert_array_equal(a, b)
        assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-5)

    def test_within_speaker_cosine_high(self):
        oracle = TeacherOracle(noise_scale=0.1, seed=2)
        base = oracle.speaker_vector(5)
        cosines = [float(oracle.embed(self._utt(5, f"u{i}")) @ base)
                   for i in range(100)]
        assert min(cosines) >= 0.95

    def test_cross_speaker_cosine_small(self):
        # concentration of random unit vectors at dim 512
        oracle = TeacherOracle(noise_scale=0.0, seed=3)
        rng = np.random.default_rng(0)
        count = 0
        for _ in range(200):
            a, b = rng.choice(1000, size=2, replace=False)
            c = abs(float(oracle.speaker_vector(a) @ oracle.speaker_vector(b)))
            count += c < 0.2
        assert count / 200 > 0.99

    def test_within_exceeds_cross_by_margin(self):
        oracle = TeacherOracle(noise_scale=0.2, seed=4)
        within, cross = [], []
        for spk in range(8):
            base = oracle.speaker_vector(spk)
            within.append(float(oracle.embed(self._utt(spk, f"w{spk}")) @ base))
            cross.append(float(oracle.speaker_vector(spk) @ oracle.speaker_vector(spk + 50)))
        assert np.mean(within) - np.mean(cross) >= 0.5


class TestLabelStore:
    def test_build_assign_and_roundtrip(self, tmp_path):
        from jooci.data import generate_corpus
        corpus = generate_corpus(2, 2, 3, seed=0, utt_seconds=(1.0, 1.2))
        store = build_label_store(corpus, content_layers=4, vocab_size=16,
                                  num_sets=3, seed=1, iters=10)
        assert sorted(store.layer_map) == [2, 3, 4]
        for set_id, cb in enumerate(store.codebooks):
            for u in corpus:
                labels = store.labels[set_id][u.utt_id]
                assert labels.max() < cb.k
                assert len(labels) == u.num_frames
        store.save(str(tmp_path / "labels"))
        loaded = type(store).load(str(tmp_path / "labels"))
        assert loaded.layer_map == store.layer_map
        for set_id in store.labels:
            for uid in store.labels[set_id]:
                np.testing.assert_array_equal(loaded.labels[set_id][uid],
                                              store.labels[set_id][uid])

    def test_dictionary_slicing(self):
        from jooci.data import generate_corpus
        corpus = generate_corpus(1, 1, 3, seed=0, utt_seconds=(1.0, 1.2))
        store = build_label_store(corpus, content_layers=2, vocab_size=8,
                                  num_sets=2, seed=1, iters=5)
        d = store.dictionary_for(corpus[0].utt_id, frame_offset=5, num_frames=10)
        for entry in d.entries.values():
            assert len(entry.labels) == 10
            full = store.labels[entry.set_id][corpus[0].utt_id]
            np.testing.assert_array_equal(entry.labels, full[5:15])

    def test_determinism(self):
        from jooci.data import generate_corpus
        corpus = generate_corpus(2, 1, 3, seed=0, utt_seconds=(1.0, 1.2))
        a = build_label_store(corpus, 4, 8, 2, seed=3, iters=10)
        b = build_label_store(corpus, 4, 8, 2, seed=3, iters=10)
        for set_id in a.labels:
            for uid in a.labels[set_id]:
                np.testing.assert_array_equal(a.labels[set_id][uid],
                                              b.labels[set_id][uid])


def test_spectral_features_cmn_removes_static_coloration():
    rng = np.random.default_rng(0)
    wave = rng.normal(size=3200).astype(np.float32)
    feats = spectral_frame_features(wave, n_bands=12, cmn=True)
    assert feats.shape == (10, 12)
    np.testing.assert_allclose(feats.mean(axis=0), 0.0, atol=1e-9)
