import numpy as np
import pytest

from sparsedense.data import EmbeddingTable
from sparsedense.errors import ConfigError, DuplicateError, FormatError, ShapeError
from sparsedense.index import (
    VocabMask,
    apply_mask,
    build_index,
    build_vocab_mask,
    dense_search,
    flops_metric,
    flops_from_matrices,
    load_index,
    load_mask,
    save_index,
    save_mask,
    search,
)
from sparsedense.model import SparseVector
from sparsedense.rng import SplitMix64


def _sparse(entries: dict[int, float], dim: int = 8) -> SparseVector:
    indices = sorted(entries)
    return SparseVector(indices=np.array(indices, dtype=np.int64),
                        weights=np.array([entries[i] for i in indices]),
                        dim=dim)


def _random_docs(count, dim, seed, density=0.25):
    """Random sparse docs; each term fires with the given density."""
    stream = SplitMix64(seed)
    docs = []
    for i in range(count):
        dense = np.zeros(dim)
        for j in range(dim):
            if stream.uniform() < density:
                dense[j] = stream.uniform() + 0.1
        docs.append((f"d{i:05d}", SparseVector.from_dense(dense)))
    return docs


class TestBuildIndex:
    def test_single_doc_postings(self):
        index = build_index([("d", _sparse({2: 1.0, 3: 2.0}))])
        assert set(index.postings) == {2, 3}
        positions, weights = index.postings[2]
        assert positions.tolist() == [0] and weights.tolist() == [1.0]
        positions, weights = index.postings[3]
        assert weights.tolist() == [2.0]

    def test_mask_drops_terms(self):
        mask = VocabMask(allowed=np.array([True] * 3 + [False] + [True] * 4))
        index = build_index([("d", _sparse({2: 1.0, 3: 2.0}))], mask=mask)
        assert set(index.postings) == {2}

    def test_duplicate_id_rejected(self):
        with pytest.raises(DuplicateError):
            build_index([("d", _sparse({1: 1.0})), ("d", _sparse({2: 1.0}))])

    def test_reconstruction_of_random_docs(self):
        docs = _random_docs(1000, 32, seed=5)
        index = build_index(docs)
        probe = SplitMix64(6)
        for _ in range(25):
            doc_id, vector = docs[probe.below(len(docs))]
            rebuilt = index.densify(doc_id)
            np.testing.assert_array_equal(rebuilt.to_dense(), vector.to_dense())

    def test_reconstruction_respects_mask(self):
        docs = _random_docs(50, 16, seed=8)
        allowed = np.array(SplitMix64(9).normals(16)) > 0
        mask = VocabMask(allowed=allowed)
        index = build_index(docs, mask=mask)
        for doc_id, vector in docs[:10]:
            expected = apply_mask(vector, mask)
            np.testing.assert_array_equal(index.densify(doc_id).to_dense(),
                                          expected.to_dense())


class TestSearch:
    def test_disjoint_query_returns_empty(self):
        index = build_index([("d", _sparse({2: 1.0}))])
        assert search(index, _sparse({5: 1.0}), k=3) == []

    def test_exact_match_single_doc(self):
        index = build_index([("d", _sparse({2: 1.0}))])
        assert search(index, _sparse({2: 1.0}), k=1) == [("d", 1.0)]

    def test_empty_query_returns_empty(self):
        index = build_index([("d", _sparse({2: 1.0}))])
        assert search(index, SparseVector.from_dense(np.zeros(8)), k=5) == []

    def test_ties_break_by_ascending_id(self):
        docs = [("b", _sparse({1: 1.0})), ("a", _sparse({1: 1.0})),
                ("c", _sparse({1: 1.0}))]
        index = build_index(docs)
        hits = search(index, _sparse({1: 2.0}), k=3)
        assert [doc_id for doc_id, _ in hits] == ["a", "b", "c"]

    def test_bad_k(self):
        index = build_index([("d", _sparse({2: 1.0}))])
        with pytest.raises(ConfigError):
            search(index, _sparse({2: 1.0}), k=0)

    def test_matches_brute_force_on_random_corpus(self):
        from sparsedense.scoring import sparse_score
        docs = _random_docs(300, 32, seed=10)
        index = build_index(docs)
        queries = [vec for _, vec in _random_docs(20, 32, seed=11)]
        for query in queries:
            hits = search(index, query, k=10)
            scored = [(doc_id, sparse_score(query, vec)) for doc_id, vec in docs]
            scored = [(d, s) for d, s in scored if s > 0.0]
            scored.sort(key=lambda item: (-item[1], item[0]))
            expected = scored[:10]
            assert [d for d, _ in hits] == [d for d, _ in expected]
            np.testing.assert_allclose([s for _, s in hits],
                                       [s for _, s in expected], atol=1e-9)

    def test_returned_scores_match_sparse_score(self):
        from sparsedense.scoring import sparse_score
        docs = _random_docs(40, 16, seed=12)
        index = build_index(docs)
        by_id = dict(docs)
        query = _random_docs(1, 16, seed=13)[0][1]
        for doc_id, score in search(index, query, k=10):
            assert score == pytest.approx(sparse_score(query, by_id[doc_id]), abs=1e-9)


class TestDenseSearch:
    def test_stored_row_ranks_first(self):
        rows = np.eye(4, dtype=np.float32)
        table = EmbeddingTable(ids=["a", "b", "c", "d"], rows=rows)
        hits = dense_search(table, np.array([0.0, 1.0, 0.0, 0.0]), tau=0.07, k=2)
        assert hits[0][0] == "b"

    def test_tau_changes_scores_not_ranking(self):
        stream = SplitMix64(14)
        rows = np.array(stream.normals(20 * 6)).reshape(20, 6).astype(np.float32)
        table = EmbeddingTable(ids=[f"r{i:02d}" for i in range(20)], rows=rows)
        query = np.array(stream.normals(6))
        a = dense_search(table, query, tau=0.07, k=20)
        b = dense_search(table, query, tau=0.7, k=20)
        assert [d for d, _ in a] == [d for d, _ in b]
        np.testing.assert_allclose([s for _, s in a],
                                   [10.0 * s for _, s in b], rtol=1e-12)

    def test_matches_scalar_loop_oracle(self):
        stream = SplitMix64(15)
        rows = np.array(stream.normals(200 * 8)).reshape(200, 8).astype(np.float32)
        table = EmbeddingTable(ids=[f"r{i:03d}" for i in range(200)], rows=rows)
        query = np.array(stream.normals(8))
        tau = 0.07
        scored = []
        for i, doc_id in enumerate(table.ids):
            acc = 0.0
            for c in range(8):
                acc += float(rows[i, c]) * query[c]
            scored.append((doc_id, acc / tau))
        scored.sort(key=lambda item: (-item[1], item[0]))
        hits = dense_search(table, query, tau=tau, k=10)
        assert [d for d, _ in hits] == [d for d, _ in scored[:10]]
        np.testing.assert_allclose([s for _, s in hits],
                                   [s for _, s in scored[:10]], atol=1e-9)

    def test_dim_mismatch(self):
        table = EmbeddingTable(ids=["a"], rows=np.ones((1, 4), dtype=np.float32))
        with pytest.raises(ShapeError):
            dense_search(table, np.ones(5), tau=1.0, k=1)


class TestFlops:
    def test_all_empty_vectors(self):
        empty = SparseVector.from_dense(np.zeros(6))
        stats = flops_metric([empty, empty], [empty])
        assert stats.flops == 0.0

    def test_hand_computed_overlap(self):
        texts = [_sparse({0: 1.0, 1: 1.0}, dim=3), _sparse({1: 1.0}, dim=3)]
        # p_text = [.5, 1., 0]; with the docs below p_image = [0, .5, .5]
        images = [_sparse({1: 1.0}, dim=3), _sparse({2: 1.0}, dim=3)]
        stats = flops_metric(texts, images)
        np.testing.assert_allclose(stats.p_text, [0.5, 1.0, 0.0])
        np.testing.assert_allclose(stats.p_image, [0.0, 0.5, 0.5])
        assert stats.flops == pytest.approx(0.5)

    def test_spec_probability_example(self):
        # p_text = [.5,.5,0], p_image = [0,.5,.5] -> flops 0.25
        texts = [_sparse({0: 1.0}, dim=3), _sparse({1: 1.0}, dim=3)]
        images = [_sparse({1: 1.0}, dim=3), _sparse({2: 1.0}, dim=3)]
        stats = flops_metric(texts, images)
        assert stats.flops == pytest.approx(0.25)

    def test_equals_exhaustive_pairwise_expectation(self):
        texts = [vec for _, vec in _random_docs(30, 20, seed=16)]
        images = [vec for _, vec in _random_docs(40, 20, seed=17)]
        stats = flops_metric(texts, images)
        overlaps = []
        for t in texts:
            t_support = set(t.indices.tolist())
            for i in images:
                overlaps.append(len(t_support & set(i.indices.tolist())))
        assert stats.flops == pytest.approx(np.mean(overlaps), abs=1e-12)

    def test_matrix_form_agrees(self):
        texts = [vec for _, vec in _random_docs(10, 12, seed=18)]
        images = [vec for _, vec in _random_docs(10, 12, seed=19)]
        z_t = np.stack([v.to_dense() for v in texts])
        z_i = np.stack([v.to_dense() for v in images])
        assert flops_from_matrices(z_t, z_i).flops == pytest.approx(
            flops_metric(texts, images).flops, abs=1e-12)


class TestVocabMask:
    def test_threshold_one_admits_all_seen(self):
        mask = build_vocab_mask([{0, 1}, {2}], vocab_size=5, min_doc_freq=1)
        assert mask.allowed.tolist() == [True, True, True, False, False]

    def test_threshold_above_corpus_size_admits_nothing(self):
        mask = build_vocab_mask([{0}, {0}], vocab_size=3, min_doc_freq=5)
        assert mask.n_allowed == 0

    def test_matches_hand_counted_frequencies(self):
        sets = [{0, 1}, {1, 2}, {1}, {2}]
        mask = build_vocab_mask(sets, vocab_size=4, min_doc_freq=2)
        assert mask.doc_freq.tolist() == [1, 3, 2, 0]
        assert mask.allowed.tolist() == [False, True, True, False]

    def test_bad_threshold(self):
        with pytest.raises(ConfigError):
            build_vocab_mask([{0}], vocab_size=2, min_doc_freq=0)

    def test_raising_threshold_never_increases_flops(self):
        docs = _random_docs(60, 24, seed=20)
        texts = [vec for _, vec in _random_docs(30, 24, seed=21)]
        term_sets = [set(vec.indices.tolist()) for _, vec in docs]
        previous = None
        for threshold in (1, 5, 15, 40):
            mask = build_vocab_mask(term_sets, vocab_size=24,
                                    min_doc_freq=threshold)
            masked_images = [apply_mask(vec, mask) for _, vec in docs]
            flops = flops_metric(texts, masked_images).flops
            if previous is not None:
                assert flops <= previous + 1e-12
            previous = flops


class TestPersistence:
    def test_index_round_trip(self, tmp_path):
        docs = _random_docs(50, 16, seed=25)
        index = build_index(docs)
        path = tmp_path / "idx.bin"
        save_index(index, path)
        loaded = load_index(path)
        assert loaded.vocab_size == index.vocab_size
        assert loaded.doc_ids == index.doc_ids
        assert set(loaded.postings) == set(index.postings)
        for term in index.postings:
            np.testing.assert_array_equal(loaded.postings[term][0],
                                          index.postings[term][0])
            np.testing.assert_allclose(
                loaded.postings[term][1], index.postings[term][1], rtol=1e-7)
        # save -> load -> save is byte-stable (weights are f32 in file)
        path2 = tmp_path / "idx2.bin"
        save_index(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_index_corruption_detected(self, tmp_path):
        index = build_index([("d", _sparse({2: 1.0}))])
        path = tmp_path / "idx.bin"
        save_index(index, path)
        blob = bytearray(path.read_bytes())
        blob[10] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError):
            load_index(path)

    def test_mask_round_trip(self, tmp_path):
        allowed = np.array(SplitMix64(26).normals(37)) > 0
        mask = VocabMask(allowed=allowed)
        path = tmp_path / "mask.bin"
        save_mask(mask, path)
        loaded = load_mask(path)
        np.testing.assert_array_equal(loaded.allowed, allowed)
