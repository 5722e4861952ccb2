import hashlib
import json
import re

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rad.corpus import (
    DEFAULT_TOP_K,
    DenseRetriever,
    Document,
    HashingEmbedder,
    PrecomputedEmbedder,
    ingest_corpus,
    read_jsonl,
    top_k,
)


def rec(text, source="Wiki", title="t"):
    return {"source": source, "title": title, "text": text}


class TestIngest:
    def test_duplicate_text_first_source_wins(self):
        corpus = ingest_corpus([rec("Same text", "Book"), rec("Same text", "Wiki")])
        assert len(corpus) == 1
        assert corpus.documents[0].source == "Book"

    def test_normalized_duplicates_collapse(self):
        corpus = ingest_corpus([rec("Acute  Bronchitis\n"), rec("acute bronchitis")])
        assert len(corpus) == 1

    def test_distinct_records_get_distinct_ids(self):
        corpus = ingest_corpus([rec(f"text {i}") for i in range(4)])
        assert len(corpus) == 4
        assert len({d.id for d in corpus}) == 4

    def test_empty_text_rejected_and_ingestion_continues(self):
        corpus = ingest_corpus([rec("   "), rec("kept"), rec("x", source="Blog"), "junk"])
        assert [d.text for d in corpus] == ["kept"]
        assert [i for i, _ in corpus.rejected] == [0, 2, 3]
        assert "empty text" in corpus.rejected[0][1]
        assert "source" in corpus.rejected[1][1]

    def test_empty_stream_is_valid(self):
        assert len(ingest_corpus([])) == 0

    def test_idempotent(self):
        records = [rec("a b"), rec("c d", "Research"), rec("A  b")]
        assert ingest_corpus(records).documents == ingest_corpus(records).documents

    def test_jsonl_round_trip(self, tmp_path):
        corpus = ingest_corpus([rec("alpha", "Guideline"), rec("beta", "Research")])
        corpus.save(tmp_path / "docs.jsonl")
        loaded = type(corpus).load(tmp_path / "docs.jsonl")
        assert loaded.documents == corpus.documents

    def test_read_jsonl_marks_bad_lines(self, tmp_path):
        path = tmp_path / "in.jsonl"
        path.write_text(json.dumps(rec("ok")) + "\n{not json\n" + json.dumps(rec("ok2")) + "\n")
        corpus = ingest_corpus(read_jsonl(path))
        assert len(corpus) == 2
        assert corpus.rejected == [(1, "record is not an object")]


def oracle_hash_vector(text, dim):
    """Independent recomputation of the signed bag-of-tokens embedding."""
    vec = np.zeros(dim)
    for token in re.findall(r"[^\W_]+", text.lower()):
        b = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8, person=b"rad-bucket").digest(), "little")
        s = int.from_bytes(hashlib.blake2b(token.encode(), digest_size=8, person=b"rad-sign").digest(), "little")
        vec[b % dim] += 1.0 if s & 1 else -1.0
    return vec


class TestEmbed:
    def test_deterministic(self):
        emb = HashingEmbedder()
        a, b = emb.embed(["white blood cell count"]), emb.embed(["white blood cell count"])
        np.testing.assert_array_equal(a, b)

    def test_empty_string_is_zero(self):
        v = HashingEmbedder(dim=256).embed([""])[0]
        assert v.shape == (256,)
        assert not v.any()

    def test_three_word_text_matches_token_hash_oracle(self):
        text = "Sputum culture positive"
        np.testing.assert_array_equal(HashingEmbedder(64).embed([text])[0], oracle_hash_vector(text, 64))

    def test_precomputed_lookup(self, tmp_path):
        path = tmp_path / "vec.jsonl"
        path.write_text("\n".join(json.dumps({"id": k, "vector": v}) for k, v in
                                  [("doc-a", [1.0, 0.0]), ("pneumonia", [0.5, 0.5])]))
        emb = PrecomputedEmbedder.from_jsonl(path)
        np.testing.assert_array_equal(emb.embed(["pneumonia"], role="query"), [[0.5, 0.5]])
        with pytest.raises(KeyError, match="doc-missing"):
            emb.embed(["doc-missing"])


def random_corpus(n, dim, seed):
    rng = np.random.default_rng(seed)
    ids = [f"doc-{i:05d}" for i in range(n)]
    vectors = {i: rng.normal(size=dim) for i in ids}
    docs = [Document(i, "Wiki", "", f"text {i}") for i in ids]
    return docs, PrecomputedEmbedder(vectors)


def brute_force(docs, embedder, q, k):
    scored = [(float(embedder.vectors[d.id] @ q), d.id) for d in docs]
    scored.sort(key=lambda t: (-t[0], t[1]))
    return [(i, s) for s, i in scored[:k]]


class TestRetrieve:
    def test_default_k_is_ten(self):
        assert DEFAULT_TOP_K == 10

    def test_identity_case(self):
        eye = np.eye(5)
        docs = [Document(f"d{i}", "Wiki", "", str(i)) for i in range(5)]
        r = DenseRetriever(PrecomputedEmbedder({d.id: eye[i] for i, d in enumerate(docs)})).fit(docs)
        result = r.retrieve_vector(eye[3], k=2)
        assert result.hits[0] == ("d3", 1.0)

    @pytest.mark.parametrize("k", [1, 10, 1000, 5000])
    def test_matches_brute_force_sort(self, k):
        docs, emb = random_corpus(1000, 16, seed=3)
        r = DenseRetriever(emb).fit(docs)
        q = np.random.default_rng(9).normal(size=16)
        got, want = r.retrieve_vector(q, k=k).hits, brute_force(docs, emb, q, k)
        assert [i for i, _ in got] == [i for i, _ in want]
        np.testing.assert_allclose([s for _, s in got], [s for _, s in want], rtol=0, atol=1e-12)

    @pytest.mark.parametrize("k", [1, 5, 10, 1000])
    def test_integer_vectors_with_ties_exact(self, k):
        # small integers make every score exact, so ties are real and must break by id
        rng = np.random.default_rng(4)
        docs = [Document(f"doc-{i:05d}", "Wiki", "", str(i)) for i in rng.permutation(1000)]
        emb = PrecomputedEmbedder({d.id: rng.integers(-2, 3, size=4).astype(float) for d in docs})
        q = np.array([1.0, -1.0, 2.0, 0.0])
        assert DenseRetriever(emb).fit(docs).retrieve_vector(q, k=k).hits == brute_force(docs, emb, q, k)

    def test_ties_break_by_ascending_id(self):
        docs = [Document(i, "Wiki", "", i) for i in ("b", "a", "c")]
        emb = PrecomputedEmbedder({"a": np.ones(2), "b": np.ones(2), "c": np.zeros(2)})
        hits = DenseRetriever(emb).fit(docs).retrieve_vector(np.ones(2), k=3).hits
        assert [h[0] for h in hits] == ["a", "b", "c"]

    def test_empty_corpus_warns(self, caplog):
        r = DenseRetriever().fit([])
        result = r.retrieve("pneumonia", k=3)
        assert result.hits == []
        assert "empty corpus" in caplog.text

    def test_index_is_immutable(self):
        r = DenseRetriever().fit(ingest_corpus([rec("a b c")]))
        with pytest.raises(ValueError):
            r.index_.vectors[0, 0] = 1.0

    def test_text_retrieval_prefers_matching_document(self):
        corpus = ingest_corpus([rec("pleural effusion fluid"), rec("rib fracture callus"), rec("cardiomegaly")])
        hits = DenseRetriever().fit(corpus).retrieve("rib fracture", k=3).hits
        assert corpus.get(hits[0][0]).text == "rib fracture callus"

    def test_cosine_metric(self):
        docs = [Document("a", "Wiki", "", "a"), Document("b", "Wiki", "", "b")]
        emb = PrecomputedEmbedder({"a": np.array([10.0, 0.0]), "b": np.array([1.0, 1.0])})
        q = np.array([1.0, 1.2])
        assert DenseRetriever(emb).fit(docs).retrieve_vector(q, 1).hits[0][0] == "a"
        assert DenseRetriever(emb, metric="cosine").fit(docs).retrieve_vector(q, 1).hits[0][0] == "b"

    def test_k_must_be_positive(self):
        with pytest.raises(ValueError):
            top_k(np.zeros(2), ["a", "b"], 0)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 50), st.floats(0.01, 100), st.integers(0, 2**16))
    def test_positive_scaling_keeps_order(self, n, k, scale, seed):
        docs, emb = random_corpus(n, 4, seed)
        r = DenseRetriever(emb).fit(docs)
        q = np.random.default_rng(seed + 1).normal(size=4)
        a = [i for i, _ in r.retrieve_vector(q, k).hits]
        b = [i for i, _ in r.retrieve_vector(q * scale, k).hits]
        assert a == b
        assert len(a) == min(k, n)

    def test_deterministic_across_builds(self):
        corpus = ingest_corpus([rec(f"pneumonia finding {i}") for i in range(30)])
        a = DenseRetriever().fit(corpus).retrieve("pneumonia", 10)
        b = DenseRetriever().fit(corpus).retrieve("pneumonia", 10)
        assert a == b
