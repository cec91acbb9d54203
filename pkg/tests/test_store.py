"""Store tests: embedder determinism, exact search vs brute force, persistence."""

import json

import numpy as np
import pytest

from paperforge.sections import SectionKind
from paperforge.store import (
    CorruptStore,
    DimensionMismatch,
    Embedding,
    EmbeddingError,
    LocalHashEmbedder,
    ReflectionReport,
    ReflectionStore,
    StoreError,
    StoreSet,
    UnknownId,
    cosine,
    query_text,
)


def report(report_id: str, kind=SectionKind.BACKGROUND, topic: str = "topic") -> ReflectionReport:
    return ReflectionReport(
        report_id=report_id,
        topic=topic,
        kind=kind,
        prediction="pred",
        reference="ref",
        evaluator_comments="comments",
        scores={"Completeness": 4.0},
        suggestions={"Content": ["expand scope"]},
        created_at="2024-01-01T00:00:00+00:00",
    )


def random_unit_vectors(n: int, dim: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    matrix = rng.standard_normal((n, dim)).astype(np.float32)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return (matrix / norms).astype(np.float32)


def filled_store(n: int, dim: int = 16, seed: int = 0) -> tuple[ReflectionStore, np.ndarray]:
    store = ReflectionStore(dimension=dim, embedder_id="test")
    vectors = random_unit_vectors(n, dim, seed)
    for i in range(n):
        store.add(report(f"r{i:05d}"), Embedding(vector=vectors[i], embedder_id="test"))
    return store, vectors


def brute_force_topk(store: ReflectionStore, vectors: np.ndarray, query: np.ndarray, k: int):
    """Oracle: score every row with the shared cosine, then max-extract k times."""
    sims = {
        rid: cosine(vectors[i], query) for i, rid in enumerate(store.ids())
    }
    remaining = dict(sims)
    ordered = []
    while remaining and len(ordered) < k:
        best_id = None
        for rid, sim in remaining.items():
            if best_id is None:
                best_id = rid
                continue
            if sim > remaining[best_id] or (sim == remaining[best_id] and rid < best_id):
                best_id = rid
        ordered.append((best_id, remaining.pop(best_id)))
    return ordered


class TestLocalEmbedder:
    def test_identical_strings_identical_vectors(self):
        embedder = LocalHashEmbedder()
        a = embedder.embed("thymic density under screening")
        b = embedder.embed("thymic density under screening")
        assert np.array_equal(a.vector, b.vector)
        assert a.embedder_id == embedder.embedder_id

    def test_empty_string_rejected(self):
        with pytest.raises(EmbeddingError):
            LocalHashEmbedder().embed("")
        with pytest.raises(EmbeddingError):
            LocalHashEmbedder().embed("  ... ")

    def test_concatenation_preserves_direction(self):
        # Doubling every token count scales the vector uniformly, and
        # normalization cancels the scale: same vector, cosine 1.
        embedder = LocalHashEmbedder()
        text = "screening cohort adherence"
        single = embedder.embed(text)
        doubled = embedder.embed(text + " " + text)
        assert np.array_equal(single.vector, doubled.vector)
        assert cosine(single.vector, doubled.vector) == pytest.approx(1.0, abs=1e-12)

    def test_unit_norm(self):
        vec = LocalHashEmbedder().embed("some words here").vector
        assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-6)

    def test_similarities_in_unit_interval(self):
        embedder = LocalHashEmbedder()
        texts = ["alpha beta", "gamma delta epsilon", "alpha gamma", "zeta eta theta iota"]
        for a in texts:
            for b in texts:
                sim = cosine(embedder.embed(a).vector, embedder.embed(b).vector)
                assert -1e-12 <= sim <= 1.0 + 1e-12


class TestSearch:
    def test_self_retrieval(self):
        store, vectors = filled_store(2)
        hits = store.search(Embedding(vector=vectors[0], embedder_id="test"), k=1)
        assert len(hits) == 1
        assert hits[0].report.report_id == "r00000"
        assert hits[0].similarity == pytest.approx(1.0, abs=1e-9)

    def test_k_larger_than_count_returns_all(self):
        store, vectors = filled_store(3)
        hits = store.search(vectors[0], k=10)
        assert len(hits) == 3

    def test_k_must_be_positive(self):
        store, vectors = filled_store(1)
        with pytest.raises(ValueError):
            store.search(vectors[0], k=0)

    def test_dimension_mismatch(self):
        store, _ = filled_store(2, dim=8)
        with pytest.raises(DimensionMismatch):
            store.search(np.ones(9, dtype=np.float32), k=1)
        with pytest.raises(DimensionMismatch):
            store.add(report("bad"), Embedding(np.ones(9, dtype=np.float32), "test"))

    def test_embedder_mismatch_rejected(self):
        store, _ = filled_store(1, dim=8)
        with pytest.raises(StoreError):
            store.add(report("other"), Embedding(np.ones(8, dtype=np.float32), "different"))

    def test_duplicate_id_rejected(self):
        store, vectors = filled_store(1)
        with pytest.raises(StoreError):
            store.add(report("r00000"), Embedding(vectors[0], "test"))

    def test_200_random_vectors_match_brute_force(self):
        # DERIVED oracle: exhaustive scan with independent max-extraction.
        store, vectors = filled_store(200, dim=32, seed=7)
        queries = random_unit_vectors(10, 32, seed=99)
        for q in queries:
            hits = store.search(q, k=8)
            oracle = brute_force_topk(store, vectors, q, k=8)
            assert [(h.report.report_id, h.similarity) for h in hits] == oracle

    def test_tie_break_by_ascending_id(self):
        store = ReflectionStore(dimension=4, embedder_id="test")
        shared = np.array([0.5, 0.5, 0.5, 0.5], dtype=np.float32)
        for rid in ("zz", "aa", "mm"):
            store.add(report(rid), Embedding(shared.copy(), "test"))
        hits = store.search(shared, k=3)
        assert [h.report.report_id for h in hits] == ["aa", "mm", "zz"]

    def test_removed_reports_never_returned(self):
        store, vectors = filled_store(5)
        before = [(h.report.report_id, h.similarity) for h in store.search(vectors[0], k=5)]
        store.remove("r00002")
        after_ids = [h.report.report_id for h in store.search(vectors[0], k=5)]
        assert "r00002" not in after_ids
        # Re-adding restores the original results.
        store.add(report("r00002"), Embedding(vectors[2], "test"))
        restored = [(h.report.report_id, h.similarity) for h in store.search(vectors[0], k=5)]
        assert restored == before

    def test_remove_unknown_id(self):
        store, _ = filled_store(1)
        with pytest.raises(UnknownId):
            store.remove("missing")

    def test_assigned_ids_are_sequential(self):
        store = ReflectionStore(dimension=4, embedder_id="test")
        first = store.add(report(""), Embedding(np.ones(4, dtype=np.float32), "test"))
        second = store.add(report(""), Embedding(np.ones(4, dtype=np.float32), "test"))
        assert (first, second) == ("r000001", "r000002")


class TestPersistence:
    def test_empty_round_trip(self, tmp_path):
        store = ReflectionStore(dimension=8, embedder_id="test")
        store.persist(tmp_path / "s")
        loaded = ReflectionStore.load(tmp_path / "s")
        assert loaded.count == 0
        assert loaded.dimension == 8

    def test_fifty_report_round_trip_preserves_topk(self, tmp_path):
        store, vectors = filled_store(50, dim=16, seed=3)
        queries = random_unit_vectors(20, 16, seed=11)
        before = [
            [(h.report.report_id, h.similarity) for h in store.search(q, k=5)]
            for q in queries
        ]
        store.persist(tmp_path / "s")
        loaded = ReflectionStore.load(tmp_path / "s")
        after = [
            [(h.report.report_id, h.similarity) for h in loaded.search(q, k=5)]
            for q in queries
        ]
        assert before == after

    def test_vectors_bin_exact_size(self, tmp_path):
        store, _ = filled_store(50, dim=16)
        store.persist(tmp_path / "s")
        raw = (tmp_path / "s" / "vectors.bin").read_bytes()
        assert len(raw) == 50 * 16 * 4

    def test_truncated_vectors_rejected(self, tmp_path):
        store, _ = filled_store(10, dim=8)
        store.persist(tmp_path / "s")
        path = tmp_path / "s" / "vectors.bin"
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CorruptStore):
            ReflectionStore.load(tmp_path / "s")

    def test_report_count_mismatch_rejected(self, tmp_path):
        store, _ = filled_store(3, dim=8)
        store.persist(tmp_path / "s")
        reports_path = tmp_path / "s" / "reports.jsonl"
        lines = reports_path.read_text(encoding="utf-8").splitlines()
        reports_path.write_text("\n".join(lines[:-1]) + "\n", encoding="utf-8")
        with pytest.raises(CorruptStore):
            ReflectionStore.load(tmp_path / "s")

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(CorruptStore):
            ReflectionStore.load(tmp_path / "nothing")

    def test_manifest_fields(self, tmp_path):
        store, _ = filled_store(4, dim=8)
        store.persist(tmp_path / "s")
        manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
        assert manifest == {
            "dimension": 8, "count": 4, "embedder_id": "test", "version": 1,
        }


class TestStoreSet:
    def test_reports_partitioned_by_kind(self, tmp_path):
        store_set = StoreSet(tmp_path / "stores", LocalHashEmbedder())
        store_set.add_report(report("", kind=SectionKind.BACKGROUND, topic="alpha"))
        store_set.add_report(report("", kind=SectionKind.CONCLUSION, topic="beta"))
        assert store_set.store_for(SectionKind.BACKGROUND).count == 1
        assert store_set.store_for(SectionKind.CONCLUSION).count == 1
        hits = store_set.search(SectionKind.BACKGROUND, "alpha", k=5)
        assert len(hits) == 1

    def test_search_on_empty_store_returns_nothing(self, tmp_path):
        store_set = StoreSet(tmp_path / "stores", LocalHashEmbedder())
        assert store_set.search(SectionKind.METHOD, "anything", k=8) == []

    def test_persist_and_reload(self, tmp_path):
        root = tmp_path / "stores"
        store_set = StoreSet(root, LocalHashEmbedder())
        store_set.add_report(report("", kind=SectionKind.METHOD, topic="gamma"))
        store_set.persist()
        fresh = StoreSet(root, LocalHashEmbedder())
        assert fresh.counts() == {"method": 1}
        hits = fresh.search(SectionKind.METHOD, "gamma", k=1)
        assert hits[0].similarity == pytest.approx(1.0, abs=1e-9)

    def test_query_text_is_topic_plus_section(self):
        assert query_text(SectionKind.RELATED_WORK, "imaging") == "Related Work: imaging"
