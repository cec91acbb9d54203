"""Embedding-indexed store of reflection reports with exact top-k search.

The index is a flat float32 matrix scanned exhaustively: at the scale this
pipeline runs (thousands of reports) exact cosine search is fast, and
exactness makes retrieval testable. Stores persist as a directory of
``manifest.json`` + ``reports.jsonl`` + ``vectors.bin`` (row-major
little-endian float32, row i pairing with report line i).
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import requests

from .sections import SectionKind

FORMAT_VERSION = 1
LOCAL_EMBEDDER_DIM = 256
LOCAL_EMBEDDER_ID = f"hashed-token-count-{LOCAL_EMBEDDER_DIM}"


class StoreError(Exception):
    """Base class for store failures."""


class EmbeddingError(StoreError):
    """The input cannot be embedded (e.g. empty text)."""


class DimensionMismatch(StoreError):
    """A vector's dimension disagrees with the store manifest."""


class UnknownId(StoreError):
    """No stored report has the given id."""


class CorruptStore(StoreError):
    """On-disk files are inconsistent with the manifest."""


@dataclass
class Embedding:
    vector: np.ndarray
    embedder_id: str


@dataclass
class ReflectionReport:
    """The persisted unit of learned experience from one generation attempt."""

    report_id: str
    topic: str
    kind: SectionKind
    prediction: str
    reference: str
    evaluator_comments: str
    scores: dict[str, float]
    suggestions: dict[str, list[str]]
    created_at: str = ""

    def __post_init__(self) -> None:
        if not any(items for items in self.suggestions.values()):
            raise ValueError("a reflection report needs at least one non-empty suggestion list")

    def to_dict(self) -> dict:
        return {
            "report_id": self.report_id,
            "topic": self.topic,
            "kind": self.kind.value,
            "prediction": self.prediction,
            "reference": self.reference,
            "evaluator_comments": self.evaluator_comments,
            "scores": dict(self.scores),
            "suggestions": {dim: list(items) for dim, items in self.suggestions.items()},
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "ReflectionReport":
        return cls(
            report_id=record["report_id"],
            topic=record["topic"],
            kind=SectionKind(record["kind"]),
            prediction=record.get("prediction", ""),
            reference=record.get("reference", ""),
            evaluator_comments=record.get("evaluator_comments", ""),
            scores=dict(record.get("scores", {})),
            suggestions={d: list(i) for d, i in record.get("suggestions", {}).items()},
            created_at=record.get("created_at", ""),
        )


@dataclass
class FilterVerdict:
    keep: bool
    reason: str


@dataclass
class RetrievalHit:
    """A stored report paired with its similarity to the query."""

    report: ReflectionReport
    similarity: float
    filter_verdict: FilterVerdict | None = None


# ---------------------------------------------------------------------------
# Embedders

_TOKEN_RE = re.compile(r"\w+")


def _bucket(token: str) -> int:
    digest = hashlib.md5(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % LOCAL_EMBEDDER_DIM


class LocalHashEmbedder:
    """Deterministic fallback: hashed token counts, L2-normalized."""

    embedder_id = LOCAL_EMBEDDER_ID
    dimension = LOCAL_EMBEDDER_DIM

    def embed(self, text: str) -> Embedding:
        tokens = _TOKEN_RE.findall(text.lower())
        if not tokens:
            raise EmbeddingError("cannot embed empty or token-free text")
        vector = np.zeros(self.dimension, dtype=np.float32)
        for token in tokens:
            vector[_bucket(token)] += 1.0
        vector /= np.float32(np.linalg.norm(vector))
        return Embedding(vector=vector, embedder_id=self.embedder_id)


class HttpEmbedder:
    """OpenAI-compatible ``/v1/embeddings`` client."""

    def __init__(
        self,
        base_url: str | None = None,
        api_key: str | None = None,
        model: str = "text-embedding-3-small",
        dimension: int = 1536,
        timeout: float = 30.0,
    ) -> None:
        import os

        from .gateway import API_BASE_ENV, API_KEY_ENV, BackendUnavailable

        self.base_url = (base_url or os.environ.get(API_BASE_ENV, "")).rstrip("/")
        self.api_key = api_key or os.environ.get(API_KEY_ENV, "")
        self.model = model
        self.dimension = dimension
        self.embedder_id = f"http-{model}"
        self.timeout = timeout
        if not self.base_url:
            raise BackendUnavailable(f"no API base configured: set {API_BASE_ENV}")

    def embed(self, text: str) -> Embedding:
        from .gateway import BackendUnavailable

        if not text.strip():
            raise EmbeddingError("cannot embed empty text")
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            response = requests.post(
                f"{self.base_url}/v1/embeddings",
                json={"model": self.model, "input": text},
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(str(exc)) from exc
        if response.status_code != 200:
            raise BackendUnavailable(f"embedder status {response.status_code}")
        vector = np.asarray(
            response.json()["data"][0]["embedding"], dtype=np.float32
        )
        norm = float(np.linalg.norm(vector))
        if norm == 0.0:
            raise EmbeddingError("embedder returned a zero vector")
        return Embedding(vector=vector / np.float32(norm), embedder_id=self.embedder_id)


def embed(text: str, embedder) -> Embedding:
    """Embed text with the given embedder; unit-normalized output."""
    return embedder.embed(text)


def query_text(kind: SectionKind, topic: str) -> str:
    """Canonical retrieval text: topic concatenated with the section name."""
    return f"{kind.label}: {topic}"


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity computed in float64."""
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    denom = math.sqrt(float(np.dot(a64, a64))) * math.sqrt(float(np.dot(b64, b64)))
    if denom == 0.0:
        return 0.0
    return float(np.dot(a64, b64)) / denom


# ---------------------------------------------------------------------------
# The store


class ReflectionStore:
    """Flat exact-search store for one section kind's reports."""

    def __init__(self, dimension: int, embedder_id: str) -> None:
        self.dimension = dimension
        self.embedder_id = embedder_id
        self._ids: list[str] = []
        self._reports: dict[str, ReflectionReport] = {}
        self._vectors: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def count(self) -> int:
        return len(self._ids)

    def ids(self) -> list[str]:
        return list(self._ids)

    def get(self, report_id: str) -> ReflectionReport:
        try:
            return self._reports[report_id]
        except KeyError:
            raise UnknownId(report_id) from None

    def add(self, report: ReflectionReport, embedding: Embedding) -> str:
        if embedding.vector.shape != (self.dimension,):
            raise DimensionMismatch(
                f"vector dimension {embedding.vector.shape} != store dimension {self.dimension}"
            )
        if embedding.embedder_id != self.embedder_id:
            raise StoreError(
                f"embedder {embedding.embedder_id!r} != store embedder {self.embedder_id!r}"
            )
        report_id = report.report_id or self._fresh_id()
        if report_id in self._reports:
            raise StoreError(f"duplicate report id {report_id!r}")
        report.report_id = report_id
        self._ids.append(report_id)
        self._reports[report_id] = report
        self._vectors[report_id] = np.asarray(embedding.vector, dtype=np.float32)
        return report_id

    def remove(self, report_id: str) -> None:
        if report_id not in self._reports:
            raise UnknownId(report_id)
        self._ids.remove(report_id)
        del self._reports[report_id]
        del self._vectors[report_id]

    def _fresh_id(self) -> str:
        candidate_no = len(self._ids) + 1
        while f"r{candidate_no:06d}" in self._reports:
            candidate_no += 1
        return f"r{candidate_no:06d}"

    def search(self, query: Embedding | np.ndarray, k: int) -> list[RetrievalHit]:
        """Exact top-k by cosine similarity, ties broken by ascending id."""
        if k < 1:
            raise ValueError("k must be >= 1")
        vector = query.vector if isinstance(query, Embedding) else query
        if vector.shape != (self.dimension,):
            raise DimensionMismatch(
                f"query dimension {vector.shape} != store dimension {self.dimension}"
            )
        scored = [
            (cosine(self._vectors[rid], vector), rid) for rid in self._ids
        ]
        scored.sort(key=lambda pair: (-pair[0], pair[1]))
        return [
            RetrievalHit(report=self._reports[rid], similarity=sim)
            for sim, rid in scored[:k]
        ]

    # -- persistence --------------------------------------------------------

    def persist(self, path: str | Path) -> None:
        directory = Path(path)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {
            "dimension": self.dimension,
            "count": self.count,
            "embedder_id": self.embedder_id,
            "version": FORMAT_VERSION,
        }
        (directory / "manifest.json").write_text(
            json.dumps(manifest, indent=2) + "\n", encoding="utf-8"
        )
        with open(directory / "reports.jsonl", "w", encoding="utf-8") as handle:
            for rid in self._ids:
                handle.write(json.dumps(self._reports[rid].to_dict(), ensure_ascii=False))
                handle.write("\n")
        if self._ids:
            matrix = np.stack([self._vectors[rid] for rid in self._ids])
        else:
            matrix = np.zeros((0, self.dimension), dtype=np.float32)
        (directory / "vectors.bin").write_bytes(
            matrix.astype("<f4", copy=False).tobytes()
        )

    @classmethod
    def load(cls, path: str | Path) -> "ReflectionStore":
        directory = Path(path)
        try:
            manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise CorruptStore(f"missing manifest: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CorruptStore(f"unreadable manifest: {exc}") from exc
        dimension = int(manifest["dimension"])
        count = int(manifest["count"])
        store = cls(dimension=dimension, embedder_id=manifest["embedder_id"])

        raw = (directory / "vectors.bin").read_bytes()
        expected = count * dimension * 4
        if len(raw) != expected:
            raise CorruptStore(
                f"vectors.bin is {len(raw)} bytes, expected {expected} "
                f"(count {count} x dim {dimension} x 4)"
            )
        matrix = np.frombuffer(raw, dtype="<f4").reshape(count, dimension)

        lines = [
            line
            for line in (directory / "reports.jsonl").read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
        if len(lines) != count:
            raise CorruptStore(f"reports.jsonl has {len(lines)} rows, manifest says {count}")
        for row, line in enumerate(lines):
            report = ReflectionReport.from_dict(json.loads(line))
            store._ids.append(report.report_id)
            store._reports[report.report_id] = report
            store._vectors[report.report_id] = np.array(matrix[row], dtype=np.float32)
        return store


class StoreSet:
    """One store per section kind under a common root directory.

    Keeping retrieval within a section kind stops reflections about one
    section type from polluting guidance for another.
    """

    def __init__(self, root: str | Path, embedder) -> None:
        self.root = Path(root)
        self.embedder = embedder
        self._stores: dict[SectionKind, ReflectionStore] = {}

    def store_for(self, kind: SectionKind) -> ReflectionStore:
        if kind not in self._stores:
            directory = self.root / kind.value
            if (directory / "manifest.json").is_file():
                self._stores[kind] = ReflectionStore.load(directory)
            else:
                self._stores[kind] = ReflectionStore(
                    dimension=self.embedder.dimension,
                    embedder_id=self.embedder.embedder_id,
                )
        return self._stores[kind]

    def add_report(self, report: ReflectionReport) -> str:
        embedding = self.embedder.embed(query_text(report.kind, report.topic))
        return self.store_for(report.kind).add(report, embedding)

    def search(self, kind: SectionKind, topic: str, k: int) -> list[RetrievalHit]:
        store = self.store_for(kind)
        if store.count == 0:
            return []
        embedding = self.embedder.embed(query_text(kind, topic))
        return store.search(embedding, k)

    def persist(self) -> None:
        for kind, store in self._stores.items():
            store.persist(self.root / kind.value)

    def counts(self) -> dict[str, int]:
        result = {}
        for kind in SectionKind:
            directory = self.root / kind.value
            if kind in self._stores:
                result[kind.value] = self._stores[kind].count
            elif (directory / "manifest.json").is_file():
                result[kind.value] = ReflectionStore.load(directory).count
        return result


def iter_reports(store: ReflectionStore) -> Iterable[ReflectionReport]:
    for rid in store.ids():
        yield store.get(rid)
