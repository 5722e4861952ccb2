"""Knowledge corpus storage and label-level dense retrieval."""

from __future__ import annotations

import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

SOURCES = ("Wiki", "Research", "Guideline", "Book")
DEFAULT_TOP_K = 10
DEFAULT_DIM = 256

_TOKEN_RE = re.compile(r"[^\W_]+")


@dataclass(frozen=True)
class Document:
    id: str
    source: str
    title: str
    text: str

    def to_dict(self) -> dict:
        return {"id": self.id, "source": self.source, "title": self.title, "text": self.text}


@dataclass
class Corpus:
    documents: list[Document] = field(default_factory=list)
    rejected: list[tuple[int, str]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def get(self, doc_id: str) -> Document:
        for doc in self.documents:
            if doc.id == doc_id:
                return doc
        raise KeyError(doc_id)

    def by_id(self) -> dict[str, Document]:
        return {doc.id: doc for doc in self.documents}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for doc in self.documents:
                fh.write(json.dumps(doc.to_dict(), ensure_ascii=False) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        docs = []
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    docs.append(Document(**json.loads(line)))
        return cls(documents=docs)


def normalize_text(text: str) -> str:
    return " ".join(text.split()).lower()


def document_id(text: str) -> str:
    """Stable id derived from the normalized text."""
    return "doc-" + hashlib.sha1(normalize_text(text).encode("utf-8")).hexdigest()[:16]


def _check_record(record) -> str | None:
    if not isinstance(record, dict):
        return "record is not an object"
    source = record.get("source")
    if source not in SOURCES:
        return f"invalid source tag {source!r}"
    text = record.get("text")
    if not isinstance(text, str) or not text.strip():
        return "empty text"
    title = record.get("title", "")
    if not isinstance(title, str):
        return "title is not a string"
    return None


def ingest_corpus(records: Iterable[dict]) -> Corpus:
    """Build a deduplicated corpus from raw passage records.

    Texts that are equal after whitespace normalization and lowercasing
    collapse to a single document; the first occurrence wins. Malformed
    records are skipped and listed in ``Corpus.rejected`` as
    ``(record_index, reason)``.
    """
    corpus = Corpus()
    seen: set[str] = set()
    for index, record in enumerate(records):
        reason = _check_record(record)
        if reason is not None:
            logger.warning("rejecting record %d: %s", index, reason)
            corpus.rejected.append((index, reason))
            continue
        doc_id = document_id(record["text"])
        if doc_id in seen:
            continue
        seen.add(doc_id)
        corpus.documents.append(
            Document(id=doc_id, source=record["source"], title=record.get("title", ""), text=record["text"])
        )
    return corpus


def read_jsonl(path: str | Path) -> Iterable[dict]:
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError:
                # keep the line index aligned so the rejection report stays useful
                yield None


def tokenize(text: str) -> list[str]:
    return [m.group().lower() for m in _TOKEN_RE.finditer(text)]


def _hash_int(token: str, salt: bytes) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, person=salt).digest()
    return int.from_bytes(digest, "little")


class HashingEmbedder:
    """Deterministic signed bag-of-tokens embedder.

    Each lowercase alphanumeric token is hashed into one of ``dim``
    buckets and contributes +1 or -1 there, the sign coming from a second,
    independent hash.  Query and article roles share the same map.
    """

    lookup_by_id = False

    def __init__(self, dim: int = DEFAULT_DIM):
        if dim <= 0:
            raise ValueError("dim must be positive")
        self.dim = dim
        self.embedder_id = f"hashing-bow-{dim}"

    def bucket(self, token: str) -> int:
        return _hash_int(token, b"rad-bucket") % self.dim

    def sign(self, token: str) -> float:
        return 1.0 if _hash_int(token, b"rad-sign") & 1 else -1.0

    def embed(self, texts: Sequence[str], role: str = "article") -> np.ndarray:
        if role not in ("query", "article"):
            raise ValueError(f"unknown role {role!r}")
        out = np.zeros((len(texts), self.dim), dtype=np.float64)
        for row, text in enumerate(texts):
            for token in tokenize(text):
                out[row, self.bucket(token)] += self.sign(token)
        return out


class PrecomputedEmbedder:
    """Looks vectors up by key from a JSON-lines file of ``{"id", "vector"}``.

    Used to plug in vectors produced offline by a real dual encoder.
    Documents are looked up by document id and queries by disease name.
    """

    lookup_by_id = True

    def __init__(self, vectors: dict[str, np.ndarray], embedder_id: str = "precomputed"):
        dims = {len(v) for v in vectors.values()}
        if len(dims) > 1:
            raise ValueError(f"inconsistent vector lengths {sorted(dims)}")
        self.vectors = vectors
        self.dim = dims.pop() if dims else 0
        self.embedder_id = embedder_id

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "PrecomputedEmbedder":
        vectors = {}
        for record in read_jsonl(path):
            if record is None:
                raise ValueError(f"malformed line in {path}")
            vectors[record["id"]] = np.asarray(record["vector"], dtype=np.float64)
        return cls(vectors, embedder_id=f"precomputed:{Path(path).name}")

    def embed(self, texts: Sequence[str], role: str = "article") -> np.ndarray:
        rows = []
        for key in texts:
            if key not in self.vectors:
                raise KeyError(f"no precomputed vector for id {key!r}")
            rows.append(self.vectors[key])
        return np.asarray(rows, dtype=np.float64).reshape(len(rows), self.dim)


@dataclass(frozen=True)
class EmbeddingIndex:
    ids: tuple[str, ...]
    vectors: np.ndarray
    embedder_id: str

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


@dataclass
class RetrievalResult:
    disease_id: str
    k: int
    hits: list[tuple[str, float]]

    def to_dict(self) -> dict:
        return {"disease_id": self.disease_id, "k": self.k, "hits": [[i, s] for i, s in self.hits]}

    @classmethod
    def from_dict(cls, data: dict) -> "RetrievalResult":
        return cls(disease_id=data["disease_id"], k=data["k"], hits=[(i, float(s)) for i, s in data["hits"]])


def top_k(scores: np.ndarray, ids: Sequence[str], k: int) -> list[tuple[str, float]]:
    """Highest ``k`` scores, ties broken by ascending id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(ids) == 0:
        return []
    order = np.lexsort((np.asarray(ids), -scores))
    return [(ids[i], float(scores[i])) for i in order[:k]]


class DenseRetriever:
    """Inner-product top-k retrieval over an immutable embedding index.

    ``metric="cosine"`` L2-normalizes both sides before scoring.
    """

    def __init__(self, embedder=None, metric: str = "ip"):
        if metric not in ("ip", "cosine"):
            raise ValueError(f"unknown metric {metric!r}")
        self.embedder = embedder if embedder is not None else HashingEmbedder()
        self.metric = metric
        self.index_: EmbeddingIndex | None = None

    def fit(self, corpus: Corpus | Sequence[Document]) -> "DenseRetriever":
        docs = list(corpus)
        keys = [d.id if self.embedder.lookup_by_id else d.text for d in docs]
        vectors = self.embedder.embed(keys, role="article") if docs else np.zeros((0, self.embedder.dim))
        vectors = self._maybe_normalize(np.asarray(vectors, dtype=np.float64))
        vectors.setflags(write=False)
        self.index_ = EmbeddingIndex(tuple(d.id for d in docs), vectors, self.embedder.embedder_id)
        return self

    def _maybe_normalize(self, x: np.ndarray) -> np.ndarray:
        if self.metric == "ip":
            return x
        norms = np.linalg.norm(x, axis=-1, keepdims=True)
        return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)

    def scores(self, query_vector: np.ndarray) -> np.ndarray:
        if self.index_ is None:
            raise RuntimeError("retriever is not fitted; call fit(corpus) first")
        q = self._maybe_normalize(np.asarray(query_vector, dtype=np.float64))
        return self.index_.vectors @ q

    def retrieve_vector(self, query_vector: np.ndarray, k: int = DEFAULT_TOP_K, disease_id: str = "") -> RetrievalResult:
        if k < 1:
            raise ValueError("k must be >= 1")
        if self.index_ is None:
            raise RuntimeError("retriever is not fitted; call fit(corpus) first")
        if not self.index_.ids:
            logger.warning("retrieving from an empty corpus")
            return RetrievalResult(disease_id=disease_id, k=k, hits=[])
        return RetrievalResult(disease_id=disease_id, k=k, hits=top_k(self.scores(query_vector), self.index_.ids, k))

    def retrieve(self, disease_name: str, k: int = DEFAULT_TOP_K, disease_id: str | None = None) -> RetrievalResult:
        query = self.embedder.embed([disease_name], role="query")[0]
        return self.retrieve_vector(query, k=k, disease_id=disease_id if disease_id is not None else disease_name)
