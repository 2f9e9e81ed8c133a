"""Corpus ingestion, chunking and top-k passage retrieval.

Two backends sit behind :func:`build_index`:

* ``lexical``: an in-process BM25 inverted index (Okapi weighting with the
  non-negative ``ln(1 + (N - df + 0.5) / (df + 0.5))`` idf).
* ``embedding-endpoint``: dense cosine retrieval over vectors fetched from an
  OpenAI-compatible ``/embeddings`` endpoint (or any embedder callable).

Both return :class:`RetrievedPassage` lists ranked by score descending with
ties broken by ascending ``chunk_id``.
"""

from __future__ import annotations

import json
import math
import re
import time
from collections import Counter, defaultdict
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import numpy as np

from .io import atomic_write_text

LEXICAL = "lexical"
EMBEDDING = "embedding-endpoint"

DEFAULT_K = 5
DEFAULT_CHUNK_SIZE = 256
DEFAULT_OVERLAP = 32

_TERM_RE = re.compile(r"\w+", re.UNICODE)
_WS_TOKEN_RE = re.compile(r"\S+")


class RetrievalError(Exception):
    """Base class for corpus and retrieval failures."""

    retryable = False


class IngestionError(RetrievalError):
    pass


class IndexingError(RetrievalError):
    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class EndpointError(RetrievalError):
    """Embedding endpoint failed during a query; callers may retry."""

    retryable = True

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


@dataclass(frozen=True)
class Document:
    id: str
    title: str
    text: str


@dataclass(frozen=True)
class Chunk:
    chunk_id: str
    doc_id: str
    text: str
    token_count: int
    # character offsets of the chunk inside its document's text
    start: int = 0
    end: int = 0


@dataclass(frozen=True)
class RetrievedPassage:
    chunk_id: str
    score: float
    rank: int

    def to_dict(self) -> dict:
        return {"chunk_id": self.chunk_id, "score": self.score, "rank": self.rank}

    @classmethod
    def from_dict(cls, d: dict) -> "RetrievedPassage":
        return cls(chunk_id=d["chunk_id"], score=float(d["score"]), rank=int(d["rank"]))


@dataclass
class RetrieverConfig:
    backend: str = LEXICAL
    k: int = DEFAULT_K
    k1: float = 1.2
    b: float = 0.75
    endpoint: str | None = None
    model: str | None = None
    # Early-knowledge retrieval uses ``k`` unless this override is set.
    early_k: int | None = None
    timeout: float = 30.0

    def __post_init__(self):
        if self.backend not in (LEXICAL, EMBEDDING):
            raise ValueError(f"unknown retriever backend {self.backend!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.early_k is not None and self.early_k < 1:
            raise ValueError("early_k must be >= 1")
        if self.k1 <= 0:
            raise ValueError("k1 must be > 0")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError("b must lie in [0, 1]")
        if self.backend == EMBEDDING and not (self.endpoint and self.model):
            raise ValueError("embedding-endpoint backend needs endpoint and model")

    def to_dict(self) -> dict:
        return {
            "backend": self.backend,
            "k": self.k,
            "k1": self.k1,
            "b": self.b,
            "endpoint": self.endpoint,
            "model": self.model,
            "early_k": self.early_k,
        }


@dataclass
class Corpus:
    documents: list[Document] = field(default_factory=list)
    chunks: list[Chunk] = field(default_factory=list)

    def __post_init__(self):
        self._by_id = {c.chunk_id: c for c in self.chunks}

    def __len__(self) -> int:
        return len(self.chunks)

    def chunk(self, chunk_id: str) -> Chunk:
        return self._by_id[chunk_id]

    def get(self, chunk_id: str) -> Chunk | None:
        return self._by_id.get(chunk_id)

    def text_of(self, chunk_id: str) -> str:
        return self._by_id[chunk_id].text


def whitespace_tokens(text: str) -> list[re.Match]:
    return list(_WS_TOKEN_RE.finditer(text))


def terms(text: str) -> list[str]:
    """Lowercased word terms used by the lexical index."""
    return _TERM_RE.findall(text.lower())


def chunk_document(doc: Document, chunk_size: int = DEFAULT_CHUNK_SIZE,
                   overlap: int = DEFAULT_OVERLAP) -> list[Chunk]:
    """Split one document into sliding windows of whitespace tokens.

    Windows advance by ``chunk_size - overlap`` tokens; the last window ends at
    the final token. Chunk text is the original slice of the document, so the
    spacing inside a chunk is preserved.
    """
    if not chunk_size > overlap >= 0:
        raise ValueError("need chunk_size > overlap >= 0")
    toks = whitespace_tokens(doc.text)
    chunks: list[Chunk] = []
    if not toks:
        return chunks
    stride = chunk_size - overlap
    start = 0
    ordinal = 0
    while True:
        window = toks[start:start + chunk_size]
        lo, hi = window[0].start(), window[-1].end()
        chunks.append(Chunk(
            chunk_id=f"{doc.id}#{ordinal}",
            doc_id=doc.id,
            text=doc.text[lo:hi],
            token_count=len(window),
            start=lo,
            end=hi,
        ))
        if start + chunk_size >= len(toks):
            break
        start += stride
        ordinal += 1
    return chunks


def read_documents(path: str | Path) -> list[Document]:
    docs: list[Document] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestionError(f"{path}:{lineno}: malformed record ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise IngestionError(f"{path}:{lineno}: record is not an object")
            doc_id, text = rec.get("id"), rec.get("text")
            if not isinstance(doc_id, str) or not doc_id:
                raise IngestionError(f"{path}:{lineno}: missing or empty 'id'")
            if not isinstance(text, str) or not text.strip():
                raise IngestionError(f"{path}:{lineno}: missing or empty 'text'")
            if doc_id in seen:
                raise IngestionError(f"{path}:{lineno}: duplicate id {doc_id!r}")
            seen.add(doc_id)
            docs.append(Document(id=doc_id, title=str(rec.get("title", "")), text=text))
    return docs


def ingest_corpus(path: str | Path, chunk_size: int = DEFAULT_CHUNK_SIZE,
                  overlap: int = DEFAULT_OVERLAP) -> Corpus:
    """Read a line-delimited ``{"id", "title", "text"}`` file into a chunked corpus."""
    if not chunk_size > overlap >= 0:
        raise ValueError("need chunk_size > overlap >= 0")
    docs = read_documents(path)
    chunks = [c for d in docs for c in chunk_document(d, chunk_size, overlap)]
    return Corpus(documents=docs, chunks=chunks)


def _rank(scored: Iterable[tuple[str, float]], k: int) -> list[RetrievedPassage]:
    ordered = sorted(scored, key=lambda item: (-item[1], item[0]))[:k]
    return [RetrievedPassage(chunk_id=cid, score=s, rank=i)
            for i, (cid, s) in enumerate(ordered, start=1)]


class LexicalIndex:
    """BM25 over an inverted index; only chunks sharing a query term are scored."""

    backend = LEXICAL

    def __init__(self, corpus: Corpus, k1: float = 1.2, b: float = 0.75):
        if len(corpus) == 0:
            raise IndexingError("empty corpus")
        self.corpus = corpus
        self.k1 = k1
        self.b = b
        self.postings: dict[str, list[tuple[int, int]]] = defaultdict(list)
        self.doc_lengths: list[int] = []
        for i, chunk in enumerate(corpus.chunks):
            tf = Counter(terms(chunk.text))
            self.doc_lengths.append(sum(tf.values()))
            for term, n in tf.items():
                self.postings[term].append((i, n))
        self.postings = dict(self.postings)
        self.n_chunks = len(corpus.chunks)
        self.avgdl = sum(self.doc_lengths) / self.n_chunks
        self.df = {t: len(p) for t, p in self.postings.items()}

    def idf(self, term: str) -> float:
        df = self.df.get(term, 0)
        return math.log(1.0 + (self.n_chunks - df + 0.5) / (df + 0.5))

    def search(self, query: str, k: int) -> list[RetrievedPassage]:
        scores: dict[int, float] = defaultdict(float)
        for term, qtf in Counter(terms(query)).items():
            plist = self.postings.get(term)
            if not plist:
                continue
            idf = self.idf(term)
            for i, tf in plist:
                norm = 1.0 - self.b + self.b * self.doc_lengths[i] / self.avgdl if self.avgdl else 1.0
                scores[i] += qtf * idf * tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
        chunks = self.corpus.chunks
        return _rank(((chunks[i].chunk_id, s) for i, s in scores.items()), k)

    def stats(self) -> dict:
        return {"documents": len(self.corpus.documents), "chunks": self.n_chunks,
                "terms": len(self.postings)}


Embedder = Callable[[Sequence[str]], Sequence[Sequence[float]]]


class HttpEmbedder:
    """Client for an OpenAI-compatible ``POST /embeddings`` endpoint."""

    def __init__(self, endpoint: str, model: str, *, api_key: str | None = None,
                 timeout: float = 30.0, max_retries: int = 3, backoff: float = 0.5,
                 client: httpx.Client | None = None, sleep: Callable[[float], None] = time.sleep):
        self.endpoint = endpoint
        self.model = model
        self.max_retries = max_retries
        self.backoff = backoff
        self._sleep = sleep
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._client = client or httpx.Client(timeout=timeout, headers=headers)

    def __call__(self, texts: Sequence[str]) -> list[list[float]]:
        payload = {"model": self.model, "input": list(texts)}
        last_status = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._client.post(self.endpoint, json=payload)
            except httpx.TransportError as exc:
                last_status = None
                err = f"transport failure: {exc}"
            else:
                if resp.status_code == 200:
                    return self._parse(resp, len(texts))
                last_status = resp.status_code
                err = f"HTTP {resp.status_code}"
                if resp.status_code != 429 and resp.status_code < 500:
                    break
            if attempt < self.max_retries:
                self._sleep(self.backoff * 2 ** attempt)
        raise EndpointError(f"embedding endpoint {self.endpoint}: {err}", status=last_status)

    @staticmethod
    def _parse(resp: httpx.Response, n: int) -> list[list[float]]:
        try:
            data = resp.json()["data"]
            rows = sorted(data, key=lambda r: r.get("index", 0))
            vecs = [[float(x) for x in r["embedding"]] for r in rows]
        except (ValueError, KeyError, TypeError) as exc:
            raise EndpointError(f"malformed embeddings response: {exc}", status=resp.status_code) from None
        if len(vecs) != n:
            raise EndpointError(f"expected {n} embeddings, got {len(vecs)}", status=resp.status_code)
        return vecs


class EmbeddingIndex:
    """Dense cosine retrieval; chunk vectors are fetched once at build time."""

    backend = EMBEDDING

    def __init__(self, corpus: Corpus, embedder: Embedder, batch_size: int = 64):
        self.corpus = corpus
        self.embedder = embedder
        texts = [c.text for c in corpus.chunks]
        vecs: list[Sequence[float]] = []
        try:
            for i in range(0, len(texts), batch_size):
                vecs.extend(embedder(texts[i:i + batch_size]))
        except EndpointError as exc:
            raise IndexingError(f"indexing failed: {exc}", status=exc.status) from exc
        mat = np.asarray(vecs, dtype=float).reshape(len(texts), -1) if texts else np.zeros((0, 0))
        norms = np.linalg.norm(mat, axis=1, keepdims=True) if texts else np.zeros((0, 1))
        self.vectors = np.divide(mat, norms, out=np.zeros_like(mat), where=norms > 0)

    def search(self, query: str, k: int) -> list[RetrievedPassage]:
        if not len(self.corpus):
            return []
        q = np.asarray(self.embedder([query])[0], dtype=float)
        qn = np.linalg.norm(q)
        if qn == 0:
            return []
        sims = self.vectors @ (q / qn)
        chunks = self.corpus.chunks
        return _rank(((chunks[i].chunk_id, float(s)) for i, s in enumerate(sims)), k)

    def stats(self) -> dict:
        return {"documents": len(self.corpus.documents), "chunks": len(self.corpus),
                "vectors": int(self.vectors.shape[0])}


Index = LexicalIndex | EmbeddingIndex


def build_index(corpus: Corpus, config: RetrieverConfig, embedder: Embedder | None = None,
                api_key: str | None = None) -> Index:
    if config.backend == LEXICAL:
        return LexicalIndex(corpus, k1=config.k1, b=config.b)
    if embedder is None:
        embedder = HttpEmbedder(config.endpoint, config.model, api_key=api_key,
                                timeout=config.timeout)
    return EmbeddingIndex(corpus, embedder)


def retrieve(index: Index, query: str, k: int) -> list[RetrievedPassage]:
    """Top-k passages for ``query``; fewer when fewer chunks match."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not query or not query.strip():
        raise ValueError("empty query")
    return index.search(query, k)


def early_knowledge(index: Index, question: str, config: RetrieverConfig) -> list[RetrievedPassage]:
    """Passages retrieved for the question itself, before any reasoning turn."""
    if not question or not question.strip():
        raise ValueError("empty question")
    return retrieve(index, question, config.early_k or config.k)


def save_index(index: LexicalIndex, path: str | Path, config: RetrieverConfig) -> None:
    """Persist a lexical index (chunks + postings) as JSON."""
    corpus = index.corpus
    payload = {
        "config": config.to_dict(),
        "documents": [{"id": d.id, "title": d.title, "text": d.text} for d in corpus.documents],
        "chunks": [{"chunk_id": c.chunk_id, "doc_id": c.doc_id, "text": c.text,
                    "token_count": c.token_count, "start": c.start, "end": c.end}
                   for c in corpus.chunks],
        "postings": {t: p for t, p in sorted(index.postings.items())},
        "doc_lengths": index.doc_lengths,
    }
    atomic_write_text(path, json.dumps(payload, sort_keys=True))


def load_index(path: str | Path) -> tuple[LexicalIndex, RetrieverConfig]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    cfg = RetrieverConfig(**{k: v for k, v in payload["config"].items()})
    corpus = Corpus(
        documents=[Document(**d) for d in payload["documents"]],
        chunks=[Chunk(**c) for c in payload["chunks"]],
    )
    return LexicalIndex(corpus, k1=cfg.k1, b=cfg.b), cfg
