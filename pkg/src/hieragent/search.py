"""Search backends behind the Toolcaller.

``FixtureCorpus`` is a deterministic lexical retriever over a JSON-lines
corpus. Scoring: for each distinct query term present in a document,
``(1 + ln tf) * ln(1 + N / df)``, summed. Tokens are lowercased runs of word
characters. Ties go to the smaller ``doc_id``. Snippets are the best-scoring
window of two consecutive body sentences.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import tempfile
import threading
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol

from .transport import TransportError, with_retries

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"\w+")
_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


@dataclass(frozen=True)
class SearchHit:
    title: str
    snippet: str
    source: str


class SearchClient(Protocol):
    def search(self, query: str, top_k: int) -> list[SearchHit]: ...


@dataclass(frozen=True)
class Document:
    doc_id: str
    title: str
    body: str


class FixtureCorpus:
    def __init__(self, documents: Iterable[Document]):
        self.documents = list(documents)
        if not self.documents:
            raise ValueError("corpus is empty")
        ids = [d.doc_id for d in self.documents]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate doc_id in corpus")
        for d in self.documents:
            if not d.body.strip():
                raise ValueError(f"document {d.doc_id} has an empty body")
        # term -> [(doc index, term frequency)]
        index: dict[str, list[tuple[int, int]]] = defaultdict(list)
        for i, doc in enumerate(self.documents):
            for term, tf in Counter(tokenize(doc.title + " " + doc.body)).items():
                index[term].append((i, tf))
        self.index = dict(index)

    @classmethod
    def from_jsonl(cls, path: str | os.PathLike) -> FixtureCorpus:
        docs = []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    docs.append(Document(str(rec["doc_id"]), rec.get("title", ""), rec["body"]))
        return cls(docs)

    def idf(self, term: str) -> float:
        df = len(self.index.get(term, ()))
        return math.log(1 + len(self.documents) / df) if df else 0.0

    def scores(self, query: str) -> dict[int, float]:
        scores: dict[int, float] = defaultdict(float)
        for term in sorted(set(tokenize(query))):
            w = self.idf(term)
            for i, tf in self.index.get(term, ()):
                scores[i] += (1 + math.log(tf)) * w
        return dict(scores)

    def best_window(self, doc: Document, query: str, width: int = 2) -> str:
        """The run of ``width`` consecutive body sentences scoring highest for the query."""
        terms = set(tokenize(query))
        sentences = [s for s in _SENTENCE_RE.split(doc.body.strip()) if s.strip()]
        best, best_score = " ".join(sentences[:width]), 0.0
        for i in range(max(1, len(sentences) - width + 1)):
            window = " ".join(sentences[i : i + width])
            counts = Counter(tokenize(window))
            score = sum((1 + math.log(counts[t])) * self.idf(t) for t in terms if counts[t])
            if score > best_score:
                best, best_score = window, score
        return best

    def search(self, query: str, top_k: int) -> list[SearchHit]:
        return fixture_search(self, query, top_k)


def fixture_search(corpus: FixtureCorpus, query: str, top_k: int) -> list[SearchHit]:
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    scores = corpus.scores(query)
    ranked = sorted(scores, key=lambda i: (-scores[i], corpus.documents[i].doc_id))
    hits = []
    for i in ranked[:top_k]:
        doc = corpus.documents[i]
        hits.append(SearchHit(doc.title, corpus.best_window(doc, query), doc.doc_id))
    return hits


def normalize_query(query: str) -> str:
    return " ".join(query.lower().split())


class CacheMiss(LookupError):
    pass


class CachedSearchClient:
    """Memoizing wrapper with an optional content-addressed disk store.

    In ``replay`` mode the inner client is never called; a miss raises
    ``CacheMiss``. Unreadable store entries are skipped with a warning.
    """

    def __init__(self, inner: SearchClient | None, store: str | os.PathLike | None = None,
                 replay: bool = False):
        if inner is None and not replay:
            raise ValueError("an inner client is required unless replaying")
        self.inner = inner
        self.store = Path(store) if store is not None else None
        self.replay = replay
        self.inner_calls = 0
        self._memory: dict[tuple[str, int], list[SearchHit]] = {}
        self._lock = threading.Lock()
        if self.store is not None:
            self.store.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(query: str, top_k: int) -> tuple[str, int]:
        return normalize_query(query), top_k

    def _path(self, key: tuple[str, int]) -> Path:
        digest = hashlib.sha256(json.dumps(list(key)).encode()).hexdigest()
        return self.store / f"{digest}.json"

    def _load(self, key: tuple[str, int]) -> list[SearchHit] | None:
        if self.store is None:
            return None
        path = self._path(key)
        if not path.exists():
            return None
        try:
            rec = json.loads(path.read_text(encoding="utf-8"))
            if [rec["query"], rec["top_k"]] != list(key):
                raise ValueError("key mismatch")
            return [SearchHit(**h) for h in rec["hits"]]
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("ignoring corrupt cache entry %s: %s", path.name, exc)
            return None

    def _save(self, key: tuple[str, int], hits: list[SearchHit]) -> None:
        if self.store is None:
            return
        rec = {"query": key[0], "top_k": key[1], "hits": [asdict(h) for h in hits]}
        fd, tmp = tempfile.mkstemp(dir=self.store, suffix=".tmp")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(rec, fh, ensure_ascii=False, sort_keys=True)
        os.replace(tmp, self._path(key))

    def search(self, query: str, top_k: int) -> list[SearchHit]:
        key = self.key(query, top_k)
        hits = self._memory.get(key)
        if hits is not None:
            return list(hits)
        hits = self._load(key)
        if hits is None:
            if self.replay:
                raise CacheMiss(f"no recorded result for {key!r}")
            hits = self.inner.search(query, top_k)
            with self._lock:
                self.inner_calls += 1
                self._save(key, hits)
        with self._lock:
            self._memory[key] = list(hits)
        return list(hits)


def cached_search(client: CachedSearchClient, query: str, top_k: int) -> list[SearchHit]:
    return client.search(query, top_k)


def default_hit_adapter(payload: dict[str, Any]) -> list[SearchHit]:
    """Map a ``{"results": [{title, snippet|content, url|link}]}`` response."""
    hits = []
    for r in payload.get("results", []):
        snippet = (r.get("snippet") or r.get("content") or "").strip()
        source = r.get("url") or r.get("link") or r.get("id")
        if snippet and source:
            hits.append(SearchHit(r.get("title", ""), snippet, str(source)))
    return hits


class HttpSearchClient:
    """JSON search API client. Endpoint and key default to ``SEARCH_API_URL`` / ``SEARCH_API_KEY``."""

    def __init__(self, url: str | None = None, api_key: str | None = None,
                 adapter: Callable[[dict[str, Any]], list[SearchHit]] = default_hit_adapter,
                 session=None, timeout: float = 30.0, attempts: int = 3,
                 backoff: float = 0.5, max_inflight: int = 8):
        import requests

        self.url = url or os.environ.get("SEARCH_API_URL")
        if not self.url:
            raise ValueError("no search endpoint configured (set SEARCH_API_URL)")
        self.api_key = api_key if api_key is not None else os.environ.get("SEARCH_API_KEY")
        self.adapter = adapter
        self.session = session or requests.Session()
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self._slots = threading.BoundedSemaphore(max_inflight)

    def _post(self, body: dict[str, Any]) -> dict[str, Any]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        with self._slots:
            resp = self.session.post(self.url, json=body, headers=headers, timeout=self.timeout)
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransportError(f"search endpoint returned HTTP {resp.status_code}")
        resp.raise_for_status()
        return resp.json()

    def search(self, query: str, top_k: int) -> list[SearchHit]:
        payload = with_retries(lambda: self._post({"query": query, "top_k": top_k}),
                               attempts=self.attempts, backoff=self.backoff)
        seen = set()
        hits = []
        for h in self.adapter(payload):
            if h.source not in seen:
                seen.add(h.source)
                hits.append(h)
        return hits[:top_k]
