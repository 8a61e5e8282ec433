"""Keyword-cached knowledge base over an external document source.

The internal check consults a set of folded keywords; a miss fetches up to
five article-section and five case-section documents, segments and embeds
them, and appends the vectors to the shared flat index. A keyword is only
recorded as fetched once its whole ingestion batch committed, so failures
leave no partial state behind.
"""
from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import dataclass
from enum import Enum
from html.parser import HTMLParser
from pathlib import Path
from typing import Callable, Protocol
from urllib.parse import quote, urljoin

import requests

from .chunking import (
    DEFAULT_CHUNK_CHARS,
    DEFAULT_OVERLAP_CHARS,
    Document,
    Section,
    embed_chunks,
    segment,
)
from .domain import canonical_fold
from .errors import (
    ConfigError,
    CorruptionError,
    EmbeddingError,
    FetchError,
    IngestionError,
    TransportError,
    ValidationError,
)
from .index import FlatIndex
from .providers import Embedder

log = logging.getLogger(__name__)

ARTICLES_PER_KEYWORD = 5
CASES_PER_KEYWORD = 5

MIN_POLITENESS_DELAY_MS = 1000

INDEX_FILENAME = "index.rdrx"
DOCS_FILENAME = "documents.json"
META_FILENAME = "meta.json"


class DocumentSource(Protocol):
    def fetch(self, keyword: str) -> list[Document]: ...


class RetrievalHit(str, Enum):
    INTERNAL = "internal"
    FETCHED = "fetched"


@dataclass(frozen=True)
class RetrievalOutcome:
    keyword: str
    hit: RetrievalHit
    new_docs: int

    def __post_init__(self) -> None:
        if self.hit is RetrievalHit.INTERNAL and self.new_docs != 0:
            raise ValidationError("an internal hit cannot report new documents")


@dataclass(frozen=True)
class FetchLogEntry:
    keyword: str
    timestamp: float
    doc_count: int


def fetch_documents(
    source: DocumentSource,
    keyword: str,
    *,
    attempts: int = 3,
    backoff_s: float = 1.0,
    sleep: Callable[[float], None] = time.sleep,
) -> list[Document]:
    """Fetch documents for a keyword, capped at 5 per section.

    Results are deduplicated by source_url and kept in the source's own
    order (the source's ranking is taken as relevance). Transport failures
    are retried with exponential backoff before giving up.
    """
    if not keyword or not keyword.strip():
        raise ValidationError("cannot fetch documents for an empty keyword")
    last: Exception | None = None
    for attempt in range(attempts):
        if attempt:
            sleep(backoff_s * 2 ** (attempt - 1))
        try:
            docs = source.fetch(keyword)
            break
        except TransportError as exc:
            last = exc
    else:
        raise FetchError(f"source failed for keyword {keyword!r}: {last}") from last
    seen: set[str] = set()
    taken = {Section.ARTICLE: 0, Section.CASE: 0}
    limits = {Section.ARTICLE: ARTICLES_PER_KEYWORD, Section.CASE: CASES_PER_KEYWORD}
    out: list[Document] = []
    for doc in docs:
        if doc.source_url in seen:
            continue
        seen.add(doc.source_url)
        if taken[doc.section] >= limits[doc.section]:
            continue
        taken[doc.section] += 1
        out.append(doc)
    if not out:
        log.info("keyword %r returned no documents", keyword)
    return out


class KnowledgeBase:
    """Keyword-keyed document cache feeding chunker, embedder, and index.

    Concurrency: lookups for the same folded keyword serialize on a
    per-keyword lock, so concurrent requests cause a single fetch; distinct
    keywords may fetch in parallel. The index enforces its own single-writer
    contract for the final insert.
    """

    def __init__(
        self,
        dim: int | None = None,
        *,
        chunk_chars: int = DEFAULT_CHUNK_CHARS,
        overlap_chars: int = DEFAULT_OVERLAP_CHARS,
        index: FlatIndex | None = None,
    ):
        if overlap_chars < 0 or overlap_chars >= chunk_chars:
            raise ConfigError(
                f"overlap_chars must satisfy 0 <= overlap < chunk, got "
                f"overlap={overlap_chars}, chunk={chunk_chars}"
            )
        if index is None:
            index = FlatIndex(dim if dim is not None else 384)
        elif dim is not None and index.dim != dim:
            raise ConfigError(f"index dim {index.dim} does not match requested dim {dim}")
        self.index = index
        self.chunk_chars = chunk_chars
        self.overlap_chars = overlap_chars
        self.doc_store: dict[str, Document] = {}
        self.fetched_keywords: set[str] = set()
        self.fetch_log: list[FetchLogEntry] = []
        self._chunk_texts: dict[str, str] = {}
        self._state_lock = threading.Lock()
        self._keyword_locks: dict[str, threading.Lock] = {}

    # -- queries -------------------------------------------------------------

    def has_keyword(self, keyword: str) -> bool:
        return canonical_fold(keyword) in self.fetched_keywords

    def chunk_text(self, chunk_id: str) -> str:
        try:
            return self._chunk_texts[chunk_id]
        except KeyError:
            raise KeyError(f"unknown chunk id {chunk_id}") from None

    def stats(self) -> dict[str, int]:
        return {
            "keywords": len(self.fetched_keywords),
            "documents": len(self.doc_store),
            "chunks": self.index.count,
            "dim": self.index.dim,
        }

    # -- mutation ------------------------------------------------------------

    def lookup_or_fetch(
        self, keyword: str, source: DocumentSource, embedder: Embedder
    ) -> RetrievalOutcome:
        """Serve a keyword from the cache, fetching and ingesting on a miss.

        A failed fetch or ingest leaves the keyword unrecorded so a later
        attempt retries from scratch.
        """
        if not keyword or not keyword.strip():
            raise ValidationError("cannot look up an empty keyword")
        folded = canonical_fold(keyword)
        with self._state_lock:
            if folded in self.fetched_keywords:
                return RetrievalOutcome(keyword, RetrievalHit.INTERNAL, 0)
            kw_lock = self._keyword_locks.setdefault(folded, threading.Lock())
        with kw_lock:
            with self._state_lock:
                if folded in self.fetched_keywords:
                    return RetrievalOutcome(keyword, RetrievalHit.INTERNAL, 0)
            docs = fetch_documents(source, keyword)
            self.ingest(keyword, docs, embedder)
            return RetrievalOutcome(keyword, RetrievalHit.FETCHED, len(docs))

    def ingest(self, keyword: str, docs: list[Document], embedder: Embedder) -> int:
        """Segment, embed, and index fetched documents; returns chunks added.

        All fallible work happens before any state mutation, so a failure
        registers nothing. Documents already in the store (same doc_id,
        fetched under another keyword) are skipped rather than re-indexed.
        A keyword with zero documents is still recorded as fetched so an
        unproductive term is not fetched again within the run.
        """
        folded = canonical_fold(keyword)
        fresh = [d for d in docs if d.doc_id not in self.doc_store]
        embedded = []
        texts: dict[str, str] = {}
        try:
            for doc in fresh:
                chunks = segment(doc, self.chunk_chars, self.overlap_chars)
                embedded.extend(embed_chunks(embedder, chunks))
                texts.update({c.chunk_id: c.text for c in chunks})
        except EmbeddingError as exc:
            raise IngestionError(f"ingesting keyword {keyword!r} failed: {exc}") from exc
        with self._state_lock:
            if embedded:
                self.index.insert(embedded, folded)
            self.doc_store.update({d.doc_id: d for d in fresh})
            self._chunk_texts.update(texts)
            self.fetched_keywords.add(folded)
            self.fetch_log.append(FetchLogEntry(keyword, time.time(), len(docs)))
        return len(embedded)

    # -- persistence ---------------------------------------------------------

    def save(self, store_dir: str | Path) -> None:
        store_dir = Path(store_dir)
        store_dir.mkdir(parents=True, exist_ok=True)
        self.index.save(store_dir / INDEX_FILENAME)
        docs = {
            doc_id: {
                "doc_id": d.doc_id,
                "keyword": d.keyword,
                "section": d.section.value,
                "title": d.title,
                "body": d.body,
                "source_url": d.source_url,
            }
            for doc_id, d in self.doc_store.items()
        }
        (store_dir / DOCS_FILENAME).write_text(
            json.dumps(docs, sort_keys=True, ensure_ascii=False), encoding="utf-8"
        )
        meta = {
            "chunk_chars": self.chunk_chars,
            "overlap_chars": self.overlap_chars,
            "fetched_keywords": sorted(self.fetched_keywords),
            "fetch_log": [
                {"keyword": e.keyword, "timestamp": e.timestamp, "doc_count": e.doc_count}
                for e in self.fetch_log
            ],
        }
        (store_dir / META_FILENAME).write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, store_dir: str | Path) -> "KnowledgeBase":
        store_dir = Path(store_dir)
        try:
            meta = json.loads((store_dir / META_FILENAME).read_text(encoding="utf-8"))
            raw_docs = json.loads((store_dir / DOCS_FILENAME).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise CorruptionError(f"cannot load knowledge base from {store_dir}: {exc}") from exc
        index = FlatIndex.load(store_dir / INDEX_FILENAME)
        kb = cls(
            chunk_chars=meta["chunk_chars"],
            overlap_chars=meta["overlap_chars"],
            index=index,
        )
        kb.fetched_keywords = set(meta.get("fetched_keywords", []))
        kb.fetch_log = [
            FetchLogEntry(e["keyword"], e["timestamp"], e["doc_count"])
            for e in meta.get("fetch_log", [])
        ]
        for raw in raw_docs.values():
            doc = Document(
                doc_id=raw["doc_id"],
                keyword=raw["keyword"],
                section=Section(raw["section"]),
                title=raw["title"],
                body=raw["body"],
                source_url=raw["source_url"],
            )
            kb.doc_store[doc.doc_id] = doc
            for chunk in segment(doc, kb.chunk_chars, kb.overlap_chars):
                kb._chunk_texts[chunk.chunk_id] = chunk.text
        missing = [cid for cid, _, _ in kb.index.entries() if cid not in kb._chunk_texts]
        if missing:
            raise CorruptionError(
                f"{store_dir}: index holds chunks with no stored document: {missing[:5]}"
            )
        return kb


# ---------------------------------------------------------------------------
# Fixture source: a local corpus directory
# ---------------------------------------------------------------------------


class FixtureSource:
    """Reads a corpus directory of one-JSON-file-per-document fixtures.

    Each file holds {doc_id, keyword, section, title, body, source_url}.
    Documents are served for keywords that fold-match theirs, in filename
    order. Keywords listed in ``fail_keywords`` raise FetchError instead,
    which makes degradation paths exercisable from configuration alone.
    """

    def __init__(self, corpus_dir: str | Path, fail_keywords: tuple[str, ...] = ()):
        self.corpus_dir = Path(corpus_dir)
        if not self.corpus_dir.is_dir():
            raise ConfigError(f"corpus directory {self.corpus_dir} does not exist")
        self._fail = {canonical_fold(k) for k in fail_keywords}
        self._by_keyword: dict[str, list[Document]] = {}
        for path in sorted(self.corpus_dir.glob("*.json")):
            try:
                raw = json.loads(path.read_text(encoding="utf-8"))
                doc = Document(
                    doc_id=raw["doc_id"],
                    keyword=raw["keyword"],
                    section=Section(raw["section"]),
                    title=raw.get("title", ""),
                    body=raw["body"],
                    source_url=raw["source_url"],
                )
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise ConfigError(f"bad corpus document {path}: {exc}") from exc
            self._by_keyword.setdefault(canonical_fold(doc.keyword), []).append(doc)

    def fetch(self, keyword: str) -> list[Document]:
        folded = canonical_fold(keyword)
        if folded in self._fail:
            raise FetchError(f"fixture source configured to fail for keyword {keyword!r}")
        return list(self._by_keyword.get(folded, []))


# ---------------------------------------------------------------------------
# Live source: keyword search against a public reference site
# ---------------------------------------------------------------------------


_BLOCK_TAGS = {
    "p", "div", "br", "li", "ul", "ol", "tr", "table", "section", "article",
    "h1", "h2", "h3", "h4", "h5", "h6", "blockquote",
}
_SKIP_TAGS = {"script", "style", "noscript", "template", "title"}


class _TextExtractor(HTMLParser):
    def __init__(self) -> None:
        super().__init__(convert_charrefs=True)
        self.parts: list[str] = []
        self._skip_depth = 0

    def handle_starttag(self, tag, attrs):
        if tag in _SKIP_TAGS:
            self._skip_depth += 1
        elif tag in _BLOCK_TAGS:
            self.parts.append("\n")

    def handle_endtag(self, tag):
        if tag in _SKIP_TAGS and self._skip_depth:
            self._skip_depth -= 1
        elif tag in _BLOCK_TAGS:
            self.parts.append("\n")

    def handle_data(self, data):
        if not self._skip_depth:
            self.parts.append(data)


def html_to_text(html: str) -> str:
    """Reduce HTML to plain text.

    Script/style/noscript content is dropped, block-level tags and headings
    become line breaks, entities are unescaped, and whitespace collapses
    within each line. Blank lines collapse to at most one.
    """
    extractor = _TextExtractor()
    extractor.feed(html)
    lines = [" ".join(line.split()) for line in "".join(extractor.parts).split("\n")]
    out: list[str] = []
    for line in lines:
        if line:
            out.append(line)
        elif out and out[-1]:
            out.append("")
    return "\n".join(out).strip()


class LiveSource:
    """Keyword search over a public radiology reference site.

    For each keyword the article and case search pages are requested, the
    first five result links per section are fetched, and each page is
    reduced to plain text. Every network request honors a politeness delay
    of at least one second, and responses are cached on disk so repeated
    runs do not hammer the site.
    """

    def __init__(
        self,
        base_url: str,
        *,
        delay_ms: int = MIN_POLITENESS_DELAY_MS,
        cache_dir: str | Path | None = None,
        timeout_s: float = 30.0,
        session: requests.Session | None = None,
        sleep: Callable[[float], None] = time.sleep,
        clock: Callable[[], float] = time.monotonic,
    ):
        self.base_url = base_url.rstrip("/")
        if delay_ms < MIN_POLITENESS_DELAY_MS:
            log.warning(
                "politeness delay %dms below the %dms floor; clamping",
                delay_ms,
                MIN_POLITENESS_DELAY_MS,
            )
            delay_ms = MIN_POLITENESS_DELAY_MS
        self.delay_s = delay_ms / 1000.0
        self.cache_dir = Path(cache_dir) if cache_dir else None
        if self.cache_dir:
            self.cache_dir.mkdir(parents=True, exist_ok=True)
        self._timeout_s = timeout_s
        self._session = session or requests.Session()
        self._sleep = sleep
        self._clock = clock
        self._last_request = float("-inf")

    def _cache_path(self, url: str) -> Path | None:
        if not self.cache_dir:
            return None
        return self.cache_dir / (hashlib.sha256(url.encode("utf-8")).hexdigest() + ".html")

    def _get(self, url: str) -> str:
        cached = self._cache_path(url)
        if cached and cached.exists():
            return cached.read_text(encoding="utf-8")
        wait = self.delay_s - (self._clock() - self._last_request)
        if wait > 0:
            self._sleep(wait)
        try:
            resp = self._session.get(url, timeout=self._timeout_s)
        except requests.RequestException as exc:
            raise TransportError(f"GET {url} failed: {exc}") from exc
        finally:
            self._last_request = self._clock()
        if resp.status_code != 200:
            raise TransportError(f"GET {url} answered {resp.status_code}")
        if cached:
            cached.write_text(resp.text, encoding="utf-8")
        return resp.text

    def _result_links(self, html: str, path_prefix: str) -> list[str]:
        links: list[str] = []
        for match in re.finditer(r'href="(%s/[^"#?]+)"' % re.escape(path_prefix), html):
            href = match.group(1)
            if href not in links:
                links.append(href)
            if len(links) >= 5:
                break
        return links

    def fetch(self, keyword: str) -> list[Document]:
        docs: list[Document] = []
        scopes = ((Section.ARTICLE, "articles", "/articles"), (Section.CASE, "cases", "/cases"))
        for section, scope, prefix in scopes:
            search_url = f"{self.base_url}/search?q={quote(keyword)}&scope={scope}"
            html = self._get(search_url)
            for href in self._result_links(html, prefix):
                page_url = urljoin(self.base_url + "/", href.lstrip("/"))
                page = self._get(page_url)
                title_match = re.search(
                    r"<title[^>]*>(.*?)</title>", page, flags=re.IGNORECASE | re.DOTALL
                )
                body = html_to_text(page)
                if not body:
                    continue
                docs.append(
                    Document(
                        doc_id=href.strip("/").replace("/", ":"),
                        keyword=keyword,
                        section=section,
                        title=html_to_text(title_match.group(1)) if title_match else "",
                        body=body,
                        source_url=page_url,
                    )
                )
        return docs
