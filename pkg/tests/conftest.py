from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from radar.chunking import Chunk, Document, EmbeddedChunk, Section
from radar.domain import Case, DiagnosisReport

DATA_DIR = Path(__file__).parent / "data"


def unit_chunk(chunk_id: str, vector, doc_id: str = "doc") -> EmbeddedChunk:
    """Hand-built embedded chunk with the vector scaled to unit norm."""
    v = np.asarray(vector, dtype=np.float64)
    v = v / np.linalg.norm(v)
    return EmbeddedChunk(
        chunk=Chunk(chunk_id, doc_id, 0, "xx", (0, 2)),
        vector=v.astype(np.float32),
    )


def make_document(
    doc_id: str,
    keyword: str = "glioma",
    section: Section = Section.ARTICLE,
    body: str = "body text " * 20,
    url: str | None = None,
) -> Document:
    return Document(
        doc_id=doc_id,
        keyword=keyword,
        section=section,
        title=f"{keyword} {doc_id}",
        body=body,
        source_url=url or f"https://example.test/{section.value}/{doc_id}",
    )


def make_report(
    primary: str = "glioblastoma",
    differentials: tuple[str, ...] = ("metastasis", "lymphoma", "abscess", "demyelination"),
    confidences: tuple[float, ...] = (0.6, 0.2, 0.1, 0.06, 0.04),
    trace_id: str = "t",
) -> DiagnosisReport:
    return DiagnosisReport(
        primary=primary,
        differentials=differentials,
        confidences=confidences,
        evidence=(),
        trace_id=trace_id,
    )


def make_case(case_id: str = "c1", truth: str = "glioblastoma") -> Case:
    return Case(
        id=case_id,
        caption="T2 hyperintense infiltrative lesion with central necrosis",
        clinical_data="58-year-old with progressive headache",
        truth_label=truth,
        paraphrase_id=0,
    )


class CountingSource:
    """Wraps a document source and counts external fetch calls."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def fetch(self, keyword: str):
        self.calls += 1
        return self.inner.fetch(keyword)


class StaticSource:
    """Serves a fixed document list regardless of keyword."""

    def __init__(self, docs):
        self.docs = list(docs)
        self.calls = 0

    def fetch(self, keyword: str):
        self.calls += 1
        return list(self.docs)


@pytest.fixture
def corpus_dir(tmp_path: Path) -> Path:
    """A tiny two-keyword corpus honoring the 5-article/5-case split."""
    directory = tmp_path / "corpus"
    directory.mkdir()
    for keyword, stem in (("glioblastoma", "gbm"), ("tuberous sclerosis", "tsc")):
        for section in (Section.ARTICLE, Section.CASE):
            for i in range(5):
                doc_id = f"{stem}-{section.value}-{i}"
                payload = {
                    "doc_id": doc_id,
                    "keyword": keyword,
                    "section": section.value,
                    "title": f"{keyword} {section.value} {i}",
                    "body": f"{keyword} reference text {i}. " * 30,
                    "source_url": f"https://example.test/{section.value}s/{doc_id}",
                }
                (directory / f"{doc_id}.json").write_text(json.dumps(payload), encoding="utf-8")
    return directory


@pytest.fixture
def fixture_data_dir() -> Path:
    return DATA_DIR
