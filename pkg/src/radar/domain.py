"""Shared domain types and canonical-label utilities.

All types are frozen dataclasses that validate their invariants at
construction time, so instances can be shared freely across workers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .errors import ValidationError

# Answer text used when a question could not be grounded in any retrieved
# chunk. EvidenceAnswer treats it as the one case where citations may be empty.
NO_EVIDENCE_ANSWER = "no evidence found"

CANDIDATE_COUNT = 10
DIFFERENTIAL_COUNT = 4
MAX_KEYWORD_CHARS = 100


def canonical_fold(label: str) -> str:
    """Lowercase a label, collapse whitespace, and strip punctuation.

    Intra-word hyphens and digits survive (medical terms like "IDH-wildtype"
    or "MELAS" depend on them); every other punctuation character becomes a
    word break. Idempotent: folding a folded label is a no-op.
    """
    if not label:
        raise ValidationError("cannot fold an empty label")
    lowered = label.lower()
    out: list[str] = []
    last = len(lowered) - 1
    for i, ch in enumerate(lowered):
        if ch.isalnum():
            out.append(ch)
        elif ch == "-" and 0 < i < last and lowered[i - 1].isalnum() and lowered[i + 1].isalnum():
            out.append(ch)
        else:
            out.append(" ")
    return " ".join("".join(out).split())


@dataclass(frozen=True)
class Case:
    """One patient record: image caption, clinical data, and ground truth."""

    id: str
    caption: str
    clinical_data: str
    truth_label: str
    paraphrase_id: int = 0  # 0 = original caption, 1-4 = paraphrase variants

    def __post_init__(self) -> None:
        problems = _case_problems(
            {
                "id": self.id,
                "caption": self.caption,
                "clinical_data": self.clinical_data,
                "truth_label": self.truth_label,
                "paraphrase_id": self.paraphrase_id,
            }
        )
        if problems:
            raise ValidationError("invalid case: " + "; ".join(problems), fields=problems)


def _case_problems(raw: Mapping[str, Any]) -> list[str]:
    problems = []
    for name in ("id", "caption", "truth_label"):
        value = raw.get(name)
        if not isinstance(value, str) or not value.strip():
            problems.append(f"{name} empty")
    clinical = raw.get("clinical_data", "")
    if not isinstance(clinical, str):
        problems.append("clinical_data not a string")
    paraphrase = raw.get("paraphrase_id", 0)
    if not isinstance(paraphrase, int) or isinstance(paraphrase, bool) or paraphrase < 0:
        problems.append("paraphrase_id not a non-negative integer")
    return problems


def validate_case(raw: Mapping[str, Any]) -> Case:
    """Build a Case from a raw record, reporting every violated field at once."""
    problems = _case_problems(raw)
    if problems:
        raise ValidationError("invalid case: " + "; ".join(problems), fields=problems)
    return Case(
        id=raw["id"],
        caption=raw["caption"],
        clinical_data=raw.get("clinical_data", ""),
        truth_label=raw["truth_label"],
        paraphrase_id=raw.get("paraphrase_id", 0),
    )


def load_cases(path: str | Path) -> list[Case]:
    """Read cases from a line-delimited JSON file (UTF-8, no BOM)."""
    text = Path(path).read_text(encoding="utf-8")
    if text.startswith("﻿"):
        raise ValidationError(f"{path}: case file must be UTF-8 without BOM")
    cases = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
        try:
            cases.append(validate_case(raw))
        except ValidationError as exc:
            raise ValidationError(f"{path}:{lineno}: {exc}", fields=exc.fields) from exc
    return cases


@dataclass(frozen=True)
class CandidateList:
    """Ordered list of exactly ten candidate diagnoses, distinct after folding."""

    candidates: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if len(self.candidates) != CANDIDATE_COUNT:
            raise ValidationError(
                f"candidate list must have exactly {CANDIDATE_COUNT} entries, got {len(self.candidates)}"
            )
        if any(not c or not c.strip() for c in self.candidates):
            raise ValidationError("candidate list contains an empty entry")
        folded = [canonical_fold(c) for c in self.candidates]
        if len(set(folded)) != len(folded):
            dupes = sorted({f for f in folded if folded.count(f) > 1})
            raise ValidationError(f"candidate list has duplicates after folding: {dupes}")


@dataclass(frozen=True)
class QueryPair:
    """A diagnostic question together with its retrieval keyword."""

    question: str
    keyword: str

    def __post_init__(self) -> None:
        if not self.question or not self.question.strip():
            raise ValidationError("query question is empty")
        if not self.keyword or not self.keyword.strip():
            raise ValidationError("query keyword is empty")
        if len(self.keyword) > MAX_KEYWORD_CHARS:
            raise ValidationError(
                f"query keyword exceeds {MAX_KEYWORD_CHARS} characters ({len(self.keyword)})"
            )


@dataclass(frozen=True)
class EvidenceAnswer:
    """A question's synthesized answer plus the chunk ids that support it."""

    question: str
    answer: str
    supporting_chunk_ids: tuple[str, ...]
    keyword: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "supporting_chunk_ids", tuple(self.supporting_chunk_ids))
        if not self.supporting_chunk_ids and self.answer != NO_EVIDENCE_ANSWER:
            raise ValidationError(
                "evidence answer has no supporting chunks but is not the "
                f"{NO_EVIDENCE_ANSWER!r} sentinel"
            )

    def to_dict(self) -> dict[str, Any]:
        return {
            "question": self.question,
            "answer": self.answer,
            "supporting_chunk_ids": list(self.supporting_chunk_ids),
            "keyword": self.keyword,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "EvidenceAnswer":
        return cls(
            question=raw["question"],
            answer=raw["answer"],
            supporting_chunk_ids=tuple(raw["supporting_chunk_ids"]),
            keyword=raw.get("keyword", ""),
        )


def no_evidence_answer(question: str, keyword: str) -> EvidenceAnswer:
    """The sentinel EvidenceAnswer for a question nothing could be retrieved for."""
    return EvidenceAnswer(
        question=question, answer=NO_EVIDENCE_ANSWER, supporting_chunk_ids=(), keyword=keyword
    )


@dataclass(frozen=True)
class DiagnosisReport:
    """One primary and four differential diagnoses with aligned confidences."""

    primary: str
    differentials: tuple[str, ...]
    confidences: tuple[float, ...]
    evidence: tuple[EvidenceAnswer, ...] = ()
    trace_id: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "differentials", tuple(self.differentials))
        object.__setattr__(self, "confidences", tuple(float(c) for c in self.confidences))
        object.__setattr__(self, "evidence", tuple(self.evidence))
        if not self.primary or not self.primary.strip():
            raise ValidationError("report primary diagnosis is empty")
        if len(self.differentials) != DIFFERENTIAL_COUNT:
            raise ValidationError(
                f"report must carry exactly {DIFFERENTIAL_COUNT} differentials, "
                f"got {len(self.differentials)}"
            )
        if any(not d or not d.strip() for d in self.differentials):
            raise ValidationError("report contains an empty differential")
        if len(self.confidences) != DIFFERENTIAL_COUNT + 1:
            raise ValidationError(
                f"report must carry exactly {DIFFERENTIAL_COUNT + 1} confidences, "
                f"got {len(self.confidences)}"
            )
        for c in self.confidences:
            if not 0.0 <= c <= 1.0:
                raise ValidationError(f"confidence {c} outside [0, 1]")
        for earlier, later in zip(self.confidences, self.confidences[1:]):
            if later > earlier:
                raise ValidationError(
                    f"confidences must be non-increasing, got {list(self.confidences)}"
                )

    @property
    def labels(self) -> tuple[str, ...]:
        """Primary followed by the four differentials."""
        return (self.primary, *self.differentials)

    def to_dict(self) -> dict[str, Any]:
        return {
            "primary": self.primary,
            "differentials": list(self.differentials),
            "confidences": list(self.confidences),
            "evidence": [e.to_dict() for e in self.evidence],
            "trace_id": self.trace_id,
        }

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any]) -> "DiagnosisReport":
        return cls(
            primary=raw["primary"],
            differentials=tuple(raw["differentials"]),
            confidences=tuple(raw["confidences"]),
            evidence=tuple(EvidenceAnswer.from_dict(e) for e in raw.get("evidence", [])),
            trace_id=raw.get("trace_id", ""),
        )
