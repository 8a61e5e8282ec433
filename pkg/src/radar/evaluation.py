"""Top-1/Top-5 scoring against ground truth, with pluggable label normalization.

Predictions and truths pass through the same normalizer before comparison,
so synonym and spelling variants score as matches. Accuracies aggregate
across repeated runs as mean plus sample standard deviation on a 0-100
scale.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from .agents import TemplateRegistry, default_templates, parse_structured
from .domain import DiagnosisReport, canonical_fold
from .errors import EvaluationError, RadarError, ValidationError
from .providers import TEMP_LOW, ChatProvider, chat_complete, user_request

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class NormalizedPrediction:
    raw: str
    canonical: str
    normalizer_id: str
    degraded: bool = False  # provider normalizer fell back to plain folding

    def __post_init__(self) -> None:
        if not self.canonical:
            raise ValidationError(f"label {self.raw!r} normalized to an empty string")
        if self.canonical != canonical_fold(self.canonical):
            raise ValidationError(f"canonical form {self.canonical!r} is not folded")


class Normalizer(Protocol):
    normalizer_id: str

    def normalize(self, raw: str) -> NormalizedPrediction: ...


class DictionaryNormalizer:
    """Fold, then map through a synonym table; identity when absent.

    Pure and deterministic, which makes it the right backend for tests and
    offline scoring. Table keys and values are folded up front so lookups
    are insensitive to case, spacing, and punctuation.
    """

    def __init__(self, table: Mapping[str, str] | None = None, normalizer_id: str = "dictionary"):
        self.normalizer_id = normalizer_id
        self._table = {
            canonical_fold(key): canonical_fold(value) for key, value in (table or {}).items()
        }

    def normalize(self, raw: str) -> NormalizedPrediction:
        folded = canonical_fold(raw)
        if not folded:
            raise ValidationError(f"label {raw!r} folds to an empty string")
        return NormalizedPrediction(
            raw=raw,
            canonical=self._table.get(folded, folded),
            normalizer_id=self.normalizer_id,
        )


class ProviderNormalizer:
    """Ask a chat backend for the canonical term, then fold the reply.

    Any provider failure falls back to the folded raw label with the
    ``degraded`` flag set, so scoring always completes.
    """

    def __init__(
        self,
        provider: ChatProvider,
        templates: TemplateRegistry | None = None,
        normalizer_id: str = "provider",
    ):
        self.normalizer_id = normalizer_id
        self._provider = provider
        self._templates = templates or default_templates()

    def normalize(self, raw: str) -> NormalizedPrediction:
        folded = canonical_fold(raw)
        if not folded:
            raise ValidationError(f"label {raw!r} folds to an empty string")
        prompt = self._templates.render("normalize_label", label=raw)
        try:
            reply = chat_complete(self._provider, user_request(prompt, temperature=TEMP_LOW))
            canonical = canonical_fold(parse_structured(reply.content, "normalized_label"))
            if not canonical:
                raise ValidationError("normalizer returned an empty canonical term")
        except RadarError as exc:
            log.warning("label normalization failed for %r, using folded raw: %s", raw, exc)
            return NormalizedPrediction(
                raw=raw, canonical=folded, normalizer_id=self.normalizer_id, degraded=True
            )
        return NormalizedPrediction(raw=raw, canonical=canonical, normalizer_id=self.normalizer_id)


def normalize_label(normalizer: Normalizer, raw_label: str) -> NormalizedPrediction:
    if not raw_label:
        raise ValidationError("cannot normalize an empty label")
    return normalizer.normalize(raw_label)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaseScore:
    case_id: str
    top1_hit: bool
    top5_hit: bool


@dataclass(frozen=True)
class EvalResult:
    run_id: str
    n_cases: int
    top1: float
    top5: float
    per_case: tuple[CaseScore, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "per_case", tuple(self.per_case))
        if self.n_cases <= 0:
            raise ValidationError("an evaluation needs at least one case")
        if self.top1 > self.top5:
            raise ValidationError(f"top1 {self.top1} cannot exceed top5 {self.top5}")

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "n_cases": self.n_cases,
            "top1": self.top1,
            "top5": self.top5,
            "per_case": [
                {"case_id": s.case_id, "top1_hit": s.top1_hit, "top5_hit": s.top5_hit}
                for s in self.per_case
            ],
        }


@dataclass(frozen=True)
class AggregateResult:
    mean_top1: float
    std_top1: float
    mean_top5: float
    std_top5: float
    n_runs: int

    def to_dict(self) -> dict:
        return {
            "mean_top1": self.mean_top1,
            "std_top1": self.std_top1,
            "mean_top5": self.mean_top5,
            "std_top5": self.std_top5,
            "n_runs": self.n_runs,
        }


def score_case(
    report: DiagnosisReport, truth_label: str, normalizer: Normalizer
) -> tuple[bool, bool]:
    """Whether the truth matches the primary (top-1) or any of the five (top-5)."""
    truth = normalize_label(normalizer, truth_label).canonical
    predictions = [normalize_label(normalizer, label).canonical for label in report.labels]
    top1 = predictions[0] == truth
    top5 = truth in predictions
    return top1, top5


def evaluate_run(
    reports: Sequence[tuple[str, DiagnosisReport]],
    truths: Mapping[str, str],
    normalizer: Normalizer,
    run_id: str = "run",
) -> EvalResult:
    """Score one run's (case_id, report) pairs against ground-truth labels."""
    if not reports:
        raise EvaluationError("no reports to evaluate")
    missing = sorted({case_id for case_id, _ in reports if case_id not in truths})
    if missing:
        raise EvaluationError(f"no truth label for case ids: {missing}", missing_ids=missing)
    per_case = []
    for case_id, report in reports:
        top1, top5 = score_case(report, truths[case_id], normalizer)
        per_case.append(CaseScore(case_id, top1, top5))
    n = len(per_case)
    return EvalResult(
        run_id=run_id,
        n_cases=n,
        top1=sum(s.top1_hit for s in per_case) / n,
        top5=sum(s.top5_hit for s in per_case) / n,
        per_case=tuple(per_case),
    )


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    n = len(values)
    mean = sum(values) / n
    if n == 1:
        return mean, 0.0
    variance = sum((v - mean) ** 2 for v in values) / (n - 1)
    return mean, math.sqrt(variance)


def aggregate(results: Sequence[EvalResult]) -> AggregateResult:
    """Mean and sample standard deviation across runs, on the 0-100 scale."""
    if not results:
        raise EvaluationError("nothing to aggregate")
    mean1, std1 = _mean_std([r.top1 * 100.0 for r in results])
    mean5, std5 = _mean_std([r.top5 * 100.0 for r in results])
    return AggregateResult(
        mean_top1=mean1, std_top1=std1, mean_top5=mean5, std_top5=std5, n_runs=len(results)
    )


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def load_truths(path: str | Path) -> dict[str, str]:
    """Read {case_id, truth_label} records from a line-delimited JSON file."""
    truths: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            truths[raw["case_id"]] = raw["truth_label"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise EvaluationError(f"{path}:{lineno}: bad truth record: {exc}") from exc
    return truths


def load_synonyms(path: str | Path) -> dict[str, str]:
    """Read a synonym table: a JSON object of folded-raw to canonical."""
    try:
        table = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise EvaluationError(f"cannot read synonym table {path}: {exc}") from exc
    if not isinstance(table, dict):
        raise EvaluationError(f"synonym table {path} must be a JSON object")
    return {str(k): str(v) for k, v in table.items()}
