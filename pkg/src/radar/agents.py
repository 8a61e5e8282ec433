"""Prompted agent operations over a chat provider.

Each agent is a prompt template plus a structured-output parser. Prompt
wording lives in template files so it is data, not code; every template
tells the model to answer with JSON and the parser tolerates surrounding
prose and code fences. Malformed output earns up to ``max_retries`` re-asks
with a format reminder, then a hard error carrying the raw reply.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from .domain import (
    CANDIDATE_COUNT,
    CandidateList,
    Case,
    DiagnosisReport,
    EvidenceAnswer,
    QueryPair,
    no_evidence_answer,
)
from .errors import AgentOutputError, ConfigError, ParseError, ValidationError
from .index import ScoredChunk
from .providers import (
    TEMP_HIGH,
    TEMP_LOW,
    TEMP_MID,
    TOP_P_HIGH,
    ChatMessage,
    ChatProvider,
    ChatRequest,
    chat_complete,
)

DEFAULT_N_QUERIES = 5
DEFAULT_MAX_RETRIES = 2

# Called once per provider round trip: (request_text, response_text).
StepFn = Callable[[str, str], None]


class AgentRole(str, Enum):
    INITIAL_DOCTOR = "initial_doctor"
    QUERY_GENERATOR = "query_generator"
    ANSWER_GENERATOR = "answer_generator"
    FINAL_DOCTOR = "final_doctor"
    COLLABORATOR = "collaborator"
    CHALLENGER = "challenger"


@dataclass(frozen=True)
class AgentConfig:
    role: AgentRole
    temperature: float
    top_p: float
    prompt_template_id: str
    max_retries: int = DEFAULT_MAX_RETRIES

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValidationError(f"temperature must be >= 0, got {self.temperature}")
        if self.max_retries < 0:
            raise ValidationError(f"max_retries must be >= 0, got {self.max_retries}")


_ROLE_PRESETS: dict[AgentRole, tuple[float, float, str]] = {
    AgentRole.INITIAL_DOCTOR: (TEMP_HIGH, TOP_P_HIGH, "initial_doctor"),
    AgentRole.QUERY_GENERATOR: (TEMP_HIGH, TOP_P_HIGH, "query_generator"),
    AgentRole.ANSWER_GENERATOR: (TEMP_LOW, 1.0, "answer_generator"),
    AgentRole.FINAL_DOCTOR: (TEMP_MID, 1.0, "final_doctor"),
    AgentRole.COLLABORATOR: (TEMP_MID, 1.0, "collaborator_initial"),
    AgentRole.CHALLENGER: (TEMP_MID, 1.0, "challenger_critique"),
}


class TemplateRegistry:
    """Loads prompt templates from a directory of .txt files.

    Placeholders are written ``{name}`` and substituted by exact token, so
    JSON braces elsewhere in a template pass through untouched.
    """

    def __init__(self, template_dir: str | Path | None = None):
        self.template_dir = Path(template_dir) if template_dir else Path(__file__).parent / "templates"
        if not self.template_dir.is_dir():
            raise ConfigError(f"template directory {self.template_dir} does not exist")
        self._cache: dict[str, str] = {}

    def ids(self) -> list[str]:
        return sorted(p.stem for p in self.template_dir.glob("*.txt"))

    def get(self, template_id: str) -> str:
        if template_id not in self._cache:
            path = self.template_dir / f"{template_id}.txt"
            if not path.is_file():
                raise ConfigError(f"prompt template {template_id!r} not found in {self.template_dir}")
            self._cache[template_id] = path.read_text(encoding="utf-8")
        return self._cache[template_id]

    def render(self, template_id: str, **fields: str) -> str:
        text = self.get(template_id)
        for name, value in fields.items():
            text = text.replace("{%s}" % name, str(value))
        return text


_default_registry: TemplateRegistry | None = None


def default_templates() -> TemplateRegistry:
    global _default_registry
    if _default_registry is None:
        _default_registry = TemplateRegistry()
    return _default_registry


def config_for_role(
    role: AgentRole,
    *,
    temperature: float | None = None,
    top_p: float | None = None,
    template_id: str | None = None,
    max_retries: int = DEFAULT_MAX_RETRIES,
    templates: TemplateRegistry | None = None,
) -> AgentConfig:
    """Build an AgentConfig from the role's sampling preset.

    The chosen template must exist in the registry; that is checked here
    rather than at call time so misconfiguration fails fast.
    """
    preset_temp, preset_top_p, preset_template = _ROLE_PRESETS[role]
    chosen_template = template_id or preset_template
    (templates or default_templates()).get(chosen_template)
    return AgentConfig(
        role=role,
        temperature=preset_temp if temperature is None else temperature,
        top_p=preset_top_p if top_p is None else top_p,
        prompt_template_id=chosen_template,
        max_retries=max_retries,
    )


# ---------------------------------------------------------------------------
# Structured output parsing
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def _extract_json(text: str) -> tuple[Any, int]:
    """Pull the first JSON object or array out of free text."""
    for match in _FENCE_RE.finditer(text):
        inner = match.group(1).strip()
        try:
            return json.loads(inner), match.start(1)
        except json.JSONDecodeError:
            continue
    decoder = json.JSONDecoder()
    for pos, ch in enumerate(text):
        if ch in "{[":
            try:
                value, _ = decoder.raw_decode(text[pos:])
                return value, pos
            except json.JSONDecodeError:
                continue
    raise ParseError(f"no JSON object or array found in reply of {len(text)} chars")


def _require(condition: bool, message: str, position: int) -> None:
    if not condition:
        raise ParseError(message, position=position)


def _schema_candidate_list(value: Any, pos: int) -> list[str]:
    if isinstance(value, dict):
        value = value.get("candidates")
    _require(isinstance(value, list), "expected a 'candidates' array", pos)
    _require(all(isinstance(c, str) and c.strip() for c in value),
             "candidates must be non-empty strings", pos)
    return list(value)


def _schema_query_pairs(value: Any, pos: int) -> list[dict[str, str]]:
    if isinstance(value, dict):
        value = value.get("queries", value.get("pairs"))
    _require(isinstance(value, list), "expected an array of question-keyword pairs", pos)
    out = []
    for item in value:
        _require(isinstance(item, dict), "each pair must be an object", pos)
        q, k = item.get("question"), item.get("keyword")
        _require(isinstance(q, str) and isinstance(k, str),
                 "each pair needs string 'question' and 'keyword'", pos)
        out.append({"question": q, "keyword": k})
    return out


def _schema_evidence_answer(value: Any, pos: int) -> dict[str, Any]:
    _require(isinstance(value, dict), "expected an object", pos)
    answer = value.get("answer")
    ids = value.get("supporting_chunk_ids")
    _require(isinstance(answer, str) and answer.strip(), "missing 'answer' string", pos)
    _require(isinstance(ids, list) and all(isinstance(i, str) for i in ids),
             "missing 'supporting_chunk_ids' string array", pos)
    return {"answer": answer, "supporting_chunk_ids": list(ids)}


def _schema_diagnosis_report(value: Any, pos: int) -> dict[str, Any]:
    _require(isinstance(value, dict), "expected an object", pos)
    primary = value.get("primary")
    differentials = value.get("differentials")
    confidences = value.get("confidences")
    _require(isinstance(primary, str) and primary.strip(), "missing 'primary' string", pos)
    _require(isinstance(differentials, list)
             and all(isinstance(d, str) and d.strip() for d in differentials),
             "missing 'differentials' string array", pos)
    _require(isinstance(confidences, list)
             and all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in confidences),
             "missing numeric 'confidences' array", pos)
    return {
        "primary": primary,
        "differentials": list(differentials),
        "confidences": [float(c) for c in confidences],
    }


def _schema_critique(value: Any, pos: int) -> list[str]:
    if isinstance(value, dict):
        value = value.get("objections")
    _require(isinstance(value, list) and all(isinstance(o, str) for o in value),
             "expected an 'objections' string array", pos)
    return list(value)


def _schema_normalized_label(value: Any, pos: int) -> str:
    if isinstance(value, dict):
        value = value.get("canonical")
    _require(isinstance(value, str) and value.strip(), "expected a 'canonical' string", pos)
    return value


SCHEMAS: dict[str, Callable[[Any, int], Any]] = {
    "candidate_list": _schema_candidate_list,
    "query_pairs": _schema_query_pairs,
    "evidence_answer": _schema_evidence_answer,
    "diagnosis_report": _schema_diagnosis_report,
    "critique": _schema_critique,
    "normalized_label": _schema_normalized_label,
}


def parse_structured(text: str, schema_id: str) -> Any:
    """Extract the first JSON value from text and validate it against a schema."""
    if schema_id not in SCHEMAS:
        raise ConfigError(f"unknown schema {schema_id!r}")
    value, pos = _extract_json(text)
    return SCHEMAS[schema_id](value, pos)


# ---------------------------------------------------------------------------
# The retry loop shared by every agent
# ---------------------------------------------------------------------------

_REMINDER = (
    "Your previous reply could not be used: {error}. "
    "Reply again with only the required JSON, no other text."
)


def ask_structured(
    provider: ChatProvider,
    cfg: AgentConfig,
    prompt: str,
    schema_id: str,
    validate: Callable[[Any], Any],
    on_step: StepFn | None = None,
) -> Any:
    """Prompt, parse, validate; re-ask with a reminder on malformed output."""
    messages: list[ChatMessage] = [ChatMessage("user", prompt)]
    raw = ""
    error: Exception | None = None
    for _ in range(cfg.max_retries + 1):
        request = ChatRequest(
            messages=tuple(messages), temperature=cfg.temperature, top_p=cfg.top_p
        )
        response = chat_complete(provider, request)
        raw = response.content
        if on_step is not None:
            on_step("\n".join(m.content for m in messages), raw)
        try:
            return validate(parse_structured(raw, schema_id))
        except (ParseError, ValidationError) as exc:
            error = exc
            messages.append(ChatMessage("assistant", raw))
            messages.append(ChatMessage("user", _REMINDER.format(error=exc)))
    raise AgentOutputError(
        f"{cfg.role.value} output unusable after {cfg.max_retries + 1} attempts: {error}",
        raw=raw,
    )


# ---------------------------------------------------------------------------
# Agent operations
# ---------------------------------------------------------------------------


def initial_diagnosis(
    provider: ChatProvider,
    cfg: AgentConfig,
    case: Case,
    templates: TemplateRegistry | None = None,
    on_step: StepFn | None = None,
) -> CandidateList:
    """Produce the broad list of ten candidate diagnoses for a case."""
    registry = templates or default_templates()
    prompt = registry.render(
        cfg.prompt_template_id, caption=case.caption, clinical_data=case.clinical_data
    )

    def validate(value: list[str]) -> CandidateList:
        if len(value) != CANDIDATE_COUNT:
            raise ValidationError(f"need exactly {CANDIDATE_COUNT} candidates, got {len(value)}")
        return CandidateList(tuple(value))

    return ask_structured(provider, cfg, prompt, "candidate_list", validate, on_step)


def generate_queries(
    provider: ChatProvider,
    cfg: AgentConfig,
    case: Case,
    n: int = DEFAULT_N_QUERIES,
    templates: TemplateRegistry | None = None,
    on_step: StepFn | None = None,
) -> list[QueryPair]:
    """Produce exactly n question-keyword pairs for targeted retrieval."""
    if n <= 0:
        raise ValidationError(f"n must be positive, got {n}")
    registry = templates or default_templates()
    prompt = registry.render(
        cfg.prompt_template_id,
        caption=case.caption,
        clinical_data=case.clinical_data,
        n_queries=str(n),
    )

    def validate(value: list[dict[str, str]]) -> list[QueryPair]:
        if len(value) != n:
            raise ValidationError(f"need exactly {n} query pairs, got {len(value)}")
        return [QueryPair(question=item["question"], keyword=item["keyword"]) for item in value]

    return ask_structured(provider, cfg, prompt, "query_pairs", validate, on_step)


def _render_chunks(retrieved: Sequence[ScoredChunk], chunk_texts: Mapping[str, str]) -> str:
    blocks = []
    for hit in retrieved:
        blocks.append(f"[{hit.chunk_id}]\n{chunk_texts[hit.chunk_id]}")
    return "\n\n".join(blocks)


def answer_question(
    provider: ChatProvider,
    cfg: AgentConfig,
    question: str,
    retrieved: Sequence[ScoredChunk],
    chunk_texts: Mapping[str, str],
    keyword: str = "",
    templates: TemplateRegistry | None = None,
    on_step: StepFn | None = None,
) -> EvidenceAnswer:
    """Answer a question strictly from retrieved chunks, citing their ids.

    With nothing retrieved the sentinel answer is returned without calling
    the provider at all.
    """
    if not retrieved:
        return no_evidence_answer(question, keyword)
    registry = templates or default_templates()
    prompt = registry.render(
        cfg.prompt_template_id,
        question=question,
        chunks=_render_chunks(retrieved, chunk_texts),
    )
    retrieved_ids = {hit.chunk_id for hit in retrieved}

    def validate(value: dict[str, Any]) -> EvidenceAnswer:
        cited = value["supporting_chunk_ids"]
        unknown = [c for c in cited if c not in retrieved_ids]
        if unknown:
            raise ValidationError(f"cited ids not among retrieved chunks: {unknown}")
        return EvidenceAnswer(
            question=question,
            answer=value["answer"],
            supporting_chunk_ids=tuple(cited),
            keyword=keyword,
        )

    return ask_structured(provider, cfg, prompt, "evidence_answer", validate, on_step)


def _render_evidence(evidence: Sequence[EvidenceAnswer]) -> str:
    if not evidence:
        return "(no retrieved evidence)"
    return json.dumps([e.to_dict() for e in evidence], indent=2, ensure_ascii=False)


def _render_candidates(candidates: CandidateList) -> str:
    return "\n".join(f"{i}. {c}" for i, c in enumerate(candidates.candidates, start=1))


def final_diagnosis(
    provider: ChatProvider,
    cfg: AgentConfig,
    case: Case,
    candidates: CandidateList,
    evidence: Sequence[EvidenceAnswer],
    trace_id: str = "",
    templates: TemplateRegistry | None = None,
    on_step: StepFn | None = None,
) -> DiagnosisReport:
    """Integrate case, candidates, and evidence into the final 1+4 report."""
    registry = templates or default_templates()
    prompt = registry.render(
        cfg.prompt_template_id,
        caption=case.caption,
        clinical_data=case.clinical_data,
        candidates=_render_candidates(candidates),
        evidence=_render_evidence(evidence),
    )

    def validate(value: dict[str, Any]) -> DiagnosisReport:
        return DiagnosisReport(
            primary=value["primary"],
            differentials=tuple(value["differentials"]),
            confidences=tuple(value["confidences"]),
            evidence=tuple(evidence),
            trace_id=trace_id,
        )

    return ask_structured(provider, cfg, prompt, "diagnosis_report", validate, on_step)
