from __future__ import annotations

import json

import pytest

from radar.agents import (
    AgentConfig,
    AgentRole,
    TemplateRegistry,
    answer_question,
    config_for_role,
    default_templates,
    final_diagnosis,
    generate_queries,
    initial_diagnosis,
    parse_structured,
)
from radar.domain import NO_EVIDENCE_ANSWER, CandidateList, EvidenceAnswer
from radar.errors import AgentOutputError, ConfigError, ParseError, ValidationError
from radar.index import ScoredChunk
from radar.providers import ScriptedChatProvider, TEMP_HIGH, TEMP_LOW, TEMP_MID

from conftest import make_case

TEN = [f"diagnosis {i}" for i in range(10)]


def ten_candidates_json(entries=None):
    return json.dumps({"candidates": entries or TEN})


def report_json(primary="glioblastoma", confidences=(0.6, 0.2, 0.1, 0.06, 0.04)):
    return json.dumps(
        {
            "primary": primary,
            "differentials": ["metastasis", "lymphoma", "abscess", "demyelination"],
            "confidences": list(confidences),
        }
    )


class TestParseStructured:
    def test_plain_object(self):
        value = parse_structured(report_json(), "diagnosis_report")
        assert value["primary"] == "glioblastoma"
        assert value["confidences"] == [0.6, 0.2, 0.1, 0.06, 0.04]

    def test_object_with_surrounding_prose(self):
        text = 'Here you go: {"canonical": "glioblastoma"} — hope that helps.'
        assert parse_structured(text, "normalized_label") == "glioblastoma"

    def test_fenced_block(self):
        text = "```json\n{\"objections\": [\"weak reasoning\"]}\n```"
        assert parse_structured(text, "critique") == ["weak reasoning"]

    def test_bare_array(self):
        text = '[{"question": "q?", "keyword": "k"}]'
        assert parse_structured(text, "query_pairs") == [{"question": "q?", "keyword": "k"}]

    def test_prose_without_json(self):
        with pytest.raises(ParseError):
            parse_structured("I am not sure what to say.", "critique")

    def test_schema_violation_reports_position(self):
        with pytest.raises(ParseError) as exc_info:
            parse_structured('noise {"wrong": 1} noise', "evidence_answer")
        assert exc_info.value.position == 6

    def test_unknown_schema(self):
        with pytest.raises(ConfigError):
            parse_structured("{}", "no_such_schema")


class TestConfigForRole:
    def test_presets(self):
        init = config_for_role(AgentRole.INITIAL_DOCTOR)
        assert (init.temperature, init.top_p) == (TEMP_HIGH, 0.95)
        assert config_for_role(AgentRole.ANSWER_GENERATOR).temperature == TEMP_LOW
        assert config_for_role(AgentRole.FINAL_DOCTOR).temperature == TEMP_MID

    def test_missing_template_rejected(self):
        with pytest.raises(ConfigError):
            config_for_role(AgentRole.FINAL_DOCTOR, template_id="not_a_template")

    def test_overrides(self):
        cfg = config_for_role(AgentRole.FINAL_DOCTOR, temperature=0.0, max_retries=0)
        assert cfg.temperature == 0.0
        assert cfg.max_retries == 0


class TestTemplateRegistry:
    def test_placeholders_substituted_braces_preserved(self):
        registry = default_templates()
        rendered = registry.render(
            "initial_doctor", caption="CAPTION-X", clinical_data="CLINICAL-Y"
        )
        assert "CAPTION-X" in rendered
        assert "CLINICAL-Y" in rendered
        assert '{"candidates"' in rendered  # JSON braces untouched

    def test_missing_template(self):
        with pytest.raises(ConfigError):
            default_templates().get("does_not_exist")

    def test_custom_directory(self, tmp_path):
        (tmp_path / "greet.txt").write_text("hello {caption}")
        registry = TemplateRegistry(tmp_path)
        assert registry.render("greet", caption="world") == "hello world"
        assert registry.ids() == ["greet"]


class TestInitialDiagnosis:
    def test_well_formed(self):
        provider = ScriptedChatProvider([ten_candidates_json()])
        result = initial_diagnosis(provider, config_for_role(AgentRole.INITIAL_DOCTOR), make_case())
        assert list(result.candidates) == TEN

    def test_short_list_retries_then_errors(self):
        short = json.dumps({"candidates": TEN[:8]})
        provider = ScriptedChatProvider([short, short, short])
        with pytest.raises(AgentOutputError) as exc_info:
            initial_diagnosis(provider, config_for_role(AgentRole.INITIAL_DOCTOR), make_case())
        assert provider.calls == 3  # 1 + max_retries re-asks
        assert exc_info.value.raw == short

    def test_folded_duplicates_trigger_retry_then_success(self):
        duped = json.dumps({"candidates": ["glioma", "Glioma"] + TEN[2:]})
        provider = ScriptedChatProvider([duped, ten_candidates_json()])
        result = initial_diagnosis(provider, config_for_role(AgentRole.INITIAL_DOCTOR), make_case())
        assert provider.calls == 2
        assert list(result.candidates) == TEN

    def test_retry_appends_format_reminder(self):
        class Recorder(ScriptedChatProvider):
            def __init__(self, script):
                super().__init__(script)
                self.requests = []

            def complete(self, request):
                self.requests.append(request)
                return super().complete(request)

        provider = Recorder(["not json", ten_candidates_json()])
        initial_diagnosis(provider, config_for_role(AgentRole.INITIAL_DOCTOR), make_case())
        retry_request = provider.requests[1]
        assert len(retry_request.messages) == 3
        assert retry_request.messages[1].role == "assistant"
        assert "JSON" in retry_request.messages[2].content


class TestGenerateQueries:
    def pairs_json(self, n):
        return json.dumps(
            [{"question": f"question {i}?", "keyword": f"keyword {i}"} for i in range(n)]
        )

    def test_five_pairs(self):
        provider = ScriptedChatProvider([self.pairs_json(5)])
        pairs = generate_queries(provider, config_for_role(AgentRole.QUERY_GENERATOR), make_case(), 5)
        assert len(pairs) == 5
        assert pairs[0].keyword == "keyword 0"

    def test_wrong_count_retries_then_errors(self):
        provider = ScriptedChatProvider([self.pairs_json(3)] * 3)
        with pytest.raises(AgentOutputError):
            generate_queries(provider, config_for_role(AgentRole.QUERY_GENERATOR), make_case(), 5)
        assert provider.calls == 3

    def test_empty_keyword_triggers_retry(self):
        bad = json.dumps([{"question": "q?", "keyword": ""}])
        provider = ScriptedChatProvider([bad, self.pairs_json(1)])
        pairs = generate_queries(provider, config_for_role(AgentRole.QUERY_GENERATOR), make_case(), 1)
        assert provider.calls == 2
        assert len(pairs) == 1


RETRIEVED = [
    ScoredChunk("doc:0", 0.9, "glioblastoma"),
    ScoredChunk("doc:1", 0.8, "glioblastoma"),
    ScoredChunk("doc:2", 0.7, "glioblastoma"),
    ScoredChunk("doc:3", 0.6, "glioblastoma"),
    ScoredChunk("doc:4", 0.5, "glioblastoma"),
]
CHUNK_TEXTS = {f"doc:{i}": f"chunk text {i}" for i in range(5)}


class TestAnswerQuestion:
    def test_citing_subset(self):
        reply = json.dumps({"answer": "ring enhancement is typical", "supporting_chunk_ids": ["doc:0", "doc:2"]})
        provider = ScriptedChatProvider([reply])
        answer = answer_question(
            provider,
            config_for_role(AgentRole.ANSWER_GENERATOR),
            "does it enhance?",
            RETRIEVED,
            CHUNK_TEXTS,
            keyword="glioblastoma",
        )
        assert answer.supporting_chunk_ids == ("doc:0", "doc:2")
        assert answer.keyword == "glioblastoma"

    def test_empty_retrieval_sentinel_without_provider_call(self):
        provider = ScriptedChatProvider(["should never be used"])
        answer = answer_question(
            provider,
            config_for_role(AgentRole.ANSWER_GENERATOR),
            "anything?",
            [],
            {},
            keyword="rare thing",
        )
        assert answer.answer == NO_EVIDENCE_ANSWER
        assert answer.supporting_chunk_ids == ()
        assert provider.calls == 0

    def test_citing_unknown_id_rejected_then_retried(self):
        bad = json.dumps({"answer": "made up", "supporting_chunk_ids": ["other:9"]})
        good = json.dumps({"answer": "grounded", "supporting_chunk_ids": ["doc:1"]})
        provider = ScriptedChatProvider([bad, good])
        answer = answer_question(
            provider,
            config_for_role(AgentRole.ANSWER_GENERATOR),
            "q?",
            RETRIEVED,
            CHUNK_TEXTS,
        )
        assert provider.calls == 2
        assert answer.supporting_chunk_ids == ("doc:1",)

    def test_prompt_contains_chunk_ids_and_texts(self):
        class Recorder(ScriptedChatProvider):
            def __init__(self, script):
                super().__init__(script)
                self.requests = []

            def complete(self, request):
                self.requests.append(request)
                return super().complete(request)

        reply = json.dumps({"answer": "a", "supporting_chunk_ids": ["doc:0"]})
        provider = Recorder([reply])
        answer_question(
            provider, config_for_role(AgentRole.ANSWER_GENERATOR), "q?", RETRIEVED, CHUNK_TEXTS
        )
        prompt = provider.requests[0].messages[0].content
        assert "[doc:0]" in prompt
        assert "chunk text 3" in prompt


class TestFinalDiagnosis:
    def test_well_formed(self):
        provider = ScriptedChatProvider([report_json()])
        report = final_diagnosis(
            provider,
            config_for_role(AgentRole.FINAL_DOCTOR),
            make_case(),
            CandidateList(tuple(TEN)),
            [],
            trace_id="t-1",
        )
        assert report.primary == "glioblastoma"
        assert report.confidences == (0.6, 0.2, 0.1, 0.06, 0.04)
        assert report.trace_id == "t-1"

    def test_out_of_order_confidences_retry(self):
        bad = report_json(confidences=(0.2, 0.6, 0.1, 0.05, 0.05))
        provider = ScriptedChatProvider([bad, report_json()])
        report = final_diagnosis(
            provider,
            config_for_role(AgentRole.FINAL_DOCTOR),
            make_case(),
            CandidateList(tuple(TEN)),
            [],
        )
        assert provider.calls == 2
        assert report.primary == "glioblastoma"

    def test_four_labels_only_errors_after_retries(self):
        bad = json.dumps(
            {"primary": "p", "differentials": ["a", "b", "c"], "confidences": [0.5, 0.2, 0.1, 0.1]}
        )
        provider = ScriptedChatProvider([bad] * 3)
        with pytest.raises(AgentOutputError):
            final_diagnosis(
                provider,
                config_for_role(AgentRole.FINAL_DOCTOR),
                make_case(),
                CandidateList(tuple(TEN)),
                [],
            )

    def test_evidence_attached_verbatim(self):
        evidence = [EvidenceAnswer("q", "ans", ("c0",), "k")]
        provider = ScriptedChatProvider([report_json()])
        report = final_diagnosis(
            provider,
            config_for_role(AgentRole.FINAL_DOCTOR),
            make_case(),
            CandidateList(tuple(TEN)),
            evidence,
        )
        assert report.evidence == tuple(evidence)


class TestAgentConfig:
    def test_negative_temperature_rejected(self):
        with pytest.raises(ValidationError):
            AgentConfig(
                role=AgentRole.FINAL_DOCTOR,
                temperature=-1.0,
                top_p=0.9,
                prompt_template_id="final_doctor",
            )


class TestDeterminism:
    def test_same_scripts_same_outputs(self):
        def run():
            provider = ScriptedChatProvider([ten_candidates_json(), report_json()])
            cfg_init = config_for_role(AgentRole.INITIAL_DOCTOR)
            cfg_final = config_for_role(AgentRole.FINAL_DOCTOR)
            case = make_case()
            candidates = initial_diagnosis(provider, cfg_init, case)
            report = final_diagnosis(provider, cfg_final, case, candidates, [], trace_id="t")
            return json.dumps(report.to_dict(), sort_keys=True)

        assert run() == run()
