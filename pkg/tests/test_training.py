"""Training loop tests: context assembly, run averaging, reflection, accumulation."""

from datetime import date

import pytest

from paperforge.corpus import StructuredPaper
from paperforge.gateway import BackendUnavailable, MockBackend, SchemaViolation
from paperforge.sections import GENERATION_TARGETS, SectionKind
from paperforge.store import LocalHashEmbedder, StoreSet
from paperforge.training import (
    SectionDraft,
    build_context,
    evaluate_section,
    fixed_clock,
    generate_section,
    reflect,
    run_training,
)

from conftest import reflection_reply, score_reply


def full_paper(paper_id: str = "p1", when: date = date(2024, 1, 1)) -> StructuredPaper:
    paper = StructuredPaper(id=paper_id, date=when)
    paper.topic = f"Topic of {paper_id}"
    for kind in SectionKind:
        if kind is not SectionKind.TOPIC:
            paper.set_section(kind, f"{kind.label} text of {paper_id}")
    return paper


def draft_for(kind: SectionKind, body: str = "Generated body.") -> SectionDraft:
    return SectionDraft(kind=kind, topic="some topic", body=body, inputs_digest=("topic",))


# Prompt-assembly oracle: the context fields each generation target must
# receive, written down independently before the engine existed.
EXPECTED_CONTEXT = {
    SectionKind.BACKGROUND: (),
    SectionKind.RELATED_WORK: (SectionKind.BACKGROUND,),
    SectionKind.METHOD: (SectionKind.BACKGROUND, SectionKind.RELATED_WORK),
    SectionKind.CONCLUSION: (
        SectionKind.BACKGROUND,
        SectionKind.RELATED_WORK,
        SectionKind.METHOD,
        SectionKind.RESULT,
    ),
}


class TestGenerateSection:
    def test_scripted_conclusion_draft(self, backend):
        backend.script(
            lambda req: req.expected_schema == "generation",
            [{"conclusion": "A solid conclusion."}],
        )
        draft = generate_section(
            SectionKind.CONCLUSION, "topic", {}, backend
        )
        assert draft.kind is SectionKind.CONCLUSION
        assert draft.body == "A solid conclusion."

    def test_guidance_block_is_the_only_difference(self, backend):
        backend.script(
            lambda req: req.expected_schema == "generation",
            [{"background": "b1"}, {"background": "b2"}],
        )
        generate_section(SectionKind.BACKGROUND, "topic", {}, backend)
        generate_section(
            SectionKind.BACKGROUND, "topic", {}, backend, guidance="lean on motivation"
        )
        without, with_guidance = [body for _, body in backend.requests]
        block = "Guidance distilled from prior attempts:\nlean on motivation\n\n"
        assert with_guidance == block + without

    @pytest.mark.parametrize("kind", GENERATION_TARGETS)
    def test_context_table(self, kind, backend):
        backend.script(
            lambda req: req.expected_schema == "generation", [{"text": "body"}]
        )
        paper = full_paper()
        generate_section(kind, paper.topic, build_context(kind, paper), backend)
        (_, body) = backend.requests[0]
        assert f"- Research question: {paper.topic}" in body
        for ctx_kind in EXPECTED_CONTEXT[kind]:
            assert f"- {ctx_kind.label}: {paper.section(ctx_kind)}" in body
        excluded = set(SectionKind) - set(EXPECTED_CONTEXT[kind]) - {SectionKind.TOPIC}
        for ctx_kind in excluded:
            assert f"- {ctx_kind.label}:" not in body

    def test_background_sees_only_topic(self, backend):
        backend.script(
            lambda req: req.expected_schema == "generation", [{"text": "body"}]
        )
        paper = full_paper()
        draft = generate_section(
            SectionKind.BACKGROUND, paper.topic,
            build_context(SectionKind.BACKGROUND, paper), backend,
        )
        assert draft.inputs_digest == ("topic",)

    def test_empty_topic_rejected(self, backend):
        with pytest.raises(ValueError):
            generate_section(SectionKind.BACKGROUND, " ", {}, backend)


class TestEvaluateSection:
    def scripted(self, replies_per_metric):
        backend = MockBackend()
        for metric, replies in replies_per_metric.items():
            backend.script(
                lambda req, metric=metric: (
                    req.expected_schema == "score_report"
                    and f"Judge the {metric} " in req.task_body
                ),
                [score_reply(value, reason=f"{metric} run") for value in replies],
            )
        return backend

    def test_three_run_mean(self):
        backend = self.scripted(
            {
                "Comprehensiveness": [4.0, 4.2, 4.1],
                "Impact": [4.0, 4.0, 4.0],
                "Future Direction": [4.0, 4.0, 4.0],
            }
        )
        result = evaluate_section(draft_for(SectionKind.CONCLUSION), "ref", backend, runs=3)
        assert result.per_metric["Comprehensiveness"].score == 4.10

    def test_single_run(self):
        backend = self.scripted(
            {
                "Comprehensiveness": [3.7],
                "Impact": [3.7],
                "Future Direction": [3.7],
            }
        )
        result = evaluate_section(draft_for(SectionKind.CONCLUSION), "ref", backend, runs=1)
        assert result.per_metric["Impact"].score == 3.70

    def test_full_grid_matches_hand_computed_table(self):
        # Hand computation: 12.3/3 = 4.10, 11.4/3 = 3.80, 10.5/3 = 3.50.
        grid = {
            "Comprehensiveness": [4.0, 4.2, 4.1],
            "Impact": [3.7, 3.9, 3.8],
            "Future Direction": [2.0, 4.0, 4.5],
        }
        expected = {"Comprehensiveness": 4.10, "Impact": 3.80, "Future Direction": 3.50}
        backend = self.scripted(grid)
        result = evaluate_section(draft_for(SectionKind.CONCLUSION), "ref", backend, runs=3)
        assert result.mean_scores() == expected
        assert result.run_scores == grid

    def test_constant_script_invariant_to_runs(self):
        for runs in (1, 2, 5):
            backend = self.scripted(
                {
                    "Comprehensiveness": [4.3] * runs,
                    "Impact": [4.3] * runs,
                    "Future Direction": [4.3] * runs,
                }
            )
            result = evaluate_section(
                draft_for(SectionKind.CONCLUSION), "ref", backend, runs=runs
            )
            assert all(ms.score == 4.30 for ms in result.per_metric.values())

    def test_permuted_script_same_mean(self):
        values = [3.0, 4.0, 5.0]
        means = []
        for permuted in ([3.0, 4.0, 5.0], [5.0, 3.0, 4.0], [4.0, 5.0, 3.0]):
            backend = self.scripted(
                {
                    "Comprehensiveness": permuted,
                    "Impact": values,
                    "Future Direction": values,
                }
            )
            result = evaluate_section(
                draft_for(SectionKind.CONCLUSION), "ref", backend, runs=3
            )
            means.append(result.per_metric["Comprehensiveness"].score)
        assert means == [4.0, 4.0, 4.0]

    def test_per_run_scores_snap_to_tenths(self):
        backend = self.scripted(
            {
                "Comprehensiveness": [4.14, 4.16, 4.0],
                "Impact": [4.0, 4.0, 4.0],
                "Future Direction": [4.0, 4.0, 4.0],
            }
        )
        result = evaluate_section(draft_for(SectionKind.CONCLUSION), "ref", backend, runs=3)
        assert result.run_scores["Comprehensiveness"] == [4.1, 4.2, 4.0]
        assert result.per_metric["Comprehensiveness"].score == 4.10

    def test_comments_concatenated_across_runs(self):
        backend = MockBackend()
        backend.script(
            lambda req: req.expected_schema == "score_report",
            [score_reply(4.0, reason=f"run {i}") for i in range(9)],
        )
        result = evaluate_section(draft_for(SectionKind.CONCLUSION), "ref", backend, runs=3)
        assert result.per_metric["Comprehensiveness"].comments == "run 0\nrun 1\nrun 2"

    def test_failed_run_fails_whole_evaluation(self):
        backend = MockBackend()
        backend.script(
            lambda req: req.expected_schema == "score_report",
            [score_reply(4.0), {"error": "unavailable"}, {"error": "unavailable"},
             {"error": "unavailable"}],
        )
        with pytest.raises(BackendUnavailable):
            evaluate_section(draft_for(SectionKind.CONCLUSION), "ref", backend, runs=3)

    def test_out_of_range_score_rejected(self):
        backend = MockBackend()
        backend.script(
            lambda req: req.expected_schema == "score_report", [score_reply(5.7)]
        )
        with pytest.raises(SchemaViolation):
            evaluate_section(draft_for(SectionKind.CONCLUSION), "ref", backend, runs=1)

    def test_empty_reference_rejected(self, backend):
        with pytest.raises(ValueError):
            evaluate_section(draft_for(SectionKind.CONCLUSION), " ", backend)


def scripted_evaluation(kind: SectionKind):
    backend = MockBackend()
    backend.script(
        lambda req: req.expected_schema == "score_report",
        [score_reply(4.0)], cycle=True,
    )
    return evaluate_section(draft_for(kind), "ref", backend, runs=1)


class TestReflect:
    def test_background_dimensions_populated(self, backend):
        evaluation = scripted_evaluation(SectionKind.BACKGROUND)
        backend.script(
            lambda req: req.expected_schema == "reflection",
            [
                reflection_reply(
                    {
                        "Content": ["add methodological depth"],
                        "Relevance": ["tie back to the question"],
                        "Structure": ["clearer transitions"],
                        "Style": ["define technical terms"],
                    }
                )
            ],
        )
        report = reflect(
            draft_for(SectionKind.BACKGROUND), "ref", evaluation, backend,
            clock=fixed_clock(),
        )
        assert set(report.suggestions) == {"Content", "Relevance", "Structure", "Style"}
        assert all(report.suggestions[d] for d in report.suggestions)
        assert report.scores == {"Completeness": 4.0, "Relevance": 4.0, "Organization": 4.0}
        assert report.created_at == "2000-01-01T00:00:00+00:00"

    def test_unknown_dimension_dropped_with_warning(self, backend, caplog):
        evaluation = scripted_evaluation(SectionKind.BACKGROUND)
        backend.script(
            lambda req: req.expected_schema == "reflection",
            [
                reflection_reply(
                    {"Novelty": ["brand new angle"], "Content": ["more detail"]}
                )
            ],
        )
        with caplog.at_level("WARNING"):
            report = reflect(draft_for(SectionKind.BACKGROUND), "ref", evaluation, backend)
        assert "Novelty" not in report.suggestions
        assert report.suggestions["Content"] == ["more detail"]
        assert any("Novelty" in message for message in caplog.messages)

    def test_only_unknown_dimensions_is_schema_violation(self, backend):
        evaluation = scripted_evaluation(SectionKind.BACKGROUND)
        backend.script(
            lambda req: req.expected_schema == "reflection",
            [reflection_reply({"Novelty": ["nope"]})],
        )
        with pytest.raises(SchemaViolation):
            reflect(draft_for(SectionKind.BACKGROUND), "ref", evaluation, backend)

    def test_string_valued_dimension_coerced_to_list(self, backend):
        evaluation = scripted_evaluation(SectionKind.CONCLUSION)
        backend.script(
            lambda req: req.expected_schema == "reflection",
            [reflection_reply({"Summary": "emphasize the key finding"})],
        )
        report = reflect(draft_for(SectionKind.CONCLUSION), "ref", evaluation, backend)
        assert report.suggestions["Summary"] == ["emphasize the key finding"]

    def test_case_insensitive_projection(self, backend):
        evaluation = scripted_evaluation(SectionKind.CONCLUSION)
        backend.script(
            lambda req: req.expected_schema == "reflection",
            [reflection_reply({"summary": ["a"], "FUTURE": ["b"]})],
        )
        report = reflect(draft_for(SectionKind.CONCLUSION), "ref", evaluation, backend)
        assert report.suggestions["Summary"] == ["a"]
        assert report.suggestions["Future"] == ["b"]


def training_backend(fail_body: str | None = None) -> MockBackend:
    backend = MockBackend()
    if fail_body is not None:
        backend.script(
            lambda req: (
                req.expected_schema == "score_report" and fail_body in req.task_body
            ),
            ["garbage"] * 3,
        )
    backend.script(
        lambda req: req.expected_schema == "generation",
        [{"text": f"BODY-{i}"} for i in range(100)],
    )
    backend.script(
        lambda req: req.expected_schema == "score_report",
        [score_reply(4.0)], cycle=True,
    )
    backend.script(
        lambda req: req.expected_schema == "reflection",
        [reflection_reply()], cycle=True,
    )
    return backend


class TestRunTraining:
    def test_two_papers_four_kinds_all_success(self, tmp_path):
        backend = training_backend()
        store_set = StoreSet(tmp_path / "stores", LocalHashEmbedder())
        summary = run_training(
            [full_paper("p1"), full_paper("p2")],
            GENERATION_TARGETS,
            store_set,
            backend,
            clock=fixed_clock(),
        )
        assert summary.reports_written == 8
        assert summary.failures == []
        assert sum(store_set.counts().values()) == 8
        assert store_set.store_for(SectionKind.CONCLUSION).count == 2

    def test_one_failed_evaluation_is_recorded_and_skipped(self, tmp_path):
        # BODY-5 is p2's related-work draft (second paper, second kind).
        backend = training_backend(fail_body="BODY-5")
        store_set = StoreSet(tmp_path / "stores", LocalHashEmbedder())
        summary = run_training(
            [full_paper("p1"), full_paper("p2")],
            GENERATION_TARGETS,
            store_set,
            backend,
            clock=fixed_clock(),
        )
        assert summary.reports_written == 7
        assert len(summary.failures) == 1
        assert summary.failures[0].paper_id == "p2"
        assert summary.failures[0].kind is SectionKind.RELATED_WORK
        assert sum(store_set.counts().values()) == 7

    def test_empty_train_set(self, tmp_path):
        backend = training_backend()
        store_set = StoreSet(tmp_path / "stores", LocalHashEmbedder())
        summary = run_training([], GENERATION_TARGETS, store_set, backend)
        assert summary.reports_written == 0
        assert summary.failures == []

    def test_report_ids_are_paper_and_kind(self, tmp_path):
        backend = training_backend()
        store_set = StoreSet(tmp_path / "stores", LocalHashEmbedder())
        run_training([full_paper("p9")], (SectionKind.METHOD,), store_set, backend)
        assert store_set.store_for(SectionKind.METHOD).ids() == ["p9:method"]

    def test_non_target_kind_rejected(self, tmp_path):
        store_set = StoreSet(tmp_path / "stores", LocalHashEmbedder())
        with pytest.raises(ValueError):
            run_training([], (SectionKind.TOPIC,), store_set, MockBackend())


class TestFixedClock:
    def test_deterministic_sequence(self):
        a = fixed_clock()
        b = fixed_clock()
        assert [a() for _ in range(3)] == [b() for _ in range(3)]
