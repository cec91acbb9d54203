"""Shared fixtures: scripted backends, sample papers, end-to-end mock scripts."""

from __future__ import annotations

import json
from datetime import date
from pathlib import Path

import pytest

from paperforge.corpus import Chapter, RawPaper
from paperforge.gateway import MockBackend
from paperforge.sections import (
    EVALUATION_METRICS,
    RECOMMENDATION_DIMENSIONS,
    SectionKind,
)

ALL_DIMENSIONS = sorted(
    {dim for dims in RECOMMENDATION_DIMENSIONS.values() for dim in dims}
)


def score_reply(score: float, reason: str = "scripted", suggestions: str | None = None) -> dict:
    reply = {"score": score, "reason": reason}
    if suggestions is not None:
        reply["suggestions"] = suggestions
    return reply


def reflection_reply(dimensions: dict[str, list[str]] | None = None) -> dict:
    if dimensions is None:
        dimensions = {dim: [f"improve {dim.lower()}"] for dim in ALL_DIMENSIONS}
    return {"analysis": "scripted gap analysis", "suggestions": dimensions}


def script_section_extraction(
    backend: MockBackend,
    kind: SectionKind,
    contents: list[str],
    scores_by_round: list[dict[str, float]],
) -> None:
    """Script one section's extraction: N captures plus per-metric checks."""
    backend.script(
        lambda req, kind=kind: (
            req.expected_schema == "extraction"
            and f"capture the {kind.label} content" in req.role_preamble
        ),
        [{kind.value: content} for content in contents],
        description=f"extractor:{kind.value}",
    )
    for metric in EVALUATION_METRICS[kind]:
        backend.script(
            lambda req, kind=kind, metric=metric: req.expected_schema == "score_report"
            and f"{kind.label} Evaluator" in req.role_preamble
            and f"Judge the {metric} " in req.task_body,
            [
                score_reply(rounds[metric], reason=f"round {i + 1} {metric}")
                for i, rounds in enumerate(scores_by_round)
            ],
            description=f"checker:{kind.value}:{metric}",
        )


@pytest.fixture
def backend() -> MockBackend:
    return MockBackend()


def make_raw_paper(
    paper_id: str = "p1",
    when: date = date(2024, 1, 15),
    extra_chapters: tuple[Chapter, ...] = (),
) -> RawPaper:
    chapters = (
        Chapter("Introduction", f"Intro text of {paper_id} motivating the study."),
        Chapter("Related Work", f"Earlier systems related to {paper_id}."),
        Chapter("Methods", f"Protocol used by {paper_id} for data collection."),
        Chapter("Results", f"Accuracy for {paper_id} reached 91.5% (n=168)."),
        Chapter("Discussion", f"Findings of {paper_id} and their implications."),
    ) + extra_chapters
    return RawPaper(
        id=paper_id, title=f"Paper {paper_id}", date=when, discipline="cardiology",
        chapters=chapters,
    )


# ---------------------------------------------------------------------------
# End-to-end fixture: a 3-paper corpus plus a cycling mock script that covers
# extraction, training, inference, and evaluation.

SECTION_CAPTURES = {
    SectionKind.TOPIC: "Can automated readers quantify thymic change on routine scans",
    SectionKind.BACKGROUND: "Thymic change is hard to quantify on routine imaging without automation.",
    SectionKind.RELATED_WORK: "Earlier pipelines segmented mediastinal structures with handcrafted rules.",
    SectionKind.METHOD: "A two-stage reader scores density maps produced from harmonized scans.",
    SectionKind.RESULT: "The locked reader reached high agreement with expert annotation.",
    SectionKind.CONCLUSION: "Automated density scoring is reliable enough for screening workflows.",
}

GENERATED_BODY = (
    "The study shows automated scoring holds up across sites. "
    "Agreement with experts stays high under the locked threshold. "
    "Future work should extend the reader to longitudinal change."
)


def write_chain_corpus(path: Path) -> None:
    records = []
    for paper_id, when in (("pa", "2024-01-15"), ("pb", "2024-05-20"), ("pc", "2024-10-01")):
        records.append(
            {
                "id": paper_id,
                "title": f"Study {paper_id}",
                "date": when,
                "discipline": "radiology",
                "chapters": [
                    {"title": "Introduction", "body": f"Intro of {paper_id} on thymic imaging."},
                    {"title": "Related Work", "body": f"Prior readers relevant to {paper_id}."},
                    {"title": "Methods", "body": f"Acquisition and scoring protocol of {paper_id}."},
                    {"title": "Results", "body": f"Agreement for {paper_id} reached 91.5% (n=168)."},
                    {"title": "Discussion", "body": f"What {paper_id} implies for screening."},
                ],
            }
        )
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(record) + "\n")


def write_chain_script(path: Path) -> None:
    """Cycling matchers that answer every agent role in the pipeline."""
    entries = []
    for kind in SectionKind:
        entries.append(
            {
                "name": f"extractor:{kind.value}",
                "match": {"schema": "extraction", "role_contains": f"the {kind.label} content"},
                "replies": [{kind.value: SECTION_CAPTURES[kind]}],
                "cycle": True,
            }
        )
    entries.extend(
        [
            {
                "name": "checker",
                "match": {"schema": "score_report", "role_contains": "extraction-check"},
                "replies": [{"score": 4.5, "reason": "consistent with the paragraph"}],
                "cycle": True,
            },
            {
                "name": "generator",
                "match": {"schema": "generation"},
                "replies": [{"text": GENERATED_BODY}],
                "cycle": True,
            },
            {
                "name": "judge",
                "match": {"schema": "score_report", "role_contains": "generation-review"},
                "replies": [{"score": 4.2, "reason": "covers the question"}],
                "cycle": True,
            },
            {
                "name": "reflector",
                "match": {"schema": "reflection"},
                "replies": [reflection_reply()],
                "cycle": True,
            },
            {
                "name": "filter",
                "match": {"schema": "filter_verdict"},
                "replies": [{"verdict": "keep", "reason": "same imaging domain"}],
                "cycle": True,
            },
            {
                "name": "integrator",
                "match": {"schema": "integration"},
                "replies": [
                    {"guidance": "Merged guidance: stress agreement metrics and screening impact."}
                ],
                "cycle": True,
            },
        ]
    )
    path.write_text(json.dumps(entries, indent=2), encoding="utf-8")


@pytest.fixture
def chain_workspace(tmp_path: Path) -> dict:
    corpus_path = tmp_path / "corpus.jsonl"
    script_path = tmp_path / "script.json"
    config_path = tmp_path / "run.cfg"
    write_chain_corpus(corpus_path)
    write_chain_script(script_path)
    config_path.write_text(
        "backend=mock\n"
        f"backend.script={script_path}\n"
        "mode=full\n"
        "seed=7\n",
        encoding="utf-8",
    )
    return {
        "root": tmp_path,
        "corpus": corpus_path,
        "script": script_path,
        "config": config_path,
    }
