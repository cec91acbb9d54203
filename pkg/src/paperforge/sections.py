"""Section taxonomy: the six canonical paper sections and their metadata tables.

Every pipeline stage addresses sections through :class:`SectionKind`. The
tables below drive chapter mapping, checker/evaluator metric sets,
reflection dimensions, and generator context assembly.
"""

from __future__ import annotations

from enum import Enum


class SectionKind(str, Enum):
    """The six canonical sections a paper is decomposed into."""

    TOPIC = "topic"
    BACKGROUND = "background"
    RELATED_WORK = "related_work"
    METHOD = "method"
    RESULT = "result"
    CONCLUSION = "conclusion"

    @property
    def label(self) -> str:
        """Human-readable label, e.g. ``Related Work``."""
        return _LABELS[self]


_LABELS = {
    SectionKind.TOPIC: "Topic",
    SectionKind.BACKGROUND: "Background",
    SectionKind.RELATED_WORK: "Related Work",
    SectionKind.METHOD: "Method",
    SectionKind.RESULT: "Result",
    SectionKind.CONCLUSION: "Conclusion",
}

# Acceptable chapter titles per section, compared after normalization
# (lowercase, trimmed, punctuation stripped). Exact match, not substring:
# substring matching would send "Results of prior work" to RESULT.
CHAPTER_ALIASES: dict[SectionKind, tuple[str, ...]] = {
    SectionKind.TOPIC: ("introduction",),
    SectionKind.BACKGROUND: ("introduction",),
    SectionKind.RELATED_WORK: ("related work", "literature review", "previous work"),
    SectionKind.METHOD: ("methods", "methodology"),
    SectionKind.RESULT: ("results", "findings", "outcomes"),
    SectionKind.CONCLUSION: ("conclusions", "summary", "discussion"),
}

# Checker/Evaluator metric triples per section. TOPIC reuses the BACKGROUND
# set; RESULT gets a single relevance score (it is never a generation target
# and its extraction is progressive, so gating never applies).
EVALUATION_METRICS: dict[SectionKind, tuple[str, ...]] = {
    SectionKind.TOPIC: ("Completeness", "Relevance", "Organization"),
    SectionKind.BACKGROUND: ("Completeness", "Relevance", "Organization"),
    SectionKind.RELATED_WORK: ("Diversity", "Criticality", "Connection"),
    SectionKind.METHOD: ("Coherence", "Necessity", "Completeness"),
    SectionKind.RESULT: ("Relevance",),
    SectionKind.CONCLUSION: ("Comprehensiveness", "Impact", "Future Direction"),
}

# Reflection-report suggestion dimensions per generation target.
RECOMMENDATION_DIMENSIONS: dict[SectionKind, tuple[str, ...]] = {
    SectionKind.BACKGROUND: ("Content", "Relevance", "Structure", "Style"),
    SectionKind.RELATED_WORK: ("Coverage", "Analysis", "Connection", "Synthesis"),
    SectionKind.METHOD: ("Completeness", "Flow", "Precision", "Justification"),
    SectionKind.CONCLUSION: ("Summary", "Impact", "Future", "Synthesis"),
}

# Sections the training/inference loops generate. TOPIC is an input and
# RESULT is given experimental data, so neither is a target.
GENERATION_TARGETS: tuple[SectionKind, ...] = (
    SectionKind.BACKGROUND,
    SectionKind.RELATED_WORK,
    SectionKind.METHOD,
    SectionKind.CONCLUSION,
)

# Context fields supplied to the generator per target, in prompt order.
# Each target sees the topic plus the sections that precede it in paper
# order; the conclusion additionally consumes the experimental results.
GENERATION_CONTEXT: dict[SectionKind, tuple[SectionKind, ...]] = {
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
