"""Dual-agent extraction: capture section content, score it, refine, select.

Each section runs a fixed number of capture/score rounds. Long structured
sections take the final round's output (progressive refinement); short
dense sections gate on per-metric thresholds and take the best passing
round, failing the paper when no round passes.
"""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any

from . import prompts
from .gateway import (
    GENERATE_TEMPERATURE,
    JUDGE_TEMPERATURE,
    ChatRequest,
    SchemaViolation,
    complete,
)
from .sections import EVALUATION_METRICS, SectionKind

if TYPE_CHECKING:
    from .corpus import NumericContext, RawPaper, StructuredPaper

logger = logging.getLogger(__name__)


class SelectionStrategy(str, Enum):
    PROGRESSIVE = "progressive"
    QUALITY_GATED = "quality_gated"


class TraceStatus(str, Enum):
    SELECTED = "selected"
    FAILED = "failed"


DEFAULT_STRATEGIES: dict[SectionKind, SelectionStrategy] = {
    SectionKind.TOPIC: SelectionStrategy.QUALITY_GATED,
    SectionKind.BACKGROUND: SelectionStrategy.QUALITY_GATED,
    SectionKind.RELATED_WORK: SelectionStrategy.PROGRESSIVE,
    SectionKind.METHOD: SelectionStrategy.PROGRESSIVE,
    SectionKind.RESULT: SelectionStrategy.PROGRESSIVE,
    SectionKind.CONCLUSION: SelectionStrategy.QUALITY_GATED,
}


@dataclass
class IterationRecord:
    """One capture/score round for a section."""

    round: int
    captured_content: str
    scores: dict[str, float]
    reasons: dict[str, str]
    suggestions: str = ""

    def mean_score(self) -> float:
        return statistics.fmean(self.scores.values())

    def to_dict(self) -> dict:
        return {
            "round": self.round,
            "captured_content": self.captured_content,
            "scores": dict(self.scores),
            "reasons": dict(self.reasons),
            "suggestions": self.suggestions,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "IterationRecord":
        return cls(
            round=record["round"],
            captured_content=record["captured_content"],
            scores=dict(record["scores"]),
            reasons=dict(record.get("reasons", {})),
            suggestions=record.get("suggestions", ""),
        )


@dataclass
class ExtractionTrace:
    """Full record of one section's refinement rounds and the selection."""

    section: SectionKind
    iterations: list[IterationRecord]
    strategy: SelectionStrategy
    selected_round: int | None = None
    status: TraceStatus = TraceStatus.SELECTED

    def selected_content(self) -> str:
        if self.status is not TraceStatus.SELECTED or self.selected_round is None:
            raise ValueError(f"trace for {self.section.value} has no selected round")
        return self.iterations[self.selected_round - 1].captured_content

    def to_dict(self) -> dict:
        return {
            "section": self.section.value,
            "strategy": self.strategy.value,
            "status": self.status.value,
            "selected_round": self.selected_round,
            "iterations": [it.to_dict() for it in self.iterations],
        }

    @classmethod
    def from_dict(cls, record: dict) -> "ExtractionTrace":
        return cls(
            section=SectionKind(record["section"]),
            iterations=[IterationRecord.from_dict(it) for it in record["iterations"]],
            strategy=SelectionStrategy(record["strategy"]),
            selected_round=record.get("selected_round"),
            status=TraceStatus(record["status"]),
        )


@dataclass
class ExtractionConfig:
    """Knobs for the refinement loop.

    ``reply_scale`` describes the range the checker was asked to score on;
    when it differs from ``metric_scale`` scores are affinely rescaled
    (e.g. a 0-10 prompt normalized onto the 1-5 engine scale).
    """

    rounds: int = 3
    threshold: float = 4.0
    metric_scale: tuple[float, float] = (1.0, 5.0)
    reply_scale: tuple[float, float] | None = None
    metrics: dict[SectionKind, tuple[str, ...]] = field(
        default_factory=lambda: dict(EVALUATION_METRICS)
    )
    strategies: dict[SectionKind, SelectionStrategy] = field(
        default_factory=lambda: dict(DEFAULT_STRATEGIES)
    )
    extract_temperature: float = GENERATE_TEMPERATURE
    check_temperature: float = JUDGE_TEMPERATURE
    max_attempts: int = 3

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be positive")
        lo, hi = self.metric_scale
        if not (lo <= self.threshold <= hi):
            raise ValueError(f"threshold {self.threshold} outside metric scale [{lo}, {hi}]")

    def effective_reply_scale(self) -> tuple[float, float]:
        return self.reply_scale or self.metric_scale


def rescale_score(score: float, reply_scale: tuple[float, float], metric_scale: tuple[float, float]) -> float:
    rlo, rhi = reply_scale
    mlo, mhi = metric_scale
    if (rlo, rhi) == (mlo, mhi):
        return score
    return mlo + (score - rlo) * (mhi - mlo) / (rhi - rlo)


def select_iteration(
    iterations: list[IterationRecord],
    strategy: SelectionStrategy,
    threshold: float,
) -> int | None:
    """Pick the round to keep, or None when the quality gate fails.

    Quality-gated: only rounds whose every metric clears the threshold are
    candidates; the highest mean wins, ties going to the earliest round.
    Progressive: always the final round.
    """
    if not iterations:
        raise ValueError("at least one iteration required")
    if strategy is SelectionStrategy.PROGRESSIVE:
        return iterations[-1].round
    best_round: int | None = None
    best_mean = float("-inf")
    for record in iterations:
        if any(score < threshold for score in record.scores.values()):
            continue
        mean = record.mean_score()
        if mean > best_mean:
            best_mean = mean
            best_round = record.round
    return best_round


def _numbers_block(extras: "NumericContext | None") -> str:
    if extras is None or not extras.values:
        return ""
    lines = [f"- {tok.raw_token} (at offset {tok.char_offset})" for tok in extras.values]
    return "\nNumerical values found in the text:\n" + "\n".join(lines) + "\n"


def _history_block(previous: IterationRecord) -> str:
    score_lines = "\n".join(
        f"  - {metric}: {score:g} ({previous.reasons.get(metric, '')})"
        for metric, score in previous.scores.items()
    )
    block = (
        f"\nHistorical record from round {previous.round}:\n"
        f"Previous capture:\n{previous.captured_content}\n"
        f"Previous scores and reasons:\n{score_lines}\n"
    )
    if previous.suggestions:
        block += f"Improvement suggestions:\n{previous.suggestions}\n"
    return block


def run_section_extraction(
    kind: SectionKind,
    source: str,
    extras: "NumericContext | None",
    cfg: ExtractionConfig,
    backend: Any,
) -> ExtractionTrace:
    """Run the full capture/score loop for one section of one paper."""
    if not source.strip():
        raise ValueError("source text must be non-empty")
    if (extras is not None) != (kind is SectionKind.RESULT):
        raise ValueError("numeric extras are supplied exactly for result sections")

    subs = prompts.section_subs(kind)
    extractor_tpl = prompts.load_template("extractor", kind)
    checker_tpl = prompts.load_template("checker", kind)
    reply_lo, reply_hi = cfg.effective_reply_scale()
    strategy = cfg.strategies[kind]
    metrics = cfg.metrics[kind]

    iterations: list[IterationRecord] = []
    for round_no in range(1, cfg.rounds + 1):
        history = _history_block(iterations[-1]) if iterations else ""
        preamble, body = extractor_tpl.render(
            source=source,
            numbers_block=_numbers_block(extras),
            history_block=history,
            **subs,
        )
        reply = complete(
            ChatRequest(
                role_preamble=preamble,
                task_body=body,
                expected_schema="extraction",
                temperature=cfg.extract_temperature,
                max_attempts=cfg.max_attempts,
            ),
            backend,
        )
        captured = next(iter(reply.parsed_payload.values()))

        scores: dict[str, float] = {}
        reasons: dict[str, str] = {}
        suggestion_lines: list[str] = []
        for metric in metrics:
            check_preamble, check_body = checker_tpl.render(
                metric=metric,
                scale_lo=f"{reply_lo:g}",
                scale_hi=f"{reply_hi:g}",
                source=source,
                captured=captured,
                **subs,
            )
            check_reply = complete(
                ChatRequest(
                    role_preamble=check_preamble,
                    task_body=check_body,
                    expected_schema="score_report",
                    temperature=cfg.check_temperature,
                    max_attempts=cfg.max_attempts,
                ),
                backend,
            )
            payload = check_reply.parsed_payload
            raw_score = float(payload["score"])
            if not (reply_lo <= raw_score <= reply_hi):
                raise SchemaViolation(
                    f"{metric} score {raw_score} outside reply scale [{reply_lo}, {reply_hi}]"
                )
            scores[metric] = rescale_score(raw_score, (reply_lo, reply_hi), cfg.metric_scale)
            reasons[metric] = payload["reason"]
            if payload.get("suggestions"):
                suggestion_lines.append(f"{metric}: {payload['suggestions']}")

        iterations.append(
            IterationRecord(
                round=round_no,
                captured_content=captured,
                scores=scores,
                reasons=reasons,
                suggestions="\n".join(suggestion_lines),
            )
        )

    selected = select_iteration(iterations, strategy, cfg.threshold)
    if selected is None:
        logger.info("section %s failed the quality gate in all rounds", kind.value)
        return ExtractionTrace(
            section=kind,
            iterations=iterations,
            strategy=strategy,
            selected_round=None,
            status=TraceStatus.FAILED,
        )
    return ExtractionTrace(
        section=kind,
        iterations=iterations,
        strategy=strategy,
        selected_round=selected,
        status=TraceStatus.SELECTED,
    )


def extract_paper(
    paper: "RawPaper", cfg: ExtractionConfig, backend: Any
) -> tuple["StructuredPaper | None", str]:
    """Map chapters and run every section's loop.

    Returns (structured paper, "") on success or (None, reason) when the
    paper must be dropped: a required chapter is missing or a quality-gated
    section failed in every round.
    """
    from .corpus import MissingSection, StructuredPaper, extract_numbers, map_chapters

    try:
        mapping = map_chapters(paper)
    except MissingSection as exc:
        return None, str(exc)

    structured = StructuredPaper(id=paper.id, date=paper.date)
    for kind in SectionKind:
        source = mapping[kind]
        extras = extract_numbers(source) if kind is SectionKind.RESULT else None
        trace = run_section_extraction(kind, source, extras, cfg, backend)
        structured.provenance[kind] = trace
        if trace.status is TraceStatus.FAILED:
            return None, f"section {kind.value} failed extraction quality gate"
        structured.set_section(kind, trace.selected_content())
    return structured, ""
