"""Training loop: generate a section, score it, reflect, store the lessons.

No model weights move here; "training" accumulates reflection reports in
the store so later generation runs can retrieve them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Callable, Iterable

from . import prompts
from .corpus import StructuredPaper
from .gateway import (
    GENERATE_TEMPERATURE,
    JUDGE_TEMPERATURE,
    ChatRequest,
    GatewayError,
    SchemaViolation,
    complete,
)
from .sections import (
    GENERATION_CONTEXT,
    GENERATION_TARGETS,
    EVALUATION_METRICS,
    RECOMMENDATION_DIMENSIONS,
    SectionKind,
)
from .store import ReflectionReport, StoreSet

logger = logging.getLogger(__name__)

Clock = Callable[[], str]


def _utc_now() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def fixed_clock(start: str = "2000-01-01T00:00:00+00:00") -> Clock:
    """Deterministic clock for reproducible runs: start time plus a counter."""
    base = datetime.fromisoformat(start)
    state = {"ticks": 0}

    def tick() -> str:
        from datetime import timedelta

        value = base + timedelta(seconds=state["ticks"])
        state["ticks"] += 1
        return value.isoformat()

    return tick


@dataclass
class SectionDraft:
    """A generated section plus a digest of the context it saw."""

    kind: SectionKind
    topic: str
    body: str
    inputs_digest: tuple[str, ...]

    def __post_init__(self) -> None:
        if not self.body.strip():
            raise ValueError("draft body must be non-empty")


@dataclass
class MetricScore:
    score: float
    comments: str


@dataclass
class EvaluationResult:
    """Per-metric means over independent scoring runs."""

    kind: SectionKind
    per_metric: dict[str, MetricScore]
    runs: int
    run_scores: dict[str, list[float]] = field(default_factory=dict)

    def mean_scores(self) -> dict[str, float]:
        return {metric: ms.score for metric, ms in self.per_metric.items()}


def build_context(kind: SectionKind, paper: StructuredPaper) -> dict[SectionKind, str]:
    """The sibling sections the generator sees for this target."""
    return {ck: paper.section(ck) for ck in GENERATION_CONTEXT[kind]}


def generate_section(
    kind: SectionKind,
    topic: str,
    context: dict[SectionKind, str],
    backend: Any,
    guidance: str | None = None,
    temperature: float = GENERATE_TEMPERATURE,
    max_attempts: int = 3,
) -> SectionDraft:
    """Ask the generator for a section draft, optionally guided by merged reflections."""
    if not topic.strip():
        raise ValueError("topic must be non-empty")
    template = prompts.load_template("generator", kind)
    context_lines = [f"- Research question: {topic}"]
    supplied = ["topic"]
    for ctx_kind in GENERATION_CONTEXT[kind]:
        text = context.get(ctx_kind, "")
        if text:
            context_lines.append(f"- {ctx_kind.label}: {text}")
            supplied.append(ctx_kind.value)
    guidance_block = ""
    if guidance:
        guidance_block = f"Guidance distilled from prior attempts:\n{guidance}\n\n"
    preamble, body = template.render(
        guidance_block=guidance_block,
        context_block="\n".join(context_lines),
        **prompts.section_subs(kind),
    )
    reply = complete(
        ChatRequest(
            role_preamble=preamble,
            task_body=body,
            expected_schema="generation",
            temperature=temperature,
            max_attempts=max_attempts,
        ),
        backend,
    )
    text = next(iter(reply.parsed_payload.values()))
    return SectionDraft(kind=kind, topic=topic, body=text, inputs_digest=tuple(supplied))


def evaluate_section(
    draft: SectionDraft,
    reference: str,
    backend: Any,
    runs: int = 3,
    temperature: float = JUDGE_TEMPERATURE,
    max_attempts: int = 3,
) -> EvaluationResult:
    """Score the draft on its section's metric triple, averaged over runs.

    Any failed run aborts the whole evaluation; partial means are never
    reported. Per-run scores snap to 0.1; means keep 2 decimals.
    """
    if not reference.strip():
        raise ValueError("reference text must be non-empty")
    if runs < 1:
        raise ValueError("runs must be >= 1")
    template = prompts.load_template("evaluator", draft.kind)
    per_metric: dict[str, MetricScore] = {}
    run_scores: dict[str, list[float]] = {}
    for metric in EVALUATION_METRICS[draft.kind]:
        preamble, body = template.render(
            metric=metric,
            topic=draft.topic,
            prediction=draft.body,
            reference=reference,
            **prompts.section_subs(draft.kind),
        )
        scores: list[float] = []
        comments: list[str] = []
        for _ in range(runs):
            reply = complete(
                ChatRequest(
                    role_preamble=preamble,
                    task_body=body,
                    expected_schema="score_report",
                    temperature=temperature,
                    max_attempts=max_attempts,
                ),
                backend,
            )
            raw = float(reply.parsed_payload["score"])
            if not (1.0 <= raw <= 5.0):
                raise SchemaViolation(f"{metric} score {raw} outside [1, 5]")
            scores.append(round(raw, 1))
            comments.append(reply.parsed_payload["reason"])
        mean = round(sum(scores) / len(scores), 2)
        per_metric[metric] = MetricScore(score=mean, comments="\n".join(comments))
        run_scores[metric] = scores
    return EvaluationResult(
        kind=draft.kind, per_metric=per_metric, runs=runs, run_scores=run_scores
    )


def _project_suggestions(
    raw: dict, kind: SectionKind
) -> dict[str, list[str]]:
    known = {dim.lower(): dim for dim in RECOMMENDATION_DIMENSIONS[kind]}
    projected: dict[str, list[str]] = {dim: [] for dim in RECOMMENDATION_DIMENSIONS[kind]}
    for key, items in raw.items():
        dim = known.get(key.strip().lower())
        if dim is None:
            logger.warning("dropping unknown suggestion dimension %r for %s", key, kind.value)
            continue
        projected[dim].extend([items] if isinstance(items, str) else items)
    return projected


def reflect(
    draft: SectionDraft,
    reference: str,
    evaluation: EvaluationResult,
    backend: Any,
    temperature: float = GENERATE_TEMPERATURE,
    max_attempts: int = 3,
    clock: Clock = _utc_now,
) -> ReflectionReport:
    """Turn evaluator feedback into a dimension-tagged reflection report."""
    template = prompts.load_template("reflector", draft.kind)
    comments = "\n".join(
        f"{metric}: {ms.comments}" for metric, ms in evaluation.per_metric.items()
    )
    scores_block = "\n".join(
        f"- {metric}: {ms.score}/5.0" for metric, ms in evaluation.per_metric.items()
    )
    dimensions = ", ".join(RECOMMENDATION_DIMENSIONS[draft.kind])
    preamble, body = template.render(
        topic=draft.topic,
        prediction=draft.body,
        reference=reference,
        comments=comments,
        scores_block=scores_block,
        dimensions=dimensions,
        **prompts.section_subs(draft.kind),
    )
    reply = complete(
        ChatRequest(
            role_preamble=preamble,
            task_body=body,
            expected_schema="reflection",
            temperature=temperature,
            max_attempts=max_attempts,
        ),
        backend,
    )
    suggestions = _project_suggestions(reply.parsed_payload["suggestions"], draft.kind)
    if not any(suggestions.values()):
        raise SchemaViolation(
            f"reflection reply carries no known dimension for {draft.kind.value}"
        )
    return ReflectionReport(
        report_id="",
        topic=draft.topic,
        kind=draft.kind,
        prediction=draft.body,
        reference=reference,
        evaluator_comments=comments,
        scores=evaluation.mean_scores(),
        suggestions=suggestions,
        created_at=clock(),
    )


@dataclass
class TrainingFailure:
    paper_id: str
    kind: SectionKind
    error: str

    def to_dict(self) -> dict:
        return {"paper_id": self.paper_id, "kind": self.kind.value, "error": self.error}


@dataclass
class TrainingSummary:
    reports_written: int
    failures: list[TrainingFailure]
    per_kind: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "reports_written": self.reports_written,
            "failures": [f.to_dict() for f in self.failures],
            "per_kind": dict(self.per_kind),
        }


def run_training(
    train: Iterable[StructuredPaper],
    kinds: tuple[SectionKind, ...],
    store_set: StoreSet,
    backend: Any,
    runs: int = 3,
    clock: Clock = _utc_now,
) -> TrainingSummary:
    """Generate, evaluate, reflect, and store for every (paper, kind) pair.

    Per-item failures are recorded and skipped; the run continues.
    """
    for kind in kinds:
        if kind not in GENERATION_TARGETS:
            raise ValueError(f"{kind.value} is not a generation target")
    written = 0
    failures: list[TrainingFailure] = []
    per_kind = {kind.value: 0 for kind in kinds}
    for paper in train:
        for kind in kinds:
            try:
                draft = generate_section(
                    kind, paper.topic, build_context(kind, paper), backend
                )
                evaluation = evaluate_section(
                    draft, paper.section(kind), backend, runs=runs
                )
                report = reflect(draft, paper.section(kind), evaluation, backend, clock=clock)
                report.report_id = f"{paper.id}:{kind.value}"
                store_set.add_report(report)
            except (GatewayError, ValueError) as exc:
                logger.warning("training failure for %s/%s: %s", paper.id, kind.value, exc)
                failures.append(TrainingFailure(paper.id, kind, str(exc)))
                continue
            written += 1
            per_kind[kind.value] += 1
    return TrainingSummary(reports_written=written, failures=failures, per_kind=per_kind)
