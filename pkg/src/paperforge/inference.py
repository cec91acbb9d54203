"""Generation-time pipeline: retrieve reflections, filter, integrate, generate.

Baseline modes are first-class: ``full`` runs every stage, ``filter`` skips
integration, ``rag`` concatenates retrieved reports verbatim, and
``no_rag`` generates unguided. One engine, four ablations.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Any

from . import prompts
from .gateway import (
    GENERATE_TEMPERATURE,
    JUDGE_TEMPERATURE,
    ChatRequest,
    GatewayError,
    complete,
)
from .sections import SectionKind
from .store import FilterVerdict, ReflectionReport, RetrievalHit, StoreSet
from .training import SectionDraft, generate_section

logger = logging.getLogger(__name__)

MODES = ("full", "filter", "rag", "no_rag")

DEFAULT_TOKEN_BUDGET = 1200
_CHARS_PER_TOKEN = 4


def estimate_tokens(text: str) -> int:
    """Crude but configured-in-one-place token estimate."""
    return max(1, (len(text) + _CHARS_PER_TOKEN - 1) // _CHARS_PER_TOKEN)


@dataclass
class IntegratedGuidance:
    kind: SectionKind
    merged_text: str
    source_ids: list[str]
    token_budget: int


def render_report_guidance(report: ReflectionReport) -> str:
    """Canonical rendering of one report's lessons for prompt inclusion."""
    lines = [f"[{report.report_id}] Lessons for {report.kind.label} (topic: {report.topic}):"]
    for dim, items in report.suggestions.items():
        if items:
            lines.append(f"- {dim}: " + " ".join(items))
    return "\n".join(lines)


def concat_guidance(reports: list[ReflectionReport]) -> str:
    """Plain concatenation of report renderings: the standard-RAG guidance."""
    return "\n\n".join(render_report_guidance(r) for r in reports)


class RecordingBackend:
    """Wraps a backend and captures every exchange for the audit trail."""

    def __init__(self, inner: Any) -> None:
        self.inner = inner
        self.exchanges: list[dict] = []
        self.retry_base_delay = getattr(inner, "retry_base_delay", 1.0)

    def send(self, request: ChatRequest, body: str) -> str:
        try:
            reply = self.inner.send(request, body)
        except GatewayError as exc:
            self.exchanges.append(
                {
                    "preamble": request.role_preamble,
                    "body": body,
                    "prompt_sha256": _sha(request.role_preamble + "\n" + body),
                    "error": str(exc),
                }
            )
            raise
        self.exchanges.append(
            {
                "preamble": request.role_preamble,
                "body": body,
                "prompt_sha256": _sha(request.role_preamble + "\n" + body),
                "reply": reply,
                "reply_sha256": _sha(reply),
            }
        )
        return reply

    def drain(self) -> list[dict]:
        taken, self.exchanges = self.exchanges, []
        return taken


def _sha(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def filter_reports(
    topic: str,
    kind: SectionKind,
    hits: list[RetrievalHit],
    backend: Any,
    temperature: float = JUDGE_TEMPERATURE,
    max_attempts: int = 3,
) -> list[RetrievalHit]:
    """Ask the gatekeeper for a keep/drop verdict per hit, preserving order.

    A failed verdict call conservatively drops that hit.
    """
    if not hits:
        raise ValueError("hits must be non-empty")
    template = prompts.load_template("filter", kind)
    kept: list[RetrievalHit] = []
    for hit in hits:
        preamble, body = template.render(
            topic=topic,
            report=render_report_guidance(hit.report),
            **prompts.section_subs(kind),
        )
        try:
            reply = complete(
                ChatRequest(
                    role_preamble=preamble,
                    task_body=body,
                    expected_schema="filter_verdict",
                    temperature=temperature,
                    max_attempts=max_attempts,
                ),
                backend,
            )
        except GatewayError as exc:
            logger.warning(
                "filter verdict failed for %s, dropping conservatively: %s",
                hit.report.report_id, exc,
            )
            hit.filter_verdict = FilterVerdict(keep=False, reason=f"verdict call failed: {exc}")
            continue
        payload = reply.parsed_payload
        keep = payload["verdict"].strip().lower() == "keep"
        hit.filter_verdict = FilterVerdict(keep=keep, reason=payload["reason"])
        if keep:
            kept.append(hit)
    return kept


def integrate_reports(
    kind: SectionKind,
    kept: list[RetrievalHit],
    token_budget: int,
    backend: Any,
    temperature: float = GENERATE_TEMPERATURE,
    max_attempts: int = 3,
) -> IntegratedGuidance:
    """Merge all kept reports into one guidance text within the token budget.

    An over-budget merge is re-prompted with a tighter instruction; if the
    model never complies the text is clipped to the budget.
    """
    if not kept:
        raise ValueError("kept hits must be non-empty")
    template = prompts.load_template("integrator", kind)
    reports_block = concat_guidance([hit.report for hit in kept])
    source_ids = [hit.report.report_id for hit in kept]
    tighten = ""
    merged = ""
    for _ in range(max_attempts):
        preamble, body = template.render(
            token_budget=str(token_budget),
            tighten_block=tighten,
            reports_block=reports_block,
            **prompts.section_subs(kind),
        )
        reply = complete(
            ChatRequest(
                role_preamble=preamble,
                task_body=body,
                expected_schema="integration",
                temperature=temperature,
                max_attempts=max_attempts,
            ),
            backend,
        )
        merged = reply.parsed_payload["guidance"]
        if estimate_tokens(merged) <= token_budget:
            return IntegratedGuidance(
                kind=kind, merged_text=merged, source_ids=source_ids, token_budget=token_budget
            )
        logger.warning(
            "integrated guidance is %d tokens, budget %d; re-prompting tighter",
            estimate_tokens(merged), token_budget,
        )
        tighten = (
            f" Your previous merge was too long ({estimate_tokens(merged)} tokens);"
            " compress aggressively and stay within the budget."
        )
    clipped = merged[: token_budget * _CHARS_PER_TOKEN]
    logger.warning("clipping integrated guidance to the %d-token budget", token_budget)
    return IntegratedGuidance(
        kind=kind, merged_text=clipped, source_ids=source_ids, token_budget=token_budget
    )


@dataclass
class InferenceResult:
    drafts: dict[SectionKind, SectionDraft]
    audit: dict
    errors: dict[SectionKind, str] = field(default_factory=dict)


def run_inference(
    topic: str,
    context: dict[SectionKind, str],
    kinds: tuple[SectionKind, ...],
    store_set: StoreSet | None,
    backend: Any,
    mode: str = "full",
    k: int = 8,
    token_budget: int = DEFAULT_TOKEN_BUDGET,
) -> InferenceResult:
    """Generate the requested sections under the configured ablation mode.

    Per-kind failures are isolated: other kinds still generate, and the
    audit trail records what happened at every stage.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    recorder = RecordingBackend(backend)
    drafts: dict[SectionKind, SectionDraft] = {}
    errors: dict[SectionKind, str] = {}
    audit: dict = {"topic": topic, "mode": mode, "kinds": {}}
    for kind in kinds:
        stage_audit: dict = {
            "retrieval": [],
            "filter": [],
            "integration": None,
            "generation": None,
        }
        audit["kinds"][kind.value] = stage_audit
        try:
            guidance: str | None = None
            hits: list[RetrievalHit] = []
            if mode != "no_rag" and store_set is not None:
                hits = store_set.search(kind, topic, k)
                stage_audit["retrieval"] = [
                    {"report_id": h.report.report_id, "similarity": h.similarity}
                    for h in hits
                ]
            if hits:
                if mode == "rag":
                    kept = hits
                else:
                    kept = filter_reports(topic, kind, hits, recorder)
                    stage_audit["filter"] = [
                        {
                            "report_id": h.report.report_id,
                            "verdict": "keep" if h.filter_verdict.keep else "drop",
                            "reason": h.filter_verdict.reason,
                            "exchanges": [],
                        }
                        for h in hits
                    ]
                    _attach_exchanges(stage_audit["filter"], recorder.drain())
                if kept:
                    if mode == "full":
                        integrated = integrate_reports(kind, kept, token_budget, recorder)
                        guidance = integrated.merged_text
                        stage_audit["integration"] = {
                            "source_ids": integrated.source_ids,
                            "guidance": guidance,
                            "exchanges": recorder.drain(),
                        }
                    else:
                        guidance = concat_guidance([h.report for h in kept])
            draft = generate_section(
                kind, topic, context, recorder, guidance=guidance
            )
            stage_audit["generation"] = {
                "guided": guidance is not None,
                "exchanges": recorder.drain(),
                "draft_sha256": _sha(draft.body),
            }
            drafts[kind] = draft
        except (GatewayError, ValueError) as exc:
            logger.warning("inference failed for %s: %s", kind.value, exc)
            stage_audit["error"] = str(exc)
            errors[kind] = str(exc)
            recorder.drain()
    return InferenceResult(drafts=drafts, audit=audit, errors=errors)


def _attach_exchanges(filter_audit: list[dict], exchanges: list[dict]) -> None:
    # One verdict exchange per hit, in order; repair retries stay attached
    # to the hit that triggered them.
    if len(exchanges) == len(filter_audit):
        for entry, exchange in zip(filter_audit, exchanges):
            entry["exchanges"] = [exchange]
    else:
        for entry in filter_audit:
            entry["exchanges"] = []
        if filter_audit:
            filter_audit[0]["exchanges"] = exchanges


def write_audit(audit: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(audit, handle, ensure_ascii=False, indent=2)
        handle.write("\n")
