"""Evaluation metrics: similarity-weighted precision/recall and judge scores.

Generated sections are decomposed into sentence elements, aligned greedily
against reference elements by embedding similarity, and scored with the
soft precision/recall formulas. Judge-based dimension scores are averaged
over repeated runs and everything rolls up into a mode-comparison table.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Any

import numpy as np

from .sections import EVALUATION_METRICS, SectionKind
from .store import cosine
from .training import SectionDraft, evaluate_section

DEFAULT_TAU = 0.5

MODE_LABELS = {"full": "Ours", "filter": "Filter", "rag": "RAG", "no_rag": "No-RAG"}
MODE_ORDER = ("full", "filter", "rag", "no_rag")


# ---------------------------------------------------------------------------
# Decomposition

# Words whose trailing period never ends a sentence.
_ABBREVIATIONS = {
    "dr", "mr", "mrs", "ms", "prof", "st",
    "fig", "figs", "eq", "eqs", "sec", "secs", "ref", "refs",
    "e.g", "i.e", "cf", "vs", "al", "no", "approx", "ca",
}

_BOUNDARY_RE = re.compile(r"[.?!]+(?=\s)")
_TRAILING_TOKEN_RE = re.compile(r"(\S+)$")


def _is_boundary(text: str, end: int, punct_start: int) -> bool:
    rest = text[end:].lstrip()
    if not rest:
        return True
    # Sentences open with a capital, digit, or quote; a lowercase
    # continuation means the period belonged to an abbreviation.
    if not (rest[0].isupper() or rest[0].isdigit() or rest[0] in "\"'("):
        return False
    if text[punct_start] == ".":
        before = _TRAILING_TOKEN_RE.search(text[:punct_start])
        if before:
            token = before.group(1).lower().lstrip("(\"'")
            if token in _ABBREVIATIONS:
                return False
    return True


def decompose(text: str) -> list[str]:
    """Split text into sentence elements; empties are dropped."""
    if not text.strip():
        raise ValueError("text must be non-empty")
    elements: list[str] = []
    start = 0
    for match in _BOUNDARY_RE.finditer(text):
        if _is_boundary(text, match.end(), match.start()):
            piece = text[start : match.end()].strip()
            if piece:
                elements.append(piece)
            start = match.end()
    tail = text[start:].strip()
    if tail:
        elements.append(tail)
    return elements


# ---------------------------------------------------------------------------
# Alignment

@dataclass
class AlignedPair:
    pred_index: int
    truth_index: int
    pred: str
    truth: str
    similarity: float


@dataclass
class ElementAlignment:
    """Greedy pairing of predicted vs ground-truth elements plus relevance flags."""

    pairs: list[AlignedPair]
    pred_relevant: list[bool]
    truth_relevant: list[bool]


def align(
    pred_elements: list[str],
    truth_elements: list[str],
    embedder: Any,
    tau: float = DEFAULT_TAU,
) -> ElementAlignment:
    """Greedy maximum-similarity matching.

    Repeatedly pairs the globally highest-similarity unpaired couple (ties
    to the lowest indices). An element is relevant when its best similarity
    against the other side reaches ``tau``.
    """
    if not pred_elements or not truth_elements:
        raise ValueError("both element lists must be non-empty")
    pred_vecs = [embedder.embed(e).vector for e in pred_elements]
    truth_vecs = [embedder.embed(e).vector for e in truth_elements]
    matrix = np.array(
        [[cosine(p, g) for g in truth_vecs] for p in pred_vecs], dtype=np.float64
    )
    pred_relevant = [bool(row.max() >= tau) for row in matrix]
    truth_relevant = [bool(matrix[:, j].max() >= tau) for j in range(len(truth_elements))]

    working = matrix.copy()
    pairs: list[AlignedPair] = []
    rounds = min(len(pred_elements), len(truth_elements))
    for _ in range(rounds):
        flat = int(np.argmax(working))
        i, j = divmod(flat, working.shape[1])
        pairs.append(
            AlignedPair(
                pred_index=i,
                truth_index=j,
                pred=pred_elements[i],
                truth=truth_elements[j],
                similarity=float(matrix[i, j]),
            )
        )
        working[i, :] = -np.inf
        working[:, j] = -np.inf
    return ElementAlignment(
        pairs=pairs, pred_relevant=pred_relevant, truth_relevant=truth_relevant
    )


# ---------------------------------------------------------------------------
# Soft precision / recall

@dataclass(frozen=True)
class SoftScore:
    value: float
    degenerate: bool = False


def soft_recall(alignment: ElementAlignment) -> SoftScore:
    """Similarity-weighted recall over relevant ground-truth elements."""
    denom = sum(alignment.truth_relevant)
    if denom == 0:
        return SoftScore(0.0, degenerate=True)
    num = sum(
        pair.similarity
        for pair in alignment.pairs
        if alignment.truth_relevant[pair.truth_index]
    )
    return SoftScore(num / denom)


def soft_precision(alignment: ElementAlignment, mode: str = "prose") -> SoftScore:
    """Similarity-weighted precision.

    ``prose`` divides by the count of relevant predicted elements;
    ``literal`` keeps the ground-truth denominator (which can exceed 1
    when predictions outnumber relevant truths).
    """
    if mode not in ("prose", "literal"):
        raise ValueError(f"unknown precision mode {mode!r}")
    num = sum(
        pair.similarity
        for pair in alignment.pairs
        if alignment.pred_relevant[pair.pred_index]
    )
    if mode == "prose":
        denom = sum(alignment.pred_relevant)
    else:
        denom = sum(alignment.truth_relevant)
    if denom == 0:
        return SoftScore(0.0, degenerate=True)
    return SoftScore(num / denom)


def score_dimensions(
    body: str,
    topic: str,
    reference: str,
    kind: SectionKind,
    backend: Any,
    runs: int = 3,
) -> dict[str, float]:
    """Judge-run means for the section's metric triple."""
    draft = SectionDraft(kind=kind, topic=topic, body=body, inputs_digest=("topic",))
    result = evaluate_section(draft, reference, backend, runs=runs)
    return result.mean_scores()


# ---------------------------------------------------------------------------
# Scorecards and the comparison table

@dataclass
class SectionScorecard:
    """All five metric components for one (section, mode) cell, in [0, 1]."""

    kind: SectionKind
    soft_precision: float
    soft_recall: float
    dim_scores: tuple[float, float, float]

    @property
    def total(self) -> float:
        components = (self.soft_precision, self.soft_recall, *self.dim_scores)
        return sum(components) / len(components)


def normalize_dimension(score: float) -> float:
    """Affine map from the 1-5 judge scale onto [0, 1]."""
    return (score - 1.0) / 4.0


def make_scorecard(
    kind: SectionKind,
    precision: float,
    recall: float,
    dimension_means: dict[str, float],
) -> SectionScorecard:
    ordered = tuple(
        normalize_dimension(dimension_means[m]) for m in EVALUATION_METRICS[kind]
    )
    if len(ordered) != 3:
        raise ValueError(f"{kind.value} does not have a three-metric triple")
    return SectionScorecard(
        kind=kind, soft_precision=precision, soft_recall=recall, dim_scores=ordered
    )


def _pct(value: float) -> float:
    return round(value * 100, 2)


def build_report(
    scorecards: dict[str, dict[SectionKind, SectionScorecard]]
) -> tuple[str, dict]:
    """Render the mode-comparison table as aligned text plus JSON data.

    Rows are modes within each section; columns are the two soft metrics,
    the three dimension scores, and their mean, all as percentages.
    """
    if not scorecards:
        raise ValueError("at least one mode's scorecards required")
    modes = [m for m in MODE_ORDER if m in scorecards]
    kinds = sorted(
        {kind for per_mode in scorecards.values() for kind in per_mode},
        key=lambda k: list(SectionKind).index(k),
    )
    header = f"{'Sect.':<10}{'Method':<9}{'Prec.':>8}{'Rec.':>8}{'S1':>8}{'S2':>8}{'S3':>8}{'Total':>8}"
    lines = [header, "-" * len(header)]
    data: dict = {"sections": {}}
    for kind in kinds:
        section_data: dict = {}
        for mode in modes:
            card = scorecards[mode].get(kind)
            if card is None:
                continue
            cells = {
                "precision": _pct(card.soft_precision),
                "recall": _pct(card.soft_recall),
                "s1": _pct(card.dim_scores[0]),
                "s2": _pct(card.dim_scores[1]),
                "s3": _pct(card.dim_scores[2]),
            }
            # The Total column is the mean of the five displayed columns.
            cells["total"] = round(sum(cells.values()) / 5, 2)
            section_data[mode] = cells
            lines.append(
                f"{kind.label:<10}{MODE_LABELS[mode]:<9}"
                f"{cells['precision']:>8.2f}{cells['recall']:>8.2f}"
                f"{cells['s1']:>8.2f}{cells['s2']:>8.2f}{cells['s3']:>8.2f}"
                f"{cells['total']:>8.2f}"
            )
        data["sections"][kind.value] = section_data
    return "\n".join(lines) + "\n", data


def report_to_json(data: dict) -> str:
    return json.dumps(data, indent=2, ensure_ascii=False) + "\n"
