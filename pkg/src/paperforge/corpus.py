"""Corpus handling: raw papers in, structured papers out.

Maps chapters to the six canonical sections via the alias table, pulls
numeric measurements out of result text, and splits corpora by a
publication-date cutoff. All pure functions over immutable inputs.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from datetime import date, datetime
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterable

from .sections import CHAPTER_ALIASES, SectionKind

if TYPE_CHECKING:
    from .extraction import ExtractionTrace


class CorpusError(Exception):
    """A paper or corpus file violates its contract."""


class MissingSection(CorpusError):
    """No chapter matches a required section; the paper must be dropped."""

    def __init__(self, missing: tuple[SectionKind, ...]):
        self.missing = missing
        self.kind = missing[0]
        names = ", ".join(k.label for k in missing)
        super().__init__(f"no chapter matches required section(s): {names}")


@dataclass(frozen=True)
class Chapter:
    title: str
    body: str


@dataclass(frozen=True)
class RawPaper:
    """An ingested paper before section mapping."""

    id: str
    title: str
    date: date
    discipline: str
    chapters: tuple[Chapter, ...]

    def __post_init__(self) -> None:
        if not self.id:
            raise CorpusError("paper id must be non-empty")
        if not self.chapters:
            raise CorpusError(f"paper {self.id}: at least one chapter required")


@dataclass(frozen=True)
class NumericToken:
    raw_token: str
    numeric_value: float
    char_offset: int
    context_window: str


@dataclass(frozen=True)
class NumericContext:
    """Measurement tokens found in a result body, in document order."""

    values: tuple[NumericToken, ...]


@dataclass
class StructuredPaper:
    """A paper decomposed into the six canonical sections."""

    id: str
    date: date
    topic: str = ""
    background: str = ""
    related_work: str = ""
    method: str = ""
    result: str = ""
    conclusion: str = ""
    provenance: dict[SectionKind, "ExtractionTrace"] = field(default_factory=dict)

    def section(self, kind: SectionKind) -> str:
        return getattr(self, kind.value)

    def set_section(self, kind: SectionKind, text: str) -> None:
        setattr(self, kind.value, text)

    def is_complete(self) -> bool:
        return all(self.section(kind).strip() for kind in SectionKind)


# ---------------------------------------------------------------------------
# Chapter mapping

_PUNCT_RE = re.compile(r"[^\w\s]")


def normalize_title(title: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace."""
    lowered = _PUNCT_RE.sub(" ", title.lower())
    return " ".join(lowered.split())


def map_chapters(
    paper: RawPaper, require_all: bool = True
) -> dict[SectionKind, str]:
    """Select the chapter body backing each section.

    For each section the first chapter (in document order) whose normalized
    title equals one of its aliases wins. With ``require_all`` a
    :class:`MissingSection` listing every unmatched section is raised;
    otherwise the partial mapping is returned.
    """
    normalized = [(normalize_title(ch.title), ch.body) for ch in paper.chapters]
    mapping: dict[SectionKind, str] = {}
    for kind in SectionKind:
        aliases = CHAPTER_ALIASES[kind]
        for title, body in normalized:
            if title in aliases:
                mapping[kind] = body
                break
    if require_all:
        missing = tuple(kind for kind in SectionKind if kind not in mapping)
        if missing:
            raise MissingSection(missing)
    return mapping


# ---------------------------------------------------------------------------
# Numeric preprocessing for result bodies

# Decimal/percentage/scientific-notation literals; lookarounds keep dotted
# compounds like "4.1.2" or identifiers like "v2" from matching, while a
# sentence-final "168." still matches.
_NUMBER_RE = re.compile(
    r"(?<![\w.#])[+-]?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?(?!\w)(?!\.\d)"
)
_SECTION_KEYWORD_RE = re.compile(
    r"(?:§|\b(?:section|sec|chapter|table|figure|fig|eq|equation)\.?)\s*$",
    re.IGNORECASE,
)
_PAGE_LINE_RE = re.compile(r"^(?:-\s*)?(?:page|p\.?|pp\.?)?\s*\d+\s*-?\s*$", re.IGNORECASE)

_CONTEXT_CHARS = 40


def _line_bounds(text: str, offset: int) -> tuple[int, int]:
    start = text.rfind("\n", 0, offset) + 1
    end = text.find("\n", offset)
    return start, len(text) if end == -1 else end


def _is_structural(text: str, match: re.Match) -> bool:
    """Heuristics for page numbers, section numbers, and citation indices."""
    token = match.group(0)
    offset = match.start()
    line_start, line_end = _line_bounds(text, offset)
    line = text[line_start:line_end]

    # Dotted number opening a line: a heading like "3.2 Cohort outcomes".
    if "." in token and text[line_start:offset].strip() == "":
        return True
    # Number preceded by a structural keyword ("Section 3.2", "Table 4").
    if _SECTION_KEYWORD_RE.search(text[line_start:offset]):
        return True
    # Line that is nothing but a page-like integer (header/footer).
    if "." not in token and _PAGE_LINE_RE.fullmatch(line.strip()):
        return True
    # Citation index inside square brackets: [12], [3, 7], [1-5].
    open_bracket = text.rfind("[", line_start, offset)
    if open_bracket != -1:
        close_bracket = text.find("]", offset, line_end)
        if close_bracket != -1:
            inside = text[open_bracket + 1 : close_bracket]
            if re.fullmatch(r"[\d\s,–-]+", inside):
                return True
    return False


def extract_numbers(text: str) -> NumericContext:
    """Capture measurement tokens from a result body.

    Structural numbers (section headings, bracketed citation indices,
    standalone page integers) are filtered out; an empty result is valid.
    """
    if not text:
        raise CorpusError("result text must be non-empty")
    tokens: list[NumericToken] = []
    for match in _NUMBER_RE.finditer(text):
        if _is_structural(text, match):
            continue
        raw = match.group(0)
        lo = max(0, match.start() - _CONTEXT_CHARS)
        hi = min(len(text), match.end() + _CONTEXT_CHARS)
        tokens.append(
            NumericToken(
                raw_token=raw,
                numeric_value=float(raw),
                char_offset=match.start(),
                context_window=text[lo:hi],
            )
        )
    return NumericContext(values=tuple(tokens))


# ---------------------------------------------------------------------------
# Temporal split

def temporal_split(
    corpus: Iterable[StructuredPaper], cutoff: date
) -> tuple[list[StructuredPaper], list[StructuredPaper]]:
    """Partition by date: strictly before the cutoff trains, on/after tests."""
    train: list[StructuredPaper] = []
    test: list[StructuredPaper] = []
    for paper in corpus:
        (train if paper.date < cutoff else test).append(paper)
    return train, test


# ---------------------------------------------------------------------------
# JSONL interfaces

def parse_date(value: str) -> date:
    try:
        return date.fromisoformat(value)
    except ValueError:
        try:
            return datetime.fromisoformat(value).date()
        except ValueError as exc:
            raise CorpusError(f"unparseable date: {value!r}") from exc


def raw_paper_from_dict(record: dict) -> RawPaper:
    try:
        chapters = []
        for entry in record["chapters"]:
            if isinstance(entry, dict):
                chapters.append(Chapter(title=entry["title"], body=entry["body"]))
            else:
                title, body = entry
                chapters.append(Chapter(title=title, body=body))
        return RawPaper(
            id=str(record["id"]),
            title=record.get("title", ""),
            date=parse_date(record["date"]),
            discipline=record.get("discipline", ""),
            chapters=tuple(chapters),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorpusError(f"malformed raw paper record: {exc}") from exc


def read_raw_papers(path: str | Path) -> list[RawPaper]:
    """Read a JSON Lines corpus, one raw paper per line; ids must be unique."""
    papers: list[RawPaper] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            paper = raw_paper_from_dict(record)
            if paper.id in seen:
                raise CorpusError(f"{path}:{line_no}: duplicate paper id {paper.id!r}")
            seen.add(paper.id)
            papers.append(paper)
    return papers


def structured_paper_to_dict(paper: StructuredPaper) -> dict:
    record: dict = {"id": paper.id, "date": paper.date.isoformat()}
    for kind in SectionKind:
        record[kind.value] = paper.section(kind)
    if paper.provenance:
        record["provenance"] = {
            kind.value: trace.to_dict() for kind, trace in paper.provenance.items()
        }
    return record


def structured_paper_from_dict(record: dict) -> StructuredPaper:
    from .extraction import ExtractionTrace

    try:
        paper = StructuredPaper(id=str(record["id"]), date=parse_date(record["date"]))
    except KeyError as exc:
        raise CorpusError(f"malformed structured paper record: missing {exc}") from exc
    for kind in SectionKind:
        paper.set_section(kind, record.get(kind.value, ""))
    for name, payload in (record.get("provenance") or {}).items():
        paper.provenance[SectionKind(name)] = ExtractionTrace.from_dict(payload)
    return paper


def write_structured_papers(papers: Iterable[StructuredPaper], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for paper in papers:
            handle.write(json.dumps(structured_paper_to_dict(paper), ensure_ascii=False))
            handle.write("\n")


def read_structured_papers(path: str | Path) -> list[StructuredPaper]:
    papers: list[StructuredPaper] = []
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            papers.append(structured_paper_from_dict(record))
    return papers


# Hook for an optional extra screening pass during ingestion (e.g. an
# LLM-based rigor check). Default off; ingestion only applies it when given.
ScreeningHook = Callable[[RawPaper], bool]
