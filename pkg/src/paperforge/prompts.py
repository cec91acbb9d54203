"""Prompt template loading and rendering.

Templates live as data files under ``prompts/``, keyed by (agent role,
section kind): ``<role>_<kind>.txt`` overrides the generic ``<role>.txt``.
Each file holds a role preamble and a task body separated by a ``---``
line; placeholders use ``$name`` substitution.
"""

from __future__ import annotations

import string
from functools import lru_cache
from pathlib import Path

from .sections import SectionKind

_PROMPT_DIR = Path(__file__).resolve().parent / "prompts"
_SEPARATOR = "\n---\n"


class PromptTemplate:
    """A role preamble + task body pair with ``$name`` placeholders."""

    def __init__(self, preamble: str, body: str) -> None:
        self.preamble = string.Template(preamble)
        self.body = string.Template(body)

    def render(self, **subs: str) -> tuple[str, str]:
        """Substitute placeholders; missing names raise KeyError."""
        return self.preamble.substitute(subs), self.body.substitute(subs)


@lru_cache(maxsize=None)
def load_template(role: str, kind: SectionKind | None = None, search_dir: str | None = None) -> PromptTemplate:
    """Load the template for (role, kind), falling back to the generic role file."""
    directory = Path(search_dir) if search_dir else _PROMPT_DIR
    candidates = []
    if kind is not None:
        candidates.append(directory / f"{role}_{kind.value}.txt")
    candidates.append(directory / f"{role}.txt")
    for path in candidates:
        if path.is_file():
            text = path.read_text(encoding="utf-8")
            if _SEPARATOR not in text:
                raise ValueError(f"template {path} lacks the '---' preamble separator")
            preamble, body = text.split(_SEPARATOR, 1)
            return PromptTemplate(preamble.strip(), body.strip())
    raise FileNotFoundError(f"no prompt template for role {role!r}")


def section_subs(kind: SectionKind) -> dict[str, str]:
    """Common placeholder values derived from a section kind."""
    return {"section_label": kind.label, "slug": kind.value}
