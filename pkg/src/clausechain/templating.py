"""Prompt template assets and slot rendering.

Assets live one per file under ``templates/``. The first line is a header::

    #% id=P3 question=Q1 stage=2 version=1

and the rest of the file (minus its final newline) is the body. Slots in a
body are written ``{{NAME}}``; legal text routinely contains square brackets,
so the bracketed placeholders used in printed prompts are not used here.
``question=*`` marks an asset shared by every question.

Rendering is a single pass: text substituted into a slot is never
re-scanned, so bindings may safely contain ``{{...}}`` themselves.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from importlib.abc import Traversable
from pathlib import Path
from typing import Sequence

from .errors import MissingBindingError, TemplateError, TemplateNotFoundError, UnknownSlotError
from .schema import OptionSpec

SLOTS = ("CLAUSE_NAME", "CLAUSE", "QUESTION", "OPTIONS", "RESPONSE")

# any {{UPPER_CASE}} run is treated as a marker, so typos surface as UnknownSlotError
SLOT_RE = re.compile(r"\{\{([A-Z_][A-Z0-9_]*)\}\}")
HEADER_PREFIX = "#% "
ANY_QUESTION = "*"

SINGLE_STAGE_IDS = frozenset({"P1", "P1-EXPLAIN", "P2"})
TWO_STAGE_IDS = frozenset({"P3", "P4", "P5", "P4-PER-PARTY"})


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    question_id: str
    stage: int
    body: str
    version: int
    source: str = "<memory>"

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise TemplateError(f"{self.source}: stage must be 1 or 2, got {self.stage}")
        slots = self.slots
        unknown = sorted(slots - set(SLOTS))
        if unknown:
            raise UnknownSlotError(unknown[0], self.source)
        if self.stage == 1 and "RESPONSE" in slots:
            raise TemplateError(f"{self.source}: RESPONSE slot is only allowed in stage-2 templates")
        if self.stage == 2 and "CLAUSE" in slots:
            raise TemplateError(f"{self.source}: stage-2 templates must not contain the CLAUSE slot")
        if self.id in SINGLE_STAGE_IDS and self.stage != 1:
            raise TemplateError(f"{self.source}: {self.id} is a single-stage template")

    @property
    def slots(self) -> frozenset[str]:
        return frozenset(SLOT_RE.findall(self.body))

    @property
    def checksum(self) -> str:
        return hashlib.sha256(self.body.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class SlotBindings:
    clause_name: str | None = None
    clause: str | None = None
    question: str | None = None
    options_text: str | None = None
    response: str | None = None

    def lookup(self, slot: str) -> str | None:
        return {
            "CLAUSE_NAME": self.clause_name,
            "CLAUSE": self.clause,
            "QUESTION": self.question,
            "OPTIONS": self.options_text,
            "RESPONSE": self.response,
        }[slot]


def render_options(options: Sequence[OptionSpec]) -> str:
    """``a) text`` lines in bank order, newline-joined."""
    return "\n".join(f"{o.letter}) {o.text}" for o in options)


def render(template: PromptTemplate, bindings: SlotBindings) -> str:
    for slot in sorted(template.slots):
        if bindings.lookup(slot) is None:
            raise MissingBindingError(slot)

    def substitute(match: re.Match) -> str:
        return bindings.lookup(match.group(1))

    return SLOT_RE.sub(substitute, template.body)


def parse_template(text: str, source: str = "<template>") -> PromptTemplate:
    header, sep, body = text.partition("\n")
    if not header.startswith(HEADER_PREFIX):
        raise TemplateError(f"{source}: first line must be a '{HEADER_PREFIX.strip()}' header")
    fields = {}
    for token in header[len(HEADER_PREFIX):].split():
        key, eq, value = token.partition("=")
        if not eq:
            raise TemplateError(f"{source}: malformed header token {token!r}")
        fields[key] = value
    missing = {"id", "question", "stage", "version"} - fields.keys()
    if missing:
        raise TemplateError(f"{source}: header missing {sorted(missing)}")
    if body.endswith("\n"):
        body = body[:-1]
    try:
        stage, version = int(fields["stage"]), int(fields["version"])
    except ValueError as exc:
        raise TemplateError(f"{source}: stage and version must be integers") from exc
    return PromptTemplate(
        id=fields["id"], question_id=fields["question"], stage=stage, body=body, version=version, source=source
    )


class TemplateStore:
    """Index of the assets in one directory (the bundled one by default)."""

    def __init__(self, directory: str | Path | Traversable | None = None):
        if directory is None:
            directory = resources.files("clausechain").joinpath("templates")
        elif not isinstance(directory, Traversable):
            directory = Path(directory)
            if not directory.is_dir():
                raise TemplateError(f"template directory {directory} does not exist")
        self.directory = directory
        self._assets: dict[tuple[str, str, int], PromptTemplate] = {}
        for entry in sorted(directory.iterdir(), key=lambda e: e.name):
            if not entry.name.endswith(".txt"):
                continue
            tpl = parse_template(entry.read_text("utf-8"), entry.name)
            key = (tpl.id, tpl.question_id, tpl.stage)
            if key in self._assets:
                raise TemplateError(f"{entry.name}: duplicate asset for {key}")
            self._assets[key] = tpl

    def __iter__(self):
        return iter(self._assets[k] for k in sorted(self._assets))

    def __len__(self):
        return len(self._assets)

    def template_ids(self) -> list[str]:
        return sorted({k[0] for k in self._assets})

    def _find(self, template_id: str, question_id: str, stage: int) -> PromptTemplate | None:
        tpl = self._assets.get((template_id, question_id, stage))
        if tpl is not None:
            return tpl
        shared = self._assets.get((template_id, ANY_QUESTION, stage))
        if shared is not None:
            return PromptTemplate(
                id=shared.id,
                question_id=question_id,
                stage=shared.stage,
                body=shared.body,
                version=shared.version,
                source=shared.source,
            )
        return None

    def load(self, template_id: str, question_id: str, stage: int = 1) -> PromptTemplate:
        tpl = self._find(template_id, question_id, stage)
        if tpl is None:
            raise TemplateNotFoundError(f"no template {template_id} (stage {stage}) for question {question_id}")
        return tpl

    def chain(self, template_id: str, question_id: str) -> tuple[PromptTemplate, ...]:
        """The stage templates for a chain: one for single-stage ids, two otherwise."""
        first = self.load(template_id, question_id, 1)
        second = self._find(template_id, question_id, 2)
        if second is None:
            if template_id in TWO_STAGE_IDS:
                raise TemplateNotFoundError(f"two-stage template {template_id} has no stage 2 for {question_id}")
            return (first,)
        return (first, second)


_default_store: TemplateStore | None = None


def default_store() -> TemplateStore:
    global _default_store
    if _default_store is None:
        _default_store = TemplateStore()
    return _default_store


def load_template(template_id: str, question_id: str, stage: int = 1) -> PromptTemplate:
    return default_store().load(template_id, question_id, stage)
