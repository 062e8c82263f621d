"""Turn raw model text into a PredictionSet.

The pipeline is: find the first JSON array in the text (bare, fenced or
wrapped in prose); if there is one, read its ``bucket`` fields; if there
is none, check for the mandated "Unable to determine" phrase; otherwise
the response is unparseable. Exactly one of parsed / abstained /
unparseable holds for every input.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Iterator

from .schema import QuestionSpec

ABSTENTION_PHRASE = "unable to determine"

_QUOTES = "\"'`“”‘’"
_TRAILING = ".!;:" + _QUOTES


class ConstraintMode(str, enum.Enum):
    OBSERVE = "observe"
    ENFORCE = "enforce"


@dataclass(frozen=True)
class PredictionSet:
    selected: frozenset[str] = frozenset()
    abstained: bool = False
    unparseable: bool = False
    constraint_violation: str | None = None
    reason: str | None = None
    explanations: dict[str, str] | None = field(default=None, compare=False)
    multiple_payloads: bool = False

    @property
    def status(self) -> str:
        if self.unparseable:
            return "unparseable"
        return "abstained" if self.abstained else "parsed"

    def to_dict(self) -> dict:
        return {
            "selected": sorted(self.selected),
            "abstained": self.abstained,
            "unparseable": self.unparseable,
            "constraint_violation": self.constraint_violation,
            "reason": self.reason,
            "explanations": dict(sorted(self.explanations.items())) if self.explanations else None,
            "multiple_payloads": self.multiple_payloads,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionSet":
        return cls(
            selected=frozenset(d.get("selected", ())),
            abstained=bool(d.get("abstained", False)),
            unparseable=bool(d.get("unparseable", False)),
            constraint_violation=d.get("constraint_violation"),
            reason=d.get("reason"),
            explanations=d.get("explanations") or None,
            multiple_payloads=bool(d.get("multiple_payloads", False)),
        )


def unparseable(reason: str, multiple: bool = False) -> PredictionSet:
    return PredictionSet(unparseable=True, reason=reason, multiple_payloads=multiple)


# bucket payloads are shallow; anything nested deeper is not worth decoding
MAX_DEPTH = 32
_OPEN, _CLOSE = frozenset("[{"), frozenset("]}")


def _too_deep(raw: str, pos: int) -> bool:
    """True if the brackets opened at ``pos`` nest past MAX_DEPTH before closing.

    Cheap guard in front of the decoder: without it, text like "[[[[..."
    makes every candidate recurse to the interpreter limit.
    """
    depth = 0
    for i in range(pos, len(raw)):
        ch = raw[i]
        if ch in _OPEN:
            depth += 1
            if depth > MAX_DEPTH:
                return True
        elif ch in _CLOSE:
            depth -= 1
            if depth <= 0:
                return False
    return False


def iter_arrays(raw: str) -> Iterator[tuple[int, int]]:
    """Yield (start, end) spans of top-level JSON arrays in ``raw``, left to right."""
    decoder = json.JSONDecoder()
    pos = raw.find("[")
    while pos != -1:
        if _too_deep(raw, pos):
            pos = raw.find("[", pos + 1)
            continue
        try:
            value, end = decoder.raw_decode(raw, pos)
        except (ValueError, RecursionError):
            pos = raw.find("[", pos + 1)
            continue
        if isinstance(value, list):
            yield pos, end
            pos = raw.find("[", end)
        else:
            pos = raw.find("[", pos + 1)


def find_payloads(raw: str, limit: int = 2) -> list[str]:
    """Up to ``limit`` JSON array substrings of ``raw``, in order of appearance."""
    out = []
    for start, end in iter_arrays(raw):
        out.append(raw[start:end])
        if len(out) >= limit:
            break
    return out


def extract_payload(raw: str) -> str | None:
    """First JSON array in ``raw`` as a substring of it, or None.

    Handles ```json fences (the fence markers are never part of an
    array) and arrays embedded in prose alike.
    """
    payloads = find_payloads(raw, limit=1)
    return payloads[0] if payloads else None


def parse_buckets(payload: str, question: QuestionSpec) -> PredictionSet:
    """Read ``bucket`` letters (and optional ``explanation`` text) from a JSON array."""
    try:
        data = json.loads(payload)
    except (ValueError, RecursionError) as exc:
        return unparseable(f"invalid JSON: {exc}")
    if not isinstance(data, list):
        return unparseable("payload is not a JSON array")

    letters: list[str] = []
    explanations: dict[str, str] = {}
    for element in data:
        if not isinstance(element, dict) or "bucket" not in element:
            return unparseable(f"array element without a bucket field: {element!r}")
        bucket = element["bucket"]
        if not isinstance(bucket, str) or len(bucket.strip()) != 1:
            return unparseable(f"bucket value {bucket!r} is not a single character")
        letter = bucket.strip().lower()
        if letter not in question.letters:
            return unparseable(f"bucket {letter!r} is out of domain for {question.id}")
        letters.append(letter)
        note = element.get("explanation")
        if isinstance(note, str) and letter not in explanations:
            explanations[letter] = note

    selected = frozenset(letters)
    return PredictionSet(
        selected=selected,
        abstained=_is_abstention_set(selected, question),
        explanations=explanations or None,
    )


def _is_abstention_set(selected: frozenset[str], question: QuestionSpec) -> bool:
    return question.abstention_option is not None and selected == {question.abstention_option}


def _strip_decoration(text: str) -> str:
    text = text.strip()
    while True:
        trimmed = text.strip().strip(_QUOTES).rstrip(_TRAILING).strip()
        if trimmed == text:
            return text
        text = trimmed


def classify_abstention(raw: str, question: QuestionSpec) -> PredictionSet | None:
    """Abstained PredictionSet if ``raw`` is the abstention phrase, else None.

    Tolerates case, surrounding quotes, terminal punctuation and whitespace;
    anything else (including paraphrases) does not count.
    """
    if _strip_decoration(raw).casefold() != ABSTENTION_PHRASE:
        return None
    selected = frozenset({question.abstention_option}) if question.abstention_option else frozenset()
    return PredictionSet(selected=selected, abstained=True)


def apply_constraints(prediction: PredictionSet, question: QuestionSpec, mode: ConstraintMode | str) -> PredictionSet:
    mode = ConstraintMode(mode)
    hit = prediction.selected & question.exclusive_options
    if not hit or len(prediction.selected) == 1:
        return prediction
    if prediction.constraint_violation is None:
        others = sorted(prediction.selected - hit)
        violation = f"exclusive option(s) {sorted(hit)} selected together with {others}"
    else:
        violation = prediction.constraint_violation
    if mode is ConstraintMode.OBSERVE:
        return replace(prediction, constraint_violation=violation)
    # several exclusive letters at once cannot be reduced to one; keep the first
    keep = frozenset({sorted(hit)[0]})
    return replace(
        prediction,
        selected=keep,
        abstained=_is_abstention_set(keep, question),
        constraint_violation=violation,
    )


def parse_response(raw: str, question: QuestionSpec, mode: ConstraintMode | str = ConstraintMode.OBSERVE) -> PredictionSet:
    """Full pipeline from raw model text to a (constraint-checked) PredictionSet."""
    payloads = find_payloads(raw, limit=2)
    if not payloads:
        abstained = classify_abstention(raw, question)
        if abstained is not None:
            return abstained
        if "[" in raw:
            return unparseable("no well-formed JSON array")
        return unparseable("no JSON array and no abstention phrase")
    prediction = parse_buckets(payloads[0], question)
    if len(payloads) > 1:
        prediction = replace(prediction, multiple_payloads=True)
    if prediction.unparseable:
        return prediction
    return apply_constraints(prediction, question, mode)
