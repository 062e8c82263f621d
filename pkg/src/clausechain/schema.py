"""Question bank, clause dataset and gold annotations.

The question bank is a YAML document (see ``data/questions.yaml`` for the
bundled default); datasets are JSON-lines with one record per
(clause, question) pair::

    {"clause_id": "C1", "question_id": "Q1", "concept": "change-of-control",
     "clause_text": "...", "gold": ["a", "b"]}

All types are frozen and safe to share between threads once loaded.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import IO, Iterable, Iterator, Sequence

import yaml

from .errors import FileAccessError, ParseError, ValidationError

LETTERS = string.ascii_lowercase

DEFAULT_BANK_RESOURCE = "questions.yaml"


@dataclass(frozen=True)
class OptionSpec:
    letter: str
    text: str

    def __post_init__(self):
        if len(self.letter) != 1 or self.letter not in LETTERS:
            raise ValidationError(f"option letter must be one of a..z, got {self.letter!r}")
        if not self.text.strip():
            raise ValidationError(f"option {self.letter!r} has empty text")


@dataclass(frozen=True)
class QuestionSpec:
    """A question with its lettered options and selection rules."""

    id: str
    concept: str
    question_text: str
    options: tuple[OptionSpec, ...]
    exclusive_options: frozenset[str] = frozenset()
    abstention_option: str | None = None
    catch_all_option: str | None = None

    def __post_init__(self):
        if not self.options:
            raise ValidationError(f"{self.id}: question has no options")
        letters = [o.letter for o in self.options]
        if len(set(letters)) != len(letters):
            raise ValidationError(f"{self.id}: duplicate option letters {letters}")
        expected = list(LETTERS[: len(letters)])
        if letters != expected:
            raise ValidationError(
                f"{self.id}: option letters must be {''.join(expected)} in order, got {''.join(letters)}"
            )
        dangling = set(self.exclusive_options) - set(letters)
        if dangling:
            raise ValidationError(f"{self.id}: exclusive option(s) {sorted(dangling)} are not option letters")
        for name in ("abstention_option", "catch_all_option"):
            value = getattr(self, name)
            if value is not None and value not in letters:
                raise ValidationError(f"{self.id}: {name} {value!r} is not an option letter")

    @property
    def letters(self) -> tuple[str, ...]:
        return tuple(o.letter for o in self.options)

    @property
    def clause_name(self) -> str:
        """Human form of the concept, e.g. ``change of control``."""
        return self.concept.replace("-", " ").replace("_", " ")

    def option(self, letter: str) -> OptionSpec:
        for opt in self.options:
            if opt.letter == letter:
                return opt
        raise KeyError(letter)


@dataclass(frozen=True)
class ClauseItem:
    id: str
    concept: str
    clause_text: str
    source: str | None = None


@dataclass(frozen=True)
class GoldAnnotation:
    # gold is kept as given (lowercased) so that duplicates stay visible to validate()
    clause_id: str
    question_id: str
    gold: tuple[str, ...]

    @property
    def gold_set(self) -> frozenset[str]:
        return frozenset(self.gold)


@dataclass(frozen=True)
class Dataset:
    items: tuple[ClauseItem, ...]
    annotations: tuple[GoldAnnotation, ...]
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_by_id", {item.id: item for item in self.items})

    def item(self, clause_id: str) -> ClauseItem:
        return self._by_id[clause_id]

    def __contains__(self, clause_id: str) -> bool:
        return clause_id in self._by_id

    def annotations_for(self, question_id: str) -> list[GoldAnnotation]:
        return [a for a in self.annotations if a.question_id == question_id]

    def gold_for(self, question_id: str) -> dict[str, frozenset[str]]:
        return {a.clause_id: a.gold_set for a in self.annotations_for(question_id)}

    def items_for(self, question_id: str) -> list[ClauseItem]:
        """Clause items that carry an annotation for ``question_id``, sorted by id."""
        ids = {a.clause_id for a in self.annotations_for(question_id)}
        return sorted((self._by_id[i] for i in ids if i in self._by_id), key=lambda it: it.id)


@dataclass(frozen=True)
class Violation:
    clause_id: str | None
    question_id: str | None
    message: str

    def __str__(self):
        where = ", ".join(
            f"{k}={v}" for k, v in (("clause_id", self.clause_id), ("question_id", self.question_id)) if v
        )
        return f"[{where}] {self.message}" if where else self.message


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __len__(self):
        return len(self.violations)

    def __iter__(self) -> Iterator[Violation]:
        return iter(self.violations)


# -- question bank ---------------------------------------------------------


def _question_from_dict(raw: dict, where: str) -> QuestionSpec:
    if not isinstance(raw, dict):
        raise ParseError(f"{where}: question entry must be a mapping")
    try:
        qid = str(raw["id"])
        options_raw = raw["options"]
        if not isinstance(options_raw, list):
            raise ParseError(f"{where}: 'options' must be a list")
        options = tuple(
            OptionSpec(letter=str(o["letter"]).strip().lower(), text=str(o["text"]).strip()) for o in options_raw
        )
        return QuestionSpec(
            id=qid,
            concept=str(raw["concept"]),
            question_text=str(raw["question_text"]).strip(),
            options=options,
            exclusive_options=frozenset(str(x).lower() for x in raw.get("exclusive_options") or ()),
            abstention_option=_opt_letter(raw.get("abstention_option")),
            catch_all_option=_opt_letter(raw.get("catch_all_option")),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{where}: missing or malformed field {exc}") from exc


def _opt_letter(value) -> str | None:
    return None if value is None else str(value).strip().lower()


def parse_question_bank(text: str, source: str = "<bank>") -> list[QuestionSpec]:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"{source}: not valid YAML: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("questions"), list):
        raise ParseError(f"{source}: expected a top-level 'questions' list")
    bank = []
    for i, raw in enumerate(doc["questions"]):
        try:
            bank.append(_question_from_dict(raw, f"{source}: question #{i + 1}"))
        except ValidationError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ValidationError(f"{source}: {exc}") from exc
    ids = [q.id for q in bank]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"{source}: duplicate question ids {ids}")
    return bank


def load_question_bank(path: str | Path | None = None) -> list[QuestionSpec]:
    """Load a question bank; with no path, the bundled default bank."""
    if path is None:
        text = resources.files("clausechain.data").joinpath(DEFAULT_BANK_RESOURCE).read_text("utf-8")
        return parse_question_bank(text, DEFAULT_BANK_RESOURCE)
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except OSError as exc:
        raise FileAccessError(f"{path}: cannot read question bank: {exc.strerror or exc}") from exc
    return parse_question_bank(text, str(path))


def question_to_dict(q: QuestionSpec) -> dict:
    return {
        "id": q.id,
        "concept": q.concept,
        "question_text": q.question_text,
        "options": [{"letter": o.letter, "text": o.text} for o in q.options],
        "exclusive_options": sorted(q.exclusive_options),
        "abstention_option": q.abstention_option,
        "catch_all_option": q.catch_all_option,
    }


def dump_question_bank(bank: Sequence[QuestionSpec], stream: IO[str] | None = None) -> str | None:
    doc = {"questions": [question_to_dict(q) for q in bank]}
    return yaml.safe_dump(doc, stream, sort_keys=False, allow_unicode=True, width=88)


class UnknownQuestionError(ValidationError, KeyError):
    def __init__(self, question_id: str):
        super().__init__(f"unknown question id {question_id!r}")
        self.question_id = question_id

    def __str__(self):
        return self.args[0]


def bank_by_id(bank: Iterable[QuestionSpec]) -> dict[str, QuestionSpec]:
    return {q.id: q for q in bank}


def get_question(bank: Iterable[QuestionSpec], question_id: str) -> QuestionSpec:
    for q in bank:
        if q.id == question_id:
            return q
    raise UnknownQuestionError(question_id)


# -- dataset ---------------------------------------------------------------

_REQUIRED = ("clause_id", "question_id", "concept", "clause_text", "gold")


def _record_to_parts(rec: dict, where: str) -> tuple[ClauseItem, GoldAnnotation]:
    if not isinstance(rec, dict):
        raise ParseError(f"{where}: record must be a JSON object")
    missing = [k for k in _REQUIRED if k not in rec]
    if missing:
        raise ParseError(f"{where}: missing field(s) {missing}")
    gold = rec["gold"]
    if not isinstance(gold, list) or not all(isinstance(g, str) for g in gold):
        raise ParseError(f"{where}: 'gold' must be a list of letters")
    item = ClauseItem(
        id=str(rec["clause_id"]),
        concept=str(rec["concept"]),
        clause_text=str(rec["clause_text"]),
        source=rec.get("source"),
    )
    ann = GoldAnnotation(
        clause_id=item.id,
        question_id=str(rec["question_id"]),
        gold=tuple(g.strip().lower() for g in gold),
    )
    return item, ann


def parse_dataset(lines: Iterable[str], source: str = "<dataset>") -> tuple[Dataset, dict]:
    """Parse JSON-lines records; returns the dataset and a (clause, question) -> line map."""
    items: dict[str, ClauseItem] = {}
    annotations: list[GoldAnnotation] = []
    line_of: dict[tuple[str, str], int] = {}
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        where = f"{source}:{lineno}"
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{where}: invalid JSON: {exc.msg}") from exc
        item, ann = _record_to_parts(rec, where)
        prior = items.get(item.id)
        if prior is not None and (prior.clause_text != item.clause_text or prior.concept != item.concept):
            raise ValidationError(f"{where}: clause_id {item.id!r} reappears with different text or concept")
        items.setdefault(item.id, item)
        annotations.append(ann)
        line_of.setdefault((ann.clause_id, ann.question_id), lineno)
    return Dataset(items=tuple(items.values()), annotations=tuple(annotations)), line_of


def load_dataset(path: str | Path, bank: Sequence[QuestionSpec] | None = None) -> Dataset:
    """Load a JSON-lines dataset and check it against ``bank`` (default bank if None).

    Raises ``ValidationError`` naming the first offending record.
    """
    path = Path(path)
    try:
        with path.open(encoding="utf-8") as fh:
            dataset, line_of = parse_dataset(fh, str(path))
    except OSError as exc:
        raise FileAccessError(f"{path}: cannot read dataset: {exc.strerror or exc}") from exc
    report = validate(dataset, load_question_bank() if bank is None else bank)
    if not report.ok:
        v = report.violations[0]
        lineno = line_of.get((v.clause_id, v.question_id))
        loc = f"{path}:{lineno}" if lineno else str(path)
        more = f" (+{len(report) - 1} more)" if len(report) > 1 else ""
        raise ValidationError(f"{loc}: {v}{more}")
    return dataset


def dataset_records(dataset: Dataset) -> list[dict]:
    out = []
    for ann in dataset.annotations:
        item = dataset.item(ann.clause_id)
        rec = {
            "clause_id": item.id,
            "question_id": ann.question_id,
            "concept": item.concept,
            "clause_text": item.clause_text,
            "gold": list(ann.gold),
        }
        if item.source is not None:
            rec["source"] = item.source
        out.append(rec)
    return out


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in dataset_records(dataset):
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def annotation_violations(ann: GoldAnnotation, question: QuestionSpec) -> list[str]:
    """Messages for every GoldAnnotation invariant ``ann`` breaks under ``question``."""
    problems = []
    if not ann.gold:
        problems.append("gold is empty")
    if len(set(ann.gold)) != len(ann.gold):
        problems.append(f"gold contains duplicate letters {list(ann.gold)}")
    outside = sorted(set(ann.gold) - set(question.letters))
    if outside:
        problems.append(f"gold letter(s) {outside} outside {question.id} options {''.join(question.letters)}")
    hit = ann.gold_set & question.exclusive_options
    if hit and len(ann.gold_set) != 1:
        problems.append(f"exclusive option(s) {sorted(hit)} must be the only gold letter, got {sorted(ann.gold_set)}")
    return problems


def validate(dataset: Dataset, bank: Sequence[QuestionSpec]) -> ValidationReport:
    """Check a dataset against a bank. Violations are returned, never raised."""
    questions = bank_by_id(bank)
    concepts = {q.concept for q in bank}
    violations: list[Violation] = []

    for item in dataset.items:
        if not item.clause_text.strip():
            violations.append(Violation(item.id, None, "clause_text is empty"))
        if item.concept not in concepts:
            violations.append(Violation(item.id, None, f"concept {item.concept!r} matches no question"))

    seen: set[tuple[str, str]] = set()
    for ann in dataset.annotations:
        key = (ann.clause_id, ann.question_id)
        if key in seen:
            violations.append(Violation(*key, "duplicate (clause_id, question_id) pair"))
            continue
        seen.add(key)
        if ann.clause_id not in dataset:
            violations.append(Violation(*key, "annotation references unknown clause"))
        question = questions.get(ann.question_id)
        if question is None:
            violations.append(Violation(*key, f"unknown question id {ann.question_id!r}"))
            continue
        violations.extend(Violation(*key, msg) for msg in annotation_violations(ann, question))
    return ValidationReport(tuple(violations))
