"""Scoring: exact-match accuracy and per-option precision/recall.

All ratios are ``fractions.Fraction`` so results are exact; ``None`` marks
an undefined ratio (zero denominator). Macro averages skip undefined
options and report how many were skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, NamedTuple, Sequence

from .chain import RunArtifact, reparse
from .errors import MetricsError
from .parser import ConstraintMode
from .schema import Dataset, QuestionSpec

Selections = Mapping[str, "frozenset[str] | set[str]"]


@dataclass(frozen=True)
class OptionConfusion:
    option: str
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def support(self) -> int:
        return self.tp + self.fn


class MacroAverage(NamedTuple):
    value: Fraction
    excluded: int


def _check_gold(predictions: Selections, gold: Selections) -> list[str]:
    missing = sorted(set(predictions) - set(gold))
    if missing:
        raise MetricsError(f"no gold annotation for item(s) {missing}")
    if not predictions:
        raise MetricsError("nothing to score")
    return sorted(predictions)


def exact_match_accuracy(predictions: Selections, gold: Selections) -> Fraction:
    """Share of items whose selected set equals the gold set exactly."""
    ids = _check_gold(predictions, gold)
    hits = sum(set(predictions[i]) == set(gold[i]) for i in ids)
    return Fraction(hits, len(ids))


def option_confusion(
    predictions: Selections, gold: Selections, option: str, domain: Iterable[str] | None = None
) -> OptionConfusion:
    if domain is not None and option not in set(domain):
        raise MetricsError(f"option {option!r} is outside the question's options")
    ids = _check_gold(predictions, gold)
    tp = fp = fn = tn = 0
    for i in ids:
        in_pred, in_gold = option in predictions[i], option in gold[i]
        tp += in_pred and in_gold
        fp += in_pred and not in_gold
        fn += in_gold and not in_pred
        tn += not in_pred and not in_gold
    return OptionConfusion(option, tp, fp, fn, tn)


def precision_recall(c: OptionConfusion) -> tuple[Fraction | None, Fraction | None]:
    precision = Fraction(c.tp, c.tp + c.fp) if c.tp + c.fp else None
    recall = Fraction(c.tp, c.tp + c.fn) if c.tp + c.fn else None
    return precision, recall


def macro_average(values: Sequence[Fraction | float | None]) -> MacroAverage:
    defined = [Fraction(v) for v in values if v is not None]
    if not defined:
        raise MetricsError("every value is undefined; macro average has no value")
    return MacroAverage(sum(defined, Fraction(0)) / len(defined), len(values) - len(defined))


def micro_precision_recall(confusions: Iterable[OptionConfusion]) -> tuple[Fraction | None, Fraction | None]:
    """Pooled precision/recall over all (item, option) decisions."""
    confusions = list(confusions)
    pooled = OptionConfusion(
        "*",
        sum(c.tp for c in confusions),
        sum(c.fp for c in confusions),
        sum(c.fn for c in confusions),
        sum(c.tn for c in confusions),
    )
    return precision_recall(pooled)


# -- reports ---------------------------------------------------------------


@dataclass(frozen=True)
class OptionScore:
    letter: str
    precision: Fraction | None
    recall: Fraction | None
    support: int
    confusion: OptionConfusion


@dataclass
class EvalReport:
    prompt: str
    model: str
    question_id: str
    constraint_mode: str
    exact_match: Fraction
    per_option: list[OptionScore]
    macro_precision: MacroAverage | None
    macro_recall: MacroAverage | None
    counts: dict[str, int] = field(default_factory=dict)
    micro_precision: Fraction | None = None
    micro_recall: Fraction | None = None

    def option(self, letter: str) -> OptionScore:
        for row in self.per_option:
            if row.letter == letter:
                return row
        raise KeyError(letter)

    @property
    def exact_match_ratio(self) -> str:
        """``hits/scored`` without reducing the fraction."""
        n = self.counts.get("scored") or self.exact_match.denominator
        return f"{self.exact_match * n}/{n}"

    def to_dict(self) -> dict:
        def num(x):
            return None if x is None else float(x)

        def macro(m):
            return None if m is None else {"value": float(m.value), "excluded": m.excluded}

        return {
            "prompt": self.prompt,
            "model": self.model,
            "question": self.question_id,
            "constraint_mode": self.constraint_mode,
            "exact_match": float(self.exact_match),
            "exact_match_ratio": self.exact_match_ratio,
            "macro_precision": macro(self.macro_precision),
            "macro_recall": macro(self.macro_recall),
            "micro_precision": num(self.micro_precision),
            "micro_recall": num(self.micro_recall),
            "per_option": [
                {
                    "option": s.letter,
                    "precision": num(s.precision),
                    "recall": num(s.recall),
                    "support": s.support,
                    "tp": s.confusion.tp,
                    "fp": s.confusion.fp,
                    "fn": s.confusion.fn,
                    "tn": s.confusion.tn,
                }
                for s in self.per_option
            ],
            "counts": dict(self.counts),
        }


def score(
    predictions: Selections,
    gold: Selections,
    question: QuestionSpec,
    *,
    prompt: str = "",
    model: str = "",
    constraint_mode: str = ConstraintMode.OBSERVE.value,
    counts: Mapping[str, int] | None = None,
    micro: bool = False,
) -> EvalReport:
    rows = []
    for letter in question.letters:
        c = option_confusion(predictions, gold, letter, question.letters)
        p, r = precision_recall(c)
        rows.append(OptionScore(letter, p, r, c.support, c))

    def safe_macro(values):
        try:
            return macro_average(values)
        except MetricsError:
            return None

    report = EvalReport(
        prompt=prompt,
        model=model,
        question_id=question.id,
        constraint_mode=constraint_mode,
        exact_match=exact_match_accuracy(predictions, gold),
        per_option=rows,
        macro_precision=safe_macro([r.precision for r in rows]),
        macro_recall=safe_macro([r.recall for r in rows]),
        counts=dict(counts or {}),
    )
    if micro:
        report.micro_precision, report.micro_recall = micro_precision_recall(r.confusion for r in rows)
    return report


def build_report(
    artifact: RunArtifact,
    dataset: Dataset,
    question: QuestionSpec,
    *,
    constraint_mode: ConstraintMode | str | None = None,
    micro: bool = False,
) -> EvalReport:
    """Score a run artifact against the dataset's gold sets.

    With ``constraint_mode`` the stored raw outputs are re-parsed under that
    mode first. Unparseable runs count as empty selections; failed items
    (no model answer at all) are excluded and counted separately.
    """
    if artifact.question_id != question.id:
        raise MetricsError(f"artifact is for {artifact.question_id}, question given is {question.id}")
    if constraint_mode is not None:
        artifact = reparse(artifact, question, constraint_mode)
    if not artifact.runs:
        raise MetricsError("artifact contains no runs to score")
    gold = dataset.gold_for(question.id)
    if not gold:
        raise MetricsError(f"dataset has no annotations for {question.id}")
    unknown = sorted(r.clause_id for r in artifact.runs if r.clause_id not in gold)
    if unknown:
        raise MetricsError(f"runs reference clause(s) without {question.id} gold: {unknown}")

    predictions = {r.clause_id: r.prediction.selected for r in artifact.runs}
    counts = artifact.counts()
    counts = {
        "scored": counts["runs"],
        "abstained": counts["abstained"],
        "unparseable": counts["unparseable"],
        "constraint_violations": sum(r.prediction.constraint_violation is not None for r in artifact.runs),
        "failed": counts["failures"],
        "skipped": counts["skipped"],
    }
    return score(
        predictions,
        gold,
        question,
        prompt=artifact.config.get("template_id", ""),
        model=artifact.config.get("model_id", ""),
        constraint_mode=artifact.config.get("constraint_mode", ConstraintMode.OBSERVE.value),
        counts=counts,
        micro=micro,
    )
