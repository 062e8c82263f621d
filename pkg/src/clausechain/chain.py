"""Single-stage and two-stage prompt chains over clauses.

A single-stage chain renders one prompt and parses the answer. A two-stage
chain first asks for a question-focused summary of the clause, then hands
that summary (and never the clause itself) to a second, independent call
that maps it onto the answer options.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable

from .errors import ChainError, ClauseChainError, ConfigError, FileAccessError, ParseError
from .parser import ConstraintMode, PredictionSet, parse_response
from .provider import CompletionRequest, CompletionResult, FinishReason, Provider
from .schema import ClauseItem, Dataset, QuestionSpec
from .templating import PromptTemplate, SlotBindings, TemplateStore, default_store, render, render_options

log = logging.getLogger(__name__)

TRACE_FORMAT = 1


@dataclass(frozen=True)
class ChainConfig:
    template_id: str
    question_id: str
    model_id: str
    temperature: float = 0.0
    constraint_mode: ConstraintMode = ConstraintMode.OBSERVE
    parallelism: int = 1
    max_output_tokens: int | None = None
    stage2_model_id: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "constraint_mode", ConstraintMode(self.constraint_mode))
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")

    @property
    def second_model(self) -> str:
        return self.stage2_model_id or self.model_id

    @property
    def replication(self) -> bool:
        """True when the run follows the reference protocol: temperature 0, same model for both stages."""
        return self.temperature == 0 and self.second_model == self.model_id

    def snapshot(self) -> dict:
        return {
            "template_id": self.template_id,
            "question_id": self.question_id,
            "model_id": self.model_id,
            "stage2_model_id": self.stage2_model_id,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "constraint_mode": self.constraint_mode.value,
            "parallelism": self.parallelism,
            "replication": self.replication,
        }


@dataclass(frozen=True)
class ChainRun:
    clause_id: str
    question_id: str
    template_id: str
    stage1_prompt: str | None
    stage1_raw: str | None
    stage2_prompt: str
    final_raw: str
    prediction: PredictionSet
    timings: tuple[float, ...] = ()
    finish_reasons: tuple[str, ...] = ()
    provider_calls: int = 0

    @property
    def two_stage(self) -> bool:
        return self.stage1_raw is not None

    def to_dict(self) -> dict:
        return {
            "clause_id": self.clause_id,
            "question_id": self.question_id,
            "template_id": self.template_id,
            "stage1_prompt": self.stage1_prompt,
            "stage1_raw": self.stage1_raw,
            "stage2_prompt": self.stage2_prompt,
            "final_raw": self.final_raw,
            "prediction": self.prediction.to_dict(),
            "timings": list(self.timings),
            "finish_reasons": list(self.finish_reasons),
            "provider_calls": self.provider_calls,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChainRun":
        return cls(
            clause_id=d["clause_id"],
            question_id=d["question_id"],
            template_id=d["template_id"],
            stage1_prompt=d.get("stage1_prompt"),
            stage1_raw=d.get("stage1_raw"),
            stage2_prompt=d["stage2_prompt"],
            final_raw=d["final_raw"],
            prediction=PredictionSet.from_dict(d["prediction"]),
            timings=tuple(d.get("timings", ())),
            finish_reasons=tuple(d.get("finish_reasons", ())),
            provider_calls=int(d.get("provider_calls", 0)),
        )


@dataclass(frozen=True)
class Failure:
    clause_id: str
    error: str
    kind: str = "error"


@dataclass
class RunArtifact:
    config: dict
    runs: list[ChainRun]
    failures: list[Failure] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    created_at: str = ""

    @property
    def question_id(self) -> str:
        return self.config["question_id"]

    def counts(self) -> dict[str, int]:
        return {
            "runs": len(self.runs),
            "parsed": sum(r.prediction.status == "parsed" for r in self.runs),
            "abstained": sum(r.prediction.abstained for r in self.runs),
            "unparseable": sum(r.prediction.unparseable for r in self.runs),
            "failures": len(self.failures),
            "skipped": len(self.skipped),
        }


# -- execution -------------------------------------------------------------


def bindings_for(item: ClauseItem, question: QuestionSpec, response: str | None = None) -> SlotBindings:
    return SlotBindings(
        clause_name=question.clause_name,
        clause=item.clause_text,
        question=question.question_text,
        options_text=render_options(question.options),
        response=response,
    )


def _request(config: ChainConfig, model_id: str, prompt: str, template: PromptTemplate) -> CompletionRequest:
    return CompletionRequest(
        model_id=model_id,
        prompt_text=prompt,
        temperature=config.temperature,
        max_output_tokens=config.max_output_tokens,
        template_version=template.version,
    )


def _templates(config: ChainConfig, store: TemplateStore | None) -> tuple[PromptTemplate, ...]:
    return (store or default_store()).chain(config.template_id, config.question_id)


def _check_question(config: ChainConfig, item: ClauseItem, question: QuestionSpec) -> None:
    if question.id != config.question_id:
        raise ConfigError(f"config is for {config.question_id} but question {question.id} was given")


def run_single_stage(
    config: ChainConfig,
    item: ClauseItem,
    question: QuestionSpec,
    provider: Provider,
    store: TemplateStore | None = None,
) -> ChainRun:
    _check_question(config, item, question)
    templates = _templates(config, store)
    if len(templates) != 1:
        raise ConfigError(f"{config.template_id} is a two-stage template; use run_two_stage")
    (template,) = templates
    prompt = render(template, bindings_for(item, question))
    result = provider.complete(_request(config, config.model_id, prompt, template))
    prediction = parse_response(result.raw_text, question, config.constraint_mode)
    return ChainRun(
        clause_id=item.id,
        question_id=question.id,
        template_id=config.template_id,
        stage1_prompt=None,
        stage1_raw=None,
        stage2_prompt=prompt,
        final_raw=result.raw_text,
        prediction=prediction,
        timings=(result.latency,),
        finish_reasons=(result.finish_reason.value,),
        provider_calls=1,
    )


def run_two_stage(
    config: ChainConfig,
    item: ClauseItem,
    question: QuestionSpec,
    provider: Provider,
    store: TemplateStore | None = None,
) -> ChainRun:
    _check_question(config, item, question)
    templates = _templates(config, store)
    if len(templates) != 2:
        raise ConfigError(f"{config.template_id} is a single-stage template; use run_single_stage")
    first, second = templates

    stage1_prompt = render(first, bindings_for(item, question))
    summary: CompletionResult = provider.complete(_request(config, config.model_id, stage1_prompt, first))
    if summary.finish_reason is not FinishReason.COMPLETE:
        # a clipped summary would silently drop obligations from stage 2
        raise ChainError(f"stage-1 output for {item.id} is {summary.finish_reason.value}; not passing it to stage 2")
    stage1_raw = summary.raw_text.rstrip()

    stage2_prompt = render(second, bindings_for(item, question, response=stage1_raw))
    final = provider.complete(_request(config, config.second_model, stage2_prompt, second))
    prediction = parse_response(final.raw_text, question, config.constraint_mode)
    return ChainRun(
        clause_id=item.id,
        question_id=question.id,
        template_id=config.template_id,
        stage1_prompt=stage1_prompt,
        stage1_raw=stage1_raw,
        stage2_prompt=stage2_prompt,
        final_raw=final.raw_text,
        prediction=prediction,
        timings=(summary.latency, final.latency),
        finish_reasons=(summary.finish_reason.value, final.finish_reason.value),
        provider_calls=2,
    )


def run_chain(config, item, question, provider, store=None) -> ChainRun:
    """Dispatch to the single- or two-stage runner based on the template's assets."""
    if len(_templates(config, store)) == 2:
        return run_two_stage(config, item, question, provider, store)
    return run_single_stage(config, item, question, provider, store)


def _now_iso() -> str:
    return datetime.now(timezone.utc).replace(microsecond=0).isoformat()


def run_batch(
    config: ChainConfig,
    dataset: Dataset,
    provider: Provider,
    question: QuestionSpec,
    store: TemplateStore | None = None,
    stop: threading.Event | None = None,
    clock: Callable[[], str] = _now_iso,
) -> RunArtifact:
    """Run the chain over every dataset item whose concept matches ``question``.

    Items run concurrently up to ``config.parallelism``; per-item errors are
    recorded as failures and the batch carries on. If ``stop`` is set, items
    that have not started are recorded as cancelled. Runs come back sorted
    by clause id whatever the completion order.
    """
    _templates(config, store)  # fail fast on a missing asset, before any call
    items = sorted(dataset.items, key=lambda it: it.id)
    todo = [it for it in items if it.concept == question.concept]
    skipped = [it.id for it in items if it.concept != question.concept]

    def work(item: ClauseItem) -> ChainRun | Failure:
        if stop is not None and stop.is_set():
            return Failure(item.id, "cancelled before start", kind="cancelled")
        try:
            return run_chain(config, item, question, provider, store)
        except ClauseChainError as exc:
            log.warning("%s: %s", item.id, exc)
            return Failure(item.id, f"{type(exc).__name__}: {exc}")

    with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        outcomes = list(pool.map(work, todo))

    runs = sorted((o for o in outcomes if isinstance(o, ChainRun)), key=lambda r: r.clause_id)
    failures = sorted((o for o in outcomes if isinstance(o, Failure)), key=lambda f: f.clause_id)
    snapshot = config.snapshot()
    snapshot["provider_id"] = provider.provider_id
    snapshot["template_versions"] = [t.version for t in _templates(config, store)]
    return RunArtifact(config=snapshot, runs=runs, failures=failures, skipped=skipped, created_at=clock())


# -- trace files -----------------------------------------------------------


def _dumps(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def trace_lines(artifact: RunArtifact) -> Iterable[str]:
    yield _dumps(
        {
            "type": "header",
            "format": TRACE_FORMAT,
            "config": artifact.config,
            "created_at": artifact.created_at,
            "skipped": artifact.skipped,
        }
    )
    for run in artifact.runs:
        yield _dumps({"type": "run", **run.to_dict()})
    for failure in artifact.failures:
        yield _dumps({"type": "failure", "clause_id": failure.clause_id, "error": failure.error, "kind": failure.kind})


def write_trace(artifact: RunArtifact, path: str | Path) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for line in trace_lines(artifact):
                fh.write(line + "\n")
    except OSError as exc:
        raise FileAccessError(f"{path}: cannot write trace: {exc.strerror or exc}") from exc


def read_trace(path: str | Path) -> RunArtifact:
    path = Path(path)
    try:
        lines = path.read_text("utf-8").splitlines()
    except OSError as exc:
        raise FileAccessError(f"{path}: cannot read trace: {exc.strerror or exc}") from exc
    header = None
    runs, failures = [], []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "header":
                header = rec
            elif kind == "run":
                runs.append(ChainRun.from_dict(rec))
            elif kind == "failure":
                failures.append(Failure(rec["clause_id"], rec["error"], rec.get("kind", "error")))
            else:
                raise ValueError(f"unknown record type {kind!r}")
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise ParseError(f"{path}:{lineno}: bad trace record: {exc}") from exc
    if header is None:
        raise ParseError(f"{path}: trace has no header line")
    return RunArtifact(
        config=header["config"],
        runs=runs,
        failures=failures,
        skipped=header.get("skipped", []),
        created_at=header.get("created_at", ""),
    )


def reparse(artifact: RunArtifact, question: QuestionSpec, mode: ConstraintMode | str) -> RunArtifact:
    """Re-score the stored final outputs under another constraint mode, without any model call."""
    mode = ConstraintMode(mode)
    runs = [
        ChainRun(**{**r.__dict__, "prediction": parse_response(r.final_raw, question, mode)}) for r in artifact.runs
    ]
    config = {**artifact.config, "constraint_mode": mode.value}
    return RunArtifact(config=config, runs=runs, failures=list(artifact.failures), skipped=list(artifact.skipped), created_at=artifact.created_at)
