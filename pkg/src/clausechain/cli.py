"""Command-line entry point: ``clausechain {questions,run,eval,report,cache}``.

Exit codes: 0 success, 2 usage, 3 configuration, 4 validation, 5 provider,
6 file I/O, 130 interrupted (partial trace still written).
"""

from __future__ import annotations

import argparse
import logging
import os
import re
import signal
import sys
import threading
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import yaml

from . import __version__
from .chain import ChainConfig, RunArtifact, read_trace, run_batch, write_trace
from .errors import (
    ClauseChainError,
    ConfigError,
    FileAccessError,
    MetricsError,
    ProviderError,
    ValidationError,
)
from .metrics import build_report
from .parser import ConstraintMode
from .provider import (
    API_KEY_ENV,
    CachedProvider,
    OpenAIChatProvider,
    Provider,
    ReplayProvider,
    ResponseCache,
    ScriptedProvider,
)
from .reporting import (
    CellGrid,
    accuracy_grid,
    cells_csv,
    option_grid,
    read_cells_csv,
    render_rows,
    report_cells,
    report_json,
    report_text,
)
from .schema import get_question, load_dataset, load_question_bank
from .templating import TemplateStore, default_store

log = logging.getLogger("clausechain")

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_VALIDATION = 4
EXIT_PROVIDER = 5
EXIT_IO = 6
EXIT_INTERRUPTED = 130

REPORT_FORMATS = ("text", "csv", "json")


@dataclass
class AppConfig:
    base_url: str = "https://api.openai.com/v1"
    # display label -> model name sent to the endpoint
    models: dict[str, str] = field(default_factory=dict)
    temperature: float = 0.0
    parallelism: int = 4
    cache_path: str = ".clausechain/cache.jsonl"
    template_dir: str | None = None
    bank_path: str | None = None
    constraint_mode: str = ConstraintMode.ENFORCE.value
    report_formats: list[str] = field(default_factory=lambda: list(REPORT_FORMATS))
    api_key_env: str = API_KEY_ENV
    timeout: float = 120.0
    max_attempts: int = 3
    backoff_base: float = 1.0
    backoff_cap: float = 30.0

    def __post_init__(self):
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        try:
            ConstraintMode(self.constraint_mode)
        except ValueError:
            raise ConfigError(f"constraint_mode must be observe or enforce, got {self.constraint_mode!r}") from None
        bad = sorted(set(self.report_formats) - set(REPORT_FORMATS))
        if bad:
            raise ConfigError(f"unknown report format(s) {bad}")

    @classmethod
    def load(cls, path: str | Path | None) -> "AppConfig":
        if path is None:
            return cls()
        try:
            doc = yaml.safe_load(Path(path).read_text("utf-8")) or {}
        except OSError as exc:
            raise FileAccessError(f"{path}: cannot read config: {exc.strerror or exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: config is not valid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown config key(s) {unknown}")
        if "api_key" in doc:
            raise ConfigError("credentials are read from the environment only")
        return cls(**doc)

    def resolve_model(self, name: str) -> tuple[str, str]:
        """(label, endpoint model name) for a label or raw model name."""
        if name in self.models:
            return name, self.models[name]
        for label, model in self.models.items():
            if model == name:
                return label, model
        return name, name


def _parse_age(text: str) -> timedelta:
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([smhd]?)\s*", text)
    if not m:
        raise ConfigError(f"cannot parse age {text!r}; use e.g. 30s, 10m, 2h, 7d")
    unit = {"": "seconds", "s": "seconds", "m": "minutes", "h": "hours", "d": "days"}[m.group(2)]
    return timedelta(**{unit: float(m.group(1))})


def _created_at() -> str:
    # SOURCE_DATE_EPOCH pins the timestamp so repeated runs write identical traces
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        try:
            moment = datetime.fromtimestamp(int(epoch), timezone.utc)
        except ValueError:
            raise ConfigError(f"SOURCE_DATE_EPOCH must be an integer, got {epoch!r}") from None
    else:
        moment = datetime.now(timezone.utc).replace(microsecond=0)
    return moment.isoformat()


def _bank(args, config: AppConfig):
    return load_question_bank(args.bank or config.bank_path)


def _store(args, config: AppConfig) -> TemplateStore:
    directory = getattr(args, "templates_dir", None) or config.template_dir
    return TemplateStore(directory) if directory else default_store()


def _write(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8", newline="\n")
    except OSError as exc:
        raise FileAccessError(f"{path}: cannot write: {exc.strerror or exc}") from exc


# -- commands --------------------------------------------------------------


def cmd_questions(args, config: AppConfig) -> int:
    bank = _bank(args, config)
    for q in bank:
        print(f"{q.id} [{q.concept}] {q.question_text}")
        for opt in q.options:
            tags = []
            if opt.letter in q.exclusive_options:
                tags.append("exclusive")
            if opt.letter == q.abstention_option:
                tags.append("abstention")
            if opt.letter == q.catch_all_option:
                tags.append("catch-all")
            suffix = f"  [{', '.join(tags)}]" if tags else ""
            print(f"  {opt.letter}) {opt.text}{suffix}")
        print()
    return EXIT_OK


def _build_provider(args, config: AppConfig) -> tuple[Provider, CachedProvider | None]:
    if args.replay:
        upstream: Provider = ReplayProvider(provider_id=args.provider)
    elif args.provider == "mock":
        if not args.script:
            raise ConfigError("--provider mock needs --script")
        upstream = ScriptedProvider.from_file(args.script)
    else:
        upstream = OpenAIChatProvider.from_env(
            args.base_url or config.base_url,
            env_var=config.api_key_env,
            timeout=config.timeout,
            max_attempts=config.max_attempts,
            backoff_base=config.backoff_base,
            backoff_cap=config.backoff_cap,
            max_concurrency=args.parallelism or config.parallelism,
        )
    if args.no_cache:
        if args.replay:
            raise ConfigError("--replay needs the cache")
        return upstream, None
    cached = CachedProvider(upstream, ResponseCache(args.cache or config.cache_path))
    return cached, cached


def cmd_run(args, config: AppConfig) -> int:
    bank = _bank(args, config)
    question = get_question(bank, args.question)
    store = _store(args, config)
    store.chain(args.template, question.id)  # template-not-found before anything else
    dataset = load_dataset(args.dataset, bank)
    label, model = config.resolve_model(args.model)
    chain_config = ChainConfig(
        template_id=args.template,
        question_id=question.id,
        model_id=model,
        temperature=config.temperature if args.temperature is None else args.temperature,
        constraint_mode=args.constraint_mode or config.constraint_mode,
        parallelism=args.parallelism or config.parallelism,
        max_output_tokens=args.max_output_tokens,
        stage2_model_id=config.resolve_model(args.stage2_model)[1] if args.stage2_model else None,
    )
    provider, cached = _build_provider(args, config)

    stop = threading.Event()
    previous = None
    if threading.current_thread() is threading.main_thread():
        def on_signal(signum, frame):
            log.warning("interrupt received; finishing in-flight items")
            stop.set()
        previous = signal.signal(signal.SIGINT, on_signal)
    try:
        artifact = run_batch(chain_config, dataset, provider, question, store=store, stop=stop, clock=_created_at)
    finally:
        if previous is not None:
            signal.signal(signal.SIGINT, previous)
        provider.close()
    artifact.config["model_label"] = label

    out = Path(args.out) if args.out else Path("traces") / f"{args.template}_{_slug(label)}_{question.id}.jsonl"
    write_trace(artifact, out)

    counts = artifact.counts()
    upstream = cached.upstream_calls if cached else provider.calls
    hits = cached.hits if cached else 0
    print(
        f"{args.template} {label} {question.id}: scored={counts['runs']} abstained={counts['abstained']} "
        f"unparseable={counts['unparseable']} failed={counts['failures']} skipped={counts['skipped']} "
        f"cached={hits}; {upstream} upstream calls; trace {out}"
    )
    for failure in artifact.failures:
        print(f"  failed {failure.clause_id}: {failure.error}", file=sys.stderr)
    if stop.is_set():
        return EXIT_INTERRUPTED
    if artifact.failures and not artifact.runs:
        return EXIT_PROVIDER
    return EXIT_OK


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9.-]+", "-", text).strip("-") or "model"


def _report_for(trace_path, dataset, bank, mode, micro=False):
    artifact: RunArtifact = read_trace(trace_path)
    question = get_question(bank, artifact.question_id)
    if not dataset.annotations_for(question.id):
        raise ValidationError(f"{trace_path}: trace is for {question.id} but the dataset has no {question.id} annotations")
    try:
        report = build_report(artifact, dataset, question, constraint_mode=mode, micro=micro)
    except MetricsError as exc:
        raise ValidationError(f"{trace_path}: {exc}") from exc
    return artifact, report


def cmd_eval(args, config: AppConfig) -> int:
    bank = _bank(args, config)
    dataset = load_dataset(args.dataset, bank)
    artifact, report = _report_for(args.trace, dataset, bank, args.constraint_mode, micro=args.micro)
    label = artifact.config.get("model_label")
    text = report_text(report)
    sys.stdout.write(text)
    formats = args.formats.split(",") if args.formats else config.report_formats
    bad = sorted(set(formats) - set(REPORT_FORMATS))
    if bad:
        raise ConfigError(f"unknown report format(s) {bad}")
    if args.out_dir:
        out_dir = Path(args.out_dir)
        stem = Path(args.trace).stem
        if "text" in formats:
            _write(out_dir / f"{stem}.report.txt", text)
        if "csv" in formats:
            _write(out_dir / f"{stem}.report.csv", cells_csv(report_cells(report, label)))
        if "json" in formats:
            _write(out_dir / f"{stem}.report.json", report_json(report))
    return EXIT_OK


def cmd_report(args, config: AppConfig) -> int:
    grid = CellGrid()
    try:
        if args.traces:
            if not args.dataset:
                raise ConfigError("scoring traces needs --dataset")
            bank = _bank(args, config)
            dataset = load_dataset(args.dataset, bank)
            seen: dict[tuple, str] = {}
            for path in args.traces:
                artifact, report = _report_for(path, dataset, bank, args.constraint_mode)
                label = artifact.config.get("model_label") or report.model
                cell = (report.prompt, label, report.question_id)
                if cell in seen:
                    raise ValidationError(f"traces {seen[cell]} and {path} both fill cell {'/'.join(cell)}")
                seen[cell] = str(path)
                grid.extend(report_cells(report, label))
        for path in args.cells or ():
            grid.extend(read_cells_csv(path))
    except MetricsError as exc:
        raise ValidationError(str(exc)) from exc
    if not len(grid):
        raise ConfigError("nothing to report: give trace files and/or --cells")

    parts = []
    if args.table in ("accuracy", "both"):
        parts.append(render_rows(accuracy_grid(grid)))
    if args.table in ("options", "both"):
        questions = [args.option_question] if args.option_question else grid.questions(where=lambda c: c.option != "")
        for q in questions:
            parts.append(f"{q}\n" + render_rows(option_grid(grid, q)))
    text = "\n".join(parts)
    if args.out:
        _write(Path(args.out), text)
    else:
        sys.stdout.write(text)
    if args.csv:
        _write(Path(args.csv), cells_csv(grid))
    return EXIT_OK


def cmd_cache(args, config: AppConfig) -> int:
    cache = ResponseCache(args.cache or config.cache_path)
    if args.action == "purge":
        age = _parse_age(args.older_than) if args.older_than else None
        removed = cache.purge(age)
        print(f"purged {removed} entries")
    stats = cache.stats()
    print(f"{stats['entries']} entries, {stats['bytes']} bytes ({stats['path']})")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clausechain", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("questions", help="list the question bank")
    p.add_argument("--bank", help="question bank YAML (default: bundled bank)")
    p.set_defaults(func=cmd_questions)

    p = sub.add_parser("run", help="run a prompt chain over a dataset and write a trace")
    p.add_argument("--dataset", required=True)
    p.add_argument("--question", required=True)
    p.add_argument("--template", required=True, help="P1, P1-EXPLAIN, P2, P3, P4, P4-PER-PARTY or P5")
    p.add_argument("--model", required=True, help="model label from the config, or a raw model name")
    p.add_argument("--stage2-model", help="different model for stage 2 (not the reference protocol)")
    p.add_argument("--provider", choices=("openai", "mock"), default="openai")
    p.add_argument("--script", help="JSON script for --provider mock")
    p.add_argument("--replay", action="store_true", help="answer from the cache only; misses fail")
    p.add_argument("--cache", help="cache file (default from config)")
    p.add_argument("--no-cache", action="store_true")
    p.add_argument("--base-url")
    p.add_argument("--out", help="trace path (default traces/<template>_<model>_<question>.jsonl)")
    p.add_argument("--constraint-mode", choices=[m.value for m in ConstraintMode])
    p.add_argument("--parallelism", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-output-tokens", type=int)
    p.add_argument("--bank")
    p.add_argument("--templates-dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a trace against gold annotations")
    p.add_argument("--trace", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out-dir", help="write report files here")
    p.add_argument("--formats", help="comma list of text,csv,json (default from config)")
    p.add_argument("--constraint-mode", choices=[m.value for m in ConstraintMode], default="observe",
                   help="re-parse stored outputs under this mode (default observe)")
    p.add_argument("--micro", action="store_true", help="also report micro-averaged precision/recall")
    p.add_argument("--bank")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="combine traces and/or metric cells into grids")
    p.add_argument("traces", nargs="*")
    p.add_argument("--dataset")
    p.add_argument("--cells", action="append", help="metric cells CSV (repeatable)")
    p.add_argument("--table", choices=("accuracy", "options", "both"), default="accuracy")
    p.add_argument("--option-question", help="question for the per-option grid (default: every question)")
    p.add_argument("--constraint-mode", choices=[m.value for m in ConstraintMode], default="observe")
    p.add_argument("--out", help="write the grid text here instead of stdout")
    p.add_argument("--csv", help="also write all cells as CSV")
    p.add_argument("--bank")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("cache", help="inspect or purge the response cache")
    p.add_argument("action", choices=("stats", "purge"))
    p.add_argument("--cache")
    p.add_argument("--older-than", help="with purge: only entries at least this old (e.g. 0s, 10m, 7d)")
    p.set_defaults(func=cmd_cache)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, FileAccessError):
        return EXIT_IO
    if isinstance(exc, ProviderError):
        return EXIT_PROVIDER
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (ValidationError, MetricsError)):
        return EXIT_VALIDATION
    return EXIT_CONFIG


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = AppConfig.load(args.config)
        return args.func(args, config)
    except ClauseChainError as exc:
        print(f"clausechain: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
