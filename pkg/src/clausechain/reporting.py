"""Report output: flat metric cells, CSV/JSON files, and text grids.

Every report is first flattened to cells keyed by (prompt, model, question,
metric, option). The two grid layouts are built from cells alone, so a
CSV of published numbers renders exactly like freshly computed scores.

* accuracy grid: one block of rows per prompt (exact match, precision,
  recall), one column per (model, question);
* per-option grid: one block of rows per model (one row per option), a
  precision/recall column pair per prompt.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Sequence

from .errors import FileAccessError, MetricsError, ParseError
from .metrics import EvalReport

CSV_COLUMNS = ("prompt", "model", "question", "metric", "option", "value")

SUMMARY_METRICS = (("exact_match", "Exact Match"), ("precision", "Precision"), ("recall", "Recall"))


@dataclass(frozen=True)
class Cell:
    prompt: str
    model: str
    question: str
    metric: str
    option: str
    value: float | None

    @property
    def key(self) -> tuple[str, str, str, str, str]:
        return (self.prompt, self.model, self.question, self.metric, self.option)


def report_cells(report: EvalReport, model_label: str | None = None) -> list[Cell]:
    model = model_label or report.model

    def cell(metric, option, value):
        return Cell(report.prompt, model, report.question_id, metric, option, None if value is None else float(value))

    cells = [
        cell("exact_match", "", report.exact_match),
        cell("precision", "", report.macro_precision.value if report.macro_precision else None),
        cell("recall", "", report.macro_recall.value if report.macro_recall else None),
    ]
    for row in report.per_option:
        cells.append(cell("precision", row.letter, row.precision))
        cells.append(cell("recall", row.letter, row.recall))
        cells.append(cell("support", row.letter, row.support))
    return cells


class CellGrid:
    """Cells indexed by key; adding the same key twice is an error."""

    def __init__(self, cells: Iterable[Cell] = ()):
        self._cells: dict[tuple, Cell] = {}
        for c in cells:
            self.add(c)

    def add(self, cell: Cell) -> None:
        if cell.key in self._cells:
            p, m, q, metric, opt = cell.key
            where = f"{p}/{m}/{q}" + (f" option {opt}" if opt else "")
            raise MetricsError(f"duplicate cell for {where} ({metric})")
        self._cells[cell.key] = cell

    def extend(self, cells: Iterable[Cell]) -> None:
        for c in cells:
            self.add(c)

    def __iter__(self):
        return iter(self._cells.values())

    def __len__(self):
        return len(self._cells)

    def get(self, prompt, model, question, metric, option="") -> float | None:
        c = self._cells.get((prompt, model, question, metric, option))
        return None if c is None else c.value

    def _ordered(self, attr: str, where=lambda c: True) -> list[str]:
        seen: dict[str, None] = {}
        for c in self._cells.values():
            if where(c):
                seen.setdefault(getattr(c, attr))
        return list(seen)

    def prompts(self, **kw):
        return self._ordered("prompt", **kw)

    def models(self, **kw):
        return self._ordered("model", **kw)

    def questions(self, **kw):
        return self._ordered("question", **kw)


def fmt(value: float | None) -> str:
    return "" if value is None else f"{value:.2f}"


def accuracy_grid(grid: CellGrid) -> list[list[str]]:
    """Rows for the exact-match / precision / recall grid (header rows first)."""
    summary = lambda c: c.option == ""  # noqa: E731
    models = grid.models(where=summary)
    questions = grid.questions(where=summary)
    prompts = grid.prompts(where=summary)
    top = ["Prompt", "Metric"]
    sub = ["", ""]
    for m in models:
        top += [m] + [""] * (len(questions) - 1)
        sub += questions
    rows = [top, sub]
    for p in prompts:
        for i, (metric, label) in enumerate(SUMMARY_METRICS):
            row = [p if i == 0 else "", label]
            for m in models:
                row += [fmt(grid.get(p, m, q, metric)) for q in questions]
            rows.append(row)
    return rows


def option_grid(grid: CellGrid, question: str) -> list[list[str]]:
    """Rows for the per-option precision/recall grid of one question."""
    per_option = lambda c: c.option != "" and c.question == question  # noqa: E731
    models = grid.models(where=per_option)
    prompts = grid.prompts(where=per_option)
    options = sorted({c.option for c in grid if per_option(c)})
    top = ["Model", "Option"]
    sub = ["", ""]
    for p in prompts:
        top += [p, ""]
        sub += ["P", "R"]
    rows = [top, sub]
    for m in models:
        for i, opt in enumerate(options):
            row = [m if i == 0 else "", opt.upper()]
            for p in prompts:
                row += [fmt(grid.get(p, m, question, "precision", opt)), fmt(grid.get(p, m, question, "recall", opt))]
            rows.append(row)
    return rows


def render_rows(rows: Sequence[Sequence[str]]) -> str:
    if not rows:
        return ""
    width = max(len(r) for r in rows)
    rows = [list(r) + [""] * (width - len(r)) for r in rows]
    widths = [max(len(r[i]) for r in rows) for i in range(width)]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(r)).rstrip() for r in rows]
    return "\n".join(lines) + "\n"


def report_text(report: EvalReport) -> str:
    """Plain-text summary of one report."""
    out = io.StringIO()
    out.write(f"prompt={report.prompt} model={report.model} question={report.question_id} "
              f"constraint_mode={report.constraint_mode}\n")
    out.write(f"exact match: {fmt(float(report.exact_match))} ({report.exact_match_ratio})\n")
    for name, m in (("precision", report.macro_precision), ("recall", report.macro_recall)):
        if m is None:
            out.write(f"macro {name}: undefined\n")
        else:
            out.write(f"macro {name}: {fmt(float(m.value))} ({m.excluded} undefined option(s) excluded)\n")
    if report.micro_precision is not None or report.micro_recall is not None:
        out.write(f"micro precision: {fmt(_f(report.micro_precision))}  micro recall: {fmt(_f(report.micro_recall))}\n")
    rows = [["Option", "P", "R", "Support"]]
    rows += [[s.letter, fmt(_f(s.precision)), fmt(_f(s.recall)), str(s.support)] for s in report.per_option]
    out.write(render_rows(rows))
    out.write(" ".join(f"{k}={v}" for k, v in report.counts.items()) + "\n")
    return out.getvalue()


def _f(x) -> float | None:
    return None if x is None else float(x)


# -- files -----------------------------------------------------------------


def write_cells_csv(cells: Iterable[Cell], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for c in cells:
        writer.writerow([c.prompt, c.model, c.question, c.metric, c.option, "" if c.value is None else repr(c.value)])


def cells_csv(cells: Iterable[Cell]) -> str:
    buf = io.StringIO()
    write_cells_csv(cells, buf)
    return buf.getvalue()


def read_cells_csv(path: str | Path) -> list[Cell]:
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except OSError as exc:
        raise FileAccessError(f"{path}: cannot read cells: {exc.strerror or exc}") from exc
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ParseError(f"{path}: expected columns {','.join(CSV_COLUMNS)}")
    cells = []
    for lineno, row in enumerate(reader, 2):
        try:
            value = float(row["value"]) if row["value"] != "" else None
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: value {row['value']!r} is not a number") from exc
        cells.append(Cell(row["prompt"], row["model"], row["question"], row["metric"], row["option"], value))
    return cells


def report_json(report: EvalReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
