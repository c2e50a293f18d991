"""Table-style markdown report, accuracy-vs-AIL scatter data and an SVG plot."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping
from xml.sax.saxutils import escape

from .curriculum import is_curriculum_order
from .errors import EmptyError, FormatError
from .experiment import RESULTS_HEADER, ResultsRow

DISPLAY = {"moco": "MoCo v2", "swav": "SwAV", "relloc": "Rel-Loc", "rotation": "Rotation"}
ABBREV = {"moco": "M", "swav": "S", "relloc": "RL", "rotation": "RP"}
BASELINE = "Scratch"


@dataclass
class ReadResults:
    rows: list[ResultsRow]
    errors: list[str] = field(default_factory=list)


def read_results(path: str | Path) -> ReadResults:
    """Parse ``results.csv``; malformed rows are collected in ``errors``."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise EmptyError(f"{path} is empty")
        if list(reader.fieldnames) != RESULTS_HEADER:
            raise FormatError(f"{path}: unexpected header {reader.fieldnames}")
        out = ReadResults([])
        for lineno, raw in enumerate(reader, start=2):
            try:
                out.rows.append(ResultsRow.from_csv(raw))
            except ValueError as exc:
                out.errors.append(f"{path}:{lineno}: {exc}")
    return out


def read_single_task_table(path: str | Path) -> dict[str, float]:
    """CSV ``task,acc`` with task ids (moco, swav, relloc, rotation)."""
    table = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            table[row["task"].strip()] = float(row["acc"])
    return table


def label(sequence: list[str], names: Mapping[str, str]) -> str:
    return " + ".join(names.get(t, t) for t in sequence) if sequence else BASELINE


def short_label(sequence: list[str]) -> str:
    return "+".join(ABBREV.get(t, t) for t in sequence) if sequence else BASELINE


def _curriculum_mark(sequence: list[str], single: Mapping[str, float]) -> str:
    if len(sequence) <= 1:
        return "-"
    if not all(t in single for t in sequence):
        return "?"
    return "✓" if is_curriculum_order(sequence, single) else ""


def _fmt(value: float, best: float) -> str:
    if not math.isfinite(value):
        return "n/a"
    text = f"{value:.2f}"
    return f"**{text}**" if value == best else text


def render_table(rows: list[ResultsRow], single: Mapping[str, float]) -> str:
    """Markdown tables, one block per pretraining-sequence length; block maxima in bold."""
    blocks: dict[int, list[ResultsRow]] = {}
    for row in rows:
        blocks.setdefault(len(row.pretrain_sequence), []).append(row)
    out = ["# Curricular pretraining results", ""]
    for length in sorted(blocks):
        block = blocks[length]
        title = "Baselines" if length == 0 else f"{length}-task pretraining"
        accs = [r.val_balanced_acc for r in block if math.isfinite(r.val_balanced_acc)]
        ails = [r.mean_ail for r in block if math.isfinite(r.mean_ail)]
        best_acc = max(accs) if accs else math.nan
        best_ail = max(ails) if ails else math.nan
        out += [f"## {title}", "", "| Curriculum | Pretraining | Run | Validation Acc (%) | AIL (%) |",
                "|:-:|:--|:--|--:|--:|"]
        for r in block:
            out.append(
                f"| {_curriculum_mark(r.pretrain_sequence, single)} | {label(r.pretrain_sequence, DISPLAY)} "
                f"| {r.run_id} | {_fmt(r.val_balanced_acc, best_acc)} | {_fmt(r.mean_ail, best_ail)} |"
            )
        out.append("")
    return "\n".join(out)


def scatter_rows(rows: list[ResultsRow]) -> list[tuple[str, float, float]]:
    return [
        (short_label(r.pretrain_sequence), r.val_balanced_acc, r.mean_ail)
        for r in rows
        if math.isfinite(r.val_balanced_acc) and math.isfinite(r.mean_ail)
    ]


def render_svg(points: list[tuple[str, float, float]], width: int = 640, height: int = 480) -> str:
    """Accuracy (y) against AIL (x); green line = best baseline accuracy,
    orange line = highest baseline AIL."""
    margin = 60
    xs = [p[2] for p in points] or [0.0, 100.0]
    ys = [p[1] for p in points] or [0.0, 100.0]
    x_lo, x_hi = min(xs) - 2, max(xs) + 2
    y_lo, y_hi = min(ys) - 1, max(ys) + 1

    def sx(v):
        return margin + (v - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def sy(v):
        return height - margin - (v - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width / 2:.1f}" y="{height - 20}" text-anchor="middle">AIL (%)</text>',
        f'<text x="15" y="{height / 2:.1f}" transform="rotate(-90 15 {height / 2:.1f})" text-anchor="middle">'
        "Validation balanced accuracy (%)</text>",
    ]
    baselines = [p for p in points if p[0] == BASELINE]
    if baselines:
        best_acc = max(p[1] for p in baselines)
        best_ail = max(p[2] for p in baselines)
        parts.append(f'<line x1="{margin}" y1="{sy(best_acc):.2f}" x2="{width - margin}" y2="{sy(best_acc):.2f}" '
                     'stroke="green" stroke-dasharray="4 3"/>')
        parts.append(f'<line x1="{sx(best_ail):.2f}" y1="{margin}" x2="{sx(best_ail):.2f}" y2="{height - margin}" '
                     'stroke="orange" stroke-dasharray="4 3"/>')
    for name, acc, ail_v in points:
        parts.append(f'<circle cx="{sx(ail_v):.2f}" cy="{sy(acc):.2f}" r="4" fill="steelblue"/>')
        parts.append(f'<text x="{sx(ail_v) + 6:.2f}" y="{sy(acc) - 6:.2f}">{escape(name)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(results_csv: str | Path, single_task_table: Mapping[str, float] | str | Path | None,
                out_dir: str | Path, svg: bool = True) -> ReadResults:
    """Write ``report.md``, ``scatter.csv`` and optionally ``scatter.svg``.

    Returns the parsed rows together with messages for skipped malformed rows;
    raises :class:`EmptyError` when no valid row remains.
    """
    parsed = read_results(results_csv)
    if not parsed.rows:
        raise EmptyError(f"{results_csv} has no valid rows")
    if single_task_table is None:
        single: Mapping[str, float] = {}
    elif isinstance(single_task_table, (str, Path)):
        single = read_single_task_table(single_task_table)
    else:
        single = single_task_table
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.md").write_text(render_table(parsed.rows, single), encoding="utf-8")
    points = scatter_rows(parsed.rows)
    with open(out_dir / "scatter.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "acc", "ail"])
        for name, acc, ail_v in points:
            writer.writerow([name, f"{acc:.6f}", f"{ail_v:.6f}"])
    if svg:
        (out_dir / "scatter.svg").write_text(render_svg(points), encoding="utf-8")
    return parsed
