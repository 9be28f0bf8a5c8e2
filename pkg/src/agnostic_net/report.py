"""Render result CSVs as aligned text tables and small SVG line charts."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .dann import REPORT_COLUMNS
from .evaluation import METRICS, SWEEP_COLUMNS, SweepResult


def read_csv(path) -> tuple[list[str], list[dict[str, str]]]:
    """Header and rows of a CSV file; lines starting with ``#`` are comments."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(line for line in fh if not line.startswith("#"))
        rows = list(reader)
        return list(reader.fieldnames or []), rows


def _cell(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.4f}"
    return str(v)


def text_table(columns: Sequence[str], rows: Sequence[Sequence]) -> str:
    """Right-aligned columns separated by two spaces, with a dashed rule under the header."""
    cells = [[str(c) for c in columns]] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cells[0], widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells[1:]]
    return "\n".join(lines) + "\n"


def sweep_table(result: SweepResult) -> str:
    """One row per alpha: mean +- population std of every metric."""
    columns = ["alpha", "repeats"] + list(METRICS)
    rows = []
    for s in result.summary():
        rows.append([f"{s['alpha']:.2f}", s["repeats"]] +
                    [f"{s[m + '_mean']:.4f} +- {s[m + '_std']:.4f}" for m in METRICS])
    return "# mean +- std over repeats (population std, ddof=0)\n" + text_table(columns, rows)


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")


def line_chart_svg(series: dict[str, tuple[Sequence[float], Sequence[float]]], title: str = "",
                   xlabel: str = "", ylabel: str = "", y_range: tuple[float, float] | None = (0.0, 1.0),
                   width: int = 480, height: int = 320) -> str:
    """A minimal polyline chart; NaN points break a line."""
    left, right, top, bottom = 56, 130, 30, 44
    xs_all = [x for xs, _ in series.values() for x in xs]
    ys_all = [y for _, ys in series.values() for y in ys if not math.isnan(y)]
    x0, x1 = (min(xs_all), max(xs_all)) if xs_all else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y_range is None:
        y0, y1 = (min(ys_all), max(ys_all)) if ys_all else (0.0, 1.0)
        if y1 == y0:
            y1 = y0 + 1.0
    else:
        y0, y1 = y_range
    pw, ph = width - left - right, height - top - bottom

    def px(x):
        return left + (x - x0) / (x1 - x0) * pw

    def py(y):
        return top + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{left + pw / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
           f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        out.append(f'<text x="{left - 6}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.2f}</text>')
        out.append(f'<line x1="{left}" y1="{py(yv):.1f}" x2="{left + pw}" y2="{py(yv):.1f}" '
                   'stroke="#ddd"/>')
        xv = x0 + (x1 - x0) * i / 4
        out.append(f'<text x="{px(xv):.1f}" y="{top + ph + 16}" text-anchor="middle">{xv:g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for k, (label, (xs, ys)) in enumerate(series.items()):
        color = _PALETTE[k % len(_PALETTE)]
        runs, current = [], []
        for x, y in zip(xs, ys):
            if math.isnan(y):
                if current:
                    runs.append(current)
                current = []
            else:
                current.append(f"{px(x):.1f},{py(y):.1f}")
        if current:
            runs.append(current)
        for pts in runs:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{" ".join(pts)}"/>')
        ly = top + 12 + 16 * k
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly + 4}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _maybe_float(text: str):
    """Numbers with a fractional part are shown rounded; integers and labels verbatim."""
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _floats(rows, col):
    return [float(r[col]) for r in rows]


def render(csv_path, out_dir) -> list[Path]:
    """Write ``<stem>.txt`` (and ``<stem>.svg`` for known CSV kinds) into ``out_dir``.

    Run reports chart accuracy against epoch; sweep results chart the
    per-alpha mean of each accuracy against alpha.  Returns the paths written.
    """
    csv_path, out_dir = Path(csv_path), Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    columns, rows = read_csv(csv_path)
    stem = csv_path.stem
    written = []
    if tuple(columns) == SWEEP_COLUMNS:
        result = SweepResult.from_csv(csv_path)
        table = sweep_table(result)
        summary = result.summary()
        alphas = [s["alpha"] for s in summary]
        series = {m: (alphas, [s[m + "_mean"] for s in summary]) for m in METRICS}
        svg = line_chart_svg(series, "accuracy vs alpha (mean over repeats)", "alpha", "accuracy")
    elif tuple(columns) == REPORT_COLUMNS:
        table = text_table(columns, [[_maybe_float(r[c]) for c in columns] for r in rows])
        epochs = _floats(rows, "epoch")
        series = {c: (epochs, _floats(rows, c)) for c in ("acc_target_test", "acc_context_test")}
        svg = line_chart_svg(series, "accuracy vs epoch", "epoch", "accuracy")
    else:
        table = text_table(columns, [[_maybe_float(r[c]) for c in columns] for r in rows])
        svg = None
    (out_dir / f"{stem}.txt").write_text(table)
    written.append(out_dir / f"{stem}.txt")
    if svg is not None:
        (out_dir / f"{stem}.svg").write_text(svg)
        written.append(out_dir / f"{stem}.svg")
    return written
