"""Experiment reports: named tables and curves, written as CSV and standalone SVG."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import DataError


def fmt(x):
    """Six significant digits, trailing zeros kept (``1.0 -> 1.00000``)."""
    return f"{float(x):#.6g}"


@dataclass
class Table:
    columns: list
    rows: list
    row_labels: list = None
    tags: list = None  # per row: (stage, seed)

    @classmethod
    def of(cls, grid):
        grid = [list(r) for r in grid]
        width = len(grid[0]) if grid else 0
        return cls([f"c{j}" for j in range(width)], grid)


@dataclass
class Curve:
    x: list
    series: dict
    x_label: str = "x"
    y_label: str = "y"
    tag: tuple = None


@dataclass
class Report:
    tables: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def is_empty(self):
        return not self.tables and not self.curves


def table_csv(table):
    if not isinstance(table, Table):
        table = Table.of(table)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = list(table.columns)
    if table.row_labels is not None:
        header = ["row"] + header
    if table.tags is not None:
        header += ["stage", "seed"]
    w.writerow(header)
    for i, row in enumerate(table.rows):
        out = [fmt(v) for v in row]
        if table.row_labels is not None:
            out = [table.row_labels[i]] + out
        if table.tags is not None:
            out += [table.tags[i][0], str(table.tags[i][1])]
        w.writerow(out)
    return buf.getvalue()


def curve_csv(curve):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(curve.series)
    header = [curve.x_label] + names
    if curve.tag is not None:
        header += ["stage", "seed"]
    w.writerow(header)
    for i, x in enumerate(curve.x):
        row = [fmt(x)] + [fmt(curve.series[n][i]) for n in names]
        if curve.tag is not None:
            row += [curve.tag[0], str(curve.tag[1])]
        w.writerow(row)
    return buf.getvalue()


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf")


def curve_svg(name, curve, width=480, height=320):
    """A self-contained line chart: frame, axis ticks, labels, one polyline per series."""
    left, right, top, bottom = 60, 120, 30, 45
    pw, ph = width - left - right, height - top - bottom
    x = np.asarray(curve.x, dtype=np.float64)
    ys = {k: np.asarray(v, dtype=np.float64) for k, v in curve.series.items()}
    finite = np.concatenate([v[np.isfinite(v)] for v in ys.values()] + [np.zeros(0)])
    y0, y1 = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    if y1 - y0 < 1e-12:
        y0, y1 = y0 - 0.5, y1 + 0.5
    x0, x1 = (x.min(), x.max()) if x.size else (0.0, 1.0)
    if x1 - x0 < 1e-12:
        x0, x1 = x0 - 0.5, x1 + 0.5

    def sx(v):
        return left + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return top + (1 - (v - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
           f'<text x="{left}" y="18" font-size="13">{escape(name)}</text>',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in np.linspace(0, 1, 5):
        xv, yv = x0 + t * (x1 - x0), y0 + t * (y1 - y0)
        out.append(f'<text x="{sx(xv):.1f}" y="{top + ph + 15}" text-anchor="middle">{fmt(xv)}</text>')
        out.append(f'<text x="{left - 5}" y="{sy(yv) + 4:.1f}" text-anchor="end">{fmt(yv)}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(curve.x_label)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2})">{escape(curve.y_label)}</text>')
    for i, (label, y) in enumerate(ys.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y) if np.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 12 + 16 * i
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" stroke="{color}"/>')
        out.append(f'<text x="{left + pw + 32}" y="{ly + 4}">{escape(str(label))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(report, out_dir, formats=("csv", "svg")):
    """Write every table and curve; returns the written paths in a stable order."""
    if report.is_empty():
        raise DataError("report has no tables or curves")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(report.tables):
        if "csv" in formats:
            p = out_dir / f"{name}.csv"
            p.write_text(table_csv(report.tables[name]))
            written.append(p)
    for name in sorted(report.curves):
        c = report.curves[name]
        if "csv" in formats:
            p = out_dir / f"{name}.csv"
            p.write_text(curve_csv(c))
            written.append(p)
        if "svg" in formats:
            p = out_dir / f"{name}.svg"
            p.write_text(curve_svg(name, c))
            written.append(p)
    return written
