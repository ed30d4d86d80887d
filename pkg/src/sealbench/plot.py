"""Static SVG line chart of per-case scores, written without a plotting backend."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

from .exceptions import DataMismatchError
from .seal import difficulty_order

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b", "#e377c2", "#17becf", "#bcbd22")
LINE_STYLES = {"acceptance": ("#555555", "6,4"), "excellence": ("#000000", "2,3")}


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def report_svg(line, reports, title=None, width=900, height=420):
    """SVG text with one polyline per model plus the two reference lines.

    Cases run left to right from hardest to easiest (ascending acceptance
    score); dashed verticals separate the five difficulty groups.
    """
    order, groups = difficulty_order(line)
    series = []
    for r in reports:
        if list(r.case_ids) != list(line.case_ids):
            raise DataMismatchError(f"report {r.model_id!r} does not cover the line's cases")
        series.append((r.model_id, [r.qd[i] for i in order]))
    acc = [line.acceptance[i] for i in order]
    exc = [line.excellence[i] for i in order]

    values = acc + exc + [v for _, s in series for v in s]
    lo, hi = min(values), max(values)
    pad = (hi - lo) * 0.05 or 1.0
    lo, hi = lo - pad, hi + pad

    left, right, top, bottom = 60, 170, 30, 40
    pw, ph = width - left - right, height - top - bottom
    k = len(order)

    def x(i):
        return left + (pw * i / (k - 1) if k > 1 else pw / 2)

    def y(v):
        return top + ph * (hi - v) / (hi - lo)

    def pts(vals):
        return " ".join(f"{x(i):.2f},{y(v):.2f}" for i, v in enumerate(vals))

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#999999"/>',
    ]
    if title:
        out.append(f'<text x="{left}" y="{top - 10}" font-size="14" font-family="sans-serif">{escape(title)}</text>')
    for t in _ticks(lo + pad, hi - pad):
        out.append(f'<text x="{left - 6}" y="{y(t) + 4:.2f}" font-size="10" text-anchor="end" '
                   f'font-family="sans-serif">{t:.2f}</text>')
    start = 0
    for g, members in enumerate(groups):
        if start:
            xb = (x(start - 1) + x(start)) / 2
            out.append(f'<line x1="{xb:.2f}" y1="{top}" x2="{xb:.2f}" y2="{top + ph}" stroke="#cccccc" '
                       'stroke-dasharray="3,3"/>')
        xm = (x(start) + x(start + len(members) - 1)) / 2
        out.append(f'<text x="{xm:.2f}" y="{top + ph + 16}" font-size="10" text-anchor="middle" '
                   f'font-family="sans-serif">G{g + 1}</text>')
        start += len(members)
    out.append(f'<text x="{left + pw / 2:.2f}" y="{height - 6}" font-size="11" text-anchor="middle" '
               f'font-family="sans-serif">cases, hardest to easiest ({escape(line.metric)})</text>')

    legend = []
    for name, vals in (("acceptance", acc), ("excellence", exc)):
        color, dash = LINE_STYLES[name]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" stroke-dasharray="{dash}" '
                   f'points="{pts(vals)}"/>')
        legend.append((f"{name} line", color))
    for j, (model_id, vals) in enumerate(series):
        color = PALETTE[j % len(PALETTE)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts(vals)}"/>')
        legend.append((model_id, color))
    for j, (label, color) in enumerate(legend):
        ly = top + 10 + 18 * j
        lx = left + pw + 12
        out.append(f'<rect x="{lx}" y="{ly - 5}" width="14" height="4" fill="{color}"/>')
        out.append(f'<text x="{lx + 20}" y="{ly}" font-size="11" font-family="sans-serif">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report_svg(path, line, reports, title=None):
    Path(path).write_text(report_svg(line, reports, title), encoding="utf-8")
    return path
