"""Minimal SVG line charts with a min/max band across seeds."""
from __future__ import annotations

from html import escape
from pathlib import Path
from typing import Sequence

import numpy as np

from .metrics import aggregate_curve, curves_by_seed

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=20, top=40, bottom=50)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2")


def _ticks(lo: float, hi: float, count: int = 5):
    if hi == lo:
        return [lo]
    return list(np.linspace(lo, hi, count))


def learning_curve_svg(series: Sequence[tuple], metric: str, title: str = "") -> str:
    """``series`` holds ``(label, rows)`` pairs; rows are metrics-CSV dicts."""
    curves = []
    for label, rows in series:
        steps, mean, lo, hi = aggregate_curve(rows, metric)
        if steps.size:
            curves.append((label, steps, mean, lo, hi, len(curves_by_seed(rows, metric))))
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2}" y="22" text-anchor="middle" font-size="14">{escape(title or metric)}</text>']
    if not curves:
        out.append(f'<text x="{WIDTH / 2}" y="{HEIGHT / 2}" text-anchor="middle">no data</text></svg>')
        return "\n".join(out)
    x_lo = min(c[1].min() for c in curves)
    x_hi = max(c[1].max() for c in curves)
    y_lo = min(c[3].min() for c in curves)
    y_hi = max(c[4].max() for c in curves)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    if x_hi == x_lo:
        x_hi = x_lo + 1

    def sx(x):
        return MARGIN["left"] + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return MARGIN["top"] + (1 - (y - y_lo) / (y_hi - y_lo)) * ph

    out.append(f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
               f'fill="none" stroke="#444"/>')
    for t in _ticks(x_lo, x_hi):
        out.append(f'<text x="{sx(t):.1f}" y="{HEIGHT - MARGIN["bottom"] + 18}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y_lo, y_hi):
        out.append(f'<text x="{MARGIN["left"] - 6}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
        out.append(f'<line x1="{MARGIN["left"]}" x2="{WIDTH - MARGIN["right"]}" y1="{sy(t):.1f}" '
                   f'y2="{sy(t):.1f}" stroke="#ddd"/>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2}" y="{HEIGHT - 10}" text-anchor="middle">env steps</text>')
    out.append(f'<text x="16" y="{MARGIN["top"] + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 16 {MARGIN["top"] + ph / 2})">{escape(metric)}</text>')
    for k, (label, steps, mean, lo, hi, n_seeds) in enumerate(curves):
        color = PALETTE[k % len(PALETTE)]
        if n_seeds > 1:   # min/max band across seeds
            upper = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(steps, hi))
            lower = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(steps[::-1], lo[::-1]))
            out.append(f'<polygon class="band" points="{upper} {lower}" fill="{color}" '
                       f'fill-opacity="0.2" stroke="none"/>')
        pts = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(steps, mean))
        out.append(f'<polyline class="mean" points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = MARGIN["top"] + 14 + 16 * k
        out.append(f'<line x1="{MARGIN["left"] + 10}" x2="{MARGIN["left"] + 30}" y1="{ly - 4}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{MARGIN["left"] + 36}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out)


def write_learning_curve(path, series, metric: str, title: str = "") -> Path:
    path = Path(path)
    path.write_text(learning_curve_svg(series, metric, title))
    return path
