"""Minimal static SVG figures: a heatmap and a line plot.

Output depends only on the input numbers (fixed formatting, no timestamps),
so identical data gives identical bytes.
"""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f")


def _f(x: float) -> str:
    return f"{x:.2f}"


def _ramp(v: float) -> str:
    # white -> dark blue
    v = min(1.0, max(0.0, v))
    r = int(round(255 - 225 * v))
    g = int(round(255 - 180 * v))
    b = int(round(255 - 75 * v))
    return f"#{r:02x}{g:02x}{b:02x}"


def _doc(width: int, height: int, body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">')
    return "\n".join([head, f"<title>{escape(title)}</title>",
                      f'<rect width="{width}" height="{height}" fill="white"/>',
                      f'<text x="{width / 2:.1f}" y="16" text-anchor="middle" font-size="13">'
                      f"{escape(title)}</text>", *body, "</svg>", ""])


def heatmap(values: np.ndarray, title: str, xlabel: str, ylabel: str,
            vmin: float | None = None, vmax: float | None = None) -> str:
    values = np.asarray(values, dtype=np.float64)
    rows, cols = values.shape
    cell = max(4, min(24, 640 // max(cols, 1)))
    left, top = 60, 30
    width, height = left + cols * cell + 20, top + rows * cell + 40
    lo = float(np.min(values)) if vmin is None else vmin
    hi = float(np.max(values)) if vmax is None else vmax
    span = hi - lo if hi > lo else 1.0
    body = []
    for r in range(rows):
        for c in range(cols):
            body.append(f'<rect x="{left + c * cell}" y="{top + r * cell}" width="{cell}" '
                        f'height="{cell}" fill="{_ramp((values[r, c] - lo) / span)}"/>')
        body.append(f'<text x="{left - 4}" y="{top + r * cell + cell * 0.7:.1f}" '
                    f'text-anchor="end">{r}</text>')
    body.append(f'<text x="{left + cols * cell / 2:.1f}" y="{height - 8}" '
                f'text-anchor="middle">{escape(xlabel)}</text>')
    body.append(f'<text x="14" y="{top + rows * cell / 2:.1f}" text-anchor="middle" '
                f'transform="rotate(-90 14 {top + rows * cell / 2:.1f})">{escape(ylabel)}</text>')
    return _doc(width, height, body, title)


def lineplot(series: dict[str, np.ndarray], title: str, xlabel: str, ylabel: str) -> str:
    width, height, left, right, top, bottom = 640, 400, 60, 140, 30, 40
    pw, ph = width - left - right, height - top - bottom
    allv = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    lo, hi = float(allv.min()), float(allv.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    npts = max(len(v) for v in series.values())

    def xy(i, v):
        x = left + (pw * i / (npts - 1) if npts > 1 else pw / 2)
        y = top + ph * (1 - (v - lo) / (hi - lo))
        return f"{_f(x)},{_f(y)}"

    body = [f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>',
            f'<text x="{left - 4}" y="{top + 4}" text-anchor="end">{hi:.3g}</text>',
            f'<text x="{left - 4}" y="{top + ph}" text-anchor="end">{lo:.3g}</text>']
    for j, (name, vals) in enumerate(series.items()):
        color = PALETTE[j % len(PALETTE)]
        pts = " ".join(xy(i, v) for i, v in enumerate(np.asarray(vals, dtype=np.float64)))
        body.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 14 * (j + 1)
        body.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" '
                    f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        body.append(f'<text x="{left + pw + 34}" y="{ly}">{escape(name)}</text>')
    body.append(f'<text x="{left + pw / 2:.1f}" y="{height - 8}" text-anchor="middle">'
                f"{escape(xlabel)}</text>")
    body.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" '
                f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    return _doc(width, height, body, title)
