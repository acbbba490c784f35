"""Minimal SVG writers for the fTRI heatmap and the t-SNE scatter plot."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .routing import ExpertAddr

CELL = 12
MARGIN = 40
PALETTE = ("#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#7f7f7f")


def _diverging(v: float, vmax: float) -> str:
    # blue (negative) -> white -> red (positive)
    t = 0.0 if vmax == 0 else max(-1.0, min(1.0, v / vmax))
    if t >= 0:
        r, g, b = 255, int(255 * (1 - t)), int(255 * (1 - t))
    else:
        r, g, b = int(255 * (1 + t)), int(255 * (1 + t)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(values: np.ndarray, marked: Sequence[ExpertAddr] = (), title: str = "") -> str:
    """One ``rect`` per (layer, expert) cell; marked experts get a ``circle``."""
    values = np.asarray(values, dtype=float)
    L, E = values.shape
    vmax = float(np.abs(values).max()) if values.size else 0.0
    w, h = 2 * MARGIN + E * CELL, 2 * MARGIN + L * CELL
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">']
    if title:
        out.append(f'<text x="{MARGIN}" y="{MARGIN // 2}" font-size="12">{escape(title)}</text>')
    out.append('<g class="cells">')
    for l in range(L):
        for e in range(E):
            out.append(
                f'<rect x="{MARGIN + e * CELL}" y="{MARGIN + l * CELL}" width="{CELL}" height="{CELL}" '
                f'fill="{_diverging(values[l, e], vmax)}" data-layer="{l}" data-expert="{e}"/>'
            )
    out.append("</g>")
    out.append('<g class="marked">')
    for a in marked:
        cx, cy = MARGIN + a.expert * CELL + CELL / 2, MARGIN + a.layer * CELL + CELL / 2
        out.append(f'<circle cx="{cx}" cy="{cy}" r="{CELL / 2 - 1}" fill="none" stroke="#d00000" stroke-width="2"/>')
    out.append("</g>")
    out.append(f'<text x="{MARGIN}" y="{h - MARGIN // 3}" font-size="10">expert id</text>')
    out.append(f'<text x="4" y="{MARGIN + 10}" font-size="10">layer</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def scatter_svg(coords: np.ndarray, labels: Sequence[str], size: int = 480) -> str:
    """Points coloured by label, with one legend entry per distinct label in first-seen order."""
    coords = np.asarray(coords, dtype=float)
    classes = list(dict.fromkeys(labels))
    color = {c: PALETTE[i % len(PALETTE)] for i, c in enumerate(classes)}
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    inner = size - 2 * MARGIN
    xy = MARGIN + (coords - lo) / span * inner
    legend_h = 16 * len(classes)
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size + 140}" height="{max(size, legend_h + MARGIN)}">']
    out.append('<g class="points">')
    for (x, y), c in zip(xy, labels):
        out.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="3" fill="{color[c]}" data-class="{escape(str(c))}"/>')
    out.append("</g>")
    out.append('<g class="legend">')
    for i, c in enumerate(classes):
        y = MARGIN + 16 * i
        out.append(f'<rect x="{size + 10}" y="{y - 9}" width="10" height="10" fill="{color[c]}"/>')
        out.append(f'<text x="{size + 26}" y="{y}" font-size="11">{escape(str(c))}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
