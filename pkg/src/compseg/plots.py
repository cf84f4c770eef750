"""Minimal deterministic SVG figures (no plotting library, no timestamps)."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np


def _svg(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


def _f(v: float) -> str:
    return f"{v:.2f}"


def box_strip_svg(groups: dict[str, list[float]], title: str = "", ylabel: str = "macro F1",
                  width: int = 480, height: int = 320) -> str:
    """Box plot with overlaid points per group; points get a fixed horizontal offset pattern."""
    left, right, top, bottom = 60, 20, 30, 40
    values = np.concatenate([np.asarray(v, dtype=float) for v in groups.values()]) if groups else np.zeros(1)
    lo, hi = float(np.nanmin(values)), float(np.nanmax(values))
    pad = max(0.02, 0.1 * (hi - lo))
    lo, hi = lo - pad, hi + pad
    plot_h = height - top - bottom
    plot_w = width - left - right

    def y(v):
        return top + plot_h * (hi - v) / (hi - lo)

    body = [f'<text x="{width / 2}" y="18" text-anchor="middle">{escape(title)}</text>',
            f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>',
            f'<text x="14" y="{top + plot_h / 2}" transform="rotate(-90 14 {top + plot_h / 2})" '
            f'text-anchor="middle">{escape(ylabel)}</text>']
    for t in np.linspace(lo, hi, 5):
        body.append(f'<line x1="{left - 4}" y1="{_f(y(t))}" x2="{left}" y2="{_f(y(t))}" stroke="black"/>')
        body.append(f'<text x="{left - 6}" y="{_f(y(t) + 4)}" text-anchor="end">{t:.3f}</text>')
    n = max(len(groups), 1)
    slot = plot_w / n
    for i, (name, vals) in enumerate(groups.items()):
        v = np.asarray(vals, dtype=float)
        cx = left + slot * (i + 0.5)
        q1, med, q3 = np.percentile(v, [25, 50, 75])
        bw = slot * 0.4
        body.append(f'<line x1="{_f(cx)}" y1="{_f(y(v.min()))}" x2="{_f(cx)}" y2="{_f(y(v.max()))}" stroke="gray"/>')
        body.append(f'<rect x="{_f(cx - bw / 2)}" y="{_f(y(q3))}" width="{_f(bw)}" '
                    f'height="{_f(max(y(q1) - y(q3), 0.5))}" fill="#cfe2f3" stroke="black"/>')
        body.append(f'<line x1="{_f(cx - bw / 2)}" y1="{_f(y(med))}" x2="{_f(cx + bw / 2)}" '
                    f'y2="{_f(y(med))}" stroke="black" stroke-width="2"/>')
        for j, val in enumerate(v):
            dx = (j % 5 - 2) * bw / 8
            body.append(f'<circle cx="{_f(cx + dx)}" cy="{_f(y(val))}" r="3" fill="#c0392b"/>')
        body.append(f'<text x="{_f(cx)}" y="{height - bottom + 18}" text-anchor="middle">{escape(name)}</text>')
    return _svg(width, height, body)


def confusion_svg(matrix, row_labels, col_labels, title: str = "") -> str:
    """Heatmap of a count matrix; rows are ground truth, columns predictions."""
    m = np.asarray(matrix, dtype=float)
    cell = 64
    left, top = 110, 50
    width = left + cell * m.shape[1] + 20
    height = top + cell * m.shape[0] + 40
    peak = m.max() if m.size and m.max() > 0 else 1.0
    body = [f'<text x="{width / 2}" y="18" text-anchor="middle">{escape(title)}</text>',
            f'<text x="{left + cell * m.shape[1] / 2}" y="38" text-anchor="middle">predicted</text>']
    for j, lab in enumerate(col_labels):
        body.append(f'<text x="{left + cell * (j + 0.5)}" y="{top + cell * m.shape[0] + 16}" '
                    f'text-anchor="middle">{escape(str(lab))}</text>')
    for i, lab in enumerate(row_labels):
        body.append(f'<text x="{left - 6}" y="{top + cell * (i + 0.5) + 4}" text-anchor="end">{escape(str(lab))}</text>')
        for j in range(m.shape[1]):
            shade = int(round(255 - 200 * m[i, j] / peak))
            color = f"rgb({shade},{shade},255)"
            ink = "white" if shade < 128 else "black"
            body.append(f'<rect x="{left + cell * j}" y="{top + cell * i}" width="{cell}" height="{cell}" '
                        f'fill="{color}" stroke="black"/>')
            body.append(f'<text x="{left + cell * (j + 0.5)}" y="{top + cell * (i + 0.5) + 4}" '
                        f'text-anchor="middle" fill="{ink}">{int(m[i, j])}</text>')
    return _svg(width, height, body)


def write(path, svg: str) -> None:
    Path(path).write_text(svg)
