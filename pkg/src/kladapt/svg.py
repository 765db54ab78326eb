"""Minimal SVG polyline emission.

Output is raw data: one polyline per series, the data bounding box, and axis
labels stored as metadata.  Styling is left to whatever consumes the file.
"""

from __future__ import annotations

from dataclasses import dataclass
from xml.sax.saxutils import escape, quoteattr

import numpy as np

WIDTH = 640
HEIGHT = 480
PAD = 40


@dataclass
class Polyline:
    label: str
    xs: np.ndarray
    ys: np.ndarray


def _bounds(lines, log_y=False):
    xs = np.concatenate([np.asarray(l.xs, float) for l in lines]) if lines else np.zeros(1)
    ys = np.concatenate([_ytrans(l.ys, log_y) for l in lines]) if lines else np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x0, x1 = x0 - 1.0, x1 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0
    return x0, x1, y0, y1


def _ytrans(ys, log_y):
    ys = np.asarray(ys, float)
    if log_y:
        return np.log10(np.maximum(ys, 1e-300))
    return ys


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def render(lines: list, xlabel: str = "", ylabel: str = "", title: str = "", log_y: bool = False,
           max_points: int = 4000) -> str:
    """SVG document text for the given polylines."""
    x0, x1, y0, y1 = _bounds(lines, log_y)
    sx = (WIDTH - 2 * PAD) / (x1 - x0)
    sy = (HEIGHT - 2 * PAD) / (y1 - y0)
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f"<title>{escape(title)}</title>",
        f'<metadata xlabel={quoteattr(xlabel)} ylabel={quoteattr(ylabel)} '
        f'xmin="{x0:.17g}" xmax="{x1:.17g}" ymin="{y0:.17g}" ymax="{y1:.17g}" ylog="{int(log_y)}"/>',
        f'<rect x="{PAD}" y="{PAD}" width="{WIDTH - 2 * PAD}" height="{HEIGHT - 2 * PAD}" fill="none" stroke="black"/>',
    ]
    for line in lines:
        xs = np.asarray(line.xs, float)
        ys = _ytrans(line.ys, log_y)
        step = max(1, int(np.ceil(len(xs) / max_points)))
        idx = np.arange(0, len(xs), step)
        if len(xs) and idx[-1] != len(xs) - 1:
            idx = np.append(idx, len(xs) - 1)
        px = PAD + (xs[idx] - x0) * sx
        py = HEIGHT - PAD - (ys[idx] - y0) * sy
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(px, py))
        out.append(f'<polyline data-label={quoteattr(line.label)} fill="none" stroke="black" points="{pts}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write(path, lines, **kw) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render(lines, **kw))
