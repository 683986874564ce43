"""Tiny SVG writer: heatmaps as rect grids and line plots as polylines."""
from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np


def _color(v: float) -> str:
    # diverging blue-white-red for v in [-1, 1]
    v = float(np.clip(v, -1.0, 1.0))
    if v >= 0:
        r, g, b = 255, int(255 * (1 - v)), int(255 * (1 - v))
    else:
        r, g, b = int(255 * (1 + v)), int(255 * (1 + v)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap(values: np.ndarray, path, title: str = "", max_cells: int = 128, size: int = 400) -> Path:
    """Signed heatmap of a 2D array, downsampled to at most ``max_cells`` per side."""
    v = np.asarray(values, dtype=float)
    sq = max(1, int(np.ceil(v.shape[0] / max_cells)))
    sp = max(1, int(np.ceil(v.shape[1] / max_cells)))
    v = v[::sq, ::sp]
    scale = np.max(np.abs(v)) or 1.0
    nq, npp = v.shape
    cw, ch = size / nq, size / npp
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 24}">',
             f'<text x="4" y="16" font-size="12">{escape(title)}</text>']
    for j in range(nq):
        for k in range(npp):
            # q to the right, p upward
            parts.append(f'<rect x="{j * cw:.2f}" y="{24 + (npp - 1 - k) * ch:.2f}" width="{cw:.2f}" '
                         f'height="{ch:.2f}" fill="{_color(v[j, k] / scale)}"/>')
    parts.append("</svg>")
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path


def line_plot(x, y, path, title: str = "", xlabel: str = "", ylabel: str = "", size=(480, 320)) -> Path:
    x, y = np.asarray(x, float), np.asarray(y, float)
    w, h = size
    pad = 40
    x0, x1 = float(x.min()), float(x.max())
    y0, y1 = float(y.min()), float(y.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    px = pad + (x - x0) / (x1 - x0) * (w - 2 * pad)
    py = h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad)
    pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px, py))
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<text x="4" y="16" font-size="12">{escape(title)}</text>',
             f'<rect x="{pad}" y="{pad}" width="{w - 2 * pad}" height="{h - 2 * pad}" fill="none" stroke="#888"/>',
             f'<polyline points="{pts}" fill="none" stroke="#c00" stroke-width="1.2"/>',
             f'<text x="{w / 2:.0f}" y="{h - 8}" font-size="11" text-anchor="middle">{escape(xlabel)}</text>',
             f'<text x="4" y="{h / 2:.0f}" font-size="11">{escape(ylabel)}</text>',
             f'<text x="{pad}" y="{h - pad + 14}" font-size="10">{x0:.3g}</text>',
             f'<text x="{w - pad}" y="{h - pad + 14}" font-size="10" text-anchor="end">{x1:.3g}</text>',
             f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" text-anchor="end">{y1:.3g}</text>',
             f'<text x="{pad - 4}" y="{h - pad}" font-size="10" text-anchor="end">{y0:.3g}</text>',
             "</svg>"]
    path = Path(path)
    path.write_text("\n".join(parts) + "\n")
    return path
